"""Benchmark matrices and table collation.

The default benchmark mirrors the six teacher-student pairs of the source
setting at desk scale: a pillar-like teacher with input-compressed students
(voxel size x1.25 / x1.5 / x2.0) and a voxel-like teacher with
width-compressed students (S / XS / XXS multiplier patterns).  The
compression study additionally crosses each family with the other knob.
"""

from __future__ import annotations

import json
import os
import traceback
from dataclasses import dataclass

import numpy as np

from ..detector import DetectorConfig
from ..efficiency import cpr
from ..kd import KDRecipe
from . import config as cfgmod
from .runner import run, train_teacher

DEFAULT_SEEDS = (0, 1, 2)
EXTENT = 60.0

TEACHER_TRAIN = cfgmod.TrainSpec(epochs=30, batch_size=4, lr=3e-3, seed=0)
STUDENT_TRAIN = cfgmod.TrainSpec(epochs=10, batch_size=4, lr=3e-3, seed=0)
TRAIN_CORPUS = cfgmod.CorpusSpec(n_scenes=24, base_seed=100, extent=EXTENT)
EVAL_CORPUS = cfgmod.CorpusSpec(n_scenes=12, base_seed=500, extent=EXTENT)

TEACHERS = {
    "pillar": DetectorConfig(family="pillar-like", voxel_size=1.0),
    "voxel": DetectorConfig(family="voxel-like", voxel_size=0.5),
}

# width multiplier patterns (pfe, bfe, head) used for S / XS / XXS students
WIDTH_PATTERNS = {"S": (1.0, 0.5, 0.5), "XS": (0.75, 0.5, 0.5), "XXS": (0.5, 0.25, 0.25)}
INPUT_FACTORS = (1.25, 1.5, 2.0)

RECIPES = {
    "none": KDRecipe(),
    "kd": KDRecipe(logit="vanilla"),
    "gid_l": KDRecipe(logit="gid_l"),
    "fitnet": KDRecipe(feature="fitnet"),
    "mimic": KDRecipe(feature="mimic"),
    "fg": KDRecipe(feature="fg"),
    "gid_f": KDRecipe(feature="gid_f"),
    "label": KDRecipe(label_kd="on"),
    "pp_confidence": KDRecipe(logit="pp_confidence"),
    "pp_rank": KDRecipe(logit="pp_rank"),
    "pp_gaussian": KDRecipe(logit="pp_gaussian"),
    "tgi": KDRecipe(tgi="fna"),
    "pp+tgi": KDRecipe(logit="pp_gaussian", tgi="fna"),
    "fg+label": KDRecipe(feature="fg", label_kd="on"),
    "pp+label": KDRecipe(logit="pp_gaussian", label_kd="on"),
    "ours": KDRecipe(logit="pp_gaussian", label_kd="on", tgi="fna"),
}


def student_config(family_key, kind, value):
    """Build a compressed student config for one family.

    ``kind`` is "input" (value = voxel multiplier) or "width" (value = the
    S/XS/XXS pattern name).
    """
    teacher = TEACHERS[family_key]
    if kind == "input":
        return teacher.scaled(voxel_size=teacher.voxel_size * value)
    pfe, bfe, head = WIDTH_PATTERNS[value]
    return teacher.scaled(width_pfe=pfe, width_bfe=bfe, width_head=head)


def student_name(family_key, kind, value):
    if kind == "input":
        return f"{family_key}-v{TEACHERS[family_key].voxel_size * value:g}"
    return f"{family_key}-{value}"


def default_pairs():
    """The six benchmark teacher-student pairs (family, kind, value)."""
    pairs = [("pillar", "input", f) for f in INPUT_FACTORS]
    pairs += [("voxel", "width", p) for p in ("S", "XS", "XXS")]
    return pairs


def compression_students():
    """Both compression knobs for both families (12 students)."""
    out = []
    for family in ("pillar", "voxel"):
        out += [(family, "input", f) for f in INPUT_FACTORS]
        out += [(family, "width", p) for p in ("S", "XS", "XXS")]
    return out


@dataclass
class Cell:
    table: str
    name: str
    config: cfgmod.ExperimentConfig


def _cell(table, family, kind, value, recipe_name, seed, train=STUDENT_TRAIN):
    sname = student_name(family, kind, value)
    config = cfgmod.ExperimentConfig(
        name=f"{table}/{sname}/{recipe_name}/seed{seed}",
        student=student_config(family, kind, value),
        train_corpus=TRAIN_CORPUS,
        eval_corpus=EVAL_CORPUS,
        teacher=TEACHERS[family],
        teacher_checkpoint=f"teachers/{family}.json",
        recipe=RECIPES[recipe_name],
        train=cfgmod.TrainSpec(**{**vars(train), "seed": seed}),
    )
    return Cell(table=table, name=config.name, config=config)


def compression_matrix(seeds=DEFAULT_SEEDS):
    return [
        _cell("compression", fam, kind, val, "none", seed)
        for fam, kind, val in compression_students()
        for seed in seeds
    ]


def kd_core_matrix(seeds=DEFAULT_SEEDS, recipes=("none", "mimic", "fg", "ours")):
    return [
        _cell("kd", fam, kind, val, rec, seed)
        for fam, kind, val in default_pairs()
        for rec in recipes
        for seed in seeds
    ]


def kd_full_matrix(seeds=DEFAULT_SEEDS):
    return kd_core_matrix(
        seeds, recipes=("none", "kd", "gid_l", "fitnet", "mimic", "fg", "gid_f", "label", "ours")
    )


def synergy_matrix(seeds=DEFAULT_SEEDS):
    recipes = ("none", "pp_gaussian", "tgi", "label", "fg", "pp+tgi", "fg+label", "pp+label", "ours")
    return [_cell("synergy", "voxel", "width", "XXS", rec, seed) for rec in recipes for seed in seeds]


def remap_matrix(seeds=DEFAULT_SEEDS):
    cells = []
    for pattern in ("XS", "XXS"):
        for rec in ("none", "tgi"):
            for strategy in (("fna", "ofa", "slim") if rec == "tgi" else ("-",)):
                for seed in seeds:
                    cell = _cell("remap", "voxel", "width", pattern, "none" if rec == "none" else "tgi", seed)
                    if rec == "tgi":
                        cell.config = cfgmod.from_dict(
                            {**cfgmod.to_dict(cell.config),
                             "recipe": {**cfgmod.to_dict(cell.config)["recipe"], "tgi": strategy},
                             "name": f"remap/voxel-{pattern}/tgi-{strategy}/seed{seed}"}
                        )
                        cell.name = cell.config.name
                    cells.append(cell)
    return cells


def pp_variant_matrix(seeds=DEFAULT_SEEDS):
    recipes = ("none", "gid_l", "pp_confidence", "pp_rank", "pp_gaussian")
    return [_cell("pp_variants", "voxel", "width", "S", rec, seed) for rec in recipes for seed in seeds]


def label_variant_matrix(seeds=DEFAULT_SEEDS):
    cells = []
    for variant in ("none", "b", "c", "d", "e"):
        for seed in seeds:
            cell = _cell("label_variants", "pillar", "input", 1.5, "none" if variant == "none" else "label", seed)
            if variant != "none":
                doc = cfgmod.to_dict(cell.config)
                doc["recipe"]["label_variant"] = variant
                doc["name"] = f"label_variants/pillar-v1.5/label-{variant}/seed{seed}"
                cell.config = cfgmod.from_dict(doc)
                cell.name = doc["name"]
            cells.append(cell)
    return cells


MATRICES = {
    "compression": compression_matrix,
    "kd": kd_core_matrix,
    "kd-full": kd_full_matrix,
    "synergy": synergy_matrix,
    "remap": remap_matrix,
    "pp-variants": pp_variant_matrix,
    "label-variants": label_variant_matrix,
}


def ensure_teachers(root_dir, families=("pillar", "voxel"), train=TEACHER_TRAIN):
    """Train (or reuse) the frozen family teachers under root/teachers/."""
    os.makedirs(os.path.join(root_dir, "teachers"), exist_ok=True)
    metas = {}
    for family in families:
        ckpt = os.path.join(root_dir, "teachers", f"{family}.json")
        meta_path = ckpt[: -len(".json")] + ".meta.json"
        if not (os.path.exists(ckpt) and os.path.exists(meta_path)):
            train_teacher(TEACHERS[family], TRAIN_CORPUS, EVAL_CORPUS, train, cfgmod.EvalSpec(), ckpt)
        with open(meta_path) as fh:
            metas[family] = json.load(fh)
    return metas


def run_suite(cells, root_dir, progress=None, teacher_cache=None):
    """Run all cells (resuming completed ones); never stops on cell failure."""
    teacher_cache = teacher_cache if teacher_cache is not None else {}
    families = sorted({c.config.teacher.family.split("-")[0] for c in cells if c.config.teacher})
    ensure_teachers(root_dir, families=families or ("pillar", "voxel"))
    results = []
    failures = []
    for i, cell in enumerate(cells):
        try:
            result = run(cell.config, root_dir, teacher_cache=teacher_cache)
            results.append((cell, result))
        except Exception as exc:  # cell failures are data, not crashes
            failures.append({"cell": cell.name, "error": f"{type(exc).__name__}: {exc}",
                             "traceback": traceback.format_exc()})
        if progress:
            progress(i + 1, len(cells), cell.name)
    return results, failures


def _recipe_label(cfg_doc):
    name = cfg_doc["name"]
    return name.split("/")[-2] if name.count("/") >= 2 else "none"


def collate(results, out_dir):
    """Write per-run rows plus mean/std summaries, one CSV pair per table."""
    os.makedirs(out_dir, exist_ok=True)
    by_table = {}
    for cell, result in results:
        by_table.setdefault(cell.table, []).append((cell, result))

    tables = {}
    for table, rows in sorted(by_table.items()):
        raw_path = os.path.join(out_dir, f"{table}_runs.csv")
        with open(raw_path, "w") as fh:
            fh.write("table,student,recipe,seed,map_mean,map_large,map_small,params,flops,acts,cpr,config_hash\n")
            for cell, r in rows:
                student = cell.name.split("/")[1]
                recipe = _recipe_label(r["config"])
                per_class = r["toy_map"]["per_class"]
                cpr_val = r["cpr"]["cpr"] if r.get("cpr") else ""
                fh.write(
                    f"{table},{student},{recipe},{r['seed']},{r['toy_map']['mean']!r},"
                    f"{per_class.get(0, per_class.get('0'))!r},{per_class.get(1, per_class.get('1'))!r},"
                    f"{r['efficiency']['params']},{r['efficiency']['flops']},{r['efficiency']['acts']},"
                    f"{cpr_val!r},{r['config_hash']}\n"
                )

        grouped = {}
        for cell, r in rows:
            key = (cell.name.split("/")[1], _recipe_label(r["config"]))
            grouped.setdefault(key, []).append(r)
        summary_path = os.path.join(out_dir, f"{table}_summary.csv")
        with open(summary_path, "w") as fh:
            fh.write("table,student,recipe,seeds,map_mean,map_std,acts,cpr_mean,cpr_std\n")
            table_rows = []
            for (student, recipe), rs in sorted(grouped.items()):
                maps = [r["toy_map"]["mean"] for r in rs]
                cprs = [r["cpr"]["cpr"] for r in rs if r.get("cpr")]
                row = {
                    "student": student,
                    "recipe": recipe,
                    "seeds": len(rs),
                    "map_mean": float(np.mean(maps)),
                    "map_std": float(np.std(maps)),
                    "acts": rs[0]["efficiency"]["acts"],
                    "cpr_mean": float(np.mean(cprs)) if cprs else None,
                    "cpr_std": float(np.std(cprs)) if cprs else None,
                }
                table_rows.append(row)
                fh.write(
                    f"{table},{student},{recipe},{len(rs)},{row['map_mean']!r},{row['map_std']!r},"
                    f"{row['acts']},{row['cpr_mean']!r},{row['cpr_std']!r}\n"
                )
            tables[table] = table_rows
    _write_summary_md(tables, out_dir)
    return tables


def _write_summary_md(tables, out_dir):
    lines = ["# Benchmark summary", ""]
    for table, rows in sorted(tables.items()):
        lines.append(f"## {table}")
        lines.append("")
        lines.append("| student | recipe | toy-mAP (mean ± std) | acts | CPR |")
        lines.append("|---|---|---|---|---|")
        for row in rows:
            cpr_s = f"{row['cpr_mean']:.3f}" if row["cpr_mean"] is not None else "-"
            lines.append(
                f"| {row['student']} | {row['recipe']} | {row['map_mean']:.3f} ± {row['map_std']:.3f} "
                f"| {row['acts']} | {cpr_s} |"
            )
        lines.append("")
    with open(os.path.join(out_dir, "summary.md"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def recheck_cpr(results):
    """Recompute every stored CPR from the raw acts/mAP columns; max abs error."""
    worst = 0.0
    for _cell, r in results:
        ref = r.get("teacher_ref")
        if not r.get("cpr") or not ref or not ref["map_mean"]:
            continue
        again = cpr(r["efficiency"]["acts"], ref["acts"], r["toy_map"]["mean"], ref["map_mean"])
        worst = max(worst, abs(again - r["cpr"]["cpr"]))
    return worst
