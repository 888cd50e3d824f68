"""Distillation recipe: which techniques run and with what weights."""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..tensor import ConfigurationError

LOGIT_VARIANTS = ("none", "vanilla", "gid_l", "pp_confidence", "pp_rank", "pp_gaussian")
FEATURE_VARIANTS = ("none", "fitnet", "mimic", "fg", "gid_f")
LABEL_VARIANTS = ("b", "c", "d", "e")
TGI_STRATEGIES = ("none", "fna", "ofa", "slim")

# rank-PP budget of the reference response map, rescaled to toy grids
RANK_K_REFERENCE = 500
RANK_K_REFERENCE_SIDE = 468


@dataclass(frozen=True)
class KDRecipe:
    logit: str = "none"
    feature: str = "none"
    label_kd: str = "off"  # "off" | "on"
    label_variant: str = "e"
    tgi: str = "none"
    teacher_checkpoint: str | None = None
    lam: float = 2.0
    alpha1: float = 15.0
    alpha2: float = 0.2
    alpha3: float | None = None  # None: 100 input-compressed / 200 width-compressed
    relation_weight: float = 0.1
    tau: float = 0.6
    tau_pp: float = 0.3
    k_rank: int | None = None  # None: round(500 * (G_t / 468)^2)

    def validate(self):
        if self.logit not in LOGIT_VARIANTS:
            raise ConfigurationError(f"unknown logit KD variant {self.logit!r}")
        if self.feature not in FEATURE_VARIANTS:
            raise ConfigurationError(f"unknown feature KD variant {self.feature!r}")
        if self.label_kd not in ("off", "on"):
            raise ConfigurationError(f"label_kd must be off/on, got {self.label_kd!r}")
        if self.label_variant not in LABEL_VARIANTS:
            raise ConfigurationError(f"unknown label KD variant {self.label_variant!r}")
        if self.tgi not in TGI_STRATEGIES:
            raise ConfigurationError(f"unknown TGI strategy {self.tgi!r}")
        if self.label_kd == "on" and not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"label KD threshold tau must be in (0, 1), got {self.tau}")
        return self

    @property
    def any_active(self):
        return self.logit != "none" or self.feature != "none" or self.label_kd == "on" or self.tgi != "none"

    @property
    def needs_teacher(self):
        return self.any_active

    def with_(self, **kwargs):
        return replace(self, **kwargs)


@dataclass(frozen=True)
class ResolvedRecipe:
    """Recipe with pair-dependent defaults pinned to a teacher/student pair."""

    recipe: KDRecipe
    teacher_side: int
    student_side: int
    input_compressed: bool  # output grids differ
    width_compressed: bool  # feature channel counts differ
    alpha2: float
    alpha3: float
    k_rank: int
    reg_support: str  # "all" for vanilla logit KD, "mask" otherwise


def resolve_recipe(recipe, teacher_side, student_side, teacher_channels, student_channels):
    recipe.validate()
    input_compressed = teacher_side != student_side
    width_compressed = teacher_channels != student_channels
    alpha2 = 0.0 if input_compressed else recipe.alpha2
    if recipe.alpha3 is not None:
        alpha3 = recipe.alpha3
    else:
        alpha3 = 100.0 if input_compressed else 200.0
    if recipe.k_rank is not None:
        k_rank = recipe.k_rank
    else:
        k_rank = max(1, round(RANK_K_REFERENCE * (teacher_side / RANK_K_REFERENCE_SIDE) ** 2))
    return ResolvedRecipe(
        recipe=recipe,
        teacher_side=teacher_side,
        student_side=student_side,
        input_compressed=input_compressed,
        width_compressed=width_compressed,
        alpha2=alpha2,
        alpha3=alpha3,
        k_rank=k_rank,
        reg_support="all" if recipe.logit == "vanilla" else "mask",
    )
