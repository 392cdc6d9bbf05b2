"""Adaptation variants: the ablation matrix over prior branch and query groups.

Each variant names a prior-branch mode, a query-group mask, and a freeze
plan.  "wo_pe" and "wo_mq" stay distinct specs even though removing the
prior branch and removing the motor queries cut the same pathway: the prior
branch reaches the adaptation expert only through the motor queries, so the
two variants sample bit-identical actions under identical trainable-weight
trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..dualexpert import Policy, clone_experts
from ..numcore import Tensor
from ..trainkit import VARIANT_NAMES, freeze_plan

__all__ = ["VariantSpec", "VARIANTS", "build_policy"]


@dataclass(frozen=True)
class VariantSpec:
    """Declarative ablation setup: prior-branch mode, query mask, freeze plan."""

    name: str
    pe_mode: str  # "copied" | "random" | "trainable" | "absent"
    scene_on: bool
    motor_on: bool
    action_on: bool

    def __post_init__(self) -> None:
        if self.pe_mode not in ("copied", "random", "trainable", "absent"):
            raise ValueError(f"unknown prior-branch mode {self.pe_mode!r}")

    def query_mask(self) -> tuple[bool, bool, bool]:
        return (self.scene_on, self.motor_on, self.action_on)


VARIANTS: dict[str, VariantSpec] = {
    spec.name: spec
    for spec in (
        VariantSpec("priorvla", "copied", True, True, True),
        VariantSpec("full_ft", "absent", False, False, False),
        VariantSpec("wo_pe", "absent", True, False, True),
        VariantSpec("random_pe", "random", True, True, True),
        VariantSpec("trainable_pe", "trainable", True, True, True),
        VariantSpec("frozen_vit", "copied", True, True, True),
        VariantSpec("wo_sq", "copied", False, True, True),
        VariantSpec("wo_mq", "copied", True, False, True),
        VariantSpec("wo_aq", "copied", True, True, False),
        VariantSpec("wo_sq_mq_aq", "copied", False, False, False),
    )
}

assert set(VARIANTS) == set(VARIANT_NAMES)


def build_policy(pretrained: Policy, variant: str, seed: int) -> Policy:
    """Clone experts per the variant and apply its freeze plan.

    full_ft keeps the pretrained single-expert layout (no prior branch, no
    queries, everything trainable); every other variant builds the dual
    layout with the groups the variant keeps.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    spec = VARIANTS[variant]
    cfg = pretrained.config
    if variant == "full_ft":
        policy = Policy(
            cfg,
            {name: Tensor(t.data.copy()) for name, t in pretrained.params.items()},
            has_pe=False,
            counts=(0, 0, 0),
            norm_stats=pretrained.norm_stats,
        )
    else:
        pe_mode = "copied" if spec.pe_mode == "trainable" else spec.pe_mode
        policy = clone_experts(
            pretrained,
            seed=seed,
            pe_mode=pe_mode,
            scene=cfg.scene_queries if spec.scene_on else 0,
            motor=cfg.motor_queries if spec.motor_on else 0,
            action=cfg.action_queries if spec.action_on else 0,
        )
    plan = freeze_plan(variant, policy.present_groups())
    policy.apply_freeze(frozenset(g for g, trainable in plan.items() if not trainable))
    return policy
