"""Runtime checks of the routing claims: independence probes and drift audits.

independence_probe perturbs a named parameter set and reports how much a
named output moves; the block-mask design makes several of these exactly
zero.  prior_drift compares two checkpoints group by group, in parameters
and in forward behavior, to certify that frozen groups stayed frozen.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..dualexpert import (
    Policy,
    adaptation_step,
    denoise,
    encode_prefix,
    load_policy,
    policy_velocity,
    prior_expert_step,
)

__all__ = ["SOURCES", "SINKS", "independence_probe", "prior_drift"]

# Parameter sets whose influence we probe.  Embedding-level sources cover the
# query groups and the adaptation branch's noisy-token pathway; the velocity
# head of the prior branch is the output the sampler must ignore.
SOURCES: dict[str, tuple[str, ...]] = {
    "scene_queries": ("sq.embed",),
    "motor_queries": ("mq.embed",),
    "action_queries": ("aq.embed",),
    "adaptation_tokens": ("ae.in_w", "ae.in_b", "ae.pos"),
    "pe_velocity_head": ("pe.lnf_gain", "pe.lnf_bias", "pe.head_w", "pe.head_b"),
}


def _fixed_draws(policy: Policy, batch_size: int, seed: int):
    rng = np.random.default_rng(seed)
    cfg = policy.config
    noisy = rng.standard_normal((batch_size, cfg.horizon, cfg.action_dim))
    tau = rng.uniform(0.0, 1.0, size=batch_size)
    return noisy, tau


def _sink_pe_velocity(policy: Policy, batch, seed: int) -> np.ndarray:
    if not policy.has_pe:
        raise ValueError("pe_velocity sink needs a policy with the prior branch")
    obs, instr, state = batch
    noisy, tau = _fixed_draws(policy, np.asarray(obs).shape[0], seed)
    prefix = encode_prefix(policy, obs, instr, state)
    _, velocity = prior_expert_step(policy, prefix, noisy, tau)
    return velocity.data


def _sink_ae_velocity(policy: Policy, batch, seed: int) -> np.ndarray:
    obs, instr, state = batch
    noisy, tau = _fixed_draws(policy, np.asarray(obs).shape[0], seed)
    prefix = encode_prefix(policy, obs, instr, state)
    velocity, _, _ = policy_velocity(policy, prefix, noisy, tau)
    return velocity.data


def _sink_action_chunk(policy: Policy, batch, seed: int) -> np.ndarray:
    obs, instr, state = batch
    batch_size = np.asarray(obs).shape[0]
    rngs = [np.random.default_rng([seed, i]) for i in range(batch_size)]
    return denoise(policy, obs, instr, state, rngs)


SINKS = {
    "pe_velocity": _sink_pe_velocity,
    "ae_velocity": _sink_ae_velocity,
    "action_chunk": _sink_action_chunk,
}


def independence_probe(
    policy: Policy,
    source: str,
    sink: str,
    batch,
    magnitude: float = 0.5,
    seed: int = 0,
) -> float:
    """Worst-case absolute change of `sink` when `source` params shift by magnitude.

    Exactly 0.0 certifies the sink never reads the source; a positive value
    is the live-pathway control.
    """
    if source not in SOURCES:
        raise ValueError(f"unknown source {source!r}; expected one of {sorted(SOURCES)}")
    if sink not in SINKS:
        raise ValueError(f"unknown sink {sink!r}; expected one of {sorted(SINKS)}")
    names = SOURCES[source]
    missing = [n for n in names if n not in policy.params]
    if missing:
        raise ValueError(f"source {source}: parameters {missing} absent from this policy")
    run = SINKS[sink]
    base = run(policy, batch, seed)
    saved = {n: policy.params[n].data for n in names}
    try:
        for n in names:
            policy.params[n].data = saved[n] + magnitude
        moved = run(policy, batch, seed)
    finally:
        for n in names:
            policy.params[n].data = saved[n]
    return float(np.max(np.abs(moved - base)))


def _forward_signature(policy: Policy, batch, seed: int) -> np.ndarray:
    """Deterministic output vector exercising every live pathway once."""
    obs, instr, state = batch
    noisy, tau = _fixed_draws(policy, np.asarray(obs).shape[0], seed)
    prefix = encode_prefix(policy, obs, instr, state)
    if policy.has_pe:
        motor, pe_velocity = prior_expert_step(policy, prefix, noisy, tau)
        ae_velocity = adaptation_step(policy, prefix, motor, noisy, tau)
        return np.concatenate([ae_velocity.data.ravel(), pe_velocity.data.ravel()])
    ae_velocity = adaptation_step(policy, prefix, None, noisy, tau)
    return ae_velocity.data.ravel()


def _as_policy(checkpoint) -> Policy:
    if isinstance(checkpoint, (str, Path)):
        return load_policy(checkpoint)
    return checkpoint


def prior_drift(
    before,
    after,
    batch,
    groups=None,
    seed: int = 0,
) -> dict[str, tuple[float, float]]:
    """Per-group (max parameter diff, max forward-output diff) between checkpoints.

    The forward diff for a group swaps only that group's parameters from
    `after` into `before` and measures the output change, so an untouched
    group reports exactly (0.0, 0.0).  Defaults to the groups frozen in
    `after`; pass groups explicitly to audit trainable ones.
    """
    before = _as_policy(before)
    after = _as_policy(after)
    if before.config != after.config:
        raise ValueError("prior_drift: checkpoints have different configs")
    if set(before.params) != set(after.params):
        raise ValueError("prior_drift: checkpoints have different parameter sets")
    if groups is None:
        groups = sorted(after.frozen_groups)
    present = set(before.group_of.values())
    out: dict[str, tuple[float, float]] = {}
    base = _forward_signature(before, batch, seed)
    for group in groups:
        if group not in present:
            raise ValueError(f"prior_drift: group {group!r} not present in these checkpoints")
        names = before.group_params(group)
        param_diff = max(
            float(np.max(np.abs(before.params[n].data - after.params[n].data))) for n in names
        )
        saved = {n: before.params[n].data for n in names}
        try:
            for n in names:
                before.params[n].data = after.params[n].data
            swapped = _forward_signature(before, batch, seed)
        finally:
            for n in names:
                before.params[n].data = saved[n]
        forward_diff = float(np.max(np.abs(swapped - base)))
        out[group] = (param_diff, forward_diff)
    return out
