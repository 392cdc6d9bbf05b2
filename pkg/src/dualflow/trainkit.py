"""Flow-matching training: loss, AdamW, schedules, EMA, freeze plans.

The training target is the straight-line velocity a - eps at a uniformly drawn
time tau, where the network sees the interpolant (1 - tau) eps + tau a.  Only
the adaptation branch's velocity enters the loss; the prior branch contributes
activations (motor-query caches) but its parameters stay frozen under every
plan that keeps it, and its velocity head is never read by the loss.

Freeze plans name the ablation variants.  The default adaptation plan
("priorvla") trains the adaptation expert, the three query groups, and the
vision encoder, and freezes the language-model core and the prior branch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import numcore as nc
from .dualexpert import PARAM_GROUPS, Policy, encode_prefix, policy_velocity
from .numcore import Tensor

__all__ = [
    "TrainConfig",
    "OptimState",
    "TrainLog",
    "fm_loss",
    "clip_global_norm",
    "init_optim",
    "adamw_step",
    "lr_at",
    "ema_update",
    "with_ema_weights",
    "freeze_plan",
    "VARIANT_NAMES",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; schedule defaults match the full-scale recipe."""

    steps: int
    batch_size: int
    peak_lr: float = 2.5e-5
    decay_lr: float = 2.5e-6
    warmup_steps: int = 1000
    decay_steps: int = 30000
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    ema_decay: float = 0.99
    lr_multipliers: tuple[tuple[str, float], ...] = (
        ("scene_queries", 2.0),
        ("motor_queries", 4.0),
        ("action_queries", 4.0),
    )
    seed: int = 0
    eval_ema: bool = True

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not (0.0 < self.decay_lr <= self.peak_lr):
            raise ValueError("need 0 < decay_lr <= peak_lr")
        if self.warmup_steps < 0 or self.decay_steps < 1:
            raise ValueError("warmup_steps must be >= 0 and decay_steps >= 1")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in [0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        for name, mult in self.lr_multipliers:
            if name not in PARAM_GROUPS:
                raise ValueError(f"lr multiplier for unknown group {name!r}")
            if mult <= 0:
                raise ValueError(f"lr multiplier for {name} must be positive")

    def multiplier(self, group: str) -> float:
        for name, mult in self.lr_multipliers:
            if name == group:
                return mult
        return 1.0


def fm_loss(
    policy: Policy,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    rng: np.random.Generator | None = None,
    fixed: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Flow-matching MSE on one batch plus gradients for trainable parameters.

    batch is (obs, instr, state, chunks) with chunks in normalized action
    units.  Noise and times come from rng, or from fixed=(tau, eps) for
    deterministic probes.  The returned gradient map is keyed by parameter
    name and covers exactly the trainable parameters.
    """
    obs, instr, state, chunks = batch
    chunks = np.asarray(chunks, dtype=np.float64)
    batch_size = chunks.shape[0]
    if fixed is not None:
        tau, eps = (np.asarray(a, dtype=np.float64) for a in fixed)
    else:
        if rng is None:
            raise ValueError("fm_loss: need rng when fixed is not given")
        tau = rng.uniform(0.0, 1.0, size=batch_size)
        eps = rng.standard_normal(chunks.shape)
    if tau.shape != (batch_size,) or eps.shape != chunks.shape:
        raise ValueError(f"fm_loss: tau {tau.shape} / eps {eps.shape} do not match chunks")

    noisy = (1.0 - tau)[:, None, None] * eps + tau[:, None, None] * chunks
    target = chunks - eps

    with nc.Tape() as tape:
        prefix = encode_prefix(policy, obs, instr, state)
        velocity, _, _ = policy_velocity(policy, prefix, noisy, tau)
        diff = nc.sub(velocity, Tensor(target))
        loss = nc.mean_all(nc.mul(diff, diff))
    grads_by_tensor = nc.backward(tape, np.ones(()))
    name_of = {id(t): n for n, t in policy.params.items()}
    grads = {
        name_of[id(t)]: g for t, g in grads_by_tensor.items() if id(t) in name_of
    }
    return loss.item(), grads


def clip_global_norm(
    grads: Mapping[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Scale the whole gradient map so its global L2 norm is at most max_norm.

    A norm exactly at the threshold passes through unchanged.
    """
    if max_norm <= 0:
        raise ValueError("clip_global_norm: max_norm must be positive")
    total = 0.0
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise nc.NonFiniteError(f"clip_global_norm: non-finite gradient for {name}")
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


@dataclass
class OptimState:
    """AdamW moments plus the EMA shadow, all keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optim(policy: Policy) -> OptimState:
    """Zero moments; the EMA shadow starts as a copy of the trainable weights."""
    state = OptimState()
    for name, t in policy.trainable_params().items():
        state.m[name] = np.zeros(t.shape)
        state.v[name] = np.zeros(t.shape)
        state.ema[name] = t.data.copy()
    return state


def adamw_step(
    policy: Policy,
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    config: TrainConfig,
) -> dict[str, float]:
    """One decoupled-weight-decay Adam update on the trainable parameters.

    Frozen parameters are skipped even when the gradient map names them.
    Returns the per-group learning rates used, for logging.
    """
    state.step += 1
    t = state.step
    beta1, beta2 = config.betas
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    lrs: dict[str, float] = {}
    for name, tensor_ in policy.trainable_params().items():
        if name not in grads:
            raise KeyError(f"adamw_step: missing gradient for trainable parameter {name}")
        g = grads[name]
        if g.shape != tensor_.shape:
            raise ValueError(f"adamw_step: gradient shape {g.shape} != param {tensor_.shape}")
        group = policy.group_of[name]
        lr = lr_at(t, config, group)
        lrs[group] = lr
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + config.eps)
        tensor_.data = tensor_.data - lr * (update + config.weight_decay * tensor_.data)
    return lrs


def lr_at(step: int, config: TrainConfig, group: str = "") -> float:
    """Learning rate at a 1-based optimizer step for a parameter group.

    Linear warmup reaches peak_lr exactly at warmup_steps, cosine decay then
    runs for decay_steps down to decay_lr, and the rate stays at decay_lr
    afterwards.  The group multiplier scales the whole schedule.
    """
    if step < 0:
        raise ValueError("lr_at: step must be >= 0")
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        base = config.peak_lr * (step / config.warmup_steps)
    else:
        u = (step - config.warmup_steps) / config.decay_steps
        if u >= 1.0:
            base = config.decay_lr
        else:
            base = config.decay_lr + (config.peak_lr - config.decay_lr) * 0.5 * (
                1.0 + np.cos(np.pi * u)
            )
    mult = config.multiplier(group) if group else 1.0
    return float(base * mult)


def ema_update(shadow: dict[str, np.ndarray], policy: Policy, decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * param, trainable params only."""
    for name, t in policy.trainable_params().items():
        if name not in shadow:
            raise KeyError(f"ema_update: no shadow entry for {name}")
        shadow[name] *= decay
        shadow[name] += (1.0 - decay) * t.data


def with_ema_weights(policy: Policy, state: OptimState) -> Policy:
    """A new policy whose trainable parameters carry the EMA shadow values."""
    params = {
        name: Tensor(state.ema[name].copy() if name in state.ema else t.data.copy())
        for name, t in policy.params.items()
    }
    return Policy(
        policy.config,
        params,
        has_pe=policy.has_pe,
        counts=(policy.scene_count, policy.motor_count, policy.action_count),
        frozen_groups=policy.frozen_groups,
        norm_stats=policy.norm_stats,
    )


# Frozen groups per variant; groups listed as absent must not exist on the policy.
_VARIANT_FROZEN: dict[str, frozenset[str]] = {
    "priorvla": frozenset({"vlm_core", "prior_expert"}),
    "full_ft": frozenset(),
    "wo_pe": frozenset({"vlm_core"}),
    "random_pe": frozenset({"vlm_core", "prior_expert"}),
    "trainable_pe": frozenset({"vlm_core"}),
    "frozen_vit": frozenset({"vlm_core", "prior_expert", "vision_encoder"}),
    "wo_sq": frozenset({"vlm_core", "prior_expert"}),
    "wo_mq": frozenset({"vlm_core", "prior_expert"}),
    "wo_aq": frozenset({"vlm_core", "prior_expert"}),
    "wo_sq_mq_aq": frozenset({"vlm_core", "prior_expert"}),
}

_VARIANT_ABSENT: dict[str, frozenset[str]] = {
    "priorvla": frozenset(),
    "full_ft": frozenset({"prior_expert", "scene_queries", "motor_queries", "action_queries"}),
    "wo_pe": frozenset({"prior_expert", "motor_queries"}),
    "random_pe": frozenset(),
    "trainable_pe": frozenset(),
    "frozen_vit": frozenset(),
    "wo_sq": frozenset({"scene_queries"}),
    "wo_mq": frozenset({"motor_queries"}),
    "wo_aq": frozenset({"action_queries"}),
    "wo_sq_mq_aq": frozenset({"scene_queries", "motor_queries", "action_queries"}),
}

VARIANT_NAMES: tuple[str, ...] = tuple(_VARIANT_FROZEN)


def freeze_plan(variant: str, present_groups: Iterable[str]) -> dict[str, bool]:
    """Trainability per present group for a named variant.

    Validates that groups the variant removes are actually absent and that
    everything else is present.
    """
    if variant not in _VARIANT_FROZEN:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANT_NAMES}")
    present = set(present_groups)
    unknown = present - set(PARAM_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
    absent = _VARIANT_ABSENT[variant]
    wrongly_present = present & absent
    if wrongly_present:
        raise ValueError(f"variant {variant}: groups {sorted(wrongly_present)} must be absent")
    required = set(PARAM_GROUPS) - absent
    missing = required - present
    if missing:
        raise ValueError(f"variant {variant}: groups {sorted(missing)} are required")
    frozen = _VARIANT_FROZEN[variant]
    return {g: g not in frozen for g in sorted(present)}


@dataclass
class TrainLog:
    """Per-step scalars from one training run."""

    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float, grad_norm: float, lr: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)
        self.grad_norms.append(grad_norm)
        self.lrs.append(lr)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "grad_norm", "lr"])
            for row in zip(self.steps, self.losses, self.grad_norms, self.lrs):
                writer.writerow([row[0], f"{row[1]:.9g}", f"{row[2]:.9g}", f"{row[3]:.9g}"])


def train(
    policy: Policy,
    data,
    config: TrainConfig,
    log_path=None,
    progress_every: int = 0,
) -> tuple[TrainLog, OptimState]:
    """Seeded minibatch training loop; mutates the policy in place.

    data supplies aligned arrays obs/instr/state/chunks.  One rng stream keyed
    by config.seed drives batch sampling and the loss's noise draws, so reruns
    with the same seed produce bit-identical loss trajectories.
    """
    n = data.chunks.shape[0]
    if n < 1:
        raise ValueError("train: empty dataset")
    rng = np.random.default_rng(config.seed)
    state = init_optim(policy)
    log = TrainLog()
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, n, size=config.batch_size)
        batch = (data.obs[idx], data.instr[idx], data.state[idx], data.chunks[idx])
        try:
            loss, grads = fm_loss(policy, batch, rng)
            grads, norm = clip_global_norm(grads, config.clip_norm)
        except nc.NonFiniteError as exc:
            raise nc.NonFiniteError(f"training diverged at step {step}: {exc}") from exc
        lrs = adamw_step(policy, grads, state, config)
        ema_update(state.ema, policy, config.ema_decay)
        log.append(step, loss, norm, lr_at(step, config))
        if progress_every and step % progress_every == 0:
            print(f"step {step}/{config.steps} loss {loss:.5f} gnorm {norm:.3f}", flush=True)
        _ = lrs
    if log_path is not None:
        log.write_csv(log_path)
    return log, state
