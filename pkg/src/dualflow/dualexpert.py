"""Dual-expert denoising policy.

A policy turns (observation grid, instruction id, proprioceptive state) into an
H-step action chunk by integrating a learned velocity field from Gaussian noise
in K forward-Euler steps.  A pretrained policy has one action expert.  Cloning
for adaptation adds a frozen copy of that expert (the prior branch), a fresh
trainable copy (the adaptation branch), and three groups of trainable query
tokens wired through the block mask:

- scene queries (SQ) read the observation encoder,
- motor queries (MQ) ride along the prior branch and read its noisy tokens,
- action queries (AQ) live inside the adaptation branch.

Only the adaptation branch's velocity moves the chunk; the prior branch's
velocity head is computed for probes but never integrated and never trained.

Parameters are partitioned into named groups (vlm_core, vision_encoder,
prior_expert, adaptation_expert, scene_queries, motor_queries, action_queries)
so freeze plans and optimizers can address them uniformly.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .flowmask import BlockMask, canonical_mask
from .numcore import Tensor
from .stack import ComponentWeights, LayerCache, LayerWeights, stack_forward

__all__ = [
    "PARAM_GROUPS",
    "PolicyConfig",
    "Policy",
    "PrefixCaches",
    "MotorCaches",
    "DenoiseState",
    "init_single",
    "clone_experts",
    "encode_prefix",
    "prior_expert_step",
    "adaptation_step",
    "policy_velocity",
    "denoise",
    "trainable_fraction",
    "fraction_from_counts",
    "save_policy",
    "load_policy",
    "sinusoidal_embedding",
]

PARAM_GROUPS: tuple[str, ...] = (
    "vlm_core",
    "vision_encoder",
    "prior_expert",
    "adaptation_expert",
    "scene_queries",
    "motor_queries",
    "action_queries",
)

_CHECKPOINT_FORMAT = "dualflow-policy-v1"


@dataclass(frozen=True)
class PolicyConfig:
    """Shapes and sizes shared by every policy built from this config."""

    layers: int = 2
    vlm_width: int = 32
    expert_width: int = 24
    heads: int = 2
    head_dim: int = 12
    ffn_mult: int = 4
    horizon: int = 8
    action_dim: int = 2
    scene_queries: int = 8
    motor_queries: int = 8
    action_queries: int = 8
    denoise_steps: int = 10
    obs_grid: int = 16
    obs_channels: int = 2
    instr_vocab: int = 8
    state_dim: int = 2

    def __post_init__(self) -> None:
        positives = {
            "layers": self.layers,
            "vlm_width": self.vlm_width,
            "expert_width": self.expert_width,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "ffn_mult": self.ffn_mult,
            "horizon": self.horizon,
            "action_dim": self.action_dim,
            "denoise_steps": self.denoise_steps,
            "obs_grid": self.obs_grid,
            "obs_channels": self.obs_channels,
            "instr_vocab": self.instr_vocab,
            "state_dim": self.state_dim,
        }
        for name, value in positives.items():
            if value < 1:
                raise ValueError(f"config: {name} must be >= 1, got {value}")
        for name, value in (
            ("scene_queries", self.scene_queries),
            ("motor_queries", self.motor_queries),
            ("action_queries", self.action_queries),
        ):
            if value < 0:
                raise ValueError(f"config: {name} must be >= 0, got {value}")
        if self.expert_width % 2:
            raise ValueError("config: expert_width must be even for the sinusoidal embedding")

    @property
    def obs_tokens(self) -> int:
        return self.obs_grid * self.obs_grid + 2


def _rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng((int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())))


_EMBED_SCALE = 0.3  # init std for position, query, and instruction embeddings


def _init_param(seed: int, name: str, shape: tuple[int, ...]) -> np.ndarray:
    rng = _rng_for(seed, name)
    last = name.rsplit(".", 1)[-1]
    if last.endswith("_gain"):
        return np.ones(shape)
    if last.startswith("b_") or last.endswith("_bias") or last.endswith("_b"):
        return np.zeros(shape)
    if last in ("embed", "pos") or last == "instr_embed":
        return rng.normal(scale=_EMBED_SCALE, size=shape)
    # Weight matrices: unit-variance preserving.
    fan_in = shape[0]
    return rng.normal(scale=1.0 / np.sqrt(fan_in), size=shape)


def _layer_param_shapes(cfg: PolicyConfig, comp: str) -> dict[str, tuple[int, ...]]:
    width = cfg.vlm_width if comp == "vlm" else cfg.expert_width
    kv = cfg.heads * cfg.head_dim
    hid = width * cfg.ffn_mult
    return {
        "ln1_gain": (width,),
        "ln1_bias": (width,),
        "w_q": (width, kv),
        "b_q": (kv,),
        "w_k": (width, kv),
        "b_k": (kv,),
        "w_v": (width, kv),
        "b_v": (kv,),
        "w_o": (kv, width),
        "b_o": (width,),
        "ln2_gain": (width,),
        "ln2_bias": (width,),
        "w_up": (width, hid),
        "b_up": (hid,),
        "w_down": (hid, width),
        "b_down": (width,),
    }


def _component_param_shapes(cfg: PolicyConfig, comp: str) -> dict[str, tuple[int, ...]]:
    """All parameter shapes for a component, including embeddings and heads."""
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in range(cfg.layers):
        for local, shape in _layer_param_shapes(cfg, comp).items():
            shapes[f"{comp}.L{layer}.{local}"] = shape
    if comp in ("pe", "ae"):
        ew = cfg.expert_width
        shapes[f"{comp}.in_w"] = (cfg.action_dim, ew)
        shapes[f"{comp}.in_b"] = (ew,)
        shapes[f"{comp}.pos"] = (cfg.horizon, ew)
        shapes[f"{comp}.lnf_gain"] = (ew,)
        shapes[f"{comp}.lnf_bias"] = (ew,)
        shapes[f"{comp}.head_w"] = (ew, cfg.action_dim)
        shapes[f"{comp}.head_b"] = (cfg.action_dim,)
    return shapes


def _group_of_name(name: str) -> str:
    prefix = name.split(".", 1)[0]
    return {
        "vision": "vision_encoder",
        "vlm": "vlm_core",
        "pe": "prior_expert",
        "ae": "adaptation_expert",
        "sq": "scene_queries",
        "mq": "motor_queries",
        "aq": "action_queries",
    }[prefix]


class Policy:
    """Parameter store plus the token-group layout of one policy instance."""

    def __init__(
        self,
        config: PolicyConfig,
        params: dict[str, Tensor],
        has_pe: bool,
        counts: tuple[int, int, int],
        frozen_groups: frozenset[str] = frozenset(),
        norm_stats: tuple[np.ndarray, np.ndarray] | None = None,
    ):
        self.config = config
        self.params = dict(params)
        self.group_of = {name: _group_of_name(name) for name in self.params}
        self.has_pe = bool(has_pe)
        self.scene_count, self.motor_count, self.action_count = (int(c) for c in counts)
        self.norm_stats = None
        if norm_stats is not None:
            mean, std = (np.asarray(a, dtype=np.float64) for a in norm_stats)
            if mean.shape != (config.action_dim,) or std.shape != (config.action_dim,):
                raise ValueError("norm_stats must be two arrays of shape (action_dim,)")
            self.norm_stats = (mean, std)
        self.mask = canonical_mask()
        self._validate()
        self.apply_freeze(frozen_groups)
        self._layers = [self._build_layer(i) for i in range(config.layers)]

    def _validate(self) -> None:
        cfg = self.config
        expected: dict[str, tuple[int, ...]] = {
            "vision.patch_w": (cfg.obs_channels, cfg.vlm_width),
            "vision.patch_b": (cfg.vlm_width,),
            "vlm.instr_embed": (cfg.instr_vocab, cfg.vlm_width),
            "vlm.state_w": (cfg.state_dim, cfg.vlm_width),
            "vlm.state_b": (cfg.vlm_width,),
            "vlm.obs_pos": (cfg.obs_tokens, cfg.vlm_width),
        }
        expected.update(_component_param_shapes(cfg, "vlm"))
        expected.update(_component_param_shapes(cfg, "ae"))
        if self.has_pe:
            expected.update(_component_param_shapes(cfg, "pe"))
        if self.scene_count:
            expected["sq.embed"] = (self.scene_count, cfg.vlm_width)
        if self.motor_count:
            expected["mq.embed"] = (self.motor_count, cfg.expert_width)
        if self.action_count:
            expected["aq.embed"] = (self.action_count, cfg.expert_width)
        missing = sorted(set(expected) - set(self.params))
        extra = sorted(set(self.params) - set(expected))
        if missing or extra:
            raise ValueError(f"policy params mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(
                    f"param {name}: shape {self.params[name].shape}, expected {shape}"
                )
        if self.motor_count and not self.has_pe:
            raise ValueError("motor queries require the prior branch")

    def _build_layer(self, index: int) -> LayerWeights:
        comps: dict[str, ComponentWeights] = {}
        names = ["vlm", "ae"] + (["pe"] if self.has_pe else [])
        for comp in names:
            locals_ = _layer_param_shapes(self.config, comp)
            kwargs = {local: self.params[f"{comp}.L{index}.{local}"] for local in locals_}
            comps[comp] = ComponentWeights(**kwargs)
        return LayerWeights(components=comps, heads=self.config.heads, head_dim=self.config.head_dim)

    @property
    def layers(self) -> list[LayerWeights]:
        return self._layers

    @property
    def frozen_groups(self) -> frozenset[str]:
        return self._frozen

    def present_groups(self) -> tuple[str, ...]:
        groups = set(self.group_of.values())
        return tuple(g for g in PARAM_GROUPS if g in groups)

    def group_params(self, group: str) -> list[str]:
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        return sorted(n for n, g in self.group_of.items() if g == group)

    def group_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for name, tensor_ in self.params.items():
            out[self.group_of[name]] = out.get(self.group_of[name], 0) + tensor_.size
        return out

    def apply_freeze(self, frozen_groups) -> None:
        frozen = frozenset(frozen_groups)
        unknown = frozen - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups in freeze set: {sorted(unknown)}")
        self._frozen = frozen
        for name, tensor_ in self.params.items():
            tensor_.requires_grad = self.group_of[name] not in frozen

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if t.requires_grad}


def init_single(config: PolicyConfig, seed: int) -> Policy:
    """A fresh single-expert policy: no prior branch, no query tokens."""
    shapes: dict[str, tuple[int, ...]] = {
        "vision.patch_w": (config.obs_channels, config.vlm_width),
        "vision.patch_b": (config.vlm_width,),
        "vlm.instr_embed": (config.instr_vocab, config.vlm_width),
        "vlm.state_w": (config.state_dim, config.vlm_width),
        "vlm.state_b": (config.vlm_width,),
        "vlm.obs_pos": (config.obs_tokens, config.vlm_width),
    }
    shapes.update(_component_param_shapes(config, "vlm"))
    shapes.update(_component_param_shapes(config, "ae"))
    params = {name: Tensor(_init_param(seed, name, shape)) for name, shape in shapes.items()}
    return Policy(config, params, has_pe=False, counts=(0, 0, 0))


def clone_experts(
    pretrained: Policy,
    seed: int,
    pe_mode: str = "copied",
    scene: int | None = None,
    motor: int | None = None,
    action: int | None = None,
) -> Policy:
    """Build the adaptation-time policy from a pretrained single-expert one.

    pe_mode: "copied" duplicates the pretrained expert as the frozen prior
    branch, "random" re-draws the prior branch's weights, "absent" omits the
    branch entirely (motor queries then have no host and must be 0).
    Query counts default to the config's.  The returned policy starts under
    the default adaptation freeze (vlm_core and the prior branch frozen).
    """
    if pretrained.has_pe or pretrained.scene_count or pretrained.motor_count or pretrained.action_count:
        raise ValueError("clone_experts: source must be a single-expert policy without queries")
    if pe_mode not in ("copied", "random", "absent"):
        raise ValueError(f"clone_experts: unknown pe_mode {pe_mode!r}")
    cfg = pretrained.config
    scene = cfg.scene_queries if scene is None else int(scene)
    motor = cfg.motor_queries if motor is None else int(motor)
    action = cfg.action_queries if action is None else int(action)
    if pe_mode == "absent" and motor > 0:
        raise ValueError("clone_experts: motor queries require the prior branch")

    params = {name: Tensor(t.data.copy()) for name, t in pretrained.params.items()}
    if pe_mode != "absent":
        for name in list(pretrained.params):
            if name.startswith("ae."):
                pe_name = "pe." + name[3:]
                if pe_mode == "copied":
                    params[pe_name] = Tensor(pretrained.params[name].data.copy())
                else:
                    params[pe_name] = Tensor(
                        _init_param(seed, pe_name, pretrained.params[name].shape)
                    )
    if scene:
        params["sq.embed"] = Tensor(_init_param(seed, "sq.embed", (scene, cfg.vlm_width)))
    if motor:
        params["mq.embed"] = Tensor(_init_param(seed, "mq.embed", (motor, cfg.expert_width)))
    if action:
        params["aq.embed"] = Tensor(_init_param(seed, "aq.embed", (action, cfg.expert_width)))

    frozen = {"vlm_core"} | ({"prior_expert"} if pe_mode != "absent" else set())
    return Policy(
        cfg,
        params,
        has_pe=pe_mode != "absent",
        counts=(scene, motor, action),
        frozen_groups=frozenset(frozen),
        norm_stats=pretrained.norm_stats,
    )


def sinusoidal_embedding(tau: float | np.ndarray, dim: int) -> np.ndarray:
    """Sin/cos features of the denoising time with geometric periods.

    Returns (dim,) for a scalar tau or (B, dim) for a vector.
    """
    if dim % 2:
        raise ValueError("sinusoidal_embedding: dim must be even")
    tau_arr = np.asarray(tau, dtype=np.float64)
    periods = 4e-3 * (4.0 / 4e-3) ** (np.arange(dim // 2) / max(dim // 2 - 1, 1))
    angles = 2.0 * np.pi * tau_arr[..., None] / periods
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


@dataclass
class PrefixCaches:
    """Per-layer keys/values of the observation prefix (OBS and SQ groups)."""

    caches: list[LayerCache]
    final: dict[str, Tensor]
    batch: int


@dataclass
class MotorCaches:
    """Per-layer keys/values of the motor queries at one denoising time."""

    caches: list[LayerCache]
    tau: np.ndarray
    batch: int


@dataclass
class DenoiseState:
    """One point on the denoising trajectory."""

    tau: float
    chunk: np.ndarray


def _as_batched(arr, ndim_single: int) -> tuple[np.ndarray, bool]:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == ndim_single:
        return a[None], True
    if a.ndim == ndim_single + 1:
        return a, False
    raise ValueError(f"expected {ndim_single}- or {ndim_single + 1}-dim array, got {a.shape}")


def embed_prefix(policy: Policy, obs, instr, state) -> dict[str, Tensor]:
    cfg = policy.config
    obs_b, _ = _as_batched(obs, 3)
    batch = obs_b.shape[0]
    instr_b = np.atleast_1d(np.asarray(instr, dtype=np.int64))
    state_b, _ = _as_batched(state, 1)
    if obs_b.shape[1:] != (cfg.obs_channels, cfg.obs_grid, cfg.obs_grid):
        raise ValueError(f"obs shape {obs_b.shape[1:]} != "
                         f"({cfg.obs_channels}, {cfg.obs_grid}, {cfg.obs_grid})")
    if instr_b.shape != (batch,) or state_b.shape != (batch, cfg.state_dim):
        raise ValueError("instruction/state batch shapes do not match the observation batch")
    if instr_b.min() < 0 or instr_b.max() >= cfg.instr_vocab:
        raise ValueError(f"instruction ids out of range [0, {cfg.instr_vocab})")

    g2 = cfg.obs_grid * cfg.obs_grid
    cells = obs_b.transpose(0, 2, 3, 1).reshape(batch, g2, cfg.obs_channels)
    patches = nc.matmul(Tensor(cells), policy.params["vision.patch_w"])
    patches = nc.add(patches, nc.expand_to(policy.params["vision.patch_b"], (batch, g2, cfg.vlm_width)))
    pos = policy.params["vlm.obs_pos"]
    patches = nc.add(patches, nc.expand_to(nc.slice_axis(pos, 0, 0, g2), (batch, g2, cfg.vlm_width)))

    onehot = np.zeros((batch, cfg.instr_vocab))
    onehot[np.arange(batch), instr_b] = 1.0
    instr_tok = nc.matmul(Tensor(onehot), policy.params["vlm.instr_embed"])
    instr_tok = nc.reshape(instr_tok, (batch, 1, cfg.vlm_width))
    instr_tok = nc.add(
        instr_tok, nc.expand_to(nc.slice_axis(pos, 0, g2, g2 + 1), (batch, 1, cfg.vlm_width))
    )

    state_tok = nc.matmul(Tensor(state_b), policy.params["vlm.state_w"])
    state_tok = nc.add(state_tok, nc.expand_to(policy.params["vlm.state_b"], (batch, cfg.vlm_width)))
    state_tok = nc.reshape(state_tok, (batch, 1, cfg.vlm_width))
    state_tok = nc.add(
        state_tok, nc.expand_to(nc.slice_axis(pos, 0, g2 + 1, g2 + 2), (batch, 1, cfg.vlm_width))
    )

    out = {"OBS": nc.concat([patches, instr_tok, state_tok], axis=1)}
    if policy.scene_count:
        out["SQ"] = nc.expand_to(
            policy.params["sq.embed"], (batch, policy.scene_count, cfg.vlm_width)
        )
    return out


def encode_prefix(policy: Policy, obs, instr, state) -> PrefixCaches:
    """Run the observation prefix once; its caches serve every denoising step."""
    emb = embed_prefix(policy, obs, instr, state)
    final, caches = stack_forward(emb, policy.layers, policy.mask)
    return PrefixCaches(caches=caches, final=final, batch=final["OBS"].shape[0])


def _embed_noisy(policy: Policy, comp: str, chunk: np.ndarray, tau) -> Tensor:
    cfg = policy.config
    batch = chunk.shape[0]
    tokens = nc.matmul(Tensor(chunk), policy.params[f"{comp}.in_w"])
    tokens = nc.add(
        tokens, nc.expand_to(policy.params[f"{comp}.in_b"], (batch, cfg.horizon, cfg.expert_width))
    )
    tokens = nc.add(
        tokens, nc.expand_to(policy.params[f"{comp}.pos"], (batch, cfg.horizon, cfg.expert_width))
    )
    tau_vec = np.broadcast_to(np.asarray(tau, dtype=np.float64), (batch,))
    tau_emb = sinusoidal_embedding(tau_vec, cfg.expert_width)  # (B, ew), constant
    tau_full = np.repeat(tau_emb[:, None, :], cfg.horizon, axis=1)
    return nc.add(tokens, Tensor(tau_full))


def _chunk_batch(policy: Policy, chunk) -> np.ndarray:
    cfg = policy.config
    chunk_b, _ = _as_batched(chunk, 2)
    if chunk_b.shape[1:] != (cfg.horizon, cfg.action_dim):
        raise ValueError(
            f"chunk shape {chunk_b.shape[1:]} != ({cfg.horizon}, {cfg.action_dim})"
        )
    return chunk_b


def _expert_read(policy: Policy, comp: str, final: Tensor) -> Tensor:
    normed = nc.layer_norm(
        final, policy.params[f"{comp}.lnf_gain"], policy.params[f"{comp}.lnf_bias"]
    )
    batch, horizon, _ = normed.shape
    out = nc.matmul(normed, policy.params[f"{comp}.head_w"])
    return nc.add(
        out, nc.expand_to(policy.params[f"{comp}.head_b"], (batch, horizon, policy.config.action_dim))
    )


def prior_expert_step(
    policy: Policy, prefix: PrefixCaches, chunk, tau
) -> tuple[MotorCaches, Tensor]:
    """One prior-branch pass: returns motor-query caches and the prior velocity.

    The prior velocity is diagnostic output only; nothing downstream consumes
    it and the sampler never integrates it.
    """
    if not policy.has_pe:
        raise ValueError("prior_expert_step: policy has no prior branch")
    chunk_b = _chunk_batch(policy, chunk)
    if chunk_b.shape[0] != prefix.batch:
        raise ValueError(f"chunk batch {chunk_b.shape[0]} != prefix batch {prefix.batch}")
    emb = {"N1": _embed_noisy(policy, "pe", chunk_b, tau)}
    if policy.motor_count:
        emb["MQ"] = nc.expand_to(
            policy.params["mq.embed"],
            (chunk_b.shape[0], policy.motor_count, policy.config.expert_width),
        )
    extra = [
        LayerCache(keys={"OBS": c.keys["OBS"]}, values={"OBS": c.values["OBS"]})
        for c in prefix.caches
    ]
    final, caches = stack_forward(emb, policy.layers, policy.mask, extra=extra)
    motor_layers = [
        LayerCache(
            keys={"MQ": c.keys["MQ"]} if "MQ" in c.keys else {},
            values={"MQ": c.values["MQ"]} if "MQ" in c.values else {},
        )
        for c in caches
    ]
    motor = MotorCaches(
        caches=motor_layers,
        tau=np.broadcast_to(np.asarray(tau, dtype=np.float64), (chunk_b.shape[0],)).copy(),
        batch=chunk_b.shape[0],
    )
    return motor, _expert_read(policy, "pe", final["N1"])


def adaptation_step(
    policy: Policy, prefix: PrefixCaches, motor: MotorCaches | None, chunk, tau
) -> Tensor:
    """One adaptation-branch pass producing the velocity that moves the chunk."""
    chunk_b = _chunk_batch(policy, chunk)
    if chunk_b.shape[0] != prefix.batch:
        raise ValueError(f"chunk batch {chunk_b.shape[0]} != prefix batch {prefix.batch}")
    tau_vec = np.broadcast_to(np.asarray(tau, dtype=np.float64), (chunk_b.shape[0],))
    if policy.has_pe and policy.motor_count:
        if motor is None:
            raise ValueError("adaptation_step: motor caches required but missing")
        if motor.batch != chunk_b.shape[0]:
            raise ValueError(f"motor cache batch {motor.batch} != chunk batch {chunk_b.shape[0]}")
        if not np.array_equal(motor.tau, tau_vec):
            raise ValueError(
                f"adaptation_step: motor caches were built at tau={motor.tau}, got {tau_vec}"
            )
    emb = {"N2": _embed_noisy(policy, "ae", chunk_b, tau)}
    if policy.action_count:
        emb["AQ"] = nc.expand_to(
            policy.params["aq.embed"],
            (chunk_b.shape[0], policy.action_count, policy.config.expert_width),
        )
    extra: list[LayerCache] = []
    for i, pc in enumerate(prefix.caches):
        cache = LayerCache(
            keys={g: pc.keys[g] for g in ("OBS", "SQ") if g in pc.keys},
            values={g: pc.values[g] for g in ("OBS", "SQ") if g in pc.values},
        )
        if policy.has_pe and policy.motor_count and motor is not None:
            cache = cache.merged_with(motor.caches[i])
        extra.append(cache)
    final, _ = stack_forward(emb, policy.layers, policy.mask, extra=extra)
    return _expert_read(policy, "ae", final["N2"])


def policy_velocity(
    policy: Policy, prefix: PrefixCaches, chunk, tau
) -> tuple[Tensor, Tensor | None, MotorCaches | None]:
    """Velocity used by the sampler, plus prior-branch diagnostics when present."""
    motor: MotorCaches | None = None
    pe_velocity: Tensor | None = None
    if policy.has_pe:
        motor, pe_velocity = prior_expert_step(policy, prefix, chunk, tau)
    velocity = adaptation_step(policy, prefix, motor, chunk, tau)
    return velocity, pe_velocity, motor


def denoise(
    policy: Policy,
    obs,
    instr,
    state,
    rng,
    velocity_fn=None,
    return_states: bool = False,
):
    """Integrate the velocity field from Gaussian noise in K Euler steps.

    rng is one Generator for a single observation or a sequence of Generators,
    one per batch element, so each trial keeps an independent stream.
    velocity_fn, when given, replaces the policy's field: it receives
    (chunk (B, H, A), tau) and returns an array of the same shape.
    """
    cfg = policy.config
    obs_b, single = _as_batched(obs, 3)
    batch = obs_b.shape[0]
    rngs = [rng] if isinstance(rng, np.random.Generator) else list(rng)
    if len(rngs) != batch:
        raise ValueError(f"denoise: {len(rngs)} rng streams for batch {batch}")
    chunk = np.stack([r.standard_normal((cfg.horizon, cfg.action_dim)) for r in rngs])

    prefix = None
    if velocity_fn is None:
        prefix = encode_prefix(policy, obs_b, instr, state)
    steps = cfg.denoise_steps
    states = [DenoiseState(tau=0.0, chunk=chunk.copy())]
    for k in range(steps):
        tau = k / steps
        if velocity_fn is not None:
            vel = np.asarray(velocity_fn(chunk, tau), dtype=np.float64)
        else:
            vel = policy_velocity(policy, prefix, chunk, tau)[0].data
        if vel.shape != chunk.shape:
            raise ValueError(f"denoise: velocity shape {vel.shape} != chunk shape {chunk.shape}")
        if not np.isfinite(vel).all():
            raise nc.NonFiniteError(f"denoise: non-finite velocity at step {k} (tau={tau})")
        chunk = chunk + vel / steps
        states.append(DenoiseState(tau=(k + 1) / steps, chunk=chunk.copy()))
    out = chunk[0] if single else chunk
    if return_states:
        return out, states
    return out


def fraction_from_counts(counts, trainable) -> float:
    """Trainable fraction with the prior-branch copy excluded from the base.

    The prior branch duplicates the pretrained expert, so the denominator is
    the size of the underlying model: all parameters minus that copy.
    """
    counts = dict(counts)
    unknown = set(counts) - set(PARAM_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
    trainable = set(trainable)
    missing = trainable - set(counts)
    if missing:
        raise ValueError(f"trainable groups not present in counts: {sorted(missing)}")
    denom = sum(counts.values()) - counts.get("prior_expert", 0)
    if denom <= 0:
        raise ValueError("no parameters outside the prior-branch copy")
    return sum(counts[g] for g in trainable) / denom


def trainable_fraction(policy: Policy, trainable=None) -> float:
    counts = policy.group_counts()
    if trainable is None:
        trainable = [g for g in counts if g not in policy.frozen_groups]
    return fraction_from_counts(counts, trainable)


def save_policy(policy: Policy, path) -> None:
    """Write a self-describing checkpoint: canonical JSON header + raw blob.

    The header line carries config, group layout, freeze state, normalization
    stats, and per-parameter shapes in sorted order; the blob is the matching
    concatenation of little-endian float64 parameter data.  Identical policies
    produce identical bytes.
    """
    names = sorted(policy.params)
    header = {
        "format": _CHECKPOINT_FORMAT,
        "config": asdict(policy.config),
        "has_pe": policy.has_pe,
        "counts": [policy.scene_count, policy.motor_count, policy.action_count],
        "frozen": sorted(policy.frozen_groups),
        "norm_mean": None if policy.norm_stats is None else policy.norm_stats[0].tolist(),
        "norm_std": None if policy.norm_stats is None else policy.norm_stats[1].tolist(),
        "params": [
            {"name": n, "group": policy.group_of[n], "shape": list(policy.params[n].shape)}
            for n in names
        ],
    }
    blob = b"".join(
        np.ascontiguousarray(policy.params[n].data, dtype="<f8").tobytes() for n in names
    )
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        fh.write(blob)


def load_policy(path) -> Policy:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line)
    if header.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"not a policy checkpoint: format {header.get('format')!r}")
    config = PolicyConfig(**header["config"])
    params: dict[str, Tensor] = {}
    offset = 0
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = blob[offset * 8 : (offset + size) * 8]
        if len(raw) != size * 8:
            raise ValueError("checkpoint blob truncated")
        params[spec["name"]] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        offset += size
    if offset * 8 != len(blob):
        raise ValueError("checkpoint blob has trailing bytes")
    norm_stats = None
    if header["norm_mean"] is not None:
        norm_stats = (np.array(header["norm_mean"]), np.array(header["norm_std"]))
    return Policy(
        config,
        params,
        has_pe=header["has_pe"],
        counts=tuple(header["counts"]),
        frozen_groups=frozenset(header["frozen"]),
        norm_stats=norm_stats,
    )
