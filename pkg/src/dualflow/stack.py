"""Transformer layers shared by several token groups under one block mask.

Each token group belongs to one weight component ("vlm" for OBS/SQ, "pe" for
N1/MQ, "ae" for AQ/N2).  Components may differ in hidden width but share the
head count and head dim, so keys and values from different components live in
one attention space.  A layer runs, for every present query group, pre-norm
attention over the concatenation of the key groups its mask row allows,
followed by a pre-norm GELU feed-forward.  Gathering exactly the allowed key
groups (block masks are all-or-nothing per group pair) makes cross-group
independence structural: a blocked group's values never enter the computation
at all.

Caches hold each group's per-layer keys and values as graph tensors, so a
later staged pass (for example the adaptation branch reading frozen prefix
caches) backpropagates into whatever produced the caches.  A staged pass over
cached groups is bit-identical to running all groups jointly, because layer
l's attention only ever reads layer-l keys and values of the other groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .flowmask import GROUP_ORDER, BlockMask
from .numcore import Tensor

__all__ = [
    "COMPONENT_OF",
    "ComponentWeights",
    "LayerWeights",
    "LayerCache",
    "layer_forward",
    "stack_forward",
]

COMPONENT_OF: dict[str, str] = {
    "OBS": "vlm",
    "SQ": "vlm",
    "N1": "pe",
    "MQ": "pe",
    "AQ": "ae",
    "N2": "ae",
}


@dataclass
class ComponentWeights:
    """One layer's weights for one component."""

    ln1_gain: Tensor
    ln1_bias: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_up: Tensor
    b_up: Tensor
    w_down: Tensor
    b_down: Tensor

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    @property
    def kv_width(self) -> int:
        return self.w_k.shape[1]


@dataclass
class LayerWeights:
    """Weights for one layer across components, plus the shared head layout."""

    components: dict[str, ComponentWeights]
    heads: int
    head_dim: int

    def __post_init__(self) -> None:
        if self.heads < 1 or self.head_dim < 1:
            raise ValueError("heads and head_dim must be positive")
        kv = self.heads * self.head_dim
        for name, comp in self.components.items():
            if comp.kv_width != kv:
                raise ValueError(
                    f"component {name!r}: q/k/v width {comp.kv_width} != heads*head_dim {kv}"
                )
            for label, w in (("w_k", comp.w_k), ("w_v", comp.w_v), ("w_q", comp.w_q)):
                if w.shape != (comp.width, kv):
                    raise ValueError(f"component {name!r}: {label} shape {w.shape}")
            if comp.w_o.shape != (kv, comp.width):
                raise ValueError(f"component {name!r}: w_o shape {comp.w_o.shape}")

    def component_for(self, group: str) -> ComponentWeights:
        comp_name = COMPONENT_OF[group]
        if comp_name not in self.components:
            raise ValueError(f"group {group} needs component {comp_name!r}, which is absent")
        return self.components[comp_name]


@dataclass
class LayerCache:
    """Per-group keys and values of one layer, shaped (B, heads, T, head_dim)."""

    keys: dict[str, Tensor] = field(default_factory=dict)
    values: dict[str, Tensor] = field(default_factory=dict)

    def merged_with(self, other: "LayerCache | None") -> "LayerCache":
        if other is None:
            return self
        overlap = set(self.keys) & set(other.keys)
        if overlap:
            raise ValueError(f"cache merge: groups {sorted(overlap)} present on both sides")
        return LayerCache(
            keys={**self.keys, **other.keys}, values={**self.values, **other.values}
        )


def _project_heads(x: Tensor, w: Tensor, b: Tensor, heads: int, head_dim: int) -> Tensor:
    """(B, T, width) -> (B, heads, T, head_dim)."""
    batch, tokens, _ = x.shape
    out = nc.add(nc.matmul(x, w), nc.expand_to(b, (batch, tokens, heads * head_dim)))
    out = nc.reshape(out, (batch, tokens, heads, head_dim))
    return nc.transpose(out, (0, 2, 1, 3))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    batch, tokens, _ = x.shape
    return nc.add(nc.matmul(x, w), nc.expand_to(b, (batch, tokens, w.shape[1])))


def layer_forward(
    hidden: dict[str, Tensor],
    weights: LayerWeights,
    mask: BlockMask,
    extra: LayerCache | None = None,
) -> tuple[dict[str, Tensor], LayerCache]:
    """Advance every present group by one layer.

    hidden maps group tag -> (B, T, width) activations; extra supplies keys and
    values of groups computed elsewhere (cached prefix groups).  Returns the
    next activations and this layer's own-group cache.
    """
    if not hidden:
        raise ValueError("layer_forward: no token groups present")
    present = [g for g in GROUP_ORDER if g in hidden]
    if set(hidden) - set(present):
        raise ValueError(f"layer_forward: unknown groups {sorted(set(hidden) - set(present))}")
    batch = hidden[present[0]].shape[0]
    for g in present:
        t = hidden[g]
        if t.ndim != 3 or t.shape[0] != batch:
            raise ValueError(f"layer_forward: group {g} has shape {t.shape}, expected (B, T, width)")
        if t.shape[2] != weights.component_for(g).width:
            raise ValueError(
                f"layer_forward: group {g} width {t.shape[2]} != component width "
                f"{weights.component_for(g).width}"
            )

    heads, head_dim = weights.heads, weights.head_dim
    own = LayerCache()
    queries: dict[str, Tensor] = {}
    normed: dict[str, Tensor] = {}
    for g in present:
        comp = weights.component_for(g)
        x = nc.layer_norm(hidden[g], comp.ln1_gain, comp.ln1_bias)
        normed[g] = x
        queries[g] = _project_heads(x, comp.w_q, comp.b_q, heads, head_dim)
        own.keys[g] = _project_heads(x, comp.w_k, comp.b_k, heads, head_dim)
        own.values[g] = _project_heads(x, comp.w_v, comp.b_v, heads, head_dim)

    avail = own.merged_with(extra)
    scale = 1.0 / np.sqrt(float(head_dim))
    next_hidden: dict[str, Tensor] = {}
    for g in present:
        key_groups = [k for k in GROUP_ORDER if k in avail.keys and mask.allows(g, k)]
        if not key_groups:
            raise nc.MaskError(f"layer_forward: group {g} has no visible key group")
        k_cat = nc.concat([avail.keys[k] for k in key_groups], axis=2)
        v_cat = nc.concat([avail.values[k] for k in key_groups], axis=2)
        scores = nc.scale(nc.matmul(queries[g], nc.transpose(k_cat, (0, 1, 3, 2))), scale)
        attn = nc.masked_softmax(scores)
        ctx = nc.matmul(attn, v_cat)
        tokens = ctx.shape[2]
        merged = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (batch, tokens, heads * head_dim))
        comp = weights.component_for(g)
        h = nc.add(hidden[g], _linear(merged, comp.w_o, comp.b_o))
        y = nc.layer_norm(h, comp.ln2_gain, comp.ln2_bias)
        y = _linear(nc.gelu(_linear(y, comp.w_up, comp.b_up)), comp.w_down, comp.b_down)
        next_hidden[g] = nc.add(h, y)
    return next_hidden, own


def stack_forward(
    embeddings: dict[str, Tensor],
    layers: list[LayerWeights],
    mask: BlockMask,
    extra: list[LayerCache] | None = None,
) -> tuple[dict[str, Tensor], list[LayerCache]]:
    """Run all layers, collecting each layer's own-group caches.

    extra, when given, must hold one cache per layer for groups computed in an
    earlier staged pass.
    """
    if not layers:
        raise ValueError("stack_forward: no layers")
    if extra is not None and len(extra) != len(layers):
        raise ValueError(f"stack_forward: {len(extra)} extra caches for {len(layers)} layers")
    hidden = dict(embeddings)
    caches: list[LayerCache] = []
    for i, layer in enumerate(layers):
        hidden, cache = layer_forward(hidden, layer, mask, extra[i] if extra else None)
        caches.append(cache)
    return hidden, caches
