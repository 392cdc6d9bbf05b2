"""Shared-stack layers: reference equality, isolation, staged-vs-joint parity."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.special import erf

from dualflow import flowmask as fm
from dualflow import numcore as nc
from dualflow import stack as sk


def make_component(rng, width, heads, head_dim, ffn_mult=2):
    kv = heads * head_dim
    hiddenf = width * ffn_mult

    def w(*shape):
        return nc.tensor(rng.normal(scale=0.5 / np.sqrt(shape[0]), size=shape), requires_grad=True)

    return sk.ComponentWeights(
        ln1_gain=nc.tensor(np.ones(width), requires_grad=True),
        ln1_bias=nc.tensor(np.zeros(width), requires_grad=True),
        w_q=w(width, kv),
        b_q=nc.tensor(np.zeros(kv), requires_grad=True),
        w_k=w(width, kv),
        b_k=nc.tensor(np.zeros(kv), requires_grad=True),
        w_v=w(width, kv),
        b_v=nc.tensor(np.zeros(kv), requires_grad=True),
        w_o=w(kv, width),
        b_o=nc.tensor(np.zeros(width), requires_grad=True),
        ln2_gain=nc.tensor(np.ones(width), requires_grad=True),
        ln2_bias=nc.tensor(np.zeros(width), requires_grad=True),
        w_up=w(width, hiddenf),
        b_up=nc.tensor(np.zeros(hiddenf), requires_grad=True),
        w_down=w(hiddenf, width),
        b_down=nc.tensor(np.zeros(width), requires_grad=True),
    )


def make_layer(rng, vlm_width=10, expert_width=8, heads=2, head_dim=4):
    return sk.LayerWeights(
        components={
            "vlm": make_component(rng, vlm_width, heads, head_dim),
            "pe": make_component(rng, expert_width, heads, head_dim),
            "ae": make_component(rng, expert_width, heads, head_dim),
        },
        heads=heads,
        head_dim=head_dim,
    )


def ref_layer_norm(x, gain, bias, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def ref_gelu(x):
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def ref_single_group_block(x, comp, heads, head_dim):
    """Plain pre-norm transformer block, written independently in numpy."""
    batch, tokens, width = x.shape
    xn = ref_layer_norm(x, comp.ln1_gain.data, comp.ln1_bias.data)

    def proj(w, b):
        y = xn @ w.data + b.data
        return y.reshape(batch, tokens, heads, head_dim).transpose(0, 2, 1, 3)

    q, k, v = proj(comp.w_q, comp.b_q), proj(comp.w_k, comp.b_k), proj(comp.w_v, comp.b_v)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(head_dim)
    e = np.exp(scores - scores.max(-1, keepdims=True))
    attn = e / e.sum(-1, keepdims=True)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(batch, tokens, heads * head_dim)
    h = x + ctx @ comp.w_o.data + comp.b_o.data
    y = ref_layer_norm(h, comp.ln2_gain.data, comp.ln2_bias.data)
    return h + ref_gelu(y @ comp.w_up.data + comp.b_up.data) @ comp.w_down.data + comp.b_down.data


def all_allowed():
    return fm.BlockMask(np.ones((6, 6), dtype=bool))


def test_single_group_matches_reference_transformer_block():
    rng = np.random.default_rng(0)
    layer = make_layer(rng)
    x = rng.normal(size=(2, 5, 10))
    out, cache = sk.layer_forward({"OBS": nc.tensor(x)}, layer, all_allowed())
    ref = ref_single_group_block(x, layer.components["vlm"], layer.heads, layer.head_dim)
    assert np.allclose(out["OBS"].data, ref, atol=1e-12)
    assert cache.keys["OBS"].shape == (2, layer.heads, 5, layer.head_dim)


def test_blocked_groups_leave_pretrained_groups_bit_identical():
    rng = np.random.default_rng(1)
    layer = make_layer(rng)
    mask = fm.canonical_mask()
    base = {
        "OBS": rng.normal(size=(1, 4, 10)),
        "SQ": rng.normal(size=(1, 2, 10)),
        "N1": rng.normal(size=(1, 3, 8)),
        "MQ": rng.normal(size=(1, 2, 8)),
        "AQ": rng.normal(size=(1, 2, 8)),
        "N2": rng.normal(size=(1, 3, 8)),
    }
    out1, _ = sk.layer_forward({g: nc.tensor(v) for g, v in base.items()}, layer, mask)
    moved = {g: v + (0.0 if g in ("OBS", "N1") else rng.normal(size=v.shape)) for g, v in base.items()}
    # Zeroing instead of shifting must give the same OBS/N1 result too.
    zeroed = {g: (v if g in ("OBS", "N1") else np.zeros_like(v)) for g, v in base.items()}
    out2, _ = sk.layer_forward({g: nc.tensor(v) for g, v in moved.items()}, layer, mask)
    out3, _ = sk.layer_forward({g: nc.tensor(v) for g, v in zeroed.items()}, layer, mask)
    for g in ("OBS", "N1"):
        assert np.array_equal(out1[g].data, out2[g].data)
        assert np.array_equal(out1[g].data, out3[g].data)


def test_flow_soundness_multilayer_reachability():
    rng = np.random.default_rng(2)
    depth = 3
    layers = [make_layer(rng) for _ in range(depth)]
    mask = fm.canonical_mask()
    sizes = {"OBS": 4, "SQ": 2, "N1": 3, "MQ": 2, "AQ": 2, "N2": 3}
    widths = {"OBS": 10, "SQ": 10, "N1": 8, "MQ": 8, "AQ": 8, "N2": 8}
    base = {g: rng.normal(size=(1, sizes[g], widths[g])) for g in fm.GROUP_ORDER}
    out_base, _ = sk.stack_forward({g: nc.tensor(v) for g, v in base.items()}, layers, mask)
    reach = fm.reachability(mask, depth)
    for h in fm.GROUP_ORDER:
        moved = {g: (v + rng.normal(size=v.shape) if g == h else v) for g, v in base.items()}
        out_h, _ = sk.stack_forward({g: nc.tensor(v) for g, v in moved.items()}, layers, mask)
        for g in fm.GROUP_ORDER:
            if h not in reach[g] and h != g:
                assert np.array_equal(out_base[g].data, out_h[g].data), (g, h)
            elif h == g or h in reach[g]:
                # Influence is expected along mask edges; check it materializes
                # for the direct self case at least.
                if h == g:
                    assert not np.array_equal(out_base[g].data, out_h[g].data)


def test_staged_equals_joint_bitwise():
    rng = np.random.default_rng(3)
    depth = 2
    layers = [make_layer(rng) for _ in range(depth)]
    mask = fm.canonical_mask()
    base = {
        "OBS": rng.normal(size=(2, 4, 10)),
        "SQ": rng.normal(size=(2, 2, 10)),
        "N1": rng.normal(size=(2, 3, 8)),
        "MQ": rng.normal(size=(2, 2, 8)),
        "AQ": rng.normal(size=(2, 2, 8)),
        "N2": rng.normal(size=(2, 3, 8)),
    }
    joint, _ = sk.stack_forward({g: nc.tensor(v) for g, v in base.items()}, layers, mask)

    prefix_final, prefix_caches = sk.stack_forward(
        {g: nc.tensor(base[g]) for g in ("OBS", "SQ")}, layers, mask
    )
    pe_final, pe_caches = sk.stack_forward(
        {g: nc.tensor(base[g]) for g in ("N1", "MQ")},
        layers,
        mask,
        extra=[LayerCacheSub(c, ("OBS",)) for c in prefix_caches],
    )
    ae_extra = [
        LayerCacheSub(pc, ("OBS", "SQ")).merged_with(LayerCacheSub(mc, ("MQ",)))
        for pc, mc in zip(prefix_caches, pe_caches)
    ]
    ae_final, _ = sk.stack_forward(
        {g: nc.tensor(base[g]) for g in ("AQ", "N2")}, layers, mask, extra=ae_extra
    )
    for g in ("OBS", "SQ"):
        assert np.array_equal(joint[g].data, prefix_final[g].data)
    for g in ("N1", "MQ"):
        assert np.array_equal(joint[g].data, pe_final[g].data)
    for g in ("AQ", "N2"):
        assert np.array_equal(joint[g].data, ae_final[g].data)


def LayerCacheSub(cache: sk.LayerCache, groups) -> sk.LayerCache:
    return sk.LayerCache(
        keys={g: cache.keys[g] for g in groups},
        values={g: cache.values[g] for g in groups},
    )


def test_gradient_flows_through_extra_caches():
    rng = np.random.default_rng(4)
    layer = make_layer(rng)
    mask = fm.canonical_mask()
    obs = nc.tensor(rng.normal(size=(1, 3, 10)), requires_grad=True)
    n1 = nc.tensor(rng.normal(size=(1, 2, 8)))
    with nc.Tape() as tape:
        _, pre_cache = sk.layer_forward({"OBS": obs}, layer, mask)
        out, _ = sk.layer_forward(
            {"N1": n1},
            layer,
            mask,
            extra=sk.LayerCache(
                keys={"OBS": pre_cache.keys["OBS"]}, values={"OBS": pre_cache.values["OBS"]}
            ),
        )
        loss = nc.mean_all(nc.mul(out["N1"], out["N1"]))
    grads = nc.backward(tape, np.asarray(1.0))
    assert grads[obs].shape == obs.shape
    assert float(np.abs(grads[obs]).max()) > 0.0
    assert loss.item() > 0.0


def test_group_with_no_visible_keys_raises():
    rng = np.random.default_rng(5)
    layer = make_layer(rng)
    grid = np.ones((6, 6), dtype=bool)
    grid[0, :] = False  # OBS row: everything blocked, including itself
    mask = fm.BlockMask(grid)
    with pytest.raises(nc.MaskError, match="no visible key group"):
        sk.layer_forward({"OBS": nc.tensor(rng.normal(size=(1, 2, 10)))}, layer, mask)


def test_width_mismatch_is_construction_error():
    rng = np.random.default_rng(6)
    comp = make_component(rng, width=8, heads=2, head_dim=4)
    with pytest.raises(ValueError, match="heads\\*head_dim"):
        sk.LayerWeights(components={"vlm": comp}, heads=2, head_dim=5)


def test_hidden_width_mismatch_raises():
    rng = np.random.default_rng(7)
    layer = make_layer(rng)
    with pytest.raises(ValueError, match="width"):
        sk.layer_forward({"OBS": nc.tensor(rng.normal(size=(1, 3, 8)))}, layer, all_allowed())


def test_stack_gradcheck_composite():
    rng = np.random.default_rng(8)
    layer = make_layer(rng, vlm_width=6, expert_width=6, heads=1, head_dim=4)
    mask = fm.canonical_mask()
    obs = nc.tensor(rng.normal(size=(1, 2, 6)), requires_grad=True)
    n1 = nc.tensor(rng.normal(size=(1, 2, 6)), requires_grad=True)

    def f(o, n):
        out, _ = sk.layer_forward({"OBS": o, "N1": n}, layer, mask)
        return nc.mean_all(nc.mul(out["N1"], out["N1"]))

    assert nc.grad_check(f, [obs, n1], eps=1e-5, directions=12) < 1e-6
