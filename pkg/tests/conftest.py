"""Shared tiny-policy helpers for the test suite."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from dualflow import dualexpert as dx


def make_cfg(**kw) -> dx.PolicyConfig:
    base = dict(
        layers=2,
        vlm_width=12,
        expert_width=8,
        heads=2,
        head_dim=4,
        ffn_mult=2,
        horizon=3,
        action_dim=2,
        scene_queries=2,
        motor_queries=2,
        action_queries=2,
        denoise_steps=4,
        obs_grid=4,
        obs_channels=2,
        instr_vocab=4,
        state_dim=2,
    )
    base.update(kw)
    return dx.PolicyConfig(**base)


def sample_inputs(cfg: dx.PolicyConfig, batch: int = 2, seed: int = 0):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0, 1, size=(batch, cfg.obs_channels, cfg.obs_grid, cfg.obs_grid))
    instr = rng.integers(0, cfg.instr_vocab, size=batch)
    state = rng.uniform(0, 1, size=(batch, cfg.state_dim))
    chunk = rng.normal(size=(batch, cfg.horizon, cfg.action_dim))
    return obs, instr, state, chunk


def toy_data(cfg: dx.PolicyConfig, n: int = 6, seed: int = 0) -> SimpleNamespace:
    rng = np.random.default_rng(seed)
    return SimpleNamespace(
        obs=rng.uniform(0, 1, size=(n, cfg.obs_channels, cfg.obs_grid, cfg.obs_grid)),
        instr=rng.integers(0, cfg.instr_vocab, size=n),
        state=rng.uniform(0, 1, size=(n, cfg.state_dim)),
        chunks=rng.normal(size=(n, cfg.horizon, cfg.action_dim)),
    )
