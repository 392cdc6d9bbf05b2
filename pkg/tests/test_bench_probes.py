"""Independence probes and frozen-group drift measurement."""

import numpy as np
import pytest

import dualflow.dualexpert as dx
import dualflow.trainkit as tk
from dualflow.bench.probes import SINKS, SOURCES, independence_probe, prior_drift
from dualflow.bench.variants import build_policy

from conftest import make_cfg, sample_inputs, toy_data


@pytest.fixture(scope="module")
def pretrained():
    return dx.init_single(make_cfg(), seed=3)


@pytest.fixture(scope="module")
def adapted(pretrained):
    return build_policy(pretrained, "priorvla", seed=7)


@pytest.fixture(scope="module")
def probe_batch(pretrained):
    obs, instr, state, _ = sample_inputs(pretrained.config, batch=3, seed=12)
    return obs, instr, state


def test_scene_queries_never_reach_prior_velocity(adapted, probe_batch):
    assert independence_probe(adapted, "scene_queries", "pe_velocity", probe_batch) == 0.0


def test_action_queries_never_reach_prior_velocity(adapted, probe_batch):
    assert independence_probe(adapted, "action_queries", "pe_velocity", probe_batch) == 0.0


def test_prior_velocity_head_never_reaches_sampled_actions(adapted, probe_batch):
    assert independence_probe(adapted, "pe_velocity_head", "action_chunk", probe_batch) == 0.0


def test_motor_queries_do_reach_adaptation_velocity(adapted, probe_batch):
    assert independence_probe(adapted, "motor_queries", "ae_velocity", probe_batch) > 0.0


def test_motor_queries_do_reach_sampled_actions(adapted, probe_batch):
    assert independence_probe(adapted, "motor_queries", "action_chunk", probe_batch) > 0.0


def test_probe_restores_parameters(adapted, probe_batch):
    before = {n: t.data.copy() for n, t in adapted.params.items()}
    independence_probe(adapted, "scene_queries", "ae_velocity", probe_batch)
    independence_probe(adapted, "pe_velocity_head", "pe_velocity", probe_batch)
    for name, t in adapted.params.items():
        assert np.array_equal(t.data, before[name])


def test_probe_validates_source_sink_and_layout(pretrained, adapted, probe_batch):
    with pytest.raises(ValueError, match="unknown source"):
        independence_probe(adapted, "nope", "ae_velocity", probe_batch)
    with pytest.raises(ValueError, match="unknown sink"):
        independence_probe(adapted, "scene_queries", "nope", probe_batch)
    # The single-expert policy has no query or prior parameters.
    with pytest.raises(ValueError, match="absent"):
        independence_probe(pretrained, "scene_queries", "ae_velocity", probe_batch)
    with pytest.raises(ValueError, match="prior branch"):
        independence_probe(
            build_policy(pretrained, "wo_pe", seed=5), "scene_queries", "pe_velocity", probe_batch
        )


def test_probe_registry_names():
    assert set(SOURCES) == {
        "scene_queries",
        "motor_queries",
        "action_queries",
        "adaptation_tokens",
        "pe_velocity_head",
    }
    assert set(SINKS) == {"pe_velocity", "ae_velocity", "action_chunk"}


def test_prior_drift_zero_for_identical_policies(adapted, probe_batch):
    drift = prior_drift(adapted, adapted, probe_batch)
    assert set(drift) == {"prior_expert", "vlm_core"}
    assert drift["prior_expert"] == (0.0, 0.0)
    assert drift["vlm_core"] == (0.0, 0.0)


def test_prior_drift_zero_after_priorvla_training(pretrained, probe_batch):
    cfg = pretrained.config
    reference = build_policy(pretrained, "priorvla", seed=7)
    policy = build_policy(pretrained, "priorvla", seed=7)
    data = toy_data(cfg, n=8, seed=2)
    config = tk.TrainConfig(
        steps=6, batch_size=2, peak_lr=1e-3, decay_lr=1e-4, warmup_steps=2, decay_steps=6
    )
    tk.train(policy, data, config)
    drift = prior_drift(reference, policy, probe_batch)
    assert drift["prior_expert"] == (0.0, 0.0)
    assert drift["vlm_core"] == (0.0, 0.0)
    # Positive control: the trainable groups moved.
    moved = prior_drift(reference, policy, probe_batch, groups=["adaptation_expert"])
    assert moved["adaptation_expert"][0] > 0.0
    assert moved["adaptation_expert"][1] > 0.0


def test_prior_drift_detects_trainable_pe_motion(pretrained, probe_batch):
    reference = build_policy(pretrained, "trainable_pe", seed=7)
    policy = build_policy(pretrained, "trainable_pe", seed=7)
    data = toy_data(pretrained.config, n=4, seed=2)
    config = tk.TrainConfig(
        steps=1, batch_size=2, peak_lr=1e-2, decay_lr=1e-3, warmup_steps=0, decay_steps=1
    )
    tk.train(policy, data, config)
    drift = prior_drift(reference, policy, probe_batch, groups=["prior_expert"])
    assert drift["prior_expert"][0] > 0.0


def test_prior_drift_detects_full_ft_vlm_motion(pretrained, probe_batch):
    reference = build_policy(pretrained, "full_ft", seed=7)
    policy = build_policy(pretrained, "full_ft", seed=7)
    data = toy_data(pretrained.config, n=4, seed=2)
    config = tk.TrainConfig(
        steps=1, batch_size=2, peak_lr=1e-2, decay_lr=1e-3, warmup_steps=0, decay_steps=1
    )
    tk.train(policy, data, config)
    drift = prior_drift(reference, policy, probe_batch, groups=["vlm_core"])
    assert drift["vlm_core"][0] > 0.0
    assert drift["vlm_core"][1] > 0.0


def test_prior_drift_validates_checkpoints(pretrained, adapted, probe_batch):
    other_cfg = make_cfg(vlm_width=16)
    other = dx.init_single(other_cfg, seed=0)
    with pytest.raises(ValueError, match="config"):
        prior_drift(other, adapted, probe_batch)
    with pytest.raises(ValueError, match="parameter sets"):
        prior_drift(pretrained, adapted, probe_batch)
    with pytest.raises(ValueError, match="not present"):
        prior_drift(
            build_policy(pretrained, "full_ft", seed=1),
            build_policy(pretrained, "full_ft", seed=1),
            probe_batch,
            groups=["prior_expert"],
        )


def test_prior_drift_accepts_checkpoint_paths(adapted, probe_batch, tmp_path):
    path = tmp_path / "pol.ckpt"
    dx.save_policy(adapted, path)
    drift = prior_drift(path, adapted, probe_batch)
    assert drift["prior_expert"] == (0.0, 0.0)
