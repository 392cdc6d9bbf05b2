"""Benchmark harness: pretrain, adapt per variant, evaluate, and report.

The directional experiment mirrors the adaptation protocol at desk scale:
pretrain one single-expert policy on a broad mix of task families, hold one
family out, adapt to it from a small demo set under each variant, and score
closed-loop success on matched in-distribution and shifted conditions.  Every
stage is seeded, so a config plus a seed list reproduces the tables bit for
bit.  Baseline for paired comparisons is always full fine-tuning.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import __version__
from .. import toyworld as tw
from ..dualexpert import Policy, PolicyConfig, denoise, init_single, save_policy
from ..trainkit import TrainConfig, TrainLog, train, with_ema_weights
from .stats import avg_gain, format_p, sign_test
from .variants import VARIANTS, build_policy

__all__ = [
    "BenchConfig",
    "SuccessTable",
    "RunManifest",
    "make_pretrain_dataset",
    "make_adapt_dataset",
    "run_pretrain",
    "run_adapt",
    "evaluate",
    "consistency_row",
    "golden_rows",
    "report",
    "run_directional",
]


@dataclass(frozen=True)
class BenchConfig:
    """Everything a benchmark run depends on; hashable for the manifest.

    Defaults are calibrated so the pretrained policy clears 75%+ success on
    its own families and the full directional pipeline (pretrain + 8 paired
    adaptations + evaluations) fits a small single-core CPU budget.
    """

    # policy dimensions
    layers: int = 3
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
    obs_grid: int = 8
    obs_channels: int = 2
    instr_vocab: int = 8
    state_dim: int = 2
    # world and data
    pretrain_families: tuple[str, ...] = ("reach", "stack", "sweep")
    adapt_family: str = "transport"
    pretrain_demos: int = 100
    adapt_demos: int = 10
    execute: int = 2
    max_steps: int = 80
    success_threshold: float = tw.SUCCESS_RADIUS
    id_factors: tw.FactorSpec = tw.ID_FACTORS
    ood_factors: tw.FactorSpec = tw.OOD_FACTORS
    # optimization
    pretrain_steps: int = 10000
    adapt_steps: int = 1200
    batch_size: int = 8
    pretrain_peak_lr: float = 3e-3
    pretrain_decay_lr: float = 3e-4
    adapt_peak_lr: float = 2e-3
    adapt_decay_lr: float = 2e-4
    warmup_steps: int = 200
    ema_decay: float = 0.99
    eval_ema: bool = True
    # evaluation
    eval_trials: int = 32
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7)

    def __post_init__(self) -> None:
        for family in (*self.pretrain_families, self.adapt_family):
            if family not in tw.FAMILIES:
                raise ValueError(f"unknown task family {family!r}")
        if self.adapt_family in self.pretrain_families:
            raise ValueError("adapt_family must be held out of pretrain_families")
        if self.pretrain_demos < 1 or self.adapt_demos < 1:
            raise ValueError("demo counts must be >= 1")
        if self.eval_trials < 1:
            raise ValueError("eval_trials must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")

    def policy_config(self) -> PolicyConfig:
        names = {f.name for f in fields(PolicyConfig)}
        return PolicyConfig(**{k: getattr(self, k) for k in names})

    def pretrain_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            steps=self.pretrain_steps,
            batch_size=self.batch_size,
            peak_lr=self.pretrain_peak_lr,
            decay_lr=self.pretrain_decay_lr,
            warmup_steps=self.warmup_steps,
            decay_steps=max(1, self.pretrain_steps),
            ema_decay=self.ema_decay,
            seed=seed,
            eval_ema=self.eval_ema,
        )

    def adapt_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            steps=self.adapt_steps,
            batch_size=self.batch_size,
            peak_lr=self.adapt_peak_lr,
            decay_lr=self.adapt_decay_lr,
            warmup_steps=min(self.warmup_steps, self.adapt_steps // 4),
            decay_steps=max(1, self.adapt_steps),
            ema_decay=self.ema_decay,
            seed=seed,
            eval_ema=self.eval_ema,
        )

    def factors_for(self, mode: str) -> tw.FactorSpec:
        if mode == "ID":
            return self.id_factors
        if mode == "OOD":
            return self.ood_factors
        raise ValueError(f"unknown evaluation mode {mode!r}; expected 'ID' or 'OOD'")

    def single_factor(self, name: str) -> tw.FactorSpec:
        """OOD shift in one factor only; the rest stay at their ID values."""
        if name not in {f.name for f in fields(tw.FactorSpec)}:
            raise ValueError(f"unknown factor {name!r}")
        return tw.FactorSpec(
            **{
                f.name: getattr(self.ood_factors if f.name == name else self.id_factors, f.name)
                for f in fields(tw.FactorSpec)
            }
        )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tw.FactorSpec):
                value = list(value.as_tuple())
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "BenchConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        kwargs = dict(raw)
        for key in ("id_factors", "ood_factors"):
            if key in kwargs and not isinstance(kwargs[key], tw.FactorSpec):
                kwargs[key] = tw.FactorSpec(*kwargs[key])
        for key, value in kwargs.items():
            if isinstance(value, list):
                kwargs[key] = tuple(value)
        return cls(**kwargs)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1, np.uint64)[0])


def _derive_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


# Fixed stream tags so pretraining, adaptation data, and evaluation never share draws.
_STREAM_PRETRAIN_DATA = 101
_STREAM_ADAPT_DATA = 202
_STREAM_EVAL_TASK = 303
_STREAM_EVAL_NOISE = 404


def make_pretrain_dataset(config: BenchConfig, seed: int = 0) -> tw.Dataset:
    """Demos for every pretrain-family instruction under broad factor draws."""
    instructions = [
        inst for family in config.pretrain_families for inst in tw.family_instructions(family)
    ]
    rng = _derive_rng(seed, _STREAM_PRETRAIN_DATA)
    return tw.make_dataset(
        instructions,
        config.pretrain_demos,
        tw.sample_broad_factors,
        rng,
        horizon=config.horizon,
        grid=config.obs_grid,
        max_steps=config.max_steps,
    )


def make_adapt_dataset(config: BenchConfig, seed: int = 0) -> tw.Dataset:
    """Few demos of the held-out family at nominal conditions."""
    rng = _derive_rng(seed, _STREAM_ADAPT_DATA)
    return tw.make_dataset(
        tw.family_instructions(config.adapt_family),
        config.adapt_demos,
        config.id_factors,
        rng,
        horizon=config.horizon,
        grid=config.obs_grid,
        max_steps=config.max_steps,
    )


def _attach_norm(policy: Policy, dataset: tw.Dataset) -> None:
    policy.norm_stats = (dataset.mean.copy(), dataset.std.copy())


def run_pretrain(
    config: BenchConfig,
    seed: int = 0,
    out_dir=None,
    progress_every: int = 0,
) -> tuple[Policy, TrainLog, tw.Dataset]:
    """Train the single-expert policy on the pretrain families.

    Returns the evaluation policy (EMA weights when config.eval_ema), the
    training log, and the dataset.  With out_dir set, writes checkpoint,
    dataset, and log under it.
    """
    dataset = make_pretrain_dataset(config, seed)
    policy = init_single(config.policy_config(), seed=seed)
    _attach_norm(policy, dataset)
    log, state = train(policy, dataset, config.pretrain_config(seed), progress_every=progress_every)
    eval_policy = with_ema_weights(policy, state) if config.eval_ema else policy
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_policy(eval_policy, out / "pretrained.ckpt")
        dataset.save(out / "pretrain_data.bin")
        log.write_csv(out / "pretrain_log.csv")
    return eval_policy, log, dataset


def run_adapt(
    pretrained: Policy,
    variant: str,
    dataset: tw.Dataset,
    config: BenchConfig,
    seed: int = 0,
    out_dir=None,
    progress_every: int = 0,
) -> tuple[Policy, TrainLog]:
    """Adapt the pretrained policy to new data under one variant's layout."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    policy = build_policy(pretrained, variant, seed=_derive_seed(seed, zlib.crc32(variant.encode())))
    _attach_norm(policy, dataset)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        # Pre-adaptation snapshot so drift checks have a same-layout reference.
        save_policy(policy, out / f"{variant}_seed{seed}_init.ckpt")
    log, state = train(policy, dataset, config.adapt_config(seed), progress_every=progress_every)
    eval_policy = with_ema_weights(policy, state) if config.eval_ema else policy
    if out is not None:
        save_policy(eval_policy, out / f"{variant}_seed{seed}.ckpt")
        log.write_csv(out / f"{variant}_seed{seed}_log.csv")
    return eval_policy, log


@dataclass
class SuccessTable:
    """Per-(task, mode, method) success counts with deterministic CSV form."""

    rows: list[dict] = field(default_factory=list)

    def add(self, task: str, mode: str, method: str, trials: int, successes: int) -> None:
        if trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0 <= successes <= trials:
            raise ValueError(f"successes {successes} outside [0, {trials}]")
        self.rows.append(
            {
                "task": str(task),
                "mode": str(mode),
                "method": str(method),
                "trials": int(trials),
                "successes": int(successes),
            }
        )

    def extend(self, other: "SuccessTable") -> None:
        self.rows.extend(dict(r) for r in other.rows)

    def rate(self, task: str, mode: str, method: str) -> float:
        for r in self.rows:
            if (r["task"], r["mode"], r["method"]) == (task, mode, method):
                return r["successes"] / r["trials"]
        raise KeyError(f"no row for {(task, mode, method)}")

    def method_rate(self, method: str, mode: str | None = None) -> float:
        trials = successes = 0
        for r in self.rows:
            if r["method"] == method and (mode is None or r["mode"] == mode):
                trials += r["trials"]
                successes += r["successes"]
        if trials == 0:
            raise KeyError(f"no rows for method {method!r} mode {mode!r}")
        return successes / trials

    def pairs(self, baseline: str, method: str, mode: str | None = None) -> list[tuple[float, float]]:
        """Success-rate pairs (baseline, method) matched on (task, mode)."""
        key = lambda r: (r["task"], r["mode"])
        base = {key(r): r for r in self.rows if r["method"] == baseline}
        out = []
        for r in sorted(
            (r for r in self.rows if r["method"] == method), key=lambda r: (r["task"], r["mode"])
        ):
            if mode is not None and r["mode"] != mode:
                continue
            b = base.get(key(r))
            if b is not None:
                out.append((b["successes"] / b["trials"], r["successes"] / r["trials"]))
        return out

    def csv_lines(self) -> list[str]:
        lines = ["task,mode,method,trials,successes,rate"]
        for r in sorted(self.rows, key=lambda r: (r["task"], r["mode"], r["method"])):
            rate = r["successes"] / r["trials"]
            lines.append(
                f"{r['task']},{r['mode']},{r['method']},{r['trials']},{r['successes']},{rate:.6f}"
            )
        return lines

    @classmethod
    def from_csv(cls, path) -> "SuccessTable":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != "task,mode,method,trials,successes,rate":
            raise ValueError(f"{path}: not a success table")
        table = cls()
        for line in lines[1:]:
            task, mode, method, trials, successes, _rate = line.split(",")
            table.add(task, mode, method, int(trials), int(successes))
        return table

    def methods(self) -> list[str]:
        return sorted({r["method"] for r in self.rows})


def evaluate(
    actor,
    instructions: Sequence,
    trials,
    mode: str,
    config: BenchConfig,
    seed: int = 0,
    method: str = "policy",
    task_suffix: str = "",
    factors: tw.FactorSpec | None = None,
) -> SuccessTable:
    """Closed-loop success of a policy or controller on fresh task instances.

    trials is a count or an explicit iterable of trial indices; instance
    seeds and noise streams derive from (seed, instruction, trial), so any
    partition of the trial list scores identically to one batched call.
    Policies run batched in lockstep; callables run per episode through the
    chunked rollout loop.  factors overrides the preset implied by mode,
    which then serves only as the row label (single-factor sweeps).
    """
    if factors is None:
        factors = config.factors_for(mode)
    trial_ids = list(range(trials)) if isinstance(trials, int) else [int(t) for t in trials]
    if not trial_ids:
        raise ValueError("evaluate: empty trial list")
    table = SuccessTable()
    for instruction in instructions:
        inst, name = tw._resolve_instruction(instruction)
        if isinstance(actor, Policy):
            successes = _evaluate_policy_batch(actor, inst, trial_ids, factors, config, seed)
        elif callable(actor):
            successes = 0
            for t in trial_ids:
                task = tw.task_instance(inst, _derive_seed(seed, inst, t, _STREAM_EVAL_TASK), factors)
                traj = tw.rollout(
                    actor,
                    task,
                    max_steps=config.max_steps,
                    horizon=config.horizon,
                    execute=config.execute,
                    grid=config.obs_grid,
                    threshold=config.success_threshold,
                )
                successes += int(traj.success)
        else:
            raise TypeError("actor must be a Policy or a controller callable")
        table.add(name + task_suffix, mode, method, len(trial_ids), successes)
    return table


def _evaluate_policy_batch(
    policy: Policy,
    inst: int,
    trial_ids: list[int],
    factors: tw.FactorSpec,
    config: BenchConfig,
    seed: int,
) -> int:
    tasks = [
        tw.task_instance(inst, _derive_seed(seed, inst, t, _STREAM_EVAL_TASK), factors)
        for t in trial_ids
    ]
    rngs = [_derive_rng(seed, inst, t, _STREAM_EVAL_NOISE) for t in trial_ids]
    states = [tw.init_state(task) for task in tasks]
    steps = [0] * len(tasks)
    successes = 0
    active = []
    for i, (task, state) in enumerate(zip(tasks, states)):
        if tw.success(task, state, config.success_threshold):
            successes += 1
        else:
            active.append(i)
    while active:
        obs = np.stack([tw.render_obs(tasks[i], states[i], config.obs_grid) for i in active])
        instr = np.full(len(active), inst, dtype=np.int64)
        agent = np.stack([states[i].agent for i in active])
        chunks = denoise(policy, obs, instr, agent, [rngs[i] for i in active])
        if policy.norm_stats is not None:
            mean, std = policy.norm_stats
            chunks = chunks * std + mean
        still = []
        for row, i in enumerate(active):
            finished = False
            for k in range(config.execute):
                states[i] = tw.step_env(tasks[i], states[i], chunks[row, k])
                steps[i] += 1
                if tw.success(tasks[i], states[i], config.success_threshold):
                    successes += 1
                    finished = True
                    break
                if steps[i] >= config.max_steps:
                    finished = True
                    break
            if not finished:
                still.append(i)
        active = still
    return successes


def consistency_row(setting: str, pairs: Sequence[tuple[float, float]], scale: float = 1.0) -> dict:
    """One report row: sign-test counts, exact p, and mean paired gain.

    scale converts gains to presentation units (100.0 for percentage points
    when pairs hold rates in [0, 1])."""
    result = sign_test(pairs)
    return {
        "setting": str(setting),
        "pairs": result.pairs,
        "non_tie": result.non_tie,
        "improved": result.improved,
        "avg_gain": avg_gain(pairs) * scale,
        "p_value": result.p_value,
    }


def golden_rows() -> list[dict]:
    """Consistency rows recomputed from the frozen reference tables."""
    from .golden import GOLDEN_SETTINGS

    return [consistency_row(g.name, g.pairs()) for g in GOLDEN_SETTINGS]


@dataclass(frozen=True)
class RunManifest:
    """Reproducibility record: resolved config, seeds, inputs, and outputs."""

    config_hash: str
    seeds: tuple[int, ...]
    variants: tuple[str, ...]
    datasets: tuple[tuple[str, str], ...]
    artifacts: tuple[str, ...]
    tool_version: str = __version__
    config: dict | None = None

    def to_json(self) -> str:
        payload = {
            "config_hash": self.config_hash,
            "seeds": list(self.seeds),
            "variants": list(self.variants),
            "datasets": [[name, digest] for name, digest in self.datasets],
            "artifacts": list(self.artifacts),
            "tool_version": self.tool_version,
            "config": self.config,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        raw = json.loads(text)
        return cls(
            config_hash=raw["config_hash"],
            seeds=tuple(raw["seeds"]),
            variants=tuple(raw["variants"]),
            datasets=tuple((n, d) for n, d in raw["datasets"]),
            artifacts=tuple(raw["artifacts"]),
            tool_version=raw["tool_version"],
            config=raw.get("config"),
        )


def dataset_digest(dataset: tw.Dataset) -> str:
    return hashlib.sha256(dataset.to_bytes()).hexdigest()


_STATS_HEADER = "setting,pairs,non_tie,improved,avg_gain,p_value"


def report(success: SuccessTable, stats_rows: Sequence[dict], manifest: RunManifest, out_dir) -> dict:
    """Write success.csv, stats.csv, and manifest.json; byte-stable output."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    success_path = out / "success.csv"
    success_path.write_text("\n".join(success.csv_lines()) + "\n")
    lines = [_STATS_HEADER]
    for row in stats_rows:
        lines.append(
            "{setting},{pairs},{non_tie},{improved},{gain},{p}".format(
                setting=row["setting"],
                pairs=row["pairs"],
                non_tie=row["non_tie"],
                improved=row["improved"],
                gain=f"{row['avg_gain']:+.2f}",
                p=format_p(row["p_value"]),
            )
        )
    stats_path = out / "stats.csv"
    stats_path.write_text("\n".join(lines) + "\n")
    manifest_path = out / "manifest.json"
    manifest_path.write_text(manifest.to_json())
    return {"success": success_path, "stats": stats_path, "manifest": manifest_path}


def run_directional(
    config: BenchConfig,
    out_dir,
    seed: int = 0,
    variants: Sequence[str] = ("full_ft", "priorvla"),
    progress_every: int = 0,
) -> dict:
    """The full paired experiment: pretrain once, adapt per (seed, variant),
    evaluate ID and OOD on the held-out family, and write the report.

    Within a seed both variants adapt on the same demo set and are scored on
    the same task instances, so every comparison is paired.  Returns the
    success table, per-variant per-mode rates and medians, the consistency
    rows, and the written file paths.
    """
    out = Path(out_dir)
    pretrained, _, pretrain_ds = run_pretrain(config, seed=seed, out_dir=out, progress_every=progress_every)
    adapt_instructions = tw.family_instructions(config.adapt_family)
    table = SuccessTable()
    rates: dict[str, dict[str, list[float]]] = {v: {"ID": [], "OOD": []} for v in variants}
    datasets: list[tuple[str, str]] = [("pretrain", dataset_digest(pretrain_ds))]
    for s in config.seeds:
        adapt_ds = make_adapt_dataset(config, s)
        datasets.append((f"adapt_seed{s}", dataset_digest(adapt_ds)))
        for variant in variants:
            adapted, _ = run_adapt(pretrained, variant, adapt_ds, config, seed=s, out_dir=out)
            for mode in ("ID", "OOD"):
                part = evaluate(
                    adapted,
                    adapt_instructions,
                    config.eval_trials,
                    mode,
                    config,
                    seed=s,
                    method=variant,
                    task_suffix=f"@seed{s}",
                )
                table.extend(part)
                total = sum(r["successes"] for r in part.rows) / sum(r["trials"] for r in part.rows)
                rates[variant][mode].append(total)
            if progress_every:
                print(
                    f"seed {s} {variant}: ID {rates[variant]['ID'][-1]:.3f} "
                    f"OOD {rates[variant]['OOD'][-1]:.3f}",
                    flush=True,
                )
    medians = {v: {m: float(np.median(rates[v][m])) for m in ("ID", "OOD")} for v in variants}
    baseline = variants[0]
    stats_rows = []
    for method in variants[1:]:
        for mode in ("ID", "OOD", None):
            label = mode if mode is not None else "ALL"
            stats_rows.append(
                consistency_row(
                    f"{label}: {method} vs {baseline}",
                    table.pairs(baseline, method, mode),
                    scale=100.0,
                )
            )
    manifest = RunManifest(
        config_hash=config.config_hash(),
        seeds=tuple(config.seeds),
        variants=tuple(variants),
        datasets=tuple(datasets),
        artifacts=("success.csv", "stats.csv", "manifest.json", "pretrained.ckpt"),
        config=config.to_dict(),
    )
    paths = report(table, stats_rows, manifest, out)
    return {
        "table": table,
        "rates": {v: {m: list(r) for m, r in modes.items()} for v, modes in rates.items()},
        "medians": medians,
        "stats": stats_rows,
        "paths": paths,
    }
