"""Command-line front end for the benchmark harness.

Subcommands: pretrain, adapt, eval, ablate, stats, probe, report.  A JSON
config file can override any BenchConfig field; every run writes its resolved
config into the manifest so artifacts are self-describing.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from .. import toyworld as tw
from ..dualexpert import load_policy
from . import harness
from .golden import GOLDEN_SETTINGS
from .probes import SINKS, SOURCES, independence_probe, prior_drift
from .variants import VARIANTS

_FACTOR_NAMES = ("brightness", "clutter", "spawn_shift", "plane_offset")


def _load_config(path: str | None) -> harness.BenchConfig:
    if path is None:
        return harness.BenchConfig()
    raw = json.loads(Path(path).read_text())
    return harness.BenchConfig.from_dict(raw)


def _write_manifest(config: harness.BenchConfig, seeds, variants, datasets, artifacts, out: Path) -> Path:
    manifest = harness.RunManifest(
        config_hash=config.config_hash(),
        seeds=tuple(seeds),
        variants=tuple(variants),
        datasets=tuple(datasets),
        artifacts=tuple(artifacts),
        config=config.to_dict(),
    )
    path = out / "manifest.json"
    path.write_text(manifest.to_json())
    return path


def _cmd_pretrain(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    policy, log, dataset = harness.run_pretrain(
        config, seed=args.seed, out_dir=out, progress_every=args.progress
    )
    _write_manifest(
        config,
        [args.seed],
        [],
        [("pretrain", harness.dataset_digest(dataset))],
        ["pretrained.ckpt", "pretrain_data.bin", "pretrain_log.csv"],
        out,
    )
    print(f"pretrained {out / 'pretrained.ckpt'} final loss {log.losses[-1]:.5f}")
    _ = policy
    return 0


def _cmd_adapt(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    pretrained = load_policy(args.checkpoint)
    dataset = harness.make_adapt_dataset(config, args.seed)
    policy, log = harness.run_adapt(
        pretrained, args.variant, dataset, config, seed=args.seed, out_dir=out,
        progress_every=args.progress,
    )
    _write_manifest(
        config,
        [args.seed],
        [args.variant],
        [(f"adapt_seed{args.seed}", harness.dataset_digest(dataset))],
        [f"{args.variant}_seed{args.seed}.ckpt", f"{args.variant}_seed{args.seed}_log.csv"],
        out,
    )
    print(f"adapted {args.variant} seed {args.seed} final loss {log.losses[-1]:.5f}")
    _ = policy
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy = load_policy(args.checkpoint)
    instructions = tw.family_instructions(args.family or config.adapt_family)
    mode = args.mode.upper()
    factors = None
    if args.sweep_factor is not None:
        factors = config.single_factor(args.sweep_factor)
        mode = f"OOD[{args.sweep_factor}]"
    trials = args.trials or config.eval_trials
    table = harness.evaluate(
        policy, instructions, trials, mode, config,
        seed=args.seed, method=args.method, factors=factors,
    )
    (out / "success.csv").write_text("\n".join(table.csv_lines()) + "\n")
    _write_manifest(config, [args.seed], [args.method], [], ["success.csv"], out)
    for line in table.csv_lines():
        print(line)
    return 0


def _cmd_ablate(args) -> int:
    config = _load_config(args.config)
    variants = args.variants or sorted(VARIANTS)
    if "full_ft" in variants:
        variants = ["full_ft"] + [v for v in variants if v != "full_ft"]
    summary = harness.run_directional(
        config, args.out, seed=args.seed, variants=variants, progress_every=args.progress
    )
    for variant, modes in summary["medians"].items():
        print(f"{variant}: median ID {modes['ID']:.3f} median OOD {modes['OOD']:.3f}")
    return 0


def _cmd_stats(args) -> int:
    rows = []
    if args.reference:
        rows = harness.golden_rows()
    else:
        if args.success is None:
            raise SystemExit("stats: need --success CSV or --reference")
        table = harness.SuccessTable.from_csv(args.success)
        methods = args.methods or [m for m in table.methods() if m != args.baseline]
        for method in methods:
            for mode in ("ID", "OOD", None):
                pairs = table.pairs(args.baseline, method, mode)
                if not pairs:
                    continue
                label = mode if mode is not None else "ALL"
                rows.append(
                    harness.consistency_row(
                        f"{label}: {method} vs {args.baseline}", pairs, scale=100.0
                    )
                )
    lines = [harness._STATS_HEADER]
    for row in rows:
        lines.append(
            f"{row['setting']},{row['pairs']},{row['non_tie']},{row['improved']},"
            f"{row['avg_gain']:+.2f},{harness.format_p(row['p_value'])}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def _synthetic_batch(policy, batch_size: int, seed: int):
    cfg = policy.config
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0.0, 1.0, size=(batch_size, cfg.obs_channels, cfg.obs_grid, cfg.obs_grid))
    instr = rng.integers(0, cfg.instr_vocab, size=batch_size)
    state = rng.uniform(0.0, 1.0, size=(batch_size, cfg.state_dim))
    return obs, instr, state


def _cmd_probe(args) -> int:
    policy = load_policy(args.checkpoint)
    batch = _synthetic_batch(policy, args.batch, args.seed)
    results: dict = {"independence": {}, "drift": {}}
    for source in sorted(SOURCES):
        if any(name not in policy.params for name in SOURCES[source]):
            continue
        for sink in sorted(SINKS):
            if sink == "pe_velocity" and not policy.has_pe:
                continue
            value = independence_probe(policy, source, sink, batch, seed=args.seed)
            results["independence"][f"{source}->{sink}"] = value
    if args.before is not None:
        drift = prior_drift(args.before, policy, batch, seed=args.seed)
        results["drift"] = {g: list(v) for g, v in drift.items()}
    text = json.dumps(results, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def _cmd_report(args) -> int:
    run = Path(args.run)
    table = harness.SuccessTable.from_csv(run / "success.csv")
    manifest = harness.RunManifest.from_json((run / "manifest.json").read_text())
    rows = []
    for method in table.methods():
        if method == args.baseline:
            continue
        for mode in ("ID", "OOD", None):
            pairs = table.pairs(args.baseline, method, mode)
            if not pairs:
                continue
            label = mode if mode is not None else "ALL"
            rows.append(
                harness.consistency_row(f"{label}: {method} vs {args.baseline}", pairs, scale=100.0)
            )
    paths = harness.report(table, rows, manifest, run)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualflow-bench",
        description="Pretrain, adapt, evaluate, and report on the benchmark world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON file overriding BenchConfig fields")
    common.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", parents=[common], help="train the single-expert policy")
    p.add_argument("--out", required=True)
    p.add_argument("--progress", type=int, default=0)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("adapt", parents=[common], help="adapt a pretrained policy under one variant")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    p.add_argument("--out", required=True)
    p.add_argument("--progress", type=int, default=0)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("eval", parents=[common], help="closed-loop success evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, choices=["id", "ood"])
    p.add_argument("--sweep-factor", default=None, choices=_FACTOR_NAMES,
                   help="shift only this factor to its OOD value")
    p.add_argument("--family", default=None)
    p.add_argument("--trials", type=int, default=0)
    p.add_argument("--method", default="policy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the variant matrix end to end")
    p.add_argument("--variants", nargs="*", default=None, choices=sorted(VARIANTS))
    p.add_argument("--out", required=True)
    p.add_argument("--progress", type=int, default=0)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("stats", help="sign test and average gain from a success table")
    p.add_argument("--success", default=None)
    p.add_argument("--baseline", default="full_ft")
    p.add_argument("--methods", nargs="*", default=None)
    p.add_argument("--reference", action="store_true",
                   help="emit the frozen reference consistency rows instead")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("probe", parents=[common], help="independence and drift checks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--before", default=None, help="pre-adaptation checkpoint for drift")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("report", help="recompute report files from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--baseline", default="full_ft")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
