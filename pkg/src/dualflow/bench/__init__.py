"""Benchmark package: statistics, reference tables, variants, probes, harness."""

from .golden import GOLDEN_SETTINGS, REAL_TASKS, SIM_TASKS, GoldenSetting
from .harness import (
    BenchConfig,
    RunManifest,
    SuccessTable,
    consistency_row,
    evaluate,
    golden_rows,
    make_adapt_dataset,
    make_pretrain_dataset,
    report,
    run_adapt,
    run_directional,
    run_pretrain,
)
from .probes import independence_probe, prior_drift
from .stats import SignTestResult, avg_gain, format_p, sign_test
from .variants import VARIANTS, VariantSpec, build_policy

__all__ = [
    "GOLDEN_SETTINGS",
    "REAL_TASKS",
    "SIM_TASKS",
    "GoldenSetting",
    "BenchConfig",
    "RunManifest",
    "SuccessTable",
    "consistency_row",
    "evaluate",
    "golden_rows",
    "make_adapt_dataset",
    "make_pretrain_dataset",
    "report",
    "run_adapt",
    "run_directional",
    "run_pretrain",
    "independence_probe",
    "prior_drift",
    "SignTestResult",
    "avg_gain",
    "format_p",
    "sign_test",
    "VARIANTS",
    "VariantSpec",
    "build_policy",
]
