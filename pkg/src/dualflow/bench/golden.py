"""Frozen reference tables for the paired-statistics pipeline.

Seven evaluation settings, each a list of per-task success rates (percent)
for a baseline method and an adaptation method, together with the published
summary row they must reproduce: non-tie pair count, improved count, average
gain in points, and the one-sided sign-test p-value at two significant
figures.  The sim settings share one 13-task suite across three data regimes;
the real-robot settings interleave 8 tasks evaluated in-distribution and
out-of-distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["GoldenSetting", "GOLDEN_SETTINGS", "SIM_TASKS", "REAL_TASKS"]

SIM_TASKS = (
    "Grab Roller",
    "Handover Mic",
    "Lift Pot",
    "Move Can Pot",
    "Open Laptop",
    "Pick Dual Bottles",
    "Place Object Basket",
    "Place Dual Shoes",
    "Place Phone Stand",
    "Put Bottles Dustbin",
    "Put Object Cabinet",
    "Stack Blocks Two",
    "Stack Bowls Two",
)

REAL_TASKS = (
    "Place Ring",
    "Insert Peg",
    "Pick Object",
    "Stack Blocks",
    "Stack Bowls",
    "Sweep Blocks",
    "Arrange Cups",
    "Hang Towel",
)


@dataclass(frozen=True)
class GoldenSetting:
    name: str
    tasks: tuple[str, ...]
    baseline: tuple[int, ...]
    adapted: tuple[int, ...]
    non_tie: int
    improved: int
    printed_gain: int
    printed_p: str

    def __post_init__(self) -> None:
        if not (len(self.tasks) == len(self.baseline) == len(self.adapted)):
            raise ValueError(f"{self.name}: column lengths disagree")

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.baseline, self.adapted))


def _real_tasks_id_ood() -> tuple[str, ...]:
    return tuple(f"{t} ({mode})" for mode in ("ID", "OOD") for t in REAL_TASKS)


GOLDEN_SETTINGS: tuple[GoldenSetting, ...] = (
    GoldenSetting(
        name="sim-fewshot-easy",
        tasks=SIM_TASKS,
        baseline=(41, 85, 8, 45, 69, 3, 31, 1, 1, 16, 25, 8, 43),
        adapted=(79, 88, 51, 47, 78, 10, 34, 4, 8, 21, 32, 13, 67),
        non_tie=13,
        improved=13,
        printed_gain=12,
        printed_p="1.2e-4",
    ),
    GoldenSetting(
        name="sim-fewshot-hard",
        tasks=SIM_TASKS,
        baseline=(46, 60, 5, 32, 37, 2, 15, 1, 4, 8, 17, 4, 27),
        adapted=(73, 77, 28, 28, 60, 19, 20, 2, 6, 18, 21, 5, 43),
        non_tie=13,
        improved=12,
        printed_gain=11,
        printed_p="1.7e-3",
    ),
    GoldenSetting(
        name="sim-standard-easy",
        tasks=SIM_TASKS,
        baseline=(97, 97, 67, 61, 91, 55, 62, 40, 41, 60, 66, 53, 80),
        adapted=(98, 98, 96, 61, 91, 75, 73, 45, 65, 64, 73, 70, 89),
        non_tie=11,
        improved=11,
        printed_gain=10,
        printed_p="4.9e-4",
    ),
    GoldenSetting(
        name="sim-standard-hard",
        tasks=SIM_TASKS,
        baseline=(93, 62, 25, 36, 69, 17, 38, 18, 14, 43, 53, 24, 57),
        adapted=(93, 84, 66, 57, 83, 26, 42, 20, 35, 45, 45, 17, 73),
        non_tie=12,
        improved=10,
        printed_gain=11,
        printed_p="1.9e-2",
    ),
    GoldenSetting(
        name="sim-large-hard",
        tasks=SIM_TASKS,
        baseline=(93, 65, 51, 70, 75, 42, 42, 42, 36, 65, 67, 34, 82),
        adapted=(98, 83, 69, 68, 95, 45, 40, 38, 53, 66, 70, 43, 84),
        non_tie=13,
        improved=10,
        printed_gain=6,
        printed_p="4.6e-2",
    ),
    GoldenSetting(
        name="real-standard",
        tasks=_real_tasks_id_ood(),
        baseline=(85, 45, 90, 80, 90, 100, 40, 25, 45, 10, 55, 50, 70, 75, 15, 10),
        adapted=(90, 75, 90, 90, 95, 95, 50, 65, 55, 30, 60, 65, 85, 85, 25, 50),
        non_tie=15,
        improved=14,
        printed_gain=14,
        printed_p="4.9e-4",
    ),
    GoldenSetting(
        name="real-fewshot",
        tasks=_real_tasks_id_ood(),
        baseline=(30, 5, 70, 15, 30, 20, 10, 15, 0, 0, 40, 5, 15, 20, 0, 0),
        adapted=(75, 30, 85, 65, 55, 35, 15, 25, 40, 20, 50, 55, 30, 30, 10, 20),
        non_tie=16,
        improved=16,
        printed_gain=23,
        printed_p="1.5e-5",
    ),
)
