"""Dual-expert flow-matching action policies with a frozen prior branch.

Subpackages and modules:

- numcore: float64 tensors with a reverse-mode tape.
- flowmask: token groups and the block attention mask between them.
- stack: transformer layers shared by several token groups under one mask.
- dualexpert: the dual-expert denoising policy and its checkpoint format.
- trainkit: flow-matching loss, AdamW, schedules, EMA, freeze plans.
- toyworld: a continuous 2-D manipulation world with a scripted expert.
- bench: experiment harness, ablation variants, statistics, CLI.
"""

__version__ = "0.1.0"
