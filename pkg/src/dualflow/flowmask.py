"""Token groups and the block attention mask between them.

Six token groups share one transformer forward pass:

- OBS: observation tokens (image patches, instruction, proprioception)
- SQ:  scene queries, extra trainable tokens reading the observation encoder
- N1:  the prior branch's noisy action tokens
- MQ:  motor queries, extra trainable tokens reading the prior branch
- AQ:  action queries, extra trainable tokens inside the adaptation branch
- N2:  the adaptation branch's noisy action tokens

The mask is block-structured: attention between two groups is either fully
allowed or fully blocked, and rows are query groups.  The canonical mask wires
the adaptation branch to read the observation prefix and the motor queries
while never reading the prior branch's noisy tokens directly, and keeps every
pretrained group blind to all the added groups.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GROUP_ORDER",
    "TokenGroup",
    "BlockMask",
    "Violation",
    "canonical_mask",
    "expand",
    "verify_against_canonical",
    "reachability",
    "render_grid",
]

GROUP_ORDER: tuple[str, ...] = ("OBS", "SQ", "N1", "MQ", "AQ", "N2")
_INDEX = {g: i for i, g in enumerate(GROUP_ORDER)}

# Row -> set of key groups the row's queries may read.
_CANONICAL_ROWS: dict[str, tuple[str, ...]] = {
    "OBS": ("OBS",),
    "SQ": ("OBS", "SQ"),
    "N1": ("OBS", "N1"),
    "MQ": ("N1", "MQ"),
    "AQ": ("OBS", "SQ", "MQ", "AQ", "N2"),
    "N2": ("OBS", "SQ", "MQ", "AQ", "N2"),
}


@dataclass(frozen=True)
class TokenGroup:
    """A named group of contiguous tokens."""

    tag: str
    count: int

    def __post_init__(self) -> None:
        if self.tag not in _INDEX:
            raise ValueError(f"unknown token group {self.tag!r}; expected one of {GROUP_ORDER}")
        if self.count < 0:
            raise ValueError(f"token group {self.tag}: negative count {self.count}")


@dataclass(frozen=True)
class Violation:
    """One block cell that differs from the canonical mask."""

    query: str
    key: str
    expected: bool
    found: bool


class BlockMask:
    """A 6x6 boolean grid; allowed[q][k] means query group q may read key group k."""

    __slots__ = ("allowed",)

    def __init__(self, allowed):
        arr = np.array(allowed, dtype=bool)
        if arr.shape != (len(GROUP_ORDER), len(GROUP_ORDER)):
            raise ValueError(f"block mask must be 6x6, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "allowed", arr)

    def allows(self, query: str, key: str) -> bool:
        return bool(self.allowed[_INDEX[query], _INDEX[key]])

    def allowed_keys(self, query: str) -> tuple[str, ...]:
        row = self.allowed[_INDEX[query]]
        return tuple(g for g, on in zip(GROUP_ORDER, row) if on)

    def __eq__(self, other) -> bool:
        return isinstance(other, BlockMask) and np.array_equal(self.allowed, other.allowed)

    def __hash__(self) -> int:
        return hash(self.allowed.tobytes())

    def __repr__(self) -> str:
        return f"BlockMask({self.allowed.astype(int).tolist()})"


def canonical_mask() -> BlockMask:
    """The dual-expert wiring; every group may read itself."""
    grid = np.zeros((6, 6), dtype=bool)
    for q, keys in _CANONICAL_ROWS.items():
        for k in keys:
            grid[_INDEX[q], _INDEX[k]] = True
    return BlockMask(grid)


def expand(mask: BlockMask, groups: list[TokenGroup] | tuple[TokenGroup, ...]) -> np.ndarray:
    """Expand a block mask to a token-level boolean matrix.

    Groups appear in the given order; each contributes a contiguous run of
    group.count rows and columns.  Zero-count groups contribute nothing, but at
    least one token must remain overall.
    """
    groups = list(groups)
    seen = set()
    for g in groups:
        if not isinstance(g, TokenGroup):
            raise TypeError(f"expand: expected TokenGroup, got {type(g).__name__}")
        if g.tag in seen:
            raise ValueError(f"expand: duplicate group {g.tag}")
        seen.add(g.tag)
    total = sum(g.count for g in groups)
    if total == 0:
        raise ValueError("expand: all groups are empty")
    out = np.zeros((total, total), dtype=bool)
    offsets: list[tuple[TokenGroup, int]] = []
    at = 0
    for g in groups:
        offsets.append((g, at))
        at += g.count
    for gq, oq in offsets:
        for gk, ok in offsets:
            if mask.allows(gq.tag, gk.tag):
                out[oq : oq + gq.count, ok : ok + gk.count] = True
    return out


def verify_against_canonical(mask: BlockMask) -> list[Violation]:
    """List every block cell that differs from the canonical mask."""
    ref = canonical_mask()
    out: list[Violation] = []
    for q in GROUP_ORDER:
        for k in GROUP_ORDER:
            want = ref.allows(q, k)
            got = mask.allows(q, k)
            if want != got:
                out.append(Violation(query=q, key=k, expected=want, found=got))
    return out


def reachability(mask: BlockMask, hops: int) -> dict[str, frozenset[str]]:
    """Which groups can influence each query group within the given layer count.

    One hop is the mask row itself; each further layer lets a group inherit the
    sources of everything it reads, because the keys it attends to were updated
    by the previous layer.
    """
    if hops < 1:
        raise ValueError(f"reachability: hops must be >= 1, got {hops}")
    reach = {g: frozenset(mask.allowed_keys(g)) for g in GROUP_ORDER}
    for _ in range(hops - 1):
        reach = {
            g: frozenset(reach[g].union(*(reach[k] for k in mask.allowed_keys(g))))
            if mask.allowed_keys(g)
            else reach[g]
            for g in GROUP_ORDER
        }
    return reach


def render_grid(mask: BlockMask) -> str:
    """Render the block mask as a text grid; '#' allowed, '.' blocked.

    Rows are query groups, columns key groups, both in canonical order.
    """
    header = "     " + " ".join(f"{g:>3}" for g in GROUP_ORDER)
    lines = [header]
    for q in GROUP_ORDER:
        cells = " ".join(f"{'#' if mask.allows(q, k) else '.':>3}" for k in GROUP_ORDER)
        lines.append(f"{q:>4} " + cells)
    return "\n".join(lines)
