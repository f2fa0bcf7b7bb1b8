"""Atomic sparse-pattern pool for block-sparse attention.

Patterns are defined on an n_b x n_b grid of attention blocks. The pool is
built once offline with every pattern's active-block coordinate list
precomputed; at runtime a per-head assignment is combined into a single
flat layout by tagging entries with the head index, with no per-entry
coordinate recomputation.

Every pattern includes the main diagonal blocks so each token row always
has at least one active block (the sparse softmax relies on this).
"""

from __future__ import annotations

from dataclasses import dataclass, field

Coord = tuple[int, int]


class PatternError(ValueError):
    """Invalid pattern parameter or unknown pattern id."""


@dataclass(frozen=True)
class LayoutTable:
    """Precomputed active-block coordinates for one pattern."""

    pattern_id: str
    n_b: int
    coords: tuple[Coord, ...]

    @property
    def active_blocks(self) -> int:
        return len(self.coords)

    def __post_init__(self):
        seen = set()
        for br, bc in self.coords:
            if not (0 <= br < self.n_b and 0 <= bc < self.n_b):
                raise PatternError(f"{self.pattern_id}: block ({br},{bc}) outside {self.n_b}x{self.n_b} grid")
            if (br, bc) in seen:
                raise PatternError(f"{self.pattern_id}: duplicate block ({br},{bc})")
            seen.add((br, bc))
        if tuple(sorted(self.coords)) != self.coords:
            raise PatternError(f"{self.pattern_id}: coordinates not sorted")


@dataclass(frozen=True)
class CombinedLayout:
    """Per-head layouts concatenated into one flat (head, br, bc) list."""

    n_b: int
    n_heads: int
    entries: tuple[tuple[int, int, int], ...]
    head_offsets: tuple[int, ...]  # start index of each head's run in `entries`

    def head_coords(self, head: int) -> tuple[Coord, ...]:
        lo = self.head_offsets[head]
        hi = self.head_offsets[head + 1] if head + 1 < self.n_heads else len(self.entries)
        return tuple((br, bc) for _, br, bc in self.entries[lo:hi])


def _dense(n_b: int) -> list[Coord]:
    return [(i, j) for i in range(n_b) for j in range(n_b)]


def _block_diagonal(n_b: int) -> list[Coord]:
    return [(i, i) for i in range(n_b)]


def _banded_local(n_b: int, w: int) -> list[Coord]:
    return [(i, j) for i in range(n_b) for j in range(n_b) if abs(i - j) <= w]


def _causal_local(n_b: int, w: int) -> list[Coord]:
    # diagonal always kept so every row stays covered
    return [(i, j) for i in range(n_b) for j in range(n_b) if 0 <= i - j <= w]


def _global_rowcol(n_b: int, g: int) -> list[Coord]:
    return sorted({(i, j) for i in range(n_b) for j in range(n_b) if i < g or j < g or i == j})


def _strided(n_b: int, p: int) -> list[Coord]:
    return [(i, j) for i in range(n_b) for j in range(n_b) if (i - j) % p == 0]


def build_pool(n_b: int, band_widths=(1, 2), global_sizes=(1,), strides=(2,), causal_widths=(1,)) -> dict[str, LayoutTable]:
    """Offline pool construction: one LayoutTable per configured pattern.

    Pool order is fixed (insertion order) and acts as the deterministic
    tiebreak when several patterns have the same active-block count.
    Dense is always present and always covers everything.
    """
    if n_b < 1:
        raise PatternError(f"grid side must be >= 1, got {n_b}")
    specs: list[tuple[str, list[Coord]]] = [("blockdiag", _block_diagonal(n_b))]
    for w in band_widths:
        if w > n_b:
            raise PatternError(f"band width {w} exceeds grid side {n_b}")
        specs.append((f"band{w}", _banded_local(n_b, w)))
    for w in causal_widths:
        if w > n_b:
            raise PatternError(f"causal width {w} exceeds grid side {n_b}")
        specs.append((f"causal{w}", _causal_local(n_b, w)))
    for g in global_sizes:
        if g > n_b:
            raise PatternError(f"global border {g} exceeds grid side {n_b}")
        specs.append((f"global{g}", _global_rowcol(n_b, g)))
    for p in strides:
        if p > n_b:
            raise PatternError(f"stride {p} exceeds grid side {n_b}")
        specs.append((f"strided{p}", _strided(n_b, p)))
    specs.append(("dense", _dense(n_b)))
    pool: dict[str, LayoutTable] = {}
    for pid, coords in specs:
        table = LayoutTable(pid, n_b, tuple(sorted(set(coords))))
        if pid not in pool:  # degenerate grids can collapse patterns onto one id
            pool[pid] = table
    return pool


def combine_layouts(assignment: list[str], pool: dict[str, LayoutTable]) -> CombinedLayout:
    """Online pattern combination: concatenate per-head tables with head tags."""
    entries: list[tuple[int, int, int]] = []
    offsets: list[int] = []
    n_b = next(iter(pool.values())).n_b
    for head, pid in enumerate(assignment):
        if pid not in pool:
            raise PatternError(f"pattern id {pid!r} not in pool")
        offsets.append(len(entries))
        entries.extend((head, br, bc) for br, bc in pool[pid].coords)
    return CombinedLayout(n_b=n_b, n_heads=len(assignment), entries=tuple(entries), head_offsets=tuple(offsets))
