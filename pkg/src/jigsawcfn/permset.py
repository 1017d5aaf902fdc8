"""Tile-permutation space and Hamming-dispersion-controlled subset selection.

A permutation is a tuple of 1-based cell indices; position ``i`` of a
shuffled puzzle holds the tile whose raster index is ``p[i]``. Sets of
permutations act as the class-label space of the puzzle-reassembly task,
and their average pairwise Hamming distance controls task difficulty.
Subsets are grown greedily: starting from one uniformly drawn permutation,
each step scores every remaining candidate by its summed distance to the
already-selected set and keeps the argmax (objective ``max``), the argmin
(``min``) or a uniform draw from the remaining pool (``middle``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import derive_rng

Permutation = tuple[int, ...]

OBJECTIVES = ("max", "min", "middle")

# The greedy selector materializes the whole (grid^2)! pool; 9! rows is the
# largest table that is reasonable to hold and scan.
MAX_GRID = 3


class UnsupportedGridError(ValueError):
    """Raised when a grid would require enumerating an intractable pool."""


def identity_permutation(n: int) -> Permutation:
    return tuple(range(1, n + 1))


def validate_permutation(p: Sequence[int]) -> Permutation:
    """Check that ``p`` is a bijection on {1..len(p)} and return it as a tuple."""
    p = tuple(int(v) for v in p)
    if sorted(p) != list(range(1, len(p) + 1)):
        raise ValueError(f"not a permutation of 1..{len(p)}: {p}")
    return p


def hamming(p: Sequence[int], q: Sequence[int]) -> float:
    """Fraction of positions where two equal-length permutations disagree."""
    if len(p) != len(q):
        raise ValueError(f"length mismatch: {len(p)} vs {len(q)}")
    if len(p) == 0:
        raise ValueError("empty permutation")
    mismatches = sum(1 for a, b in zip(p, q) if a != b)
    return mismatches / len(p)


def average_hamming(perms: Sequence[Sequence[int]]) -> float:
    """Mean pairwise Hamming distance over all unordered pairs; 0 for a singleton."""
    if len(perms) == 0:
        raise ValueError("average_hamming of an empty collection")
    if len(perms) == 1:
        return 0.0
    arr = np.asarray(perms)
    width = arr.shape[1]
    total = 0
    for i in range(len(perms) - 1):
        total += int((arr[i + 1 :] != arr[i]).sum())
    pairs = len(perms) * (len(perms) - 1) // 2
    return total / (pairs * width)


def apply_permutation(p: Sequence[int], items: Sequence) -> list:
    """Reorder ``items`` so that output position i holds ``items[p[i]-1]``."""
    if len(p) != len(items):
        raise ValueError(f"length mismatch: permutation {len(p)} vs items {len(items)}")
    return [items[v - 1] for v in p]


def invert(p: Sequence[int]) -> Permutation:
    """Inverse under apply_permutation: applying p then invert(p) restores order."""
    p = validate_permutation(p)
    inv = [0] * len(p)
    for i, v in enumerate(p):
        inv[v - 1] = i + 1
    return tuple(inv)


@dataclass(frozen=True)
class PermutationSet:
    """An ordered set of distinct permutations; list position is the class label."""

    entries: tuple[Permutation, ...]
    grid: int
    objective: str
    seed: int
    avg_hamming: float = field(init=False)

    def __post_init__(self):
        if self.grid < 2:
            raise ValueError(f"grid must be >= 2, got {self.grid}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        n = self.grid * self.grid
        entries = tuple(validate_permutation(p) for p in self.entries)
        if not entries:
            raise ValueError("permutation set must be non-empty")
        for p in entries:
            if len(p) != n:
                raise ValueError(f"entry length {len(p)} does not match grid {self.grid}")
        if len(set(entries)) != len(entries):
            raise ValueError("permutation set entries must be distinct")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "avg_hamming", average_hamming(entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, label: int) -> Permutation:
        return self.entries[label]


def enumerate_pool(grid: int) -> np.ndarray:
    """All (grid^2)! permutations in lexicographic order, one per row, 1-based."""
    if grid < 2:
        raise ValueError(f"grid must be >= 2, got {grid}")
    if grid > MAX_GRID:
        raise UnsupportedGridError(
            f"grid {grid} needs a pool of ({grid * grid})! rows; grids above {MAX_GRID} are rejected"
        )
    n = grid * grid
    return np.array(list(itertools.permutations(range(1, n + 1))), dtype=np.int8)


def generate_permutation_set(n: int, grid: int, objective: str, seed: int) -> PermutationSet:
    """Greedily select ``n`` permutations with dispersion controlled by ``objective``.

    The first entry is drawn uniformly from the full pool. Afterwards a
    running per-candidate sum of mismatch counts against the selected set
    is maintained; ``max``/``min`` pick its extremum over the remaining
    pool (ties: lowest lexicographic pool index), ``middle`` draws
    uniformly from the remaining pool without consulting the sums.
    Bit-reproducible for fixed (n, grid, objective, seed).
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    pool = enumerate_pool(grid)
    m = pool.shape[0]
    if not 1 <= n <= m:
        raise ValueError(f"n must be in 1..{m} for grid {grid}, got {n}")

    rng = derive_rng(seed)
    alive = np.ones(m, dtype=bool)
    mismatch_sum = np.zeros(m, dtype=np.int64)
    chosen: list[int] = []

    j = int(rng.integers(m))
    for i in range(n):
        chosen.append(j)
        alive[j] = False
        if i + 1 == n:
            break
        live = np.flatnonzero(alive)
        if objective == "middle":
            j = int(live[rng.integers(live.size)])
            continue
        mismatch_sum += (pool != pool[j]).sum(axis=1, dtype=np.int64)
        scores = mismatch_sum[live]
        # argmax/argmin return the first extremum, i.e. the lowest pool index.
        j = int(live[np.argmax(scores) if objective == "max" else np.argmin(scores)])

    entries = tuple(tuple(int(v) for v in pool[c]) for c in chosen)
    return PermutationSet(entries=entries, grid=grid, objective=objective, seed=seed)


def save_permutation_set(pset: PermutationSet, path: str | Path) -> None:
    """Write the plain-text set file; line order defines the class labels."""
    lines = [
        f"grid={pset.grid}",
        f"objective={pset.objective}",
        f"seed={pset.seed}",
        f"count={len(pset)}",
    ]
    lines += [",".join(str(v) for v in p) for p in pset.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_permutation_set(path: str | Path) -> PermutationSet:
    text = Path(path).read_text()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    header: dict[str, str] = {}
    body: list[str] = []
    for ln in lines:
        if "=" in ln and not ln[0].isdigit():
            key, _, value = ln.partition("=")
            header[key.strip()] = value.strip()
        else:
            body.append(ln)
    for key in ("grid", "objective", "seed", "count"):
        if key not in header:
            raise ValueError(f"permutation set file {path} is missing header line {key}=...")
    entries = tuple(tuple(int(v) for v in ln.split(",")) for ln in body)
    if len(entries) != int(header["count"]):
        raise ValueError(
            f"permutation set file {path} declares count={header['count']} but has {len(entries)} rows"
        )
    return PermutationSet(
        entries=entries,
        grid=int(header["grid"]),
        objective=header["objective"],
        seed=int(header["seed"]),
    )
