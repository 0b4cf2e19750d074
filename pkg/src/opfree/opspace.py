"""Finite operator metric spaces: points, amplified matrix points, distances.

A space is a finite list of d-by-d complex matrices with the basepoint at
index 0. Level-n "points" are n-by-n grids of point indices; their distance
is the spectral norm of the assembled block difference. Distance tables are
built once per (space, level) and are immutable afterwards.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .matcore import (
    MatrixInputError,
    as_matrix,
    batched_spectral_norms,
    block_assemble,
    spectral_norm,
)

DISTINCT_TOL = 1e-12
POINT_CAP = 1296
PAIR_CAP = 900_000
_CHUNK = 4096


class BudgetError(RuntimeError):
    """An enumeration or pair count exceeded its cap; carries the exact count."""

    def __init__(self, message: str, count: int):
        super().__init__(message)
        self.count = count


class SpaceValidationError(ValueError):
    """The point list does not form a valid operator metric space."""


@dataclass(frozen=True)
class OperatorMetricSpace:
    """Finite pointed operator metric space; the basepoint is points[0].

    ``block_sizes`` declares a simultaneous block-diagonal structure shared by
    every point (used by direct-sum constructions); distances then split as a
    max over the diagonal blocks, which the table builder exploits.
    """

    points: tuple[np.ndarray, ...]
    labels: tuple[str, ...]
    block_sizes: tuple[int, ...] | None = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def ambient_dim(self) -> int:
        return self.points[0].shape[0]

    @property
    def npoints(self) -> int:
        return len(self.points)

    def point(self, idx: int) -> np.ndarray:
        return self.points[idx]

    def label_of(self, idx: int) -> str:
        return self.labels[idx]

    def index_of(self, label: str) -> int:
        return self.labels.index(label)


def make_space(points, labels=None, block_sizes=None) -> OperatorMetricSpace:
    """Validate and freeze an operator metric space.

    Points must be distinct d-by-d matrices (entrywise gap > 1e-12), d >= 1,
    at least two points; duplicates are rejected, never merged.
    """
    mats = [as_matrix(p) for p in points]
    if len(mats) < 2:
        raise SpaceValidationError("need at least two points (basepoint included)")
    d = mats[0].shape[0]
    for m in mats:
        if m.shape != (d, d):
            raise SpaceValidationError(
                f"all points must be {d}x{d}, got {m.shape}"
            )
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            if np.max(np.abs(mats[i] - mats[j])) <= DISTINCT_TOL:
                raise SpaceValidationError(
                    f"points {i} and {j} coincide within {DISTINCT_TOL}"
                )
    if labels is None:
        labels = tuple(f"p{i}" for i in range(len(mats)))
    labels = tuple(str(s) for s in labels)
    if len(labels) != len(mats):
        raise SpaceValidationError("label count does not match point count")
    if len(set(labels)) != len(labels):
        raise SpaceValidationError("point labels must be unique")
    if block_sizes is not None:
        block_sizes = tuple(int(s) for s in block_sizes)
        if sum(block_sizes) != d:
            raise SpaceValidationError("block sizes do not sum to the ambient dimension")
    frozen = []
    for m in mats:
        m = m.copy()
        m.setflags(write=False)
        frozen.append(m)
    return OperatorMetricSpace(tuple(frozen), labels, block_sizes)


@dataclass(frozen=True, order=True)
class MatrixPoint:
    """An n-by-n grid of point indices: an element of the level-n matrix space."""

    grid: tuple[tuple[int, ...], ...]

    @property
    def n(self) -> int:
        return len(self.grid)

    @staticmethod
    def constant(idx: int, n: int) -> "MatrixPoint":
        return MatrixPoint(tuple(tuple(idx for _ in range(n)) for _ in range(n)))

    @staticmethod
    def from_array(arr) -> "MatrixPoint":
        return MatrixPoint(tuple(tuple(int(v) for v in row) for row in np.asarray(arr)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.grid, dtype=np.int64)

    def validate(self, space: OperatorMetricSpace) -> None:
        for row in self.grid:
            if len(row) != self.n:
                raise MatrixInputError("matrix point grid must be square")
            for v in row:
                if not 0 <= v < space.npoints:
                    raise MatrixInputError(f"point index {v} out of range")


def point_block(space: OperatorMetricSpace, mp: MatrixPoint) -> np.ndarray:
    """Assemble the nd-by-nd matrix realizing a matrix point."""
    mp.validate(space)
    return block_assemble([[space.points[v] for v in row] for row in mp.grid])


def amplified_distance(space: OperatorMetricSpace, a: MatrixPoint, b: MatrixPoint) -> float:
    """Norm of the block difference: the canonical level-n distance."""
    if a.n != b.n:
        raise MatrixInputError(f"level mismatch: {a.n} vs {b.n}")
    if a == b:
        return 0.0
    return spectral_norm(point_block(space, a) - point_block(space, b))


def enumerate_matrix_points(space: OperatorMetricSpace, n: int, cap: int = POINT_CAP):
    """All |X|^(n^2) grids in lexicographic order; BudgetError above ``cap``."""
    total = space.npoints ** (n * n)
    if total > cap:
        raise BudgetError(
            f"level-{n} point enumeration needs {total} grids (cap {cap})", total
        )
    out = []
    for flat in itertools.product(range(space.npoints), repeat=n * n):
        out.append(MatrixPoint(tuple(flat[i * n : (i + 1) * n] for i in range(n))))
    return out


def grid_rank(space: OperatorMetricSpace, mp: MatrixPoint) -> int:
    """Position of a grid in the lexicographic enumeration."""
    rank = 0
    for row in mp.grid:
        for v in row:
            rank = rank * space.npoints + v
    return rank


def _point_block_stacks(space: OperatorMetricSpace):
    """Per diagonal block: an (npoints, s, s) stack of that block of every point."""
    if space.block_sizes is None:
        return [np.stack(space.points)]
    stacks = []
    off = 0
    for s in space.block_sizes:
        stacks.append(np.stack([p[off : off + s, off : off + s] for p in space.points]))
        off += s
    return stacks


def level1_distance_matrix(space: OperatorMetricSpace) -> np.ndarray:
    """Symmetric matrix of pairwise level-1 distances between the points."""
    key = ("d1",)
    if key in space._cache:
        return space._cache[key]
    N = space.npoints
    D = np.zeros((N, N))
    ia, ib = np.triu_indices(N, 1)
    vals = np.zeros(len(ia))
    for stack in _point_block_stacks(space):
        diff = stack[ia] - stack[ib]
        vals = np.maximum(vals, batched_spectral_norms(diff))
    D[ia, ib] = vals
    D[ib, ia] = vals
    D.setflags(write=False)
    space._cache[key] = D
    return D


def pair_norms(space: OperatorMetricSpace, a_idx: np.ndarray, b_idx: np.ndarray) -> np.ndarray:
    """Amplified distances for index-grid arrays of shape (P, n, n).

    Pairs where both grids are constant use the exact identity
    ||J_n (x) M|| = n * ||M||, which keeps level-1 ratios reproduced bit-for-bit
    inside level-n scans.
    """
    a_idx = np.asarray(a_idx, dtype=np.int64)
    b_idx = np.asarray(b_idx, dtype=np.int64)
    P, n, _ = a_idx.shape
    out = np.zeros(P)
    if P == 0:
        return out
    if n > 1:
        const_a = np.all(a_idx == a_idx[:, :1, :1], axis=(1, 2))
        const_b = np.all(b_idx == b_idx[:, :1, :1], axis=(1, 2))
        const = const_a & const_b
    else:
        const = np.zeros(P, dtype=bool)
    if np.any(const):
        D1 = level1_distance_matrix(space)
        out[const] = n * D1[a_idx[const, 0, 0], b_idx[const, 0, 0]]
    todo = ~const
    idx_todo = np.nonzero(todo)[0]
    stacks = _point_block_stacks(space)
    for start in range(0, len(idx_todo), _CHUNK):
        sel = idx_todo[start : start + _CHUNK]
        acc = np.zeros(len(sel))
        for stack in stacks:
            s = stack.shape[-1]
            diff = stack[a_idx[sel]] - stack[b_idx[sel]]  # (p, n, n, s, s)
            mats = diff.transpose(0, 1, 3, 2, 4).reshape(len(sel), n * s, n * s)
            acc = np.maximum(acc, batched_spectral_norms(mats))
        out[sel] = acc
    return out


@dataclass(frozen=True)
class PairSet:
    """Constraint pairs with precomputed distances; immutable after construction.

    ``sampled`` marks incomplete pair sets: maxima over them are lower bounds
    only, and that flag must propagate into everything built on top.
    """

    space: OperatorMetricSpace
    n: int
    a_idx: np.ndarray  # (P, n, n) int64
    b_idx: np.ndarray
    dists: np.ndarray  # (P,) float, all > 0
    sampled: bool
    seed: int | None = None
    full_matrix: np.ndarray | None = None  # (Ngrids, Ngrids) when full

    def __len__(self) -> int:
        return len(self.dists)

    def pair(self, i: int) -> tuple[MatrixPoint, MatrixPoint, float]:
        return (
            MatrixPoint.from_array(self.a_idx[i]),
            MatrixPoint.from_array(self.b_idx[i]),
            float(self.dists[i]),
        )


def constraint_pairs(
    space: OperatorMetricSpace,
    n: int,
    cap: int = PAIR_CAP,
    mode: str = "full",
    k: int = 2000,
    seed: int = 0,
    point_cap: int = POINT_CAP,
) -> PairSet:
    """Pairs indexing the Lipschitz-ball constraints at level n.

    Full mode enumerates every unordered grid pair with positive distance
    (BudgetError above ``cap``); sampled mode draws ``k`` seed-deterministic
    pairs and always includes every pair against the constant-basepoint grid
    (or a sampled subset of those when even the grids cannot be enumerated).
    """
    key = ("pairs", n, mode, k if mode == "sampled" else None, seed if mode == "sampled" else None, cap, point_cap)
    if key in space._cache:
        return space._cache[key]
    if mode == "full":
        pts = enumerate_matrix_points(space, n, cap=point_cap)
        grids = np.stack([p.as_array() for p in pts])
        total = len(pts) * (len(pts) - 1) // 2
        if total > cap:
            raise BudgetError(
                f"full pair enumeration needs {total} pairs (cap {cap})", total
            )
        ia, ib = np.triu_indices(len(pts), 1)
        a_idx, b_idx = grids[ia], grids[ib]
        dists = pair_norms(space, a_idx, b_idx)
        keep = dists > 0
        a_idx, b_idx, dists = a_idx[keep], b_idx[keep], dists[keep]
        D = np.zeros((len(pts), len(pts)))
        D[ia[keep], ib[keep]] = dists
        D[ib[keep], ia[keep]] = dists
        D.setflags(write=False)
        ps = PairSet(space, n, a_idx, b_idx, dists, sampled=False, full_matrix=D)
    elif mode == "sampled":
        rng = np.random.default_rng(seed)
        N = space.npoints
        base = np.zeros((n, n), dtype=np.int64)
        total_grids = N ** (n * n)
        seen = set()
        a_list, b_list = [], []

        def add(ga, gb):
            ta, tb = tuple(ga.ravel()), tuple(gb.ravel())
            if ta == tb:
                return
            if ta > tb:
                ta, tb = tb, ta
                ga, gb = gb, ga
            if (ta, tb) in seen:
                return
            seen.add((ta, tb))
            a_list.append(np.asarray(ga, dtype=np.int64).reshape(n, n))
            b_list.append(np.asarray(gb, dtype=np.int64).reshape(n, n))

        if total_grids <= point_cap:
            for p in enumerate_matrix_points(space, n, cap=point_cap):
                add(p.as_array(), base)
        else:
            for _ in range(max(k // 2, 1)):
                add(rng.integers(0, N, size=(n, n)), base)
        tries = 0
        while len(a_list) < k + min(total_grids - 1, point_cap) and tries < 20 * k:
            add(rng.integers(0, N, size=(n, n)), rng.integers(0, N, size=(n, n)))
            tries += 1
            if len(seen) >= total_grids * (total_grids - 1) // 2:
                break
        a_idx = np.stack(a_list)
        b_idx = np.stack(b_list)
        dists = pair_norms(space, a_idx, b_idx)
        keep = dists > 0
        ps = PairSet(
            space, n, a_idx[keep], b_idx[keep], dists[keep], sampled=True, seed=seed
        )
    else:
        raise ValueError(f"unknown pair mode {mode!r}")
    space._cache[key] = ps
    return ps
