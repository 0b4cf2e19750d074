"""Lipschitz data on finite operator metric spaces.

Covers scalar and matrix-valued basepoint-vanishing functions with their
amplified Lipschitz constants, point maps with level-n constants and
distortion, ball-membership margins, the level-1 vs level-n sandwich check,
and finite-difference directional derivatives for smooth matrix maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matcore import (
    MatrixInputError,
    as_matrix,
    batched_spectral_norms,
    block_assemble,
    spectral_norm,
)
from .opspace import OperatorMetricSpace, PairSet, constraint_pairs, pair_norms


class NumericalInstabilityError(RuntimeError):
    """Finite-difference extrapolation failed to settle."""


# ---------------------------------------------------------------------------
# function and map containers


@dataclass(frozen=True)
class MatrixLipFunction:
    """A k-by-k grid of complex functions on the points, vanishing at the basepoint.

    Stored as a (k, k, npoints) array; entry [r, s, x] is f_rs(point x) and
    the basepoint slice [:, :, 0] is identically zero.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 3 or v.shape[0] != v.shape[1]:
            raise MatrixInputError(f"expected (k, k, npoints) values, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise MatrixInputError("function values must be finite")
        if np.any(v[:, :, 0] != 0):
            raise MatrixInputError("function must vanish at the basepoint exactly")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def k(self) -> int:
        return self.values.shape[0]

    @property
    def npoints(self) -> int:
        return self.values.shape[2]

    def eval_at(self, idx: int) -> np.ndarray:
        return self.values[:, :, idx]

    def scaled(self, c: complex) -> "MatrixLipFunction":
        return MatrixLipFunction(self.values * c)

    @staticmethod
    def scalar(values) -> "MatrixLipFunction":
        v = np.asarray(values, dtype=np.complex128)
        return MatrixLipFunction(v.reshape(1, 1, -1))

    @staticmethod
    def zero(k: int, npoints: int) -> "MatrixLipFunction":
        return MatrixLipFunction(np.zeros((k, k, npoints), dtype=np.complex128))


def scalar_function(space: OperatorMetricSpace, values_by_label: dict) -> MatrixLipFunction:
    """Scalar function from a label -> value mapping (basepoint forced to 0)."""
    v = np.zeros(space.npoints, dtype=np.complex128)
    for name, val in values_by_label.items():
        v[space.index_of(name)] = val
    v[0] = 0.0
    return MatrixLipFunction.scalar(v)


@dataclass(frozen=True)
class PointMap:
    """Basepoint-preserving map between spaces, given by a point-index assignment."""

    source: OperatorMetricSpace
    target: OperatorMetricSpace
    assignment: tuple[int, ...]

    def __post_init__(self):
        if len(self.assignment) != self.source.npoints:
            raise MatrixInputError("assignment must cover every source point")
        if self.assignment[0] != 0:
            raise MatrixInputError("a point map must send basepoint to basepoint")
        for t in self.assignment:
            if not 0 <= t < self.target.npoints:
                raise MatrixInputError(f"target index {t} out of range")

    def __call__(self, idx: int) -> int:
        return self.assignment[idx]

    def is_bijective(self) -> bool:
        return len(set(self.assignment)) == self.source.npoints == self.target.npoints

    def inverse(self) -> "PointMap":
        if not self.is_bijective():
            raise MatrixInputError("inverse of a non-bijective point map")
        inv = [0] * self.target.npoints
        for i, t in enumerate(self.assignment):
            inv[t] = i
        return PointMap(self.target, self.source, tuple(inv))

    def compose(self, inner: "PointMap") -> "PointMap":
        """self after inner."""
        if inner.target is not self.source:
            raise MatrixInputError("composition needs matching spaces")
        return PointMap(
            inner.source, self.target, tuple(self.assignment[t] for t in inner.assignment)
        )


@dataclass(frozen=True)
class LipEstimate:
    """A computed Lipschitz maximum plus the soundness flag of its pair set."""

    value: float
    sampled: bool
    argmax: int = -1

    def __float__(self) -> float:
        return self.value


# ---------------------------------------------------------------------------
# amplified Lipschitz constants


def function_pair_norms(func: MatrixLipFunction, pairs: PairSet) -> np.ndarray:
    """||[F(a_ij) - F(b_ij)]|| for every pair, as nk-by-nk assembled norms."""
    V = func.values
    diff = V[:, :, pairs.a_idx] - V[:, :, pairs.b_idx]  # (k, k, P, n, n)
    k = func.k
    P, n, _ = pairs.a_idx.shape
    mats = diff.transpose(2, 3, 0, 4, 1).reshape(P, n * k, n * k)
    return batched_spectral_norms(mats)


def lip_constant(
    func: MatrixLipFunction, space: OperatorMetricSpace, n: int, pairs: PairSet
) -> LipEstimate:
    """Max pair ratio of assembled function differences over amplified distances.

    Exact over full enumeration; a lower bound (flagged) under sampling.
    """
    if len(pairs) == 0:
        raise MatrixInputError("lip_constant needs a nonempty pair set")
    if func.npoints != space.npoints:
        raise MatrixInputError("function defined on a different space")
    nums = function_pair_norms(func, pairs)
    ratios = nums / pairs.dists
    arg = int(np.argmax(ratios))
    return LipEstimate(float(ratios[arg]), pairs.sampled, arg)


def ball_violation(
    func: MatrixLipFunction, space: OperatorMetricSpace, n: int, pairs: PairSet
) -> float:
    """Worst constraint margin: max over pairs of (||diff|| - dist); <= 0 is feasible."""
    nums = function_pair_norms(func, pairs)
    return float(np.max(nums - pairs.dists))


def _image_pair_norms(L: PointMap, pairs: PairSet) -> np.ndarray:
    asg = np.asarray(L.assignment, dtype=np.int64)
    ia = asg[pairs.a_idx]
    ib = asg[pairs.b_idx]
    if pairs.full_matrix is not None and L.target is L.source:
        N = L.target.npoints
        n = pairs.n
        powers = N ** np.arange(n * n - 1, -1, -1, dtype=np.int64)
        ra = ia.reshape(len(pairs), n * n) @ powers
        rb = ib.reshape(len(pairs), n * n) @ powers
        return pairs.full_matrix[ra, rb]
    return pair_norms(L.target, ia, ib)


def map_lip_constant(L: PointMap, n: int, pairs: PairSet) -> LipEstimate:
    """Level-n Lipschitz constant of a point map over the supplied source pairs."""
    if len(pairs) == 0:
        raise MatrixInputError("map_lip_constant needs a nonempty pair set")
    if pairs.space is not L.source:
        raise MatrixInputError("pair set belongs to a different space")
    nums = _image_pair_norms(L, pairs)
    ratios = nums / pairs.dists
    arg = int(np.argmax(ratios))
    return LipEstimate(float(ratios[arg]), pairs.sampled, arg)


def map_distortion(L: PointMap, n: int, mode: str = "full", **pair_opts):
    """(Lip_n(L), Lip_n(L^-1)) for a bijective map; their product bounds the distortion."""
    if not L.is_bijective():
        raise MatrixInputError("distortion needs a bijective point map")
    fwd = map_lip_constant(L, n, constraint_pairs(L.source, n, mode=mode, **pair_opts))
    inv = L.inverse()
    bwd = map_lip_constant(inv, n, constraint_pairs(L.target, n, mode=mode, **pair_opts))
    return fwd, bwd


@dataclass(frozen=True)
class SandwichReport:
    lip1: float
    lipn: float
    n: int
    upper: float  # n^2 * lip1
    passed: bool
    certified: bool


def lip_sandwich_check(obj, space: OperatorMetricSpace, n: int, mode: str = "full", **pair_opts) -> SandwichReport:
    """Check lip1 <= lipn <= n^2*lip1 on computed maxima (exact comparison).

    Works for a MatrixLipFunction or a PointMap. Refuses to certify when
    either level's pair data is sampled; values are then informational.
    """
    p1 = constraint_pairs(space, 1, mode=mode, **pair_opts)
    pn = constraint_pairs(space, n, mode=mode, **pair_opts)
    if isinstance(obj, PointMap):
        e1 = map_lip_constant(obj, 1, p1)
        en = map_lip_constant(obj, n, pn)
    else:
        e1 = lip_constant(obj, space, 1, p1)
        en = lip_constant(obj, space, n, pn)
    certified = not (e1.sampled or en.sampled)
    upper = n * n * e1.value
    passed = bool(e1.value <= en.value <= upper) if certified else False
    return SandwichReport(e1.value, en.value, n, upper, passed, certified)


# ---------------------------------------------------------------------------
# symbolic matrix maps and finite-difference derivatives


class SymbolicMap:
    """Expression tree over {input, constant, sum, scalar multiple, product, adjoint}."""

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __add__(self, other):
        return Sum((self, other))

    def __mul__(self, other):
        if isinstance(other, SymbolicMap):
            return Product(self, other)
        return Scaled(other, self)

    def __rmul__(self, scalar):
        return Scaled(scalar, self)


class Var(SymbolicMap):
    def __call__(self, x):
        return np.asarray(x, dtype=np.complex128)


class Const(SymbolicMap):
    def __init__(self, mat):
        self.mat = as_matrix(mat)

    def __call__(self, x):
        return self.mat


class Sum(SymbolicMap):
    def __init__(self, terms):
        self.terms = tuple(terms)

    def __call__(self, x):
        out = self.terms[0](x)
        for t in self.terms[1:]:
            out = out + t(x)
        return out


class Scaled(SymbolicMap):
    def __init__(self, coeff, term):
        self.coeff = complex(coeff)
        self.term = term

    def __call__(self, x):
        return self.coeff * self.term(x)


class Product(SymbolicMap):
    def __init__(self, left, right):
        self.left = left
        self.right = right

    def __call__(self, x):
        return self.left(x) @ self.right(x)


class Adjoint(SymbolicMap):
    def __init__(self, term):
        self.term = term

    def __call__(self, x):
        return self.term(x).conj().T


DEFAULT_FD_SCHEDULE = (1e-3, 5e-4, 2.5e-4)


def gateaux_fd(f, x, a, schedule=DEFAULT_FD_SCHEDULE, rel_tol=1e-4) -> np.ndarray:
    """Central-difference directional derivative with one Richardson step.

    Two Richardson extrapolants are compared; disagreement beyond ``rel_tol``
    (relative) raises NumericalInstabilityError rather than returning a guess.
    """
    x = as_matrix(x)
    a = as_matrix(a)
    if len(schedule) < 3:
        raise MatrixInputError("need at least three step sizes")
    diffs = []
    for lam in schedule:
        diffs.append((np.asarray(f(x + lam * a)) - np.asarray(f(x - lam * a))) / (2 * lam))
    r1 = (4.0 * diffs[1] - diffs[0]) / 3.0
    r2 = (4.0 * diffs[2] - diffs[1]) / 3.0
    scale = max(1.0, float(np.linalg.norm(r2)))
    if float(np.linalg.norm(r2 - r1)) > rel_tol * scale:
        raise NumericalInstabilityError(
            f"extrapolants differ by {np.linalg.norm(r2 - r1):.3e} (scale {scale:.3e})"
        )
    return r2


class _LinearizedDerivative:
    """R-linear derivative estimate assembled from finite differences on a real basis."""

    def __init__(self, f, x, schedule=DEFAULT_FD_SCHEDULE):
        x = as_matrix(x)
        d = x.shape[0]
        t_re = []
        t_im = []
        for p in range(d):
            for q in range(d):
                e = np.zeros((d, d), dtype=np.complex128)
                e[p, q] = 1.0
                t_re.append(gateaux_fd(f, x, e, schedule))
                t_im.append(gateaux_fd(f, x, 1j * e, schedule))
        self.d = d
        self.t_re = np.asarray(t_re).reshape(d, d, *t_re[0].shape)
        self.t_im = np.asarray(t_im).reshape(d, d, *t_im[0].shape)

    def __call__(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.complex128)
        return np.einsum("pq,pqrs->rs", a.real, self.t_re) + np.einsum(
            "pq,pqrs->rs", a.imag, self.t_im
        )


def _grid_block(cells: np.ndarray) -> np.ndarray:
    return block_assemble(np.asarray(cells, dtype=np.complex128))


def _direction_grids(n: int, d: int, n_random: int, seed: int):
    """All single-cell matrix-unit grids plus seeded random complex grids."""
    grids = []
    for i in range(n):
        for j in range(n):
            for p in range(d):
                for q in range(d):
                    g = np.zeros((n, n, d, d), dtype=np.complex128)
                    g[i, j, p, q] = 1.0
                    grids.append(g)
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        g = rng.standard_normal((n, n, d, d)) + 1j * rng.standard_normal((n, n, d, d))
        grids.append(g / max(1.0, spectral_norm(_grid_block(g))))
    return grids


@dataclass(frozen=True)
class DerivativeReport:
    derivative_norm: float
    lip_estimate: float
    tol: float
    passed: bool
    n: int


def derivative_bound_check(
    f,
    x,
    n: int,
    n_random: int = 64,
    seed: int = 0,
    lam: float = 1e-3,
    tol: float = 1e-3,
    schedule=DEFAULT_FD_SCHEDULE,
) -> DerivativeReport:
    """Sampled check that the level-n norm of the estimated derivative is
    bounded by a sampled level-n Lipschitz estimate of f near x.

    The Lipschitz mesh includes the pairs ([x + lam*a], [x]) for the very
    direction grids used for the derivative norm, so the inequality is checked
    against a mesh that can actually witness the derivative.
    """
    x = as_matrix(x)
    d = x.shape[0]
    dhat = _LinearizedDerivative(f, x, schedule)
    grids = _direction_grids(n, d, n_random, seed)

    dnorm = 0.0
    lip_est = 0.0
    const_x = np.broadcast_to(x, (n, n, d, d))
    for g in grids:
        denom = spectral_norm(_grid_block(g))
        if denom <= 0:
            continue
        img = np.asarray([[dhat(g[i, j]) for j in range(n)] for i in range(n)])
        dnorm = max(dnorm, spectral_norm(_grid_block(img)) / denom)
        shifted = const_x + lam * g
        f_shift = np.asarray([[f(shifted[i, j]) for j in range(n)] for i in range(n)])
        f_base = np.asarray([[f(x) for _ in range(n)] for _ in range(n)])
        num = spectral_norm(_grid_block(f_shift - f_base))
        lip_est = max(lip_est, num / (lam * denom))
    rng = np.random.default_rng(seed + 1)
    for _ in range(16):
        ga = rng.standard_normal((n, n, d, d)) + 1j * rng.standard_normal((n, n, d, d))
        gb = rng.standard_normal((n, n, d, d)) + 1j * rng.standard_normal((n, n, d, d))
        pa = const_x + lam * ga
        pb = const_x + lam * gb
        denom = spectral_norm(_grid_block(pa - pb))
        if denom <= 0:
            continue
        fa = np.asarray([[f(pa[i, j]) for j in range(n)] for i in range(n)])
        fb = np.asarray([[f(pb[i, j]) for j in range(n)] for i in range(n)])
        lip_est = max(lip_est, spectral_norm(_grid_block(fa - fb)) / denom)
    return DerivativeReport(dnorm, lip_est, tol, bool(dnorm <= lip_est + tol), n)
