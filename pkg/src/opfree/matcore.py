"""Dense complex matrix kernels: spectral norms, singular pairs, block assembly.

Everything downstream (amplified distances, Lipschitz constants, norm
brackets) reduces to spectral norms of assembled complex matrices, so this
module owns the numerical conventions: complex128 storage, a fixed relative
tolerance ``TOL_SVD`` for singular data, and explicit errors instead of
best-effort values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOL_SVD = 1e-10


class MatrixInputError(ValueError):
    """A matrix argument is malformed: non-finite entries, ragged blocks, wrong shape."""


class DegenerateInputError(ValueError):
    """The operation needs a nonzero / nondegenerate input."""


class ConvergenceError(RuntimeError):
    """The singular value computation did not converge."""


def as_matrix(entries) -> np.ndarray:
    """Coerce to a finite complex128 2-d array, validating shape and entries."""
    M = np.asarray(entries, dtype=np.complex128)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    if M.ndim != 2:
        raise MatrixInputError(f"expected a 2-d matrix, got shape {M.shape}")
    require_finite(M)
    return M


def require_finite(M: np.ndarray) -> None:
    if not np.all(np.isfinite(M)):
        raise MatrixInputError("matrix has non-finite entries")


def spectral_norm(M) -> float:
    """Largest singular value of ``M`` (operator norm on matrices)."""
    M = as_matrix(M)
    if M.size == 0:
        return 0.0
    if M.shape == (1, 1):
        return float(abs(M[0, 0]))
    try:
        s = np.linalg.svd(M, compute_uv=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ConvergenceError(f"SVD did not converge: {exc}") from exc
    return float(s[0])


@dataclass(frozen=True)
class SingularPair:
    """Top singular triple (sigma, left, right) with ``M @ right ~ sigma * left``."""

    sigma: float
    left: np.ndarray
    right: np.ndarray

    def residual(self, M: np.ndarray) -> float:
        return float(np.linalg.norm(M @ self.right - self.sigma * self.left))


def top_singular_pair(M) -> SingularPair:
    """Top singular pair of a nonzero matrix, with a deterministic phase.

    The phase is fixed so the largest-modulus component of the left vector is
    real and positive. Raises ``DegenerateInputError`` on the zero matrix.
    """
    M = as_matrix(M)
    if not np.any(M):
        raise DegenerateInputError("top_singular_pair of the zero matrix")
    try:
        U, s, Vh = np.linalg.svd(M)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise ConvergenceError(f"SVD did not converge: {exc}") from exc
    u = U[:, 0]
    v = Vh[0].conj()
    k = int(np.argmax(np.abs(u)))
    phase = u[k] / abs(u[k])
    u = u / phase
    v = v / phase
    pair = SingularPair(float(s[0]), u, v)
    res = pair.residual(M)
    if res > TOL_SVD * max(1.0, pair.sigma) * 100:
        raise ConvergenceError(f"singular pair residual {res:.3e} exceeds tolerance")
    return pair


def block_assemble(blocks) -> np.ndarray:
    """Assemble an n-by-n grid of equally sized d-by-d blocks into one nd-by-nd matrix.

    Accepts a nested sequence or an array of shape (n, n, d, d). Ragged or
    non-square layouts raise ``MatrixInputError``.
    """
    if isinstance(blocks, np.ndarray) and blocks.ndim == 4:
        arr = np.asarray(blocks, dtype=np.complex128)
    else:
        try:
            arr = np.asarray(
                [[as_matrix(b) for b in row] for row in blocks], dtype=np.complex128
            )
        except (ValueError, MatrixInputError) as exc:
            raise MatrixInputError(f"ragged or malformed block grid: {exc}") from exc
    if arr.ndim != 4 or arr.shape[0] != arr.shape[1] or arr.shape[2] != arr.shape[3]:
        raise MatrixInputError(f"expected an (n, n, d, d) block grid, got {arr.shape}")
    require_finite(arr)
    n, _, d, _ = arr.shape
    return arr.transpose(0, 2, 1, 3).reshape(n * d, n * d)


def direct_sum(mats) -> np.ndarray:
    """Block-diagonal direct sum of square matrices."""
    mats = [as_matrix(m) for m in mats]
    dims = [m.shape[0] for m in mats]
    if any(m.shape[0] != m.shape[1] for m in mats):
        raise MatrixInputError("direct_sum needs square blocks")
    out = np.zeros((sum(dims), sum(dims)), dtype=np.complex128)
    off = 0
    for m, d in zip(mats, dims):
        out[off : off + d, off : off + d] = m
        off += d
    return out


def batched_spectral_norms(stack: np.ndarray) -> np.ndarray:
    """Top singular value of each matrix in a (..., r, c) stack.

    2x2 and 1x1 matrices use closed forms; everything else goes through the
    batched LAPACK SVD.
    """
    stack = np.asarray(stack, dtype=np.complex128)
    r, c = stack.shape[-2:]
    if r == 1 and c == 1:
        return np.abs(stack[..., 0, 0])
    if r == 2 and c == 2:
        # sigma_max^2 = (t + sqrt(t^2 - 4q)) / 2 with t = ||M||_F^2, q = |det|^2
        t = np.sum(np.abs(stack) ** 2, axis=(-2, -1))
        det = stack[..., 0, 0] * stack[..., 1, 1] - stack[..., 0, 1] * stack[..., 1, 0]
        q = np.abs(det) ** 2
        disc = np.sqrt(np.maximum(t * t - 4.0 * q, 0.0))
        return np.sqrt(np.maximum((t + disc) / 2.0, 0.0))
    try:
        s = np.linalg.svd(stack, compute_uv=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise ConvergenceError(f"batched SVD did not converge: {exc}") from exc
    return s[..., 0]


def polar_unitary(M) -> np.ndarray:
    """Unitary factor of the polar decomposition (nearest unitary to ``M``)."""
    M = as_matrix(M)
    U, _, Vh = np.linalg.svd(M)
    return U @ Vh
