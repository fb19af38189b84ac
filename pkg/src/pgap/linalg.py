"""Dense matrix arithmetic: Frobenius products, truncated SVD, Kronecker checks.

All routines operate on 2-D float64 arrays. Scalars are 64-bit throughout;
the lemma-verification tolerances used elsewhere (1e-10) are unreachable in
32-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

# Below this size an exact LAPACK SVD is cheap; above it a randomized range
# finder (Gaussian sketch, 2 power iterations) feeds an exact SVD of the
# projected core.
_EXACT_SVD_MAX_DIM = 64
_SKETCH_OVERSAMPLE = 8
_POWER_ITERATIONS = 2


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be non-empty, got shape {arr.shape}")
    return arr


def vec(a: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization (columns concatenated top to bottom)."""
    return np.asarray(a).ravel(order="F")


def frob_inner(a, b) -> float:
    """Frobenius inner product Tr(a^T b) = sum_ij a_ij * b_ij."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.tensordot(a, b, axes=a.ndim))


def frob_norm(a) -> float:
    """Frobenius norm sqrt(<a, a>_F); plain 2-norm for vectors."""
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


@dataclass(frozen=True)
class SvdTriple:
    """Rank-r SVD frames: u (m x r), s (r, descending >= 0), v (n x r)."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.s.shape[0]

    def s_diag(self) -> np.ndarray:
        """Singular values as the r x r diagonal coefficient matrix."""
        return np.diag(self.s)

    def reconstruct(self) -> np.ndarray:
        """u @ diag(s) @ v^T."""
        return (self.u * self.s) @ self.v.T

    def orthonormality_defect(self) -> float:
        """Max entrywise deviation of u^T u and v^T v from identity."""
        r = self.rank
        du = np.abs(self.u.T @ self.u - np.eye(r)).max()
        dv = np.abs(self.v.T @ self.v - np.eye(r)).max()
        return float(max(du, dv))


def _exact_svd(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        u, s, vt = np.linalg.svd(g, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge on shape {g.shape}: {exc}") from exc
    return u, s, vt


def truncated_svd(g, r: int) -> SvdTriple:
    """Best rank-r approximation frames of `g`.

    For min(m, n) <= 64 an exact LAPACK SVD is truncated. Above that, a
    Gaussian sketch of width r+8 with 2 power iterations finds the range and
    an exact SVD of the projected core supplies the frames.
    """
    g = as_matrix(g, "g")
    m, n = g.shape
    if not 1 <= r <= min(m, n):
        raise DimensionError(f"rank r={r} must satisfy 1 <= r <= min{g.shape}")

    if min(m, n) <= _EXACT_SVD_MAX_DIM:
        u, s, vt = _exact_svd(g)
    else:
        # Randomized range finder. The sketch RNG is fixed: truncated_svd is a
        # pure function of its inputs.
        k = min(r + _SKETCH_OVERSAMPLE, min(m, n))
        rng = np.random.Generator(np.random.Philox(key=0x5FD3))
        omega = rng.standard_normal((n, k))
        y = g @ omega
        for _ in range(_POWER_ITERATIONS):
            q, _ = np.linalg.qr(y)
            q, _ = np.linalg.qr(g.T @ q)
            y = g @ q
        q, _ = np.linalg.qr(y)
        core = q.T @ g
        ub, s, vt = _exact_svd(core)
        u = q @ ub

    s = np.maximum(s[:r], 0.0)
    return SvdTriple(u=np.ascontiguousarray(u[:, :r]), s=s,
                     v=np.ascontiguousarray(vt[:r, :].T))


def kron_vec_check(u, v, z) -> float:
    """Residual of the identity vec(u z v^T) = (v kron u) vec(z).

    Test-support operation: builds the Kronecker product explicitly, so keep
    m*n modest.
    """
    u = as_matrix(u, "u")
    v = as_matrix(v, "v")
    z = as_matrix(z, "z")
    r = u.shape[1]
    if v.shape[1] != r or z.shape != (r, r):
        raise DimensionError(
            f"need u m x r, v n x r, z r x r; got {u.shape}, {v.shape}, {z.shape}"
        )
    lifted = vec(u @ z @ v.T)
    kron = np.kron(v, u) @ vec(z)
    return float(np.linalg.norm(lifted - kron))
