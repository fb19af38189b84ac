"""Gradient-aligned perturbation construction.

A random perturbation is corrected so that its (Frobenius) inner product
with the estimated gradient's coefficient matrix equals xi * sqrt(delta)
times that matrix's norm — an affine projection onto a hyperplane. The
low-dimensional form operates on r x r coefficients and is lifted back to
parameter space through the orthonormal frame pair; full-space matrix and
vector variants are kept for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .linalg import as_matrix, frob_inner, frob_norm

# Below this Frobenius norm the coefficient matrix is treated as degenerate
# and the projection is skipped: dividing by a vanishing norm would produce a
# correction of magnitude ~1/norm that destroys the step.
def _degenerate_threshold(r: int) -> float:
    return 1e-8 * r


def _check_xi(xi: int) -> int:
    if xi not in (-1, 1):
        raise ValueError(f"xi must be -1 or +1, got {xi}")
    return xi


def _check_delta(delta: float) -> float:
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    return float(delta)


def project_lowdim(z_init: np.ndarray, s_r: np.ndarray, delta: float,
                   xi: int) -> np.ndarray:
    """Correct an r x r Gaussian draw onto the coefficient hyperplane.

    Returns z_init - alpha * s_r with
    alpha = (<s_r, z_init>_F - xi sqrt(delta) ||s_r||_F) / ||s_r||_F^2, so
    the output satisfies <s_r, Z>_F = xi sqrt(delta) ||s_r||_F. A degenerate
    s_r passes z_init through unchanged.
    """
    z_init = as_matrix(z_init, "z_init")
    s_r = as_matrix(s_r, "s_r")
    if z_init.shape != s_r.shape or z_init.shape[0] != z_init.shape[1]:
        raise DimensionError(
            f"z_init and s_r must be equal square shapes, got "
            f"{z_init.shape} and {s_r.shape}"
        )
    _check_xi(xi)
    _check_delta(delta)

    g = frob_norm(s_r)
    if g <= _degenerate_threshold(s_r.shape[0]):
        return z_init.copy()
    f = frob_inner(s_r, z_init)
    alpha = (f - xi * np.sqrt(delta) * g) / (g * g)
    return z_init - alpha * s_r


def lift(z: np.ndarray, basis) -> np.ndarray:
    """Map an r x r perturbation to parameter space: u_r @ z @ v_r^T.

    Orthonormal frames preserve the Frobenius norm.
    """
    z = as_matrix(z, "z")
    u, v = basis.u_r, basis.v_r
    if u.shape[1] != z.shape[0] or v.shape[1] != z.shape[1]:
        raise DimensionError(
            f"frames {u.shape} x {v.shape} do not conform with z {z.shape}"
        )
    return u @ z @ v.T


def align_fullspace_matrix(c_init: np.ndarray, grad: np.ndarray, delta: float,
                           xi: int) -> np.ndarray:
    """Full-space hyperplane correction of an m x n perturbation.

    Retains the component of c_init parallel to the hyperplane
    <grad, C>_F = xi sqrt(delta) ||grad||_F; a degenerate grad passes c_init
    through.
    """
    c_init = as_matrix(c_init, "c_init")
    grad = as_matrix(grad, "grad")
    if c_init.shape != grad.shape:
        raise DimensionError(f"shape mismatch: {c_init.shape} vs {grad.shape}")
    _check_xi(xi)
    _check_delta(delta)

    g = frob_norm(grad)
    if g <= _degenerate_threshold(min(grad.shape)):
        return c_init.copy()
    f = frob_inner(grad, c_init)
    alpha = (f - xi * np.sqrt(delta) * g) / (g * g)
    return c_init - alpha * grad


def align_fullspace_vector(v_init: np.ndarray, grad: np.ndarray, delta: float,
                           xi: int) -> np.ndarray:
    """Vector specialization: output dotted with grad is xi sqrt(delta) ||grad||."""
    v_init = np.asarray(v_init, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if v_init.ndim != 1 or v_init.shape != grad.shape:
        raise DimensionError(f"need equal 1-D shapes, got {v_init.shape}, {grad.shape}")
    _check_xi(xi)
    _check_delta(delta)

    g = float(np.linalg.norm(grad))
    if g <= _degenerate_threshold(1):
        return v_init.copy()
    f = float(grad @ v_init)
    alpha = (f - xi * np.sqrt(delta) * g) / (g * g)
    return v_init - alpha * grad


@dataclass(frozen=True)
class AlignedPerturbation:
    """A corrected low-dimensional perturbation and its lift.

    Invariants: <s_r, low_dim>_F = xi sqrt(delta) ||s_r||_F within
    1e-9 * (1 + ||s_r||_F), and lifted = u_r @ low_dim @ v_r^T.
    """

    low_dim: np.ndarray
    lifted: np.ndarray
    xi: int
    delta: float

    def hyperplane_residual(self, s_r: np.ndarray) -> float:
        g = frob_norm(s_r)
        return abs(frob_inner(s_r, self.low_dim) - self.xi * np.sqrt(self.delta) * g)


def make_aligned(z_init: np.ndarray, basis, delta: float, xi: int) -> AlignedPerturbation:
    """Project z_init against the basis coefficients and lift the result."""
    s_diag = np.diag(basis.s_r)
    low = project_lowdim(z_init, s_diag, delta, xi)
    return AlignedPerturbation(low_dim=low, lifted=lift(low, basis),
                               xi=xi, delta=delta)


def consistency_check_lowdim_vs_fullspace(basis, z_init: np.ndarray, delta: float,
                                          xi: int) -> float:
    """Discrepancy between the low-dimensional route and the full-space one.

    For a gradient representable exactly as u_r diag(s_r) v_r^T and an
    initial perturbation restricted to the frame span, the lifted projected
    perturbation and the full-space correction agree; returns the Frobenius
    norm of their difference (test-support operation).
    """
    z_init = as_matrix(z_init, "z_init")
    u, v = basis.u_r, basis.v_r
    s_diag = np.diag(basis.s_r)
    grad = (u * basis.s_r) @ v.T

    z_low = u.T @ z_init @ v
    lifted_low = lift(project_lowdim(z_low, s_diag, delta, xi), basis)

    c_init_span = u @ z_low @ v.T
    full = align_fullspace_matrix(c_init_span, grad, delta, xi)
    return frob_norm(lifted_low - full)
