"""Lazy low-rank gradient-space estimation.

Every k steps, h joint Gaussian probes build a probe-averaged gradient
estimate per matrix parameter; a truncated SVD of each estimate yields the
frame pair and coefficient matrix reused for the following k steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError
from .estimator import materialize, plan_full_gaussian, two_point_coeff
from .linalg import truncated_svd
from .objectives import Batch, LossOracle, ParamKind, ParamSet
from .randsrc import Seed, derive_substream


@dataclass(frozen=True)
class SubspaceBasis:
    """Per-matrix SVD frames of the probe-averaged gradient.

    u_r and v_r have orthonormal columns; s_r is non-negative and
    non-increasing. Consumers must not use a basis once step - born_at_step
    reaches the refresh window.
    """

    u_r: np.ndarray
    s_r: np.ndarray
    v_r: np.ndarray
    born_at_step: int

    @property
    def rank(self) -> int:
        return self.s_r.shape[0]

    def s_diag(self) -> np.ndarray:
        return np.diag(self.s_r)


@dataclass(frozen=True)
class RefreshSchedule:
    """Refresh fires at steps t with t mod k == 0; h probes per refresh."""

    k: int
    h: int

    def __post_init__(self) -> None:
        if self.k < 1 or self.h < 1:
            raise ValueError(f"k and h must be >= 1, got k={self.k}, h={self.h}")


def should_refresh(schedule: RefreshSchedule, step: int) -> bool:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return step % schedule.k == 0


def probe_plan(params: ParamSet, eps: float, seed: Seed, j: int):
    """The j-th probe's joint full-Gaussian plan (public so replays and tests
    can rebuild the exact probe perturbations)."""
    return plan_full_gaussian(params, eps, derive_substream(seed, "probe", j))


def lower_dim_generate(oracle: LossOracle, params: ParamSet, h: int, r: int,
                       eps: float, seed: Seed, batch: Batch | None = None,
                       born_at_step: int = 0) -> dict[str, SubspaceBasis]:
    """Probe-averaged gradient estimate and truncated SVD per matrix parameter.

    Each probe perturbs all parameters jointly (dense ones included, so the
    shared coefficient rho_j reflects the full joint directional derivative)
    but only matrix-subspace parameters accumulate G += (rho_j / h) * Q_j.
    Exactly 2h oracle evaluations; params are restored bit-exactly.
    """
    if h < 1:
        raise ValueError(f"h must be >= 1, got {h}")
    matrix_names = params.matrix_subspace_names()
    for name in matrix_names:
        shape = params[name].tensor.shape
        if r > min(shape):
            raise DimensionError(f"rank {r} exceeds min{shape} of parameter {name!r}")

    accum = {name: np.zeros_like(params[name].tensor) for name in matrix_names}
    for j in range(h):
        plan = probe_plan(params, eps, seed, j)
        rec = two_point_coeff(oracle, params, plan, batch, step=born_at_step)
        scale = rec.rho / h
        for name, recipe in plan.recipes:
            if name in accum:
                accum[name] += scale * materialize(recipe, params[name].tensor)

    bases: dict[str, SubspaceBasis] = {}
    for name in matrix_names:
        try:
            triple = truncated_svd(accum[name], r)
        except NumericError as exc:
            raise NumericError(f"SVD failed for parameter {name!r}: {exc}") from exc
        bases[name] = SubspaceBasis(u_r=triple.u, s_r=triple.s, v_r=triple.v,
                                    born_at_step=born_at_step)
    return bases


def subspace_capture(basis: SubspaceBasis, true_grad: np.ndarray) -> float:
    """Fraction of the gradient's norm missed by the Kronecker-lifted projector.

    Returns ||(I - P P^T) vec(G)|| / ||G||_F with P = v_r kron u_r, computed
    without forming P: the projected matrix is u_r u_r^T G v_r v_r^T. Zero
    gradient returns 0 by convention. Test-support operation.
    """
    g = np.asarray(true_grad, dtype=np.float64)
    if g.shape != (basis.u_r.shape[0], basis.v_r.shape[0]):
        raise DimensionError(
            f"gradient shape {g.shape} does not match frames "
            f"({basis.u_r.shape[0]}, {basis.v_r.shape[0]})"
        )
    norm = np.linalg.norm(g)
    if norm == 0.0:
        return 0.0
    projected = basis.u_r @ (basis.u_r.T @ g @ basis.v_r) @ basis.v_r.T
    return float(np.linalg.norm(g - projected) / norm)
