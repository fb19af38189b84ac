"""Two-point zeroth-order gradient estimation.

Perturbations are never stored: each recipe carries the seed needed to
regenerate its draw bit-identically, and the in-place perturb / evaluate /
un-perturb loop replays seeds instead of caching tensors. Restoration copies
the pre-step values back (IEEE round-to-nearest makes the arithmetic
(x + a) - a differ from x on a few percent of entries, which would break the
bit-exact restore contract), and a checksum guards the round trip.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Union

import numpy as np

from .align import make_aligned
from .errors import DimensionError, InternalError, NumericError
from .objectives import Batch, LossOracle, ParamKind, ParamSet, eval_loss
from .randsrc import GaussStream, Seed, derive_substream, gauss_like, gauss_matrix, rademacher_sign


@dataclass(frozen=True)
class FullGaussian:
    """Regenerate an i.i.d. N(0,1) perturbation of the parameter's shape."""

    seed: Seed


@dataclass(frozen=True)
class SubspaceAligned:
    """Regenerate an r x r draw, project it onto the coefficient hyperplane,
    and lift it through the basis frames."""

    seed: Seed
    basis: object  # SubspaceBasis; duck-typed to avoid a module cycle
    delta: float
    xi: int


Recipe = Union[FullGaussian, SubspaceAligned]


@dataclass(frozen=True)
class PerturbPlan:
    """Per-parameter perturbation recipes plus the shared scale eps.

    Regenerating from the plan reproduces every perturbation bit-exactly.
    """

    eps: float
    recipes: tuple[tuple[str, Recipe], ...]

    def __post_init__(self) -> None:
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


def materialize(recipe: Recipe, template: np.ndarray) -> np.ndarray:
    """Regenerate the perturbation for a parameter shaped like `template`."""
    if isinstance(recipe, FullGaussian):
        return gauss_like(GaussStream(recipe.seed), template)
    basis = recipe.basis
    r = basis.s_r.shape[0]
    z_init = gauss_matrix(GaussStream(recipe.seed), r, r)
    lifted = make_aligned(z_init, basis, recipe.delta, recipe.xi).lifted
    if lifted.shape != template.shape:
        raise DimensionError(
            f"basis frames produce shape {lifted.shape}, parameter is {template.shape}"
        )
    return lifted


def plan_full_gaussian(params: ParamSet, eps: float, seed: Seed) -> PerturbPlan:
    """Full Gaussian recipes for every parameter (baseline and probe plans)."""
    recipes = tuple(
        (p.name, FullGaussian(derive_substream(seed, p.name, 0))) for p in params
    )
    return PerturbPlan(eps=eps, recipes=recipes)


def plan_for_step(params: ParamSet, bases: dict, eps: float, delta: float,
                  seed: Seed) -> PerturbPlan:
    """Subspace-aligned recipes where a basis exists, full Gaussian elsewhere.

    xi is drawn per parameter from a derived substream and stored in the
    recipe, so the plan alone reproduces the perturbation.
    """
    recipes: list[tuple[str, Recipe]] = []
    for p in params:
        sub = derive_substream(seed, p.name, 0)
        if p.kind is ParamKind.MATRIX_SUBSPACE and p.name in bases:
            xi = rademacher_sign(GaussStream(derive_substream(seed, f"xi:{p.name}", 0)))
            recipes.append((p.name, SubspaceAligned(sub, bases[p.name], delta, xi)))
        else:
            recipes.append((p.name, FullGaussian(sub)))
    return PerturbPlan(eps=eps, recipes=tuple(recipes))


def apply_signed_perturbation(params: ParamSet, plan: PerturbPlan, sign: int) -> None:
    """In place: every parameter p becomes p + sign * eps * (regenerated draw).

    Perturbations are regenerated one parameter at a time, never cached
    across parameters.
    """
    for name, recipe in plan.recipes:
        tensor = params[name].tensor
        tensor += sign * plan.eps * materialize(recipe, tensor)


def _checksum(params: ParamSet) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for p in params:
        h.update(p.name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.tensor).tobytes())
    return h.digest()


@dataclass
class ZoStepRecord:
    """One two-point estimate: rho = (loss_plus - loss_minus) / (2 eps)."""

    step: int
    rho: float
    loss_plus: float
    loss_minus: float
    plan: PerturbPlan


def two_point_coeff(oracle: LossOracle, params: ParamSet, plan: PerturbPlan,
                    batch: Batch | None, step: int = 0) -> ZoStepRecord:
    """Evaluate the projected gradient coefficient for one perturbation plan.

    Exactly two oracle evaluations; params are restored bit-exactly to their
    pre-call values and the restoration is checksum-verified.
    """
    before = _checksum(params)
    snapshot = {p.name: p.tensor.copy() for p in params}
    try:
        apply_signed_perturbation(params, plan, +1)
        loss_plus = eval_loss(oracle, params, batch)
        apply_signed_perturbation(params, plan, -2)
        loss_minus = eval_loss(oracle, params, batch)
    finally:
        for p in params:
            np.copyto(p.tensor, snapshot[p.name])
    if _checksum(params) != before:
        raise InternalError("parameter restoration checksum mismatch")

    rho = (loss_plus - loss_minus) / (2.0 * plan.eps)
    if not np.isfinite(rho):
        raise NumericError(f"non-finite coefficient from losses "
                           f"({loss_plus}, {loss_minus})")
    return ZoStepRecord(step=step, rho=rho, loss_plus=loss_plus,
                        loss_minus=loss_minus, plan=plan)


def averaged_estimate(oracle: LossOracle, params: ParamSet,
                      plans: list[PerturbPlan], batch: Batch | None,
                      step: int = 0) -> tuple[dict[str, np.ndarray], list[ZoStepRecord]]:
    """Average of per-plan estimates (1/n) sum_i rho_i * u_i, materialized
    per parameter; the i.i.d. probes reduce estimator variance by 1/n."""
    if not plans:
        raise ValueError("need at least one perturbation plan")
    records = [two_point_coeff(oracle, params, plan, batch, step) for plan in plans]
    estimate: dict[str, np.ndarray] = {}
    inv_n = 1.0 / len(plans)
    for rec in records:
        for name, recipe in rec.plan.recipes:
            contrib = (rec.rho * inv_n) * materialize(recipe, params[name].tensor)
            if name in estimate:
                estimate[name] += contrib
            else:
                estimate[name] = contrib
    return estimate, records
