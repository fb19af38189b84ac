"""Desk-scale training objectives and data plumbing.

Oracles are immutable after construction; `loss` is a pure function of
(params, batch) and never mutates its arguments, so repeated evaluation is
bit-stable. Per-example loss reductions use compensated summation
(math.fsum): the two-point coefficient downstream is a difference of nearly
equal losses divided by a small 2*eps, and accumulation noise there would
corrupt the exactness tests.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParseError
from .randsrc import GaussStream, Seed, derive_substream, gauss_matrix, gauss_vector


class ParamKind(enum.Enum):
    """Dense parameters get full Gaussian perturbations; matrix-subspace
    parameters are eligible for subspace-aligned ones."""

    DENSE = "dense"
    MATRIX_SUBSPACE = "matrix_subspace"


@dataclass
class Param:
    name: str
    tensor: np.ndarray
    kind: ParamKind

    def __post_init__(self) -> None:
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        if self.tensor.ndim not in (1, 2):
            raise DimensionError(f"param {self.name!r} must be 1-D or 2-D")
        if self.kind is ParamKind.MATRIX_SUBSPACE and self.tensor.ndim != 2:
            raise DimensionError(f"matrix-subspace param {self.name!r} must be 2-D")


class ParamSet:
    """Ordered named parameter tensors; names unique, kinds immutable."""

    def __init__(self, params: Iterable[Param]):
        self._params = list(params)
        names = [p.name for p in self._params]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")
        self._by_name = {p.name: p for p in self._params}

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Param:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    @property
    def names(self) -> list[str]:
        return [p.name for p in self._params]

    def matrix_subspace_names(self) -> list[str]:
        return [p.name for p in self._params if p.kind is ParamKind.MATRIX_SUBSPACE]

    def size(self) -> int:
        return sum(p.tensor.size for p in self._params)

    def copy(self) -> "ParamSet":
        return ParamSet(Param(p.name, p.tensor.copy(), p.kind) for p in self._params)

    def bit_equal(self, other: "ParamSet") -> bool:
        if self.names != other.names:
            return False
        return all(
            np.array_equal(p.tensor, other[p.name].tensor, equal_nan=True)
            for p in self._params
        )


@dataclass
class Batch:
    """A mini-batch: inputs (examples x features), targets (n,) or (n, k)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise DimensionError("batch inputs must be 2-D (examples x features)")
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise DimensionError(
                f"row mismatch: {self.inputs.shape[0]} inputs vs "
                f"{self.targets.shape[0]} targets"
            )

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def _fsum(values: np.ndarray) -> float:
    """Compensated sum of a 1-D array of per-example values."""
    return math.fsum(values.tolist())


class LossOracle:
    """Evaluation contract: loss(params, batch) -> float, pure and bit-stable.

    `grad` is the exact analytic gradient, kept as a test oracle for the
    lemma-verification suites; the training loops never call it.
    """

    def loss(self, params: ParamSet, batch: Batch | None) -> float:
        raise NotImplementedError

    def grad(self, params: ParamSet, batch: Batch | None) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def init_params(self, seed: Seed) -> ParamSet:
        raise NotImplementedError


def eval_loss(oracle: LossOracle, params: ParamSet, batch: Batch | None) -> float:
    """Evaluate the oracle; non-finite results raise NumericError."""
    value = oracle.loss(params, batch)
    if not np.isfinite(value):
        raise NumericError(f"{type(oracle).__name__} produced non-finite loss {value}")
    return float(value)


def analytic_gradient(
    oracle: LossOracle, params: ParamSet, batch: Batch | None
) -> dict[str, np.ndarray]:
    """Exact gradient per parameter, matching central finite differences."""
    return oracle.grad(params, batch)


class QuadraticOracle(LossOracle):
    """f(x) = x^T H x on a single dense vector parameter.

    H is exposed directly so the verification suites can use the exact
    gradient (H + H^T) x; the two-point coefficient is exact on this task for
    every eps.
    """

    def __init__(self, h_matrix: np.ndarray, param_name: str = "x"):
        self.h = np.asarray(h_matrix, dtype=np.float64)
        if self.h.ndim != 2 or self.h.shape[0] != self.h.shape[1]:
            raise DimensionError("H must be square")
        self.param_name = param_name

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    def loss(self, params: ParamSet, batch: Batch | None) -> float:
        x = params[self.param_name].tensor
        if x.shape != (self.dim,):
            raise DimensionError(f"expected x of shape ({self.dim},), got {x.shape}")
        return float(x @ self.h @ x)

    def grad(self, params: ParamSet, batch: Batch | None) -> dict[str, np.ndarray]:
        x = params[self.param_name].tensor
        return {self.param_name: (self.h + self.h.T) @ x}

    def init_params(self, seed: Seed) -> ParamSet:
        stream = GaussStream(derive_substream(seed, "init", 0))
        return ParamSet([Param(self.param_name, gauss_vector(stream, self.dim),
                               ParamKind.DENSE)])


class RankStructuredQuadratic(LossOracle):
    """f(W) = 1/2 ||W - W_star||_F^2 with a planted low-rank initial offset.

    The curvature is isotropic over all m*n entries, but the gradient
    W - W_star starts (and, under subspace-confined updates, stays) inside a
    planted rank-`planted_rank` frame pair, so the subspace assumption is
    exactly satisfiable. Batch-independent.
    """

    def __init__(self, m: int, n: int, planted_rank: int, seed: Seed,
                 spectrum: Sequence[float] | None = None):
        if not 1 <= planted_rank <= min(m, n):
            raise DimensionError("planted rank exceeds matrix dimensions")
        self.m, self.n = m, n
        self.planted_rank = planted_rank
        if spectrum is None:
            # Skewed spectrum: dominant leading directions ease recovery from
            # noisy probes.
            spectrum = [2.0 ** (-i) for i in range(planted_rank)]
        if len(spectrum) != planted_rank:
            raise DimensionError("spectrum length must equal planted rank")
        self.spectrum = np.asarray(spectrum, dtype=np.float64)

        stream = GaussStream(derive_substream(seed, "plant", 0))
        qu, _ = np.linalg.qr(gauss_matrix(stream, m, planted_rank))
        qv, _ = np.linalg.qr(gauss_matrix(stream, n, planted_rank))
        self.u_star = qu
        self.v_star = qv
        self.w_star = gauss_matrix(stream, m, n)
        self.offset = (qu * self.spectrum) @ qv.T

    def loss(self, params: ParamSet, batch: Batch | None) -> float:
        d = params["w"].tensor - self.w_star
        return 0.5 * float(np.tensordot(d, d, axes=2))

    def grad(self, params: ParamSet, batch: Batch | None) -> dict[str, np.ndarray]:
        return {"w": params["w"].tensor - self.w_star}

    def init_params(self, seed: Seed) -> ParamSet:
        # The seed is accepted for interface uniformity; the planted offset is
        # part of the task so replicates share it.
        del seed
        return ParamSet([Param("w", self.w_star + self.offset,
                               ParamKind.MATRIX_SUBSPACE)])


class LeastSquaresOracle(LossOracle):
    """f(w) = 1/(2n) sum_i (x_i . w - y_i)^2 on a dense weight vector."""

    def __init__(self, dim: int, param_name: str = "w"):
        self.dim = dim
        self.param_name = param_name

    def loss(self, params: ParamSet, batch: Batch) -> float:
        w = params[self.param_name].tensor
        r = batch.inputs @ w - batch.targets
        return _fsum(r * r) / (2.0 * batch.n)

    def grad(self, params: ParamSet, batch: Batch) -> dict[str, np.ndarray]:
        w = params[self.param_name].tensor
        r = batch.inputs @ w - batch.targets
        return {self.param_name: batch.inputs.T @ r / batch.n}

    def init_params(self, seed: Seed) -> ParamSet:
        del seed
        return ParamSet([Param(self.param_name, np.zeros(self.dim), ParamKind.DENSE)])


class LogisticOracle(LossOracle):
    """Binary logistic regression with weights arranged as matrices.

    The flat weight vector is the row-major concatenation of the matrix
    parameters, which lets the subspace machinery act on each block. Labels
    are +-1. At zero weights the loss is ln 2 per example.
    """

    def __init__(self, shapes: Sequence[tuple[int, int]]):
        if not shapes:
            raise DimensionError("need at least one weight matrix")
        self.shapes = [tuple(s) for s in shapes]
        self.dim = sum(m * n for m, n in self.shapes)

    def _flat(self, params: ParamSet) -> np.ndarray:
        return np.concatenate(
            [params[f"w{i}"].tensor.ravel() for i in range(len(self.shapes))]
        )

    def loss(self, params: ParamSet, batch: Batch) -> float:
        w = self._flat(params)
        if batch.inputs.shape[1] != self.dim:
            raise DimensionError(
                f"features {batch.inputs.shape[1]} != weight dim {self.dim}"
            )
        margins = batch.targets * (batch.inputs @ w)
        return _fsum(np.logaddexp(0.0, -margins)) / batch.n

    def grad(self, params: ParamSet, batch: Batch) -> dict[str, np.ndarray]:
        w = self._flat(params)
        margins = batch.targets * (batch.inputs @ w)
        coeff = -batch.targets / (1.0 + np.exp(margins)) / batch.n
        flat = batch.inputs.T @ coeff
        out: dict[str, np.ndarray] = {}
        pos = 0
        for i, (m, n) in enumerate(self.shapes):
            out[f"w{i}"] = flat[pos:pos + m * n].reshape(m, n)
            pos += m * n
        return out

    def init_params(self, seed: Seed) -> ParamSet:
        del seed
        return ParamSet(
            [Param(f"w{i}", np.zeros(s), ParamKind.MATRIX_SUBSPACE)
             for i, s in enumerate(self.shapes)]
        )


class MatrixLeastSquaresOracle(LossOracle):
    """Least squares with weights arranged as matrices (batched quadratic).

    The loss is quadratic in the weights, so the two-point coefficient is
    exact for every eps; mini-batch sampling supplies genuine gradient noise.
    """

    def __init__(self, shapes: Sequence[tuple[int, int]]):
        if not shapes:
            raise DimensionError("need at least one weight matrix")
        self.shapes = [tuple(s) for s in shapes]
        self.dim = sum(m * n for m, n in self.shapes)

    def _flat(self, params: ParamSet) -> np.ndarray:
        return np.concatenate(
            [params[f"w{i}"].tensor.ravel() for i in range(len(self.shapes))]
        )

    def loss(self, params: ParamSet, batch: Batch) -> float:
        w = self._flat(params)
        if batch.inputs.shape[1] != self.dim:
            raise DimensionError(
                f"features {batch.inputs.shape[1]} != weight dim {self.dim}"
            )
        r = batch.inputs @ w - batch.targets
        return _fsum(r * r) / (2.0 * batch.n)

    def grad(self, params: ParamSet, batch: Batch) -> dict[str, np.ndarray]:
        w = self._flat(params)
        r = batch.inputs @ w - batch.targets
        flat = batch.inputs.T @ r / batch.n
        out: dict[str, np.ndarray] = {}
        pos = 0
        for i, (m, n) in enumerate(self.shapes):
            out[f"w{i}"] = flat[pos:pos + m * n].reshape(m, n)
            pos += m * n
        return out

    def init_params(self, seed: Seed) -> ParamSet:
        del seed
        return ParamSet(
            [Param(f"w{i}", np.zeros(s), ParamKind.MATRIX_SUBSPACE)
             for i, s in enumerate(self.shapes)]
        )


class TinyMlpOracle(LossOracle):
    """Two-layer tanh MLP, mean per-example squared error.

    Weight matrices are subspace-eligible; biases stay dense, exercising both
    perturbation branches of the training loop.
    """

    def __init__(self, n_in: int = 32, n_hidden: int = 64, n_out: int = 32):
        self.n_in, self.n_hidden, self.n_out = n_in, n_hidden, n_out

    def _forward(self, params: ParamSet, x: np.ndarray):
        pre1 = x @ params["w1"].tensor + params["b1"].tensor
        if not np.all(np.isfinite(pre1)):
            raise NumericError("tiny-mlp layer 1 produced non-finite activations")
        h = np.tanh(pre1)
        pred = h @ params["w2"].tensor + params["b2"].tensor
        if not np.all(np.isfinite(pred)):
            raise NumericError("tiny-mlp layer 2 produced non-finite outputs")
        return h, pred

    def loss(self, params: ParamSet, batch: Batch) -> float:
        _, pred = self._forward(params, batch.inputs)
        err = pred - batch.targets
        per_example = 0.5 * np.einsum("ij,ij->i", err, err)
        return _fsum(per_example) / batch.n

    def grad(self, params: ParamSet, batch: Batch) -> dict[str, np.ndarray]:
        x = batch.inputs
        h, pred = self._forward(params, x)
        e = (pred - batch.targets) / batch.n
        dh = (e @ params["w2"].tensor.T) * (1.0 - h * h)
        return {
            "w1": x.T @ dh,
            "b1": dh.sum(axis=0),
            "w2": h.T @ e,
            "b2": e.sum(axis=0),
        }

    def init_params(self, seed: Seed) -> ParamSet:
        stream = GaussStream(derive_substream(seed, "init", 0))
        w1 = gauss_matrix(stream, self.n_in, self.n_hidden) / math.sqrt(self.n_in)
        w2 = gauss_matrix(stream, self.n_hidden, self.n_out) / math.sqrt(self.n_hidden)
        return ParamSet([
            Param("w1", w1, ParamKind.MATRIX_SUBSPACE),
            Param("b1", np.zeros(self.n_hidden), ParamKind.DENSE),
            Param("w2", w2, ParamKind.MATRIX_SUBSPACE),
            Param("b2", np.zeros(self.n_out), ParamKind.DENSE),
        ])


class LoraOracle(LossOracle):
    """Low-rank adapter view of a base oracle.

    Each matrix-subspace base weight W (m x n) is frozen and replaced by the
    trainable pair B (m x r', zero-initialized) and A (r' x n, Gaussian), with
    effective weight W + B @ A. Adapter matrices are subspace-eligible.
    """

    def __init__(self, base: LossOracle, base_params: ParamSet, r_prime: int,
                 seed: Seed):
        wrapped = base_params.matrix_subspace_names()
        if not wrapped:
            raise DimensionError("base has no matrix-subspace parameter to wrap")
        for name in wrapped:
            m, n = base_params[name].tensor.shape
            if r_prime > min(m, n):
                raise DimensionError(
                    f"adapter rank {r_prime} exceeds min{(m, n)} of {name!r}"
                )
        self.base = base
        self.base_params = base_params.copy()
        self.r_prime = r_prime
        self.wrapped = wrapped
        self._seed = seed

    def trainable_count(self) -> int:
        total = 0
        for name in self.wrapped:
            m, n = self.base_params[name].tensor.shape
            total += self.r_prime * (m + n)
        return total

    def effective_params(self, adapters: ParamSet) -> ParamSet:
        merged = self.base_params.copy()
        for name in self.wrapped:
            b = adapters[f"{name}.B"].tensor
            a = adapters[f"{name}.A"].tensor
            merged[name].tensor = merged[name].tensor + b @ a
        return merged

    def loss(self, params: ParamSet, batch: Batch | None) -> float:
        return self.base.loss(self.effective_params(params), batch)

    def grad(self, params: ParamSet, batch: Batch | None) -> dict[str, np.ndarray]:
        base_grads = self.base.grad(self.effective_params(params), batch)
        out: dict[str, np.ndarray] = {}
        for name in self.wrapped:
            gw = base_grads[name]
            b = params[f"{name}.B"].tensor
            a = params[f"{name}.A"].tensor
            out[f"{name}.B"] = gw @ a.T
            out[f"{name}.A"] = b.T @ gw
        return out

    def init_params(self, seed: Seed) -> ParamSet:
        del seed
        adapters: list[Param] = []
        for name in self.wrapped:
            m, n = self.base_params[name].tensor.shape
            stream = GaussStream(derive_substream(self._seed, f"lora:{name}", 0))
            adapters.append(Param(f"{name}.B", np.zeros((m, self.r_prime)),
                                  ParamKind.MATRIX_SUBSPACE))
            adapters.append(Param(f"{name}.A", gauss_matrix(stream, self.r_prime, n),
                                  ParamKind.MATRIX_SUBSPACE))
        return ParamSet(adapters)


def lora_wrap(base: LossOracle, r_prime: int, seed: Seed,
              base_params: ParamSet | None = None) -> LoraOracle:
    """Freeze a base oracle's weights behind trainable low-rank adapters.

    With B = 0 at initialization the wrapped loss equals the frozen base's
    loss. `base_params` defaults to the base oracle's own seeded init.
    """
    if base_params is None:
        base_params = base.init_params(derive_substream(seed, "lora-base", 0))
    return LoraOracle(base, base_params, r_prime, seed)


class CountingOracle(LossOracle):
    """Delegating wrapper that counts loss evaluations (test support)."""

    def __init__(self, inner: LossOracle):
        self.inner = inner
        self.evals = 0

    def loss(self, params: ParamSet, batch: Batch | None) -> float:
        self.evals += 1
        return self.inner.loss(params, batch)

    def grad(self, params: ParamSet, batch: Batch | None) -> dict[str, np.ndarray]:
        return self.inner.grad(params, batch)

    def init_params(self, seed: Seed) -> ParamSet:
        return self.inner.init_params(seed)


def make_synthetic(task: str, seed: Seed, n: int, d: int, noise: float = 0.0,
                   hidden: int = 64, out: int = 32) -> tuple[Batch, dict]:
    """Deterministic synthetic dataset for `task` in {"logistic",
    "least_squares", "mlp"}.

    Logistic labels come from a planted weight vector with label-flip
    probability `noise`; least-squares targets get additive Gaussian noise of
    scale `noise`; mlp targets come from a seeded teacher network with the
    given layer sizes.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    stream = GaussStream(derive_substream(seed, f"synth:{task}", 0))

    if task == "logistic":
        x = gauss_matrix(stream, n, d)
        w_star = gauss_vector(stream, d)
        w_star /= np.linalg.norm(w_star)
        y = np.sign(x @ w_star)
        y[y == 0] = 1.0
        if noise > 0:
            flip = stream._gen.random(n) < noise
            y = np.where(flip, -y, y)
        return Batch(x, y), {"w_star": w_star}

    if task == "least_squares":
        x = gauss_matrix(stream, n, d)
        w_star = gauss_vector(stream, d)
        y = x @ w_star
        if noise > 0:
            y = y + noise * gauss_vector(stream, n)
        return Batch(x, y), {"w_star": w_star}

    if task == "mlp":
        oracle = TinyMlpOracle(n_in=d, n_hidden=hidden, n_out=out)
        teacher = oracle.init_params(derive_substream(seed, "teacher", 0))
        x = gauss_matrix(stream, n, d)
        _, y = oracle._forward(teacher, x)
        return Batch(x, y), {"teacher": teacher, "oracle": oracle}

    raise ValueError(f"unknown synthetic task {task!r}")


def _lowrank_features(stream: GaussStream, n: int,
                      shapes: Sequence[tuple[int, int]], planted_rank: int,
                      background: float) -> tuple[np.ndarray, np.ndarray]:
    """Features spanned by rank-one matrix directions plus small background.

    Each weight block gets `planted_rank` rank-one directions, so any loss
    gradient built from these rows, reshaped into the weight matrices,
    concentrates on a planted rank-`planted_rank` frame pair per block.
    """
    d = sum(m * sz for m, sz in shapes)
    directions = np.zeros((len(shapes) * planted_rank, d))
    pos = 0
    for i, (m, sz) in enumerate(shapes):
        for a in range(planted_rank):
            u = gauss_vector(stream, m)
            v = gauss_vector(stream, sz)
            rank1 = np.outer(u, v).ravel()
            directions[i * planted_rank + a, pos:pos + m * sz] = (
                rank1 / np.linalg.norm(rank1))
        pos += m * sz
    coeffs = gauss_matrix(stream, n, directions.shape[0])
    x = coeffs @ directions + background * gauss_matrix(stream, n, d)
    return x, directions


def make_lowrank_logistic(seed: Seed, n: int, shapes: Sequence[tuple[int, int]],
                          planted_rank: int = 4, background: float = 0.1,
                          noise: float = 0.0) -> tuple[Batch, LogisticOracle, dict]:
    """Synthetic logistic task whose per-matrix gradients are near low-rank.

    Labels come from a planted weight vector inside the feature span, with
    label-flip probability `noise`.
    """
    oracle = LogisticOracle(shapes)
    stream = GaussStream(derive_substream(seed, "lowrank-logistic", 0))
    x, directions = _lowrank_features(stream, n, shapes, planted_rank, background)
    w_star = gauss_vector(stream, directions.shape[0]) @ directions
    w_star /= np.linalg.norm(w_star)
    y = np.sign(x @ w_star)
    y[y == 0] = 1.0
    if noise > 0:
        flip = stream._gen.random(n) < noise
        y = np.where(flip, -y, y)
    return Batch(x, y), oracle, {"w_star": w_star, "directions": directions}


def make_lowrank_least_squares(seed: Seed, n: int,
                               shapes: Sequence[tuple[int, int]],
                               planted_rank: int = 4, background: float = 0.1,
                               noise: float = 0.0,
                               ) -> tuple[Batch, MatrixLeastSquaresOracle, dict]:
    """Batched rank-structured quadratic: least squares on low-rank features.

    The objective is exactly quadratic in the matrix weights and its
    full-batch gradient concentrates on the planted frame pair; additive
    label noise of scale `noise` keeps per-batch gradients noisy even at the
    optimum.
    """
    oracle = MatrixLeastSquaresOracle(shapes)
    stream = GaussStream(derive_substream(seed, "lowrank-lsq", 0))
    x, directions = _lowrank_features(stream, n, shapes, planted_rank, background)
    w_star = gauss_vector(stream, directions.shape[0]) @ directions
    w_star /= np.linalg.norm(w_star)
    y = x @ w_star
    if noise > 0:
        y = y + noise * gauss_vector(stream, n)
    return Batch(x, y), oracle, {"w_star": w_star, "directions": directions}


@dataclass
class CsvSchema:
    """Column selection for CSV ingestion: one label, ordered features."""

    label: str
    features: Sequence[str]


def load_csv(path, schema: CsvSchema) -> Batch:
    """Load a numeric, header-carrying CSV into a Batch, preserving row order."""
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        col_index: dict[str, int] = {}
        for wanted in [schema.label, *schema.features]:
            if wanted not in header:
                raise ParseError(f"{path}: missing column {wanted!r} in header")
            col_index[wanted] = header.index(wanted)

        rows: list[list[float]] = []
        labels: list[float] = []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            values = []
            for name in schema.features:
                cell = row[col_index[name]] if col_index[name] < len(row) else ""
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell at row {row_no}, "
                        f"column {name!r}: {cell!r}"
                    ) from None
            cell = row[col_index[schema.label]] if col_index[schema.label] < len(row) else ""
            try:
                labels.append(float(cell))
            except ValueError:
                raise ParseError(
                    f"{path}: non-numeric cell at row {row_no}, "
                    f"column {schema.label!r}: {cell!r}"
                ) from None
            rows.append(values)

    if not rows:
        raise ParseError(f"{path}: no rows after the header")
    return Batch(np.asarray(rows), np.asarray(labels))


class BatchStream:
    """Sequential mini-batches with a per-epoch reshuffle.

    The permutation for epoch e comes from a substream derived as
    (seed, "epoch", e), so two optimizers handed the same seed see identical
    batch sequences (common random numbers).
    """

    def __init__(self, data: Batch, batch_size: int, seed: Seed):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.data = data
        self.batch_size = min(batch_size, data.n)
        self.seed = seed
        self._per_epoch = math.ceil(data.n / self.batch_size)
        self._cached_epoch = -1
        self._cached_perm: np.ndarray | None = None

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch != self._cached_epoch:
            sub = derive_substream(self.seed, "epoch", epoch)
            gen = np.random.Generator(np.random.Philox(key=sub.value))
            self._cached_perm = gen.permutation(self.data.n)
            self._cached_epoch = epoch
        return self._cached_perm

    def batch_for_step(self, step: int) -> Batch:
        epoch, idx = divmod(step, self._per_epoch)
        perm = self._perm(epoch)
        rows = perm[idx * self.batch_size:(idx + 1) * self.batch_size]
        targets = self.data.targets[rows]
        return Batch(self.data.inputs[rows], targets)
