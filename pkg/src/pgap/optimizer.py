"""Training loops: subspace-aligned ZO-SGD, the plain Gaussian ZO baseline,
schedules, and checkpointing.

Both optimizers share one loop skeleton (sample -> two-point coefficient ->
SGD update) so iteration counts and timings compare fairly. A completed run
is fully determined by (config.seed, oracle, data): every perturbation is
regenerated from derived substreams and a recorded step can be replayed
offline to reproduce its parameter delta bit-exactly.
"""

from __future__ import annotations

import enum
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, StateError
from .estimator import (PerturbPlan, materialize, plan_for_step,
                        plan_full_gaussian, two_point_coeff)
from .objectives import Batch, LossOracle, Param, ParamKind, ParamSet
from .randsrc import Seed, derive_substream
from .subspace import RefreshSchedule, SubspaceBasis, lower_dim_generate, should_refresh


class ScheduleKind(enum.Enum):
    CONSTANT = "constant"
    LINEAR_TO_ZERO = "linear"

    @classmethod
    def parse(cls, text: str) -> "ScheduleKind":
        for kind in cls:
            if kind.value == text:
                return kind
        raise ValueError(f"unknown schedule {text!r}; use 'constant' or 'linear'")


def schedule_value(kind: ScheduleKind, base: float, t: int, total: int) -> float:
    """Constant -> base; linear -> base * (1 - t / total)."""
    if not 0 <= t <= max(total, 0):
        raise ValueError(f"t={t} outside [0, {total}]")
    if kind is ScheduleKind.CONSTANT or total <= 0:
        return base
    return base * (1.0 - t / total)


@dataclass(frozen=True)
class OptimizerConfig:
    eta: float
    eps: float
    steps: int
    k: int = 100
    h: int = 10
    r: int = 8
    delta0: float = 2.0
    schedule_lr: ScheduleKind = ScheduleKind.CONSTANT
    schedule_delta: ScheduleKind = ScheduleKind.LINEAR_TO_ZERO
    n_avg: int = 1
    seed: Seed = Seed(0)

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.k < 1 or self.h < 1 or self.r < 1:
            raise ValueError("k, h and r must be >= 1")
        if self.delta0 < 0:
            raise ValueError(f"delta0 must be >= 0, got {self.delta0}")
        if self.n_avg < 1:
            raise ValueError(f"n_avg must be >= 1, got {self.n_avg}")


@dataclass
class StepRecord:
    """One training step; plan_rhos carries what offline replay needs."""

    step: int
    loss: float
    rho: float
    delta: float
    eta: float
    refresh: bool
    ms: float
    plan_rhos: tuple[tuple[PerturbPlan, float], ...] = field(repr=False, default=())


@dataclass
class RunLog:
    records: list[StepRecord] = field(default_factory=list)

    CSV_HEADER = "step,loss,rho,delta,eta,refresh,ms"

    def csv_lines(self) -> list[str]:
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(
                f"{r.step},{r.loss!r},{r.rho!r},{r.delta!r},{r.eta!r},"
                f"{int(r.refresh)},{r.ms!r}"
            )
        return lines

    def losses(self) -> np.ndarray:
        return np.asarray([r.loss for r in self.records])


class RunError(RuntimeError):
    """A run failed mid-way; the partial log is attached for flushing."""

    def __init__(self, message: str, partial_log: RunLog):
        super().__init__(message)
        self.partial_log = partial_log


@dataclass
class RunState:
    params: ParamSet
    bases: dict[str, SubspaceBasis] = field(default_factory=dict)


def _step_common(state: RunState, config: OptimizerConfig, oracle: LossOracle,
                 batch: Batch | None, t: int, plans: list[PerturbPlan],
                 delta_t: float, eta_t: float, refreshed: bool) -> StepRecord:
    # Per-plan coefficient, then W <- W - eta * (rho_i / n) * u_i for every
    # plan; perturbations are regenerated, never kept across parameters.
    records = [two_point_coeff(oracle, state.params, plan, batch, t) for plan in plans]
    inv_n = 1.0 / len(plans)
    for rec in records:
        scale = eta_t * rec.rho * inv_n
        if scale != 0.0:
            for name, recipe in rec.plan.recipes:
                tensor = state.params[name].tensor
                tensor -= scale * materialize(recipe, tensor)
    loss = sum(0.5 * (r.loss_plus + r.loss_minus) for r in records) * inv_n
    rho = sum(r.rho for r in records) * inv_n
    return StepRecord(step=t, loss=loss, rho=rho, delta=delta_t, eta=eta_t,
                      refresh=refreshed,
                      ms=0.0,
                      plan_rhos=tuple((r.plan, r.rho) for r in records))


def pgap_step(state: RunState, config: OptimizerConfig, oracle: LossOracle,
              batch: Batch | None, t: int, refreshed: bool = False) -> StepRecord:
    """One subspace-aligned step: aligned low-rank perturbations for matrix
    parameters with a basis, full Gaussian for the rest."""
    missing = [n for n in state.params.matrix_subspace_names() if n not in state.bases]
    if missing:
        raise StateError(f"no subspace basis for parameters {missing}")
    delta_t = schedule_value(config.schedule_delta, config.delta0, t, config.steps)
    eta_t = schedule_value(config.schedule_lr, config.eta, t, config.steps)
    step_seed = derive_substream(config.seed, "step", t)
    plans = [
        plan_for_step(state.params, state.bases, config.eps, delta_t,
                      derive_substream(step_seed, "plan", i))
        for i in range(config.n_avg)
    ]
    return _step_common(state, config, oracle, batch, t, plans, delta_t, eta_t,
                        refreshed)


def mezo_step(state: RunState, config: OptimizerConfig, oracle: LossOracle,
              batch: Batch | None, t: int, refreshed: bool = False) -> StepRecord:
    """One full-space Gaussian ZO-SGD step (identical loop skeleton)."""
    eta_t = schedule_value(config.schedule_lr, config.eta, t, config.steps)
    step_seed = derive_substream(config.seed, "step", t)
    plans = [
        plan_full_gaussian(state.params, config.eps,
                           derive_substream(step_seed, "plan", i))
        for i in range(config.n_avg)
    ]
    return _step_common(state, config, oracle, batch, t, plans, 0.0, eta_t,
                        refreshed)


def _batch_at(data, t: int) -> Batch | None:
    if data is None or isinstance(data, Batch):
        return data
    return data.batch_for_step(t)


def run(config: OptimizerConfig, oracle: LossOracle, data=None,
        kind: str = "pgap", params: ParamSet | None = None,
        record_timing: bool = False) -> tuple[RunLog, ParamSet]:
    """Refresh-then-step loop over config.steps iterations.

    `data` may be None, a fixed Batch, or anything with batch_for_step(t).
    The basis refresh fires when t mod k == 0, before that step's update, so
    a basis exists before the first aligned step. With record_timing=False
    (the default) the per-step ms field stays 0.0 and logs are byte-stable
    across runs.
    """
    if kind not in ("pgap", "mezo"):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    if params is None:
        params = oracle.init_params(derive_substream(config.seed, "params", 0))
    else:
        params = params.copy()

    state = RunState(params=params)
    schedule = RefreshSchedule(k=config.k, h=config.h)
    log = RunLog()
    try:
        for t in range(config.steps):
            t0 = time.perf_counter() if record_timing else 0.0
            batch = _batch_at(data, t)
            refreshed = False
            if kind == "pgap" and should_refresh(schedule, t):
                state.bases = lower_dim_generate(
                    oracle, state.params, config.h, config.r, config.eps,
                    derive_substream(config.seed, "refresh", t),
                    batch=batch, born_at_step=t,
                )
                refreshed = True
            if kind == "pgap":
                rec = pgap_step(state, config, oracle, batch, t, refreshed)
            else:
                rec = mezo_step(state, config, oracle, batch, t, refreshed)
            if record_timing:
                rec.ms = (time.perf_counter() - t0) * 1e3
            log.records.append(rec)
    except Exception as exc:
        raise RunError(f"run failed at step {len(log.records)}: {exc}", log) from exc
    return log, state.params


def replay_step(record: StepRecord, params_before: ParamSet) -> ParamSet:
    """Re-apply a recorded step to a copy of the pre-step parameters.

    The stored plans regenerate every perturbation from its seed and the
    update is applied in the same order with the same operations as the live
    run, so the result matches the post-step parameters bit-exactly.
    """
    params = params_before.copy()
    inv_n = 1.0 / len(record.plan_rhos)
    for plan, rho in record.plan_rhos:
        scale = record.eta * rho * inv_n
        if scale != 0.0:
            for name, recipe in plan.recipes:
                tensor = params[name].tensor
                tensor -= scale * materialize(recipe, tensor)
    return params


_CKPT_MAGIC = b"PGAP"
_CKPT_VERSION = 1
# kind byte: 0 = dense vector (1-D), 1 = dense matrix, 2 = subspace matrix
_KIND_TO_BYTE = {(ParamKind.DENSE, 1): 0, (ParamKind.DENSE, 2): 1,
                 (ParamKind.MATRIX_SUBSPACE, 2): 2}
_BYTE_TO_KIND = {0: (ParamKind.DENSE, 1), 1: (ParamKind.DENSE, 2),
                 2: (ParamKind.MATRIX_SUBSPACE, 2)}


def checkpoint_save(params: ParamSet, path) -> None:
    """Write the versioned little-endian binary checkpoint atomically."""
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<II", _CKPT_VERSION, len(params))
    for p in params:
        name = p.name.encode("utf-8")
        kind_byte = _KIND_TO_BYTE[(p.kind, p.tensor.ndim)]
        rows, cols = (p.tensor.shape if p.tensor.ndim == 2
                      else (p.tensor.shape[0], 1))
        blob += struct.pack("<I", len(name)) + name
        blob += struct.pack("<BQQ", kind_byte, rows, cols)
        blob += np.ascontiguousarray(p.tensor, dtype="<f8").tobytes()

    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated checkpoint "
                f"(needed {n} bytes at offset {self.pos}, have {len(self.data)})"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def checkpoint_load(path) -> ParamSet:
    """Read a checkpoint; round-trip with checkpoint_save is bit-exact."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    rd = _Reader(data, path)
    magic = rd.take(4)
    if magic != _CKPT_MAGIC:
        raise CheckpointError(
            f"{path}: bad magic {magic!r}, expected {_CKPT_MAGIC!r}"
        )
    version, count = struct.unpack("<II", rd.take(8))
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")

    out: list[Param] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", rd.take(4))
        name = rd.take(name_len).decode("utf-8")
        kind_byte, rows, cols = struct.unpack("<BQQ", rd.take(17))
        if kind_byte not in _BYTE_TO_KIND:
            raise CheckpointError(f"{path}: unknown kind byte {kind_byte}")
        kind, ndim = _BYTE_TO_KIND[kind_byte]
        payload = rd.take(rows * cols * 8)
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        tensor = arr.reshape(rows, cols) if ndim == 2 else arr[:rows * cols]
        out.append(Param(name, tensor.copy(), kind))
    if rd.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - rd.pos} trailing bytes")
    return ParamSet(out)
