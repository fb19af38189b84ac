"""Command-line front end: train, compare, and lab-suite orchestration.

Configuration comes from a TOML file with sections [task], [optimizer],
[schedules], [lab], [output]; command-line flags override file keys, file
keys override documented defaults, and unknown keys are a hard error. Every
artifact directory receives a config.echo.toml with the fully resolved
configuration so the run can be reproduced byte for byte. stdout carries
human-readable progress only; machine-readable data goes to files.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import tempfile
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .errors import ConfigError, ParseError, PgapError
from .lab import (McReport, angle_suite, bias_rate_suite, davis_kahan_suite,
                  dispersion_histogram, gaussian_moment_suite, probe_mse_suite,
                  reports_to_csv, reports_to_json, variance_slope_fit,
                  variance_vs_dim)
from .objectives import (Batch, BatchStream, CsvSchema, LogisticOracle,
                         LeastSquaresOracle, QuadraticOracle,
                         RankStructuredQuadratic, TinyMlpOracle, load_csv,
                         lora_wrap, make_lowrank_logistic, make_synthetic)
from .optimizer import (OptimizerConfig, RunError, ScheduleKind, checkpoint_save,
                        run)
from .randsrc import GaussStream, Seed, derive_substream, gauss_matrix

LAB_SUITES = ("variance", "moments", "angle", "bias", "probe-mse",
              "davis-kahan", "dispersion")

# (type, default) per key; None default means "absent unless set".
_SCHEMA = {
    "task": {
        "name": (str, "quad_lowrank"),
        "seed": (int, 1),
        "rows": (int, 24),
        "cols": (int, 24),
        "rank": (int, 2),
        "n": (int, 512),
        "d": (int, 16),
        "hidden": (int, 64),
        "out": (int, 32),
        "batch_size": (int, 64),
        "noise": (float, 0.0),
        "background": (float, 0.1),
        "shapes": (list, [[32, 32], [32, 32]]),
        "lora_rank": (int, 0),
        "csv_path": (str, ""),
        "label_column": (str, "label"),
        "feature_columns": (list, []),
    },
    "optimizer": {
        "kind": (str, "pgap"),
        "optimizers": (list, ["pgap", "mezo"]),
        "eta": (float, 1e-4),
        "eta_pgap": (float, None),
        "eta_mezo": (float, None),
        "eps": (float, 1e-2),
        "steps": (int, 1000),
        "k": (int, 100),
        "h": (int, 10),
        "r": (int, 8),
        "delta0": (float, 2.0),
        "n_avg": (int, 1),
        "seed": (int, 0),
        "target_loss": (float, None),
    },
    "schedules": {
        "lr": (str, "constant"),
        "delta": (str, "linear"),
    },
    "output": {
        "dir": (str, "runs/out"),
        "timing_in_runlog": (bool, False),
    },
    "lab": {
        "samples": (int, 1_000_000),
        "trials": (int, 200),
        "norm_u": (float, 1.0),
        "q_list": (list, [1, 2, 4, 8, 16, 32]),
        "angle_q_list": (list, [2, 10, 50]),
        "moment_dims": (list, [2, 8, 32]),
        "eps_list": (list, [0.3, 0.1, 0.03]),
        "w_list": (list, [1, 2, 4, 8, 16, 32, 64, 128, 256]),
        "sigma": (float, 3.0),
        "probe_trials": (int, 300),
        "dk_d": (int, 64),
        "dk_r": (int, 4),
        "dk_sigma": (float, 2.0),
        "dk_sigma_min": (float, 0.5),
        "bins": (int, 64),
        "delta": (float, 0.1),
        "basis_probes": (int, 2048),
        "dispersion_samples": (int, 100_000),
        "dispersion_m": (int, 64),
        "dispersion_rank": (int, 4),
        "seed": (int, 0),
    },
}


def default_config() -> dict:
    return {section: {key: spec[1] for key, spec in keys.items()}
            for section, keys in _SCHEMA.items()}


def _coerce(section: str, key: str, value):
    want, _ = _SCHEMA[section][key]
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, want) or (want is int and isinstance(value, bool)):
        raise ConfigError(
            f"[{section}].{key}: expected {want.__name__}, got {value!r}"
        )
    return value


def load_config(path: str | None) -> dict:
    """Defaults, overlaid by a strict TOML file when given."""
    config = default_config()
    if path is None:
        return config
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    for section, keys in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}] in {path}")
        if not isinstance(keys, dict):
            raise ConfigError(f"[{section}] must be a table in {path}")
        for key, value in keys.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}].{key} in {path}")
            config[section][key] = _coerce(section, key, value)
    return config


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def config_echo_toml(config: dict) -> str:
    lines = []
    for section in sorted(config):
        lines.append(f"[{section}]")
        for key in sorted(config[section]):
            value = config[section][key]
            if value is None:
                continue
            lines.append(f"{key} = {_toml_scalar(value)}")
        lines.append("")
    return "\n".join(lines)


def atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class TaskBundle:
    def __init__(self, oracle, params, data, describe: str):
        self.oracle = oracle
        self.params = params
        self.data = data
        self.describe = describe


def build_task(tc: dict) -> TaskBundle:
    """Construct (oracle, initial params, data) from the [task] section.

    The task seed drives data synthesis, initial parameters, and the batch
    stream, so optimizers compared on one task share all of them.
    """
    seed = Seed(tc["seed"])
    name = tc["name"]
    batch_size = tc["batch_size"]

    def stream_or_batch(batch: Batch):
        if batch_size <= 0 or batch_size >= batch.n:
            return batch
        return BatchStream(batch, batch_size, derive_substream(seed, "batches", 0))

    if name == "quad_lowrank":
        oracle = RankStructuredQuadratic(tc["rows"], tc["cols"], tc["rank"], seed)
        data = None
    elif name == "quad":
        gen = GaussStream(derive_substream(seed, "hessian", 0))
        a = gauss_matrix(gen, tc["d"], tc["d"]) / np.sqrt(tc["d"])
        oracle = QuadraticOracle(a @ a.T + 0.1 * np.eye(tc["d"]))
        data = None
    elif name == "logistic":
        batch, _ = make_synthetic("logistic", seed, tc["n"], tc["d"],
                                  noise=tc["noise"])
        shape_rows = max(1, tc["d"] // 4)
        oracle = LogisticOracle([(shape_rows, tc["d"] // shape_rows)])
        if shape_rows * (tc["d"] // shape_rows) != tc["d"]:
            raise ConfigError("[task].d must factor into a matrix for logistic")
        data = stream_or_batch(batch)
    elif name == "logistic_lowrank":
        shapes = [tuple(s) for s in tc["shapes"]]
        batch, oracle, _ = make_lowrank_logistic(
            seed, tc["n"], shapes, planted_rank=tc["rank"],
            background=tc["background"], noise=tc["noise"])
        data = stream_or_batch(batch)
    elif name == "least_squares":
        batch, _ = make_synthetic("least_squares", seed, tc["n"], tc["d"],
                                  noise=tc["noise"])
        oracle = LeastSquaresOracle(tc["d"])
        data = stream_or_batch(batch)
    elif name == "mlp":
        batch, _ = make_synthetic("mlp", seed, tc["n"], tc["d"],
                                  hidden=tc["hidden"], out=tc["out"])
        oracle = TinyMlpOracle(tc["d"], tc["hidden"], tc["out"])
        data = stream_or_batch(batch)
    elif name == "csv":
        if not tc["csv_path"]:
            raise ConfigError("[task].csv_path is required for the csv task")
        schema = CsvSchema(label=tc["label_column"],
                           features=list(tc["feature_columns"]))
        batch = load_csv(tc["csv_path"], schema)
        oracle = LeastSquaresOracle(batch.inputs.shape[1])
        data = stream_or_batch(batch)
    else:
        raise ConfigError(f"unknown task {name!r}")

    params = oracle.init_params(derive_substream(seed, "params", 0))
    if tc["lora_rank"] > 0:
        oracle = lora_wrap(oracle, tc["lora_rank"],
                           derive_substream(seed, "lora", 0), base_params=params)
        params = oracle.init_params(seed)
    return TaskBundle(oracle, params, data, name)


def optimizer_config(config: dict, kind: str) -> OptimizerConfig:
    oc, sc = config["optimizer"], config["schedules"]
    eta = oc.get(f"eta_{kind}") or oc["eta"]
    return OptimizerConfig(
        eta=eta, eps=oc["eps"], steps=oc["steps"], k=oc["k"], h=oc["h"],
        r=oc["r"], delta0=oc["delta0"],
        schedule_lr=ScheduleKind.parse(sc["lr"]),
        schedule_delta=ScheduleKind.parse(sc["delta"]),
        n_avg=oc["n_avg"], seed=Seed(oc["seed"]),
    )


def steps_to_target(log, target: float | None):
    if target is None:
        return None
    for rec in log.records:
        if rec.loss <= target:
            return rec.step + 1
    return "not_reached"


def _write_run_artifacts(outdir: str, config: dict, log, final_params,
                         wall_ms: float, kind: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    timing = config["output"]["timing_in_runlog"]
    lines = log.csv_lines()
    if not timing:
        # deterministic logs: the per-step ms column stays 0.0
        pass
    atomic_write(os.path.join(outdir, "runlog.csv"), "\n".join(lines) + "\n")
    target = config["optimizer"]["target_loss"]
    summary = {
        "optimizer": kind,
        "steps": len(log.records),
        "final_loss": log.records[-1].loss if log.records else None,
        "steps_to_target": steps_to_target(log, target),
        "target_loss": target,
        "wall_ms": wall_ms,
    }
    atomic_write(os.path.join(outdir, "summary.json"),
                 json.dumps(summary, sort_keys=True, indent=2) + "\n")
    checkpoint_save(final_params, os.path.join(outdir, "final.ckpt"))
    atomic_write(os.path.join(outdir, "config.echo.toml"),
                 config_echo_toml(config))


def cmd_train(config: dict) -> int:
    kind = config["optimizer"]["kind"]
    if kind not in ("pgap", "mezo"):
        raise ConfigError(f"[optimizer].kind must be pgap or mezo, got {kind!r}")
    task = build_task(config["task"])
    ocfg = optimizer_config(config, kind)
    outdir = config["output"]["dir"]
    print(f"training {kind} on {task.describe} for {ocfg.steps} steps "
          f"-> {outdir}")
    t0 = time.perf_counter()
    try:
        log, final_params = run(ocfg, task.oracle, data=task.data, kind=kind,
                                params=task.params,
                                record_timing=config["output"]["timing_in_runlog"])
    except RunError as exc:
        wall = (time.perf_counter() - t0) * 1e3
        os.makedirs(outdir, exist_ok=True)
        atomic_write(os.path.join(outdir, "runlog.csv"),
                     "\n".join(exc.partial_log.csv_lines()) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    wall = (time.perf_counter() - t0) * 1e3
    _write_run_artifacts(outdir, config, log, final_params, wall, kind)
    final = log.records[-1].loss if log.records else float("nan")
    print(f"done: {len(log.records)} steps, final loss {final:.6g}, "
          f"{wall:.0f} ms")
    return 0


def cmd_compare(config: dict) -> int:
    kinds = [str(k) for k in config["optimizer"]["optimizers"]]
    if len(kinds) < 2:
        raise ConfigError("[optimizer].optimizers must list at least 2 optimizers")
    for kind in kinds:
        if kind not in ("pgap", "mezo"):
            raise ConfigError(f"unknown optimizer {kind!r} in optimizers list")
    target = config["optimizer"]["target_loss"]
    if target is None:
        raise ConfigError("[optimizer].target_loss is required for compare")

    outdir = config["output"]["dir"]
    os.makedirs(outdir, exist_ok=True)
    print(f"comparing {kinds} on {config['task']['name']} "
          f"(target loss {target})")

    def one(kind: str):
        task = build_task(config["task"])  # fresh, disjoint state per run
        ocfg = optimizer_config(config, kind)
        t0 = time.perf_counter()
        log, _ = run(ocfg, task.oracle, data=task.data, kind=kind,
                     params=task.params)
        wall = (time.perf_counter() - t0) * 1e3
        return kind, log, wall

    threads = int(os.environ.get("PGAP_THREADS", "1") or "1")
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, kinds))
    else:
        results = [one(kind) for kind in kinds]

    rows = []
    reached = []
    for kind, log, wall in results:
        stt = steps_to_target(log, target)
        final = log.records[-1].loss if log.records else float("nan")
        rows.append([kind, stt, final, wall])
        if isinstance(stt, int):
            reached.append(stt)
    baseline = max(reached) if reached else None

    lines = ["optimizer,steps_to_target,final_loss,wall_ms,speedup"]
    for kind, stt, final, wall in rows:
        speedup = ""
        if baseline is not None and isinstance(stt, int):
            speedup = repr(baseline / stt)
        lines.append(f"{kind},{stt},{final!r},{wall!r},{speedup}")
    atomic_write(os.path.join(outdir, "compare.csv"), "\n".join(lines) + "\n")
    atomic_write(os.path.join(outdir, "config.echo.toml"),
                 config_echo_toml(config))
    for kind, stt, final, wall in rows:
        print(f"  {kind}: steps_to_target={stt} final={final:.6g} "
              f"wall={wall:.0f} ms")
    return 0


def run_lab_suite(suite: str, lc: dict):
    """Execute one lab suite; returns the list of reports."""
    seed = Seed(lc["seed"])
    if suite == "variance":
        reports = variance_vs_dim(lc["q_list"], lc["norm_u"], lc["samples"], seed)
        return [*reports, variance_slope_fit(reports)]
    if suite == "moments":
        out = []
        for n in lc["moment_dims"]:
            out.extend(gaussian_moment_suite(int(n), None, lc["samples"], seed))
        return out
    if suite == "angle":
        return [angle_suite(int(q), lc["samples"], seed)
                for q in lc["angle_q_list"]]
    if suite == "bias":
        reports, fit = bias_rate_suite(lc["eps_list"], lc["samples"], seed)
        return [*reports, fit]
    if suite == "probe-mse":
        reports, fit = probe_mse_suite(lc["w_list"], lc["sigma"],
                                       lc["probe_trials"], seed)
        return [*reports, fit]
    if suite == "davis-kahan":
        return [davis_kahan_suite(lc["dk_d"], lc["dk_r"], lc["dk_sigma"],
                                  lc["dk_sigma_min"], lc["trials"], seed)]
    if suite == "dispersion":
        kw = dict(steps=lc["dispersion_samples"], bins=lc["bins"], seed=seed,
                  m=lc["dispersion_m"], n=lc["dispersion_m"],
                  planted_rank=lc["dispersion_rank"], delta=lc["delta"],
                  basis_probes=lc["basis_probes"])
        gauss = dispersion_histogram("gaussian", **kw)
        pgap = dispersion_histogram("pgap", **kw)
        ratio = McReport(
            experiment="dispersion_variance_ratio",
            n_samples=lc["dispersion_samples"],
            estimate=pgap.rho_variance / gauss.rho_variance,
            stderr=0.0, target=1.0, comparison="lt",
            extra={"gaussian_var": gauss.rho_variance,
                   "pgap_var": pgap.rho_variance},
        )
        return [gauss, pgap, ratio]
    raise ConfigError(f"unknown suite {suite!r}; valid: {', '.join(LAB_SUITES)}")


def cmd_lab(suite: str, config: dict) -> int:
    if suite not in LAB_SUITES:
        print(f"unknown suite {suite!r}; valid suites: {', '.join(LAB_SUITES)}",
              file=sys.stderr)
        return 2
    outdir = config["output"]["dir"]
    os.makedirs(outdir, exist_ok=True)
    print(f"running lab suite {suite} -> {outdir}")
    reports = run_lab_suite(suite, config["lab"])
    atomic_write(os.path.join(outdir, f"report-{suite}.json"),
                 reports_to_json(reports))
    atomic_write(os.path.join(outdir, f"report-{suite}.csv"),
                 reports_to_csv(reports))
    atomic_write(os.path.join(outdir, "config.echo.toml"),
                 config_echo_toml(config))
    ok = True
    for rep in reports:
        asserted = getattr(rep, "asserted", True)
        passed = getattr(rep, "passed", True)
        name = getattr(rep, "experiment", getattr(rep, "kind", "?"))
        flag = "PASS" if passed else "FAIL"
        if not asserted:
            flag = "INFO"
        print(f"  [{flag}] {name}")
        if asserted and not passed:
            ok = False
    return 0 if ok else 1


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    d = default_config()
    parser.add_argument("--config", metavar="PATH", help="TOML config file")
    parser.add_argument("--optimizer", choices=["pgap", "mezo"],
                        help=f"optimizer kind (default {d['optimizer']['kind']})")
    parser.add_argument("--task", metavar="NAME",
                        help=f"task name (default {d['task']['name']})")
    parser.add_argument("--seed", type=int, metavar="U64",
                        help=f"optimizer seed (default {d['optimizer']['seed']})")
    parser.add_argument("--out", metavar="DIR",
                        help=f"output directory (default {d['output']['dir']})")
    parser.add_argument("--steps", type=int, metavar="N",
                        help=f"training steps (default {d['optimizer']['steps']})")
    parser.add_argument("--target-loss", type=float, metavar="X",
                        help="loss target (default unset)")
    parser.add_argument("--rank", type=int, metavar="R",
                        help=f"subspace rank (default {d['optimizer']['r']})")
    parser.add_argument("--window", type=int, metavar="K",
                        help=f"refresh window (default {d['optimizer']['k']})")
    parser.add_argument("--probes", type=int, metavar="H",
                        help=f"probe count (default {d['optimizer']['h']})")
    parser.add_argument("--delta0", type=float, metavar="X",
                        help=f"initial projection magnitude "
                             f"(default {d['optimizer']['delta0']})")
    parser.add_argument("--eta", type=float, metavar="X",
                        help=f"learning rate (default {d['optimizer']['eta']})")
    parser.add_argument("--eps", type=float, metavar="X",
                        help=f"perturbation scale (default {d['optimizer']['eps']})")


def _add_lab_flags(parser: argparse.ArgumentParser) -> None:
    d = default_config()["lab"]
    parser.add_argument("--samples", type=int,
                        help=f"Monte-Carlo samples (default {d['samples']})")
    parser.add_argument("--trials", type=int,
                        help=f"independent trials (default {d['trials']})")
    parser.add_argument("--sigma", type=float,
                        help=f"probe noise scale (default {d['sigma']})")
    parser.add_argument("--bins", type=int,
                        help=f"histogram bins (default {d['bins']})")
    parser.add_argument("--lab-seed", type=int,
                        help=f"lab RNG seed (default {d['seed']})")


def _apply_overrides(config: dict, args: argparse.Namespace) -> None:
    mapping = {
        "optimizer": ("optimizer", "kind"),
        "task": ("task", "name"),
        "seed": ("optimizer", "seed"),
        "out": ("output", "dir"),
        "steps": ("optimizer", "steps"),
        "target_loss": ("optimizer", "target_loss"),
        "rank": ("optimizer", "r"),
        "window": ("optimizer", "k"),
        "probes": ("optimizer", "h"),
        "delta0": ("optimizer", "delta0"),
        "eta": ("optimizer", "eta"),
        "eps": ("optimizer", "eps"),
        "samples": ("lab", "samples"),
        "trials": ("lab", "trials"),
        "sigma": ("lab", "sigma"),
        "bins": ("lab", "bins"),
        "lab_seed": ("lab", "seed"),
    }
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            config[section][key] = value


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgap",
        description="Zeroth-order training with projected gradient-aligned "
                    "perturbations, plus a statistical verification lab.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one optimizer, write artifacts")
    _add_override_flags(p_train)

    p_cmp = sub.add_parser("compare", help="run several optimizers with common "
                                           "random data streams")
    _add_override_flags(p_cmp)

    p_lab = sub.add_parser("lab", help="run a statistical verification suite")
    p_lab.add_argument("suite", help=f"one of: {', '.join(LAB_SUITES)}")
    _add_override_flags(p_lab)
    _add_lab_flags(p_lab)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        _apply_overrides(config, args)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "compare":
            return cmd_compare(config)
        return cmd_lab(args.suite, config)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PgapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
