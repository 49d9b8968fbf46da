"""Command-line harness: run an LGF experiment from a config file, compare CSV logs.

Config files are flat ``section.key = value`` lines with ``#`` comments::

    problem.kind = heat_inverse
    lgf.mode = gd
    lgf.eta = 0.01
    lgf.history_size = 10
    lgf.retrain_interval = 30
    lgf.epochs = 700
"""

from __future__ import annotations

import argparse
import ast
import csv
import math
import os
import sys
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .driver import LgfConfig, LgfRunError, Mode, OnNonfinite, Phase, RunReport, run_baseline, run_lgf
from .odeint import IntegratorConfig, Method
from .optim import AdamParams
from .problems import _PARAMS, PROBLEM_KINDS, ProblemSpec, make_problem
from .sindy import FDScheme, StlsqConfig

__all__ = [
    "ConfigError",
    "SchemaError",
    "ExperimentConfig",
    "ComparisonSummary",
    "parse_config",
    "format_config",
    "run_experiment",
    "write_run_csv",
    "compare",
    "main",
]

CSV_PREFIX = ("epoch", "t", "phase", "loss", "grad_evals")
MAX_CSV_COMPONENTS = 16


class ConfigError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec
    lgf: LgfConfig
    baseline: bool = True
    seed: int = 0
    output_dir: Path = Path("lgf_out")
    full_state: bool = False


# ---------------------------------------------------------------------------
# Config parsing


def _to_bool(text):
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _optional(conv):
    def parse(text):
        return None if text.lower() == "none" else conv(text)

    return parse


def _int(text):
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


# key -> (converter, default); problem.* keys are handled separately
_KEYS: dict[str, tuple[Any, Any]] = {
    "lgf.mode": (lambda s: Mode(s).value, "gd"),
    "lgf.eta": (float, 0.01),
    "lgf.history_size": (_int, 10),
    "lgf.retrain_interval": (_int, 30),
    "lgf.epochs": (_int, 100),
    "lgf.poly_order": (_int, 1),
    "lgf.truncation_rank": (_optional(_int), None),
    "lgf.fd_scheme": (lambda s: FDScheme(s).value, FDScheme.CENTERED2.value),
    "lgf.fit_edge_rows": (_to_bool, False),
    "lgf.on_nonfinite": (lambda s: OnNonfinite(s).value, OnNonfinite.ERROR.value),
    "lgf.record_every": (_int, 1),
    "stlsq.alpha": (float, StlsqConfig.alpha),
    "stlsq.threshold": (float, StlsqConfig.threshold),
    "stlsq.max_iter": (_int, StlsqConfig.max_iter),
    "stlsq.unbias": (_to_bool, StlsqConfig.unbias),
    "stlsq.normalize_columns": (_to_bool, StlsqConfig.normalize_columns),
    "integrator.method": (lambda s: Method(s).value, Method.DOPRI5.value),
    "integrator.rtol": (float, IntegratorConfig.rtol),
    "integrator.atol": (float, IntegratorConfig.atol),
    "integrator.max_steps": (_int, IntegratorConfig.max_steps),
    "integrator.initial_step": (_optional(float), None),
    "adam.beta1": (float, AdamParams.beta1),
    "adam.beta2": (float, AdamParams.beta2),
    "adam.epsilon": (float, AdamParams.epsilon),
    "run.baseline": (_to_bool, True),
    "run.seed": (_int, 0),
    "output.dir": (str, "lgf_out"),
    "output.full_state": (_to_bool, False),
    "output.log_surrogate_loss": (_to_bool, True),
}


def _literal(text):
    """Problem parameter values: numbers, booleans, none, lists, or bare strings."""
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if "," in text:
            return [_literal(part.strip()) for part in text.split(",")]
        return text
    if isinstance(value, tuple):
        value = list(value)
    if isinstance(value, list) or isinstance(value, (int, float, str)):
        return value
    raise ValueError(f"unsupported value {text!r}")


def _lgf_key_for(message, lines):
    # map a config-invariant message to the offending key so the error can cite its line
    if "M >= K" in message:
        return "lgf.retrain_interval", lines.get("lgf.retrain_interval")
    for name in ("history_size", "epochs", "truncation_rank", "eta", "poly_order", "record_every"):
        if name in message:
            return f"lgf.{name}", lines.get(f"lgf.{name}")
    return "lgf", None


def parse_config(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse and validate a config document.

    ``overrides`` maps full keys to already-typed values (used for the
    ``--out`` and ``--seed`` command-line flags). Unknown keys, bad values and
    violated invariants raise :class:`ConfigError` naming the key and line.
    """
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    problem: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in lines:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {lines[key]})")
        lines[key] = lineno
        if key.startswith("problem.") and key != "problem.kind":
            try:
                problem[key[len("problem."):]] = _literal(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {key}: {exc}") from None
            continue
        if key == "problem.kind":
            if value not in PROBLEM_KINDS:
                raise ConfigError(f"line {lineno}: problem.kind: unknown kind {value!r}, expected one of {PROBLEM_KINDS}")
            values[key] = value
            continue
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _KEYS[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from None

    values.update(overrides or {})
    if "problem.kind" not in values:
        raise ConfigError("missing required key 'problem.kind'")
    kind = values["problem.kind"]
    for name in problem:
        if name not in _PARAMS[kind]:
            key = f"problem.{name}"
            raise ConfigError(f"line {lines[key]}: unknown key {key!r} for problem kind {kind!r}")

    get = lambda key: values.get(key, _KEYS[key][1])  # noqa: E731
    try:
        stlsq = StlsqConfig(get("stlsq.alpha"), get("stlsq.threshold"), get("stlsq.max_iter"),
                            get("stlsq.unbias"), get("stlsq.normalize_columns"))
    except ValueError as exc:
        raise ConfigError(f"stlsq: {exc}") from None
    integrator = IntegratorConfig(
        rtol=get("integrator.rtol"),
        atol=get("integrator.atol"),
        max_steps=get("integrator.max_steps"),
        initial_step=get("integrator.initial_step"),
        method=Method(get("integrator.method")),
    )
    try:
        adam = AdamParams(get("lgf.eta"), get("adam.beta1"), get("adam.beta2"), get("adam.epsilon"))
    except ValueError as exc:
        raise ConfigError(f"adam: {exc}") from None
    try:
        lgf = LgfConfig(
            mode=get("lgf.mode"),
            eta=get("lgf.eta"),
            history_size=get("lgf.history_size"),
            retrain_interval=get("lgf.retrain_interval"),
            epochs=get("lgf.epochs"),
            poly_order=get("lgf.poly_order"),
            truncation_rank=get("lgf.truncation_rank"),
            fd_scheme=get("lgf.fd_scheme"),
            fit_edge_rows=get("lgf.fit_edge_rows"),
            stlsq=stlsq,
            integrator=integrator,
            adam=adam,
            on_nonfinite=get("lgf.on_nonfinite"),
            record_every=get("lgf.record_every"),
            log_surrogate_loss=get("output.log_surrogate_loss"),
        )
    except ValueError as exc:
        key, lineno = _lgf_key_for(str(exc), lines)
        where = f"line {lineno}: " if lineno else ""
        raise ConfigError(f"{where}{key}: {exc}") from None

    return ExperimentConfig(
        problem=ProblemSpec(kind, problem, get("run.seed")),
        lgf=lgf,
        baseline=get("run.baseline"),
        seed=get("run.seed"),
        output_dir=Path(get("output.dir")),
        full_state=get("output.full_state"),
    )


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def format_config(cfg: ExperimentConfig) -> str:
    """Effective config as text; ``parse_config(format_config(c)) == c``."""
    lc = cfg.lgf
    adam = lc.adam_params
    rows = [("problem.kind", cfg.problem.kind)]
    rows += [(f"problem.{k}", v) for k, v in sorted(cfg.problem.params.items())]
    rows += [
        ("lgf.mode", lc.mode),
        ("lgf.eta", lc.eta),
        ("lgf.history_size", lc.history_size),
        ("lgf.retrain_interval", lc.retrain_interval),
        ("lgf.epochs", lc.epochs),
        ("lgf.poly_order", lc.poly_order),
        ("lgf.truncation_rank", lc.truncation_rank),
        ("lgf.fd_scheme", lc.fd_scheme),
        ("lgf.fit_edge_rows", lc.fit_edge_rows),
        ("lgf.on_nonfinite", lc.on_nonfinite),
        ("lgf.record_every", lc.record_every),
        ("stlsq.alpha", lc.stlsq.alpha),
        ("stlsq.threshold", lc.stlsq.threshold),
        ("stlsq.max_iter", lc.stlsq.max_iter),
        ("stlsq.unbias", lc.stlsq.unbias),
        ("stlsq.normalize_columns", lc.stlsq.normalize_columns),
        ("integrator.method", lc.integrator.method),
        ("integrator.rtol", lc.integrator.rtol),
        ("integrator.atol", lc.integrator.atol),
        ("integrator.max_steps", lc.integrator.max_steps),
        ("integrator.initial_step", lc.integrator.initial_step),
        ("adam.beta1", adam.beta1),
        ("adam.beta2", adam.beta2),
        ("adam.epsilon", adam.epsilon),
        ("run.baseline", cfg.baseline),
        ("run.seed", cfg.seed),
        ("output.dir", str(cfg.output_dir)),
        ("output.full_state", cfg.full_state),
        ("output.log_surrogate_loss", lc.log_surrogate_loss),
    ]
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in rows)


# ---------------------------------------------------------------------------
# Running


def _g17(x) -> str:
    return "%.17g" % x


def write_run_csv(path, report: RunReport, eta: float) -> None:
    """Write the per-epoch log with at most 16 state components."""
    d = min(report.trajectory.shape[1], MAX_CSV_COMPONENTS)
    phases = report.logged_phases
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_PREFIX) + [f"a_{i}" for i in range(d)])
        for i, epoch in enumerate(report.epochs):
            row = [str(int(epoch)), _g17(epoch * eta), Phase(phases[i]).value,
                   _g17(report.loss_history[i]), str(int(report.grad_evals_history[i]))]
            w.writerow(row + [_g17(x) for x in report.trajectory[i, :d]])


def _write_full_state(path, report: RunReport) -> None:
    n = report.trajectory.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch"] + [f"a_{i}" for i in range(n)])
        for epoch, state in zip(report.epochs, report.trajectory):
            w.writerow([str(int(epoch))] + [_g17(x) for x in state])


def _check_writable(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=out, prefix=".probe"):
        pass


def _thread_limit():
    value = os.environ.get("LGF_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def _report_text(cfg, obj, lgf, base, error=None) -> str:
    lc = cfg.lgf
    out = [
        f"problem: {cfg.problem.kind} (n={obj.dim}, seed={cfg.seed})",
        f"mode: {lc.mode.value}  eta={lc.eta!r}  K={lc.history_size}  M={lc.retrain_interval}"
        f"  P={lc.poly_order}  r={lc.truncation_rank}  epochs={lc.epochs}",
        f"acceleration: {lc.acceleration_percent:g}%",
    ]
    if error:
        out.append(f"error: {error}")
    header = f"{'':24s}{'lgf':>24s}"
    if base is not None:
        header += f"{'baseline':>24s}"
    out.append(header)

    def row(label, fn):
        line = f"{label:24s}{fn(lgf):>24s}" if lgf is not None else f"{label:24s}{'-':>24s}"
        if base is not None:
            line += f"{fn(base):>24s}"
        out.append(line)

    row("final loss", lambda r: _g17(obj.value(r.terminal_state)))
    row("true gradient evals", lambda r: str(r.true_gradient_evals))
    row("true hessian solves", lambda r: str(r.true_hessian_solves))
    row("fallback epochs", lambda r: str(r.fallback_steps))
    if lgf is not None and lgf.warnings:
        out.append(f"surrogate warnings: {len(lgf.warnings)} (first: {lgf.warnings[0]})")
    a_true = getattr(obj, "a_true", None)
    if a_true is not None:
        out.append("recovered parameters:")
        out.append(f"{'index':>8s}{'true':>24s}{'lgf':>24s}" + (f"{'baseline':>24s}" if base is not None else ""))
        for i, v in enumerate(np.asarray(a_true, dtype=float)):
            line = f"{i:>8d}{_g17(v):>24s}"
            line += f"{_g17(lgf.terminal_state[i]) if lgf is not None else '-':>24s}"
            if base is not None:
                line += f"{_g17(base.terminal_state[i]):>24s}"
            out.append(line)
    return "\n".join(out) + "\n"


def run_experiment(cfg: ExperimentConfig, stream=sys.stdout) -> int:
    """Run LGF (and the baseline), write CSVs and ``report.txt``. Returns an exit status."""
    out = Path(cfg.output_dir)
    try:
        _check_writable(out)
    except OSError as exc:
        print(f"error: output directory {out} is not writable: {exc}", file=sys.stderr)
        return 2
    (out / "config.txt").write_text(format_config(cfg))

    def launch(fn):
        obj = make_problem(cfg.problem)
        return fn(obj, obj.initial_state(cfg.seed), cfg.lgf)

    obj = make_problem(cfg.problem)
    lgf = base = None
    error = None
    with _thread_limit():
        with ThreadPoolExecutor(max_workers=2 if cfg.baseline and obj.thread_safe else 1) as pool:
            futures = {"lgf": pool.submit(launch, run_lgf)}
            if cfg.baseline:
                futures["baseline"] = pool.submit(launch, run_baseline)
            results = {}
            for name, fut in futures.items():
                try:
                    results[name] = fut.result()
                except LgfRunError as exc:
                    error = error or f"{name}: {exc}"
                    results[name] = exc.report
                except Exception as exc:  # config-dependent failures, e.g. a missing Hessian
                    error = error or f"{name}: {exc}"
                    results[name] = None
    lgf, base = results.get("lgf"), results.get("baseline")

    # file writes happen only after both runs finished
    for name, report in (("lgf", lgf), ("baseline", base)):
        if report is None:
            continue
        write_run_csv(out / f"{name}.csv", report, cfg.lgf.eta)
        if cfg.full_state:
            _write_full_state(out / f"{name}_full_state.csv", report)
    text = _report_text(cfg, obj, lgf, base, error)
    (out / "report.txt").write_text(text)
    stream.write(text)
    if error:
        print(f"error: {error}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# Comparison


@dataclass
class ComparisonSummary:
    epochs: np.ndarray
    loss_ratio: np.ndarray
    terminal_normalized_diff: float
    grad_evals_a: int
    grad_evals_b: int
    truncated: bool = False
    notes: list = field(default_factory=list)

    @property
    def grad_eval_savings(self) -> int:
        return self.grad_evals_b - self.grad_evals_a

    @property
    def grad_eval_savings_percent(self) -> float:
        return 100.0 * self.grad_eval_savings / self.grad_evals_b if self.grad_evals_b else 0.0

    def format(self) -> str:
        lines = ["epoch,loss_ratio"]
        lines += [f"{int(e)},{_g17(r)}" for e, r in zip(self.epochs, self.loss_ratio)]
        lines.append(f"terminal normalized difference: {_g17(self.terminal_normalized_diff)}")
        lines.append(
            f"gradient evals: a={self.grad_evals_a} b={self.grad_evals_b} "
            f"savings={self.grad_eval_savings} ({self.grad_eval_savings_percent:.1f}% of b)"
        )
        return "\n".join(self.notes + lines) + "\n"


def _read_run_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = rows[0]
    if tuple(header[: len(CSV_PREFIX)]) != CSV_PREFIX:
        raise SchemaError(f"{path}: header must start with {','.join(CSV_PREFIX)}")
    comps = header[len(CSV_PREFIX):]
    if not comps or comps != [f"a_{i}" for i in range(len(comps))] or len(comps) > MAX_CSV_COMPONENTS:
        raise SchemaError(f"{path}: state columns must be a_0..a_{{d-1}} with 1 <= d <= {MAX_CSV_COMPONENTS}")
    epochs, losses, evals, states = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        if row[2] not in ("true", "surrogate"):
            raise SchemaError(f"{path}:{lineno}: phase must be 'true' or 'surrogate', got {row[2]!r}")
        try:
            epochs.append(int(row[0]))
            losses.append(float(row[3]))
            evals.append(int(row[4]))
            states.append([float(x) for x in row[5:]])
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return np.array(epochs, dtype=int), np.array(losses), np.array(evals, dtype=int), np.array(states).reshape(len(epochs), -1)


def compare(path_a, path_b) -> ComparisonSummary:
    """Loss ratio per epoch (a over b), terminal state difference and gradient-eval savings."""
    ea, la, ga, sa = _read_run_csv(path_a)
    eb, lb, gb, sb = _read_run_csv(path_b)
    if sa.shape[1] != sb.shape[1]:
        raise SchemaError(f"state column counts differ: {sa.shape[1]} vs {sb.shape[1]}")
    notes = []
    n = min(len(ea), len(eb))
    truncated = len(ea) != len(eb)
    if truncated:
        msg = f"warning: epoch counts differ ({len(ea)} vs {len(eb)} rows); comparing the first {n}"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    if n == 0:
        raise SchemaError("no data rows to compare")
    if not np.array_equal(ea[:n], eb[:n]):
        raise SchemaError("epoch columns of the common prefix differ")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(la[:n] == lb[:n], 1.0, la[:n] / lb[:n])
    a_end, b_end = sa[n - 1], sb[n - 1]
    diff = float(np.sum((a_end - b_end) ** 2))
    norm = float(np.sum(a_end**2))
    rel = diff / norm if norm > 0 else (0.0 if diff == 0 else math.inf)
    return ComparisonSummary(ea[:n], ratio, rel, int(ga[n - 1]), int(gb[n - 1]), truncated, notes)


# ---------------------------------------------------------------------------
# Entry point


def _build_parser():
    parser = argparse.ArgumentParser(prog="lgf", description="Learned-gradient-flow experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run LGF and the baseline from a config file")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    run.add_argument("--seed", type=int, help="seed (overrides run.seed)")
    cmp_ = sub.add_parser("compare", help="compare two run CSV files")
    cmp_.add_argument("csv_a", type=Path)
    cmp_.add_argument("csv_b", type=Path)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        overrides = {}
        if args.out is not None:
            overrides["output.dir"] = str(args.out)
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        try:
            text = args.config.read_text(encoding="utf-8")
            cfg = parse_config(text, overrides)
        except (OSError, ConfigError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return run_experiment(cfg)
    try:
        with warnings.catch_warnings():
            # truncation is reported in the printed summary
            warnings.simplefilter("ignore")
            summary = compare(args.csv_a, args.csv_b)
    except (OSError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(summary.format())
    return 0


if __name__ == "__main__":
    sys.exit(main())
