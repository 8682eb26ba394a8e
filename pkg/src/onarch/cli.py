"""Batch command-line interface: ``onarch <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
input), 3 numerical failure (non-convergence, negative variance, unstable
model). Every output is written atomically and accompanied by a
``<output>.manifest.json`` run manifest recording the resolved arguments,
input hashes, versions and wall-clock duration; outputs themselves contain
no timestamps, so identical runs give byte-identical files.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, parallel
from .calibration import FitResult, calibrate
from .data import DataError, compute_returns, ingest_ohlc, normalize_panel, read_returns, write_returns
from .evaluation import cdf_csv, extract_residuals, isos_compare, wald_universality, baseline_ratio
from .io import atomic_write_json, atomic_write_text, sha256_file
from .model import (
    DAILY,
    DAY,
    NIGHT,
    BivariateModel,
    DailyArchParams,
    EquationParams,
    params_from_dict,
    reference_params,
    reference_stderr,
)
from .simulate import NegativeVarianceError, SimConfig, UnstableModelError, simulate_panel
from .validity import check_positivity, check_stability, empirical_positivity

log = logging.getLogger("onarch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    subcommand: str
    argv: list[str]
    resolved: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    seed: int | None = None
    versions: dict[str, str] = field(default_factory=dict)
    duration_seconds: float = 0.0

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)


def _versions() -> dict[str, str]:
    return {"onarch": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def manifest_path(out: str | os.PathLike) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _q_list(text: str) -> list[int]:
    try:
        qs = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not qs or min(qs) < 1:
        raise argparse.ArgumentTypeError("lags must be positive")
    return qs


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="file of key=value defaults (flags take precedence)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker thread count (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="onarch", description="Bivariate intra-day/overnight ARCH volatility toolkit.")
    p.add_argument("--version", action="version", version=f"onarch {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="OHLC files -> return panel CSV")
    s.add_argument("--input", nargs="+", required=True, help="files or glob patterns")
    s.add_argument("--out", required=True)
    s.add_argument("--layout", choices=("auto", "per-stock", "long"), default="auto")
    s.add_argument("--normalize", action="store_true", help="apply the three-step normalization")
    s.add_argument("--max-gap-days", type=int, default=5)

    s = sub.add_parser("simulate", parents=[common], help="simulate a return panel")
    s.add_argument("--model", nargs="+", required=True,
                   help="parameter/fit JSON files (day and night, a bivariate model, or a daily ARCH); "
                        "'reference' selects the bundled parameters")
    s.add_argument("--stocks", type=int, required=True)
    s.add_argument("--days", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--q", type=int, default=512)
    s.add_argument("--burn-in", type=int, default=None)
    s.add_argument("--on-negative", choices=("raise", "count"), default="raise")
    s.add_argument("--force", action="store_true", help="simulate even if the model is unstable")
    s.add_argument("--out", required=True)

    s = sub.add_parser("calibrate", parents=[common], help="maximum-likelihood calibration")
    s.add_argument("--panel", required=True)
    s.add_argument("--target", choices=(DAY, NIGHT, DAILY), required=True)
    s.add_argument("--q-free", type=int, default=63)
    s.add_argument("--q", type=int, default=512)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--constrain-s2-zero", dest="constrain", action="store_const", const=True, default=None)
    g.add_argument("--no-constrain", dest="constrain", action="store_const", const=False)
    s.add_argument("--max-iter", type=int, default=500)
    s.add_argument("--out", required=True)

    s = sub.add_parser("validate", parents=[common], help="stability and positivity checks")
    s.add_argument("--model", nargs="+", required=True, help="fit or parameter JSON files; 'reference' for bundled")
    s.add_argument("--q", type=_q_list, default=[126, 512])
    s.add_argument("--q-fit", type=int, default=512, help="lag at which the parameters were estimated")
    s.add_argument("--omega-upper-bound", action="store_true")
    s.add_argument("--omega-scope", choices=("cross", "all"), default="cross")
    s.add_argument("--empirical", type=int, default=0, help="simulated stock-days for an empirical check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", parents=[common], help="in-sample / out-of-sample comparison")
    s.add_argument("--panel", required=True)
    s.add_argument("--q", type=int, default=512)
    s.add_argument("--q-free", type=int, default=63)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-iter", type=int, default=500)
    s.add_argument("--out", required=True)

    s = sub.add_parser("wald", parents=[common], help="universality test between two fits")
    s.add_argument("--fit1", required=True)
    s.add_argument("--fit2", required=True)
    s.add_argument("--exclude", default="nu", help="comma-separated parameter names")
    s.add_argument("--out", default=None)

    s = sub.add_parser("report", parents=[common], help="fit + validity + residual diagnostics")
    s.add_argument("--fit", nargs="+", required=True, help="fit JSON file(s) for day/night or daily")
    s.add_argument("--panel", required=True)
    s.add_argument("--q", type=int, default=None, help="lag for validity checks (default: the fit's)")
    s.add_argument("--cdf-dir", default=None, help="directory for residual CDF CSV files")
    s.add_argument("--out", required=True)
    return p


def _read_config(path: str) -> dict[str, str]:
    if not Path(path).exists():
        raise FileNotFoundError(path)
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            k, v = (x.strip() for x in line.split("=", 1))
            out[k.replace("-", "_")] = v.strip("\"'")
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    cfg = _read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, text in cfg.items():
        if key not in actions or key in ("help", "config"):
            raise UsageError(f"{args.config}: unknown option {key!r} for {args.command}")
        a = actions[key]
        if a.nargs == 0:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{args.config}: {key} expects true/false")
            val = low in ("true", "1", "yes")
            defaults[key] = a.const if val else a.default
        elif a.nargs in ("+", "*"):
            defaults[key] = text.split()
        else:
            try:
                defaults[key] = a.type(text) if a.type else text
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {exc}")
            if a.choices and defaults[key] not in a.choices:
                raise UsageError(f"{args.config}: {key} must be one of {sorted(a.choices)}")
        a.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# model loading


def _load_json(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(path)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})")


def _params_and_stderr(d: dict):
    """Accept a parameter file, a fit file, or a calibration result file."""
    if "final" in d:
        d = d["final"]
    if "params" in d:
        return params_from_dict(d["params"]), d.get("stderr_by_kernel")
    stderr = d.get("stderr")
    return params_from_dict(d), stderr


def load_model(paths: list[str], q: int, manifest: RunManifest | None = None):
    """Bivariate model or daily ARCH from files; a missing day or night half uses the bundled one."""
    found: dict[str, tuple] = {}
    for path in paths:
        if path == "reference":
            for eq in (DAY, NIGHT):
                found.setdefault(eq, (reference_params(eq), reference_stderr(eq), "bundled"))
            continue
        d = _load_json(path)
        if manifest is not None:
            manifest.add_input(path)
        if "day" in d and "night" in d and "q" in d:
            m = BivariateModel.from_dict(d)
            found[DAY] = (m.day, None, path)
            found[NIGHT] = (m.night, None, path)
            continue
        try:
            params, stderr = _params_and_stderr(d)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: not a parameter file ({exc})")
        found[params.equation] = (params, stderr, path)
    if DAILY in found:
        if len(found) > 1:
            raise UsageError("a daily ARCH model cannot be combined with day/night parameters")
        return found[DAILY][0], {DAILY: found[DAILY][1]}
    for eq in (DAY, NIGHT):
        if eq not in found:
            log.warning("no %s parameters given; using the bundled reference set", eq)
            found[eq] = (reference_params(eq), reference_stderr(eq), "bundled")
    if manifest is not None:
        manifest.resolved["model_sources"] = {eq: found[eq][2] for eq in (DAY, NIGHT)}
    model = BivariateModel(found[DAY][0], found[NIGHT][0], q)
    return model, {DAY: found[DAY][1], NIGHT: found[NIGHT][1]}


def _read_panel(path: str, manifest: RunManifest):
    panel = read_returns(path)
    manifest.add_input(path)
    return panel


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args, manifest: RunManifest) -> int:
    paths = []
    for pattern in args.input:
        hits = sorted(glob.glob(pattern))
        if not hits:
            raise FileNotFoundError(pattern)
        paths.extend(hits)
    for p in paths:
        manifest.add_input(p)
    panel = compute_returns(ingest_ohlc(paths, layout=args.layout), max_gap_days=args.max_gap_days)
    if args.normalize:
        panel = normalize_panel(panel)
    write_returns(panel, args.out)
    log.info("wrote %d stocks x %d dates to %s", panel.n_stocks, panel.n_dates, args.out)
    return EXIT_OK


def cmd_simulate(args, manifest: RunManifest) -> int:
    model, _ = load_model(args.model, args.q, manifest)
    manifest.seed = args.seed
    cfg = SimConfig(args.stocks, args.days, args.seed, model, burn_in=args.burn_in, q=args.q, on_negative=args.on_negative)
    res = simulate_panel(cfg, force=args.force, return_diagnostics=True)
    manifest.resolved["diagnostics"] = asdict(res.diagnostics)
    write_returns(res.panel, args.out)
    return EXIT_OK


def cmd_calibrate(args, manifest: RunManifest) -> int:
    panel = _read_panel(args.panel, manifest)
    res = calibrate(panel, args.target, q_free=args.q_free, q=args.q, constrain_s2_zero=args.constrain, max_iter=args.max_iter)
    out = res.to_dict()
    final = res.final
    out["params"] = final.params.to_dict()
    out["stderr"] = final.kernel_stderr()
    out["provenance"] = {
        "panel": Path(args.panel).name,
        "panel_sha256": manifest.inputs[args.panel],
        "seed": None,
        "steps": ["moment_init", "free", "functional_forms", "parametric"] + (["constrained"] if res.constrained else []),
        "manifest": manifest_path(args.out).name,
    }
    atomic_write_json(args.out, out)
    if not final.converged:
        raise NumericalFailure(f"calibration did not converge: {final.flags}")
    return EXIT_OK


def cmd_validate(args, manifest: RunManifest) -> int:
    model, stderr = load_model(args.model, max(args.q), manifest)
    if isinstance(model, DailyArchParams):
        raise UsageError("validation applies to bivariate models")
    out: dict = {"stability": {}, "positivity": {}, "manifest": manifest_path(args.out).name}
    ok = True
    for q in args.q:
        m = BivariateModel(model.day, model.night, q)
        st = check_stability(m)
        out["stability"][str(q)] = st.to_dict()
        for eq in (DAY, NIGHT):
            rep = check_positivity(
                m.equation(eq), q, q_fit=args.q_fit, stderr=stderr[eq],
                omega_upper_bound=args.omega_upper_bound, omega_scope=args.omega_scope,
            )
            out["positivity"].setdefault(str(q), {})[eq] = rep.to_dict()
        ok &= st.stable
    if args.empirical:
        manifest.seed = args.seed
        emp = empirical_positivity(BivariateModel(model.day, model.night, args.q_fit), stock_days=args.empirical, seed=args.seed)
        out["empirical"] = emp.to_dict()
    atomic_write_json(args.out, out)
    return EXIT_OK


def cmd_evaluate(args, manifest: RunManifest) -> int:
    panel = _read_panel(args.panel, manifest)
    manifest.seed = args.seed
    rep = isos_compare(panel, q=args.q, seed=args.seed, q_free=args.q_free, max_iter=args.max_iter)
    out = rep.to_dict()
    out["manifest"] = manifest_path(args.out).name
    atomic_write_json(args.out, out)
    return EXIT_OK


def _load_fit(path: str, manifest: RunManifest) -> FitResult:
    d = _load_json(path)
    manifest.add_input(path)
    try:
        return FitResult.from_dict(d["final"] if "final" in d else d)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: not a fit file ({exc})")


def cmd_wald(args, manifest: RunManifest) -> int:
    f1, f2 = _load_fit(args.fit1, manifest), _load_fit(args.fit2, manifest)
    exclude = tuple(x.strip() for x in args.exclude.split(",") if x.strip())
    rep = wald_universality(f1, f2, exclude=exclude)
    text = json.dumps(rep.to_dict(), indent=2) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args, manifest: RunManifest) -> int:
    panel = _read_panel(args.panel, manifest)
    fits = [_load_fit(p, manifest) for p in args.fit]
    by_eq = {f.params.equation: f for f in fits}
    out: dict = {"fits": {eq: f.to_dict() for eq, f in by_eq.items()}, "manifest": manifest_path(args.out).name}
    if DAILY in by_eq:
        f = by_eq[DAILY]
        diag = extract_residuals(f.params, panel, q=f.q)
    else:
        missing = [eq for eq in (DAY, NIGHT) if eq not in by_eq]
        if missing:
            raise UsageError(f"report needs both day and night fits (missing {missing})")
        q = by_eq[DAY].q
        model = BivariateModel(by_eq[DAY].params, by_eq[NIGHT].params, q)
        diag = extract_residuals(model, panel)
        qv = args.q or q
        mv = BivariateModel(model.day, model.night, qv)
        out["stability"] = check_stability(mv).to_dict()
        out["positivity"] = {
            eq: check_positivity(mv.equation(eq), qv, q_fit=q, stderr=by_eq[eq].kernel_stderr()).to_dict()
            for eq in (DAY, NIGHT)
        }
        out["baseline_ratios"] = {eq: baseline_ratio(model.equation(eq), panel, q) for eq in (DAY, NIGHT)}
    out["residuals"] = diag.to_dict()
    if args.cdf_dir:
        for k, table in diag.cdf_table.items():
            p = Path(args.cdf_dir) / f"residual_cdf_{k}.csv"
            atomic_write_text(p, cdf_csv(table))
            manifest.outputs.append(str(p))
    atomic_write_json(args.out, out)
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "validate": cmd_validate,
    "evaluate": cmd_evaluate,
    "wald": cmd_wald,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"onarch: error: {exc.filename or exc}: no such file", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    resolved = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    manifest = RunManifest(args.command, argv, resolved, versions=_versions())
    out = getattr(args, "out", None)
    start = time.perf_counter()
    try:
        with parallel.threads(args.threads):
            code = COMMANDS[args.command](args, manifest)
    except UsageError as exc:
        print(f"onarch {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"onarch {args.command}: error: {exc.filename or exc}: no such file", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, NegativeVarianceError, UnstableModelError, FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"onarch {args.command}: numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERICAL
    except (DataError, ValueError) as exc:
        print(f"onarch {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if out and Path(out).exists():
        manifest.outputs.insert(0, str(out))
        manifest.duration_seconds = round(time.perf_counter() - start, 3)
        atomic_write_json(manifest_path(out), asdict(manifest))
    return code


if __name__ == "__main__":
    sys.exit(main())
