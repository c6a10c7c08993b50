"""Command-line front end: fit, calibrate, attack, detect, simulate, sweep.

Exit codes
  0  success (detect: H0 kept)
  1  detect: H1 accepted (the flows are linked)
  2  trace or corpus parse error, empty corpus
  3  degenerate training sample
  4  invalid run configuration
  5  missing calibration artifact or fingerprint mismatch
  6  any other error
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .adversary import STRATEGIES, apply_attack, run_strategy
from .budget import AttackBudget, DelayGrid
from .config import ConfigError, corpus_files, load_config, load_densities
from .density import DegenerateSampleError, fit_kde
from .detector import Calibration, DetectorConfig, calibrate_threshold, detect, trace_sha
from .game import estimate_utility, results_csv, results_json, sweep, write_results
from .trace import IpdModel, TraceError, ipd, load_trace, write_trace

EXIT_H0, EXIT_H1, EXIT_PARSE, EXIT_DEGENERATE, EXIT_CONFIG, EXIT_CALIBRATION, EXIT_OTHER = range(7)


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_OTHER):
        super().__init__(message)
        self.code = code


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _load_trace(path):
    try:
        return load_trace(path)
    except OSError as exc:
        raise CliError(f"cannot read trace {path}: {exc.strerror}", EXIT_PARSE) from None
    except TraceError as exc:
        raise CliError(f"{path}: {exc}", EXIT_PARSE) from None


def _read_samples(path) -> np.ndarray:
    """Whitespace-separated reals, '#' comments allowed (jitter samples may be negative)."""
    values = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_PARSE) from None
    for lineno, line in enumerate(lines, 1):
        for tok in line.split("#", 1)[0].split():
            try:
                values.append(float(tok))
            except ValueError:
                raise CliError(f"{path}: line {lineno}: cannot parse sample {tok!r}", EXIT_PARSE) from None
    return np.asarray(values, dtype=np.float64)


# -- fit ---------------------------------------------------------------------

def cmd_fit(args) -> int:
    path = Path(args.corpus)
    if not path.exists():
        raise CliError(f"corpus not found: {path}", EXIT_PARSE)
    files = corpus_files(path)
    if not files:
        raise CliError("empty corpus", EXIT_PARSE)
    corpus = [_load_trace(p) for p in files]
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(corpus))
    n_train = max(1, int(np.floor(args.fraction * len(corpus) + 0.5)))
    if len(corpus) > 1:
        n_train = min(n_train, len(corpus) - 1)
    train = [corpus[i] for i in sorted(order[:n_train].tolist())]
    ipds = np.concatenate([ipd(t) for t in train])
    try:
        f_dy = fit_kde(ipds)
        f_dd = None
        if args.delays:
            dd = _read_samples(args.delays)
            keep = np.sort(rng.permutation(dd.size)[: max(2, int(np.floor(args.fraction * dd.size + 0.5)))])
            f_dd = fit_kde(dd[keep])
    except DegenerateSampleError as exc:
        raise CliError(str(exc), EXIT_DEGENERATE) from None
    sidecar = {
        "f_dy": f_dy.to_dict(),
        "f_dd": f_dd.to_dict() if f_dd is not None else None,
        "meta": {"seed": args.seed, "fraction": args.fraction, "corpus_size": len(corpus),
                 "training_traces": len(train), "training_ipds": int(ipds.size)},
    }
    _atomic_write(args.out, json.dumps(sidecar, sort_keys=True) + "\n")
    print(f"fitted f_dY on {ipds.size} IPDs from {len(train)} traces"
          + (f", f_dD on {f_dd.n} jitter samples" if f_dd is not None else ""))
    return EXIT_H0


# -- detector settings shared by calibrate / attack / detect -----------------

def _densities(args):
    if not args.densities:
        raise CliError("--densities is required", EXIT_OTHER)
    try:
        f_dy, f_dd = load_densities(args.densities)
    except OSError as exc:
        raise CliError(f"cannot read densities {args.densities}: {exc.strerror}", EXIT_PARSE) from None
    except (ValueError, KeyError) as exc:
        raise CliError(f"invalid density sidecar: {exc}", EXIT_PARSE) from None
    return f_dy, f_dd


def _base_settings(args, recorded: dict | None = None) -> dict:
    """Detector/budget settings: recorded artifact < --config < explicit flags."""
    s = {"levels": 256, "a_max": 0.0, "p_a": 0.0, "p_l": 0.0, "eta": 0.01, "calib_count": 100_000,
         "mode": "auto", "p_l_assumed": None}
    if recorded:
        s.update({"levels": recorded["levels"], "a_max": recorded["a_max"], "p_a": recorded["p_a_assumed"],
                  "p_l": recorded["p_l_assumed"], "p_l_assumed": recorded["p_l_assumed"],
                  "eta": recorded["eta"], "calib_count": recorded["calib_count"], "mode": recorded["mode"]})
    if getattr(args, "config", None):
        sc = _load_run_config(args.config).scenario
        s.update({"levels": sc.levels, "a_max": sc.budget.a_max, "p_a": sc.budget.p_a, "p_l": sc.budget.p_l,
                  "eta": sc.eta, "calib_count": sc.calib_count, "mode": sc.mode, "p_l_assumed": sc.p_l_assumed})
    for key in ("levels", "a_max", "p_a", "p_l", "eta", "calib_count", "mode"):
        value = getattr(args, key, None)
        if value is not None:
            s[key] = value
    return s


def _detector(settings: dict, f_dy, f_dd) -> DetectorConfig:
    if f_dd is None:
        raise CliError("density sidecar lacks a jitter density (fit with --delays)", EXIT_OTHER)
    mode = settings["mode"]
    p_l = settings["p_l"] if settings["p_l_assumed"] is None else settings["p_l_assumed"]
    if mode == "auto":
        mode = "delay" if settings["p_a"] == 0 and p_l == 0 else "robust"
    try:
        return DetectorConfig(f_dd, f_dy, DelayGrid(settings["levels"], settings["a_max"]), eta=settings["eta"],
                              p_l_assumed=p_l, p_a_assumed=settings["p_a"],
                              calib_count=settings["calib_count"], mode=mode)
    except ValueError as exc:
        raise CliError(f"invalid detector settings: {exc}", EXIT_CONFIG) from None


def _load_run_config(path):
    try:
        return load_config(path)
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG) from None


# -- calibrate / attack / detect ---------------------------------------------

def cmd_calibrate(args) -> int:
    f_dy, f_dd = _densities(args)
    cfg = _detector(_base_settings(args), f_dy, f_dd)
    x = _load_trace(args.x)
    # unrelated flows resample the training IPDs stored in the sidecar
    y_gen = IpdModel.empirical(f_dy.samples[f_dy.samples > 0])
    epsilon = calibrate_threshold(x, y_gen, cfg, args.seed)
    record = Calibration(epsilon, cfg.eta, cfg.calib_count, args.seed, cfg.fingerprint(), cfg.params(),
                         trace_sha(x), f"{f_dy.fingerprint()}:{f_dd.fingerprint()}")
    _atomic_write(args.out, record.to_json() + "\n")
    print(f"epsilon = {epsilon!r} (eta = {cfg.eta}, {cfg.calib_count} unrelated flows)")
    return EXIT_H0


def cmd_attack(args) -> int:
    f_dy, f_dd = _densities(args)
    s = _base_settings(args)
    x = _load_trace(args.x)
    try:
        budget = AttackBudget(s["a_max"], s["p_a"], s["p_l"])
        grid = DelayGrid(s["levels"], s["a_max"])
    except ValueError as exc:
        raise CliError(f"invalid budget: {exc}", EXIT_CONFIG) from None
    action = run_strategy(args.adversary, x, budget, f_dy, f_dd if f_dd is not None else f_dy, grid, args.seed)
    zeros = np.zeros(x.n)
    w = apply_attack(x, action, zeros, np.zeros(action.m))
    write_trace(w, args.out)
    summary = {"adversary": args.adversary, "n": action.n, "m": action.m,
               "dropped": int(action.drop.sum()), "chaff": int(action.chaff.size),
               "max_delay": float(action.delays.max(initial=0.0))}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_H0


def cmd_detect(args) -> int:
    if not args.calibration or not Path(args.calibration).is_file():
        raise CliError(f"calibration artifact not found: {args.calibration}", EXIT_CALIBRATION)
    try:
        record = Calibration.from_json(Path(args.calibration).read_text(encoding="utf-8"))
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"unreadable calibration artifact: {exc}", EXIT_CALIBRATION) from None
    f_dy, f_dd = _densities(args)
    cfg = _detector(_base_settings(args, record.params), f_dy, f_dd)
    if cfg.fingerprint() != record.fingerprint:
        raise CliError("calibration fingerprint does not match the detector configuration", EXIT_CALIBRATION)
    x = _load_trace(args.x)
    w = _load_trace(args.w)
    if record.x_sha and record.x_sha != trace_sha(x):
        raise CliError("calibration was computed for a different reference flow", EXIT_CALIBRATION)
    verdict = detect(x, w, cfg, record.epsilon)
    print(json.dumps(verdict.to_dict(), sort_keys=True))
    return EXIT_H1 if verdict.accept_h1 else EXIT_H0


# -- simulate / sweep --------------------------------------------------------

def _scenario(args):
    rc = _load_run_config(args.config)
    sc = rc.scenario
    if args.seed is not None:
        sc = dataclasses.replace(sc, seed=args.seed)
    return rc, sc


def _emit(estimates, rc, args) -> None:
    fmt = args.format or rc.output_format
    out = args.out or rc.output_path
    if out is not None:
        write_results(estimates, out, fmt)
    else:
        sys.stdout.write(results_csv(estimates) if fmt == "csv" else results_json(estimates))
    for est in estimates:
        p = est.params
        print(f"{p['adversary']} a_max={p['a_max']} p_a={p['p_a']} p_l={p['p_l']} n={p['n']} eta={p['eta']}: "
              f"u_bar={est.u_bar:.4f} [{est.ci_low:.4f}, {est.ci_high:.4f}]",
              file=sys.stderr if out is None else sys.stdout)


def cmd_simulate(args) -> int:
    rc, sc = _scenario(args)
    if rc.sweep_axis:
        estimates = sweep(sc, rc.sweep_axis, rc.sweep_values, jobs=args.jobs)
    else:
        estimates = [estimate_utility(sc, jobs=args.jobs)]
    _emit(estimates, rc, args)
    return EXIT_H0


def cmd_sweep(args) -> int:
    rc, sc = _scenario(args)
    axis = args.axis or rc.sweep_axis
    values = args.values or list(rc.sweep_values)
    if not axis or not values:
        raise CliError("sweep needs an axis and values (flags or config sweep section)", EXIT_CONFIG)
    if axis != "adversary":
        try:
            values = [float(v) if axis != "n" else int(v) for v in values]
        except ValueError:
            raise CliError(f"non-numeric value for axis {axis}", EXIT_CONFIG) from None
    try:
        for v in values:
            sc.with_axis(axis, v)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    _emit(sweep(sc, axis, values, jobs=args.jobs), rc, args)
    return EXIT_H0


# -- parser ------------------------------------------------------------------

def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("FLOWGAME_JOBS", "1")))
    except ValueError:
        return 1


def _detector_flags(p, with_budget=True) -> None:
    p.add_argument("--densities", help="density sidecar written by 'fit'")
    p.add_argument("--config", help="run configuration supplying detector and budget settings")
    p.add_argument("--levels", type=int, help="delay grid size K")
    p.add_argument("--eta", type=float, help="false-positive bound")
    p.add_argument("--calib-count", dest="calib_count", type=int, help="unrelated flows for calibration")
    p.add_argument("--mode", choices=("auto", "delay", "robust"))
    if with_budget:
        p.add_argument("--a-max", dest="a_max", type=float, help="delay budget in seconds")
        p.add_argument("--p-a", dest="p_a", type=float, help="chaff ratio")
        p.add_argument("--p-l", dest="p_l", type=float, help="drop ratio")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowgame", description=__doc__.split("\n")[0],
                                     epilog="Exit codes: 0 ok/H0, 1 H1, 2 parse, 3 degenerate sample, "
                                            "4 bad config, 5 calibration, 6 other.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit IPD (and jitter) densities on a training split")
    p.add_argument("corpus", help="directory of trace files (or one trace file)")
    p.add_argument("--delays", help="file of jitter samples for f_dD")
    p.add_argument("--fraction", type=float, default=0.5, help="training fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("calibrate", help="compute the detection threshold for a reference flow")
    p.add_argument("x", help="reference trace")
    _detector_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("attack", help="apply an adversary strategy to a trace")
    p.add_argument("x", help="input trace")
    p.add_argument("--adversary", choices=STRATEGIES, default="opt-delay")
    _detector_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("detect", help="decide whether w is a relayed copy of x")
    p.add_argument("x", help="reference trace")
    p.add_argument("w", help="observed trace")
    p.add_argument("--calibration", help="artifact written by 'calibrate'")
    _detector_flags(p)
    p.set_defaults(func=cmd_detect)

    for name, func, help_text in (("simulate", cmd_simulate, "estimate utility for a configured scenario"),
                                  ("sweep", cmd_sweep, "estimate utility along one parameter axis")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="results path (default: standard output)")
        p.add_argument("--format", choices=("csv", "json"))
        p.add_argument("--jobs", type=int, default=_default_jobs(), help="worker processes (env FLOWGAME_JOBS)")
        if name == "sweep":
            p.add_argument("--axis")
            p.add_argument("--values", nargs="+")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"flowgame {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - top-level error boundary
        print(f"flowgame {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
