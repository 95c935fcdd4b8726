"""``fermi-hbt`` command line: simulate, analyze, fit, model, selftest.

Exit codes: 0 success, 1 validation (bad config, bad input values), 2 I/O
(missing or unwritable files, malformed NTT1), 3 numerical failure (fit did
not converge, quadrature failed, self-test failed).

Thread count: ``FERMI_HBT_THREADS`` if set, else ``--threads``, else the
number of available cores.  Output never depends on it.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .coincidence import DelayHistogram, analyze_events
from .config import load_config
from .exceptions import DecodeError, NumericalError, ValidationError
from .fitting import fit_histogram
from .model import BroadenedModel, c_exp_closed, coherence_to_energy
from .selftest import run_selftest
from .simulation import simulate_to_file
from .timetag import read_run

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3
THREADS_ENV = "FERMI_HBT_THREADS"


def resolve_threads(flag: int | None) -> int:
    env = os.environ.get(THREADS_ENV)
    if env is not None and env.strip():
        try:
            n = int(env)
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    elif flag is not None:
        n = flag
    else:
        n = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    if n < 1:
        raise ValidationError(f"thread count must be >= 1, got {n}")
    return n


def _echo_lines(cfg) -> dict:
    return {f"{sec}.{key}": value for sec, keys in cfg.echo().items() for key, value in keys.items()}


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    threads = resolve_threads(args.threads)
    summary = simulate_to_file(args.output, cfg.beam, cfg.detector, cfg.metadata(), threads)
    s = summary.as_dict()
    print(f"wrote {s['events']} events to {args.output}")
    print(f"beam arrivals {s['beam_arrivals']} over {s['duration_s']:g} s: realized rate {s['realized_rate_per_s']:.2f} /s")
    print(f"recorded rate {s['detected_rate_per_s']:.2f} /s over {s['live_time_s']:g} s live")
    print(f"cross-talk events {s['crosstalk_events']}, background events {s['background_events']}")
    print(f"dead-time losses {s['dead_time_losses']} ({100 * s['dead_time_fraction']:.3f} %)")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    threads = resolve_threads(args.threads)
    meta, events = read_run(args.input)
    n = meta.pixel_count
    outside = [p for p in cfg.analysis.group1 + cfg.analysis.group2 if p >= n]
    if outside:
        raise ValidationError(f"group pixels {outside} exceed the file's pixel_count {n}")
    if meta.clock != cfg.detector.clock:
        _say(f"note: using the file's clock ({meta.clock.tick_period_ns} ns ticks)")
    if events.shape[0] == 0:
        _say("warning: input holds no events; writing an all-zero histogram")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        hist = analyze_events(events, cfg.analysis, meta.clock, n_threads=threads, allow_empty=True)
    extra = {
        "input": str(args.input),
        "run.seed": meta.seed,
        "run.events": int(events.shape[0]),
        **_echo_lines(cfg),
    }
    with open(args.output, "w") as fh:
        hist.to_csv(fh, extra)
    chi2, dof = hist.flatness_chi2()
    print(f"{events.shape[0]} events -> {hist.t_ns.shape[0]} lags, written to {args.output}")
    if dof:
        print(f"flatness chi2 = {chi2:.1f} for {dof} points (chi2/dof = {chi2 / dof:.3f})")
        print(f"c_norm(0) = {hist.c_norm[0]:.4f} +- {hist.err[0]:.4f}")
    return EXIT_OK


def _write_curve(path, t, values, header: dict) -> None:
    with open(path, "w") as fh:
        for k, v in header.items():
            fh.write(f"# {k} = {v}\n")
        fh.write("t_ns,c_model\n")
        for ti, ci in zip(t, values):
            fh.write(f"{float(ti)!r},{float(ci)!r}\n")


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    with open(args.input) as fh:
        hist = DelayHistogram.from_csv(fh)
    result = fit_histogram(hist, cfg.tau_t, cfg.delta, **cfg.fit.kwargs())
    report = result.to_dict()
    report["energy_spread_neV"] = coherence_to_energy(result.tau_c)
    report["input"] = str(args.input)
    report["config"] = cfg.echo()
    Path(args.output).write_text(json.dumps(report, indent=2, default=float) + "\n")
    if args.curve:
        t = np.asarray(hist.t_ns, dtype=float)
        _write_curve(args.curve, t, result.predict(t), {"source": "fit", "input": str(args.input), "lag_offset_ns": result.lag_offset})
    print(f"alpha = {result.alpha:.4f} +- {result.alpha_err:.4f}")
    print(f"tau_c = {result.tau_c:.2f} +- {result.tau_c_err:.2f} ns  (energy spread {report['energy_spread_neV']:.3g} neV)")
    print(f"baseline = {result.baseline:.5f} +- {result.baseline_err:.5f}")
    print(f"chi2 = {result.chi2:.2f} for {result.dof} dof; converged = {result.converged} ({result.message}, {result.iterations} iterations)")
    if result.at_bound:
        print(f"at bound: {', '.join(result.at_bound)}")
    if not result.converged:
        _say("error: fit did not converge; report written anyway")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_model(args) -> int:
    cfg = load_config(args.config)
    m = BroadenedModel(cfg.beam.model.alpha, cfg.beam.model.tau_c, cfg.tau_t, cfg.delta, 1.0)
    t = cfg.analysis.lag_grid
    header = {"source": "model", "alpha": m.alpha, "tau_c_ns": m.tau_c, "tau_t_ns": m.tau_t, "delta_ns": m.delta}
    header.update(_echo_lines(cfg))
    _write_curve(args.output, t, c_exp_closed(t, m), header)
    print(f"wrote {t.shape[0]} points to {args.output}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest(quick=args.quick, tol=args.tol)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERICAL
    print("all suites passed")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage mistakes are validation errors, not argparse's default status 2 (reserved for I/O)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fermi-hbt", description="Antibunching coincidence simulation and analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_input):
        sp.add_argument("-c", "--config", required=True, help="config file or preset name (in10, t13c)")
        if need_input:
            sp.add_argument("-i", "--input", required=True)
        sp.add_argument("-o", "--output", required=True)
        sp.add_argument("--threads", type=int, default=None, help=f"worker threads (overridden by {THREADS_ENV})")

    sp = sub.add_parser("simulate", help="simulate a run into an NTT1 file")
    common(sp, False)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("analyze", help="NTT1 file -> normalized coincidence histogram CSV")
    common(sp, True)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("fit", help="histogram CSV -> fit report JSON")
    common(sp, True)
    sp.add_argument("--curve", help="also write the fitted model curve as CSV")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("model", help="evaluate the model for the config's beam parameters")
    common(sp, False)
    sp.set_defaults(func=cmd_model)

    sp = sub.add_parser("selftest", help="run the built-in oracle suites")
    sp.add_argument("--quick", action="store_true", help="smaller grids and samples")
    sp.add_argument("--tol", type=float, default=1e-9, help="quadrature accuracy for the oracle grid")
    sp.add_argument("--threads", type=int, default=None, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        _say(f"error: {exc}")
        return EXIT_VALIDATION
    except (DecodeError, OSError) as exc:
        _say(f"error: {exc}")
        return EXIT_IO
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        _say(f"error: {exc}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
