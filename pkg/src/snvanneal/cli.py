"""Command-line entry point ``snvanneal``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical or
fit failure, 4 file read/write failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .exceptions import (ConfigurationError, FitFailure, InvalidInputError, RegistrationFailure, ReportIOError,
                         SnvAnnealError)
from .reports import dumps_csv, dumps_json, emit_report, utc_now

EXIT_OK, EXIT_INVALID, EXIT_FIT, EXIT_IO = 0, 2, 3, 4
log = logging.getLogger("snvanneal")


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------

def _stamp(args) -> Optional[str]:
    return None if args.no_timestamp else utc_now()


def _emit(args, results, default_name: str) -> None:
    """Write ``results`` to ``--out`` (file or directory) or print to stdout."""
    fmt = args.format
    if fmt == "csv" and isinstance(results, dict):
        results = [results]
    if args.out is None:
        text = dumps_json(results, _stamp(args)) if fmt == "json" else dumps_csv(results, _stamp(args))
        sys.stdout.write(text)
        return
    out = Path(args.out)
    if out.is_dir() or str(args.out).endswith(("/", "\\")):
        out = out / f"{default_name}.{fmt}"
    emit_report(results, out, fmt, _stamp(args))
    log.info("wrote %s", out)


def _flat(d: dict, prefix: str = "") -> dict:
    """Flatten nested dicts and short lists for CSV output."""
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flat(v, key + "."))
        elif isinstance(v, (list, tuple)):
            for i, x in enumerate(v):
                if isinstance(x, dict):
                    out.update(_flat(x, f"{key}.{i}."))
                else:
                    out[f"{key}.{i}"] = x
        else:
            out[key] = v
    return out


def _baseline(args, s):
    from .spectra import subtract_baseline
    if args.baseline == "none":
        return s
    if not args.quiet_band:
        raise InvalidInputError(f"--baseline {args.baseline} needs at least one --quiet-band LO HI")
    return subtract_baseline(s, args.baseline, [tuple(b) for b in args.quiet_band])


def _load_config(args):
    from .campaign import parse_config
    if not args.campaign and not args.config:
        raise ConfigurationError("a campaign file is required (positional or --config)", key="<root>")
    return parse_config(args.campaign or args.config).with_seed(args.seed)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_vibronic_synth(args):
    from .spectra import Spectrum, write_spectrum_csv
    from .vibronic import VibronicModel, synthesize_wavelength
    m = VibronicModel.from_wavelength(args.zpl, args.huang_rhys, zpl_width=args.zpl_width)
    grid = np.arange(args.grid[0], args.grid[1] + 0.5 * args.grid[2], args.grid[2])
    s = synthesize_wavelength(m, grid)
    y = s.intensity * args.counts
    if args.noise:
        y = np.random.default_rng(args.seed).poisson(np.clip(y, 0, None)).astype(float)
    out = Path(args.out or "vibronic.csv")
    if out.is_dir():
        out = out / "vibronic.csv"
    try:
        write_spectrum_csv(Spectrum(grid, y), out)
    except OSError as exc:
        raise ReportIOError(f"cannot write {out}: {exc.strerror or exc}", path=str(out)) from exc


def cmd_vibronic_fit(args):
    from .spectra import read_spectrum_csv
    from .vibronic import fit_huang_rhys
    s = read_spectrum_csv(args.spectrum)
    s = _baseline(args, s)
    fit = fit_huang_rhys(s, args.zpl_hint)
    _emit(args, _flat(fit.to_dict()) if args.format == "csv" else fit.to_dict(), "huang_rhys")


def cmd_hbt_simulate(args):
    from .hbt import rates_for_lifetime, simulate_three_level_stream, write_timetags
    k = rates_for_lifetime(args.tau1)
    t = simulate_three_level_stream(args.n, *k, n_emitters=args.emitters, seed=args.seed)
    out = Path(args.out or "timetags.bin")
    try:
        write_timetags(t, out)
    except OSError as exc:
        raise ReportIOError(f"cannot write {out}: {exc.strerror or exc}", path=str(out)) from exc


def cmd_hbt_synth(args):
    from .hbt import synthetic_histogram, write_histogram_json
    h = synthetic_histogram(args.alpha, args.tau1, args.tau2, args.counts_per_bin, args.bin_width, args.max_delay,
                            rng=np.random.default_rng(args.seed))
    out = Path(args.out or "histogram.json")
    try:
        write_histogram_json(h, out)
    except OSError as exc:
        raise ReportIOError(f"cannot write {out}: {exc.strerror or exc}", path=str(out)) from exc


def cmd_hbt_fit(args):
    from .hbt import (background_correct, correlate, fit_three_level, is_single_emitter, read_histogram_json,
                      read_timetags)
    path = Path(args.input)
    if path.suffix.lower() == ".json":
        h = read_histogram_json(path)
    else:
        h = correlate(read_timetags(path), args.bin_width, args.max_delay)
        if args.rho is not None:
            h = background_correct(h, args.rho)
    fit = fit_three_level(h)
    res = {**fit.to_dict(), "single_emitter": bool(is_single_emitter(fit))}
    _emit(args, _flat(res) if args.format == "csv" else res, "g2_fit")


def cmd_polar_fit(args):
    from .polarimetry import fit_malus, read_scan_csv
    fit = fit_malus(read_scan_csv(args.scan))
    _emit(args, _flat(fit.to_dict()) if args.format == "csv" else fit.to_dict(), "malus_fit")


def cmd_polar_synth(args):
    from .polarimetry import synthetic_scan, write_scan_csv
    scan = synthetic_scan(args.visibility, args.axis, args.total, noise=args.noise,
                          rng=np.random.default_rng(args.seed))
    out = Path(args.out or "scan.csv")
    try:
        write_scan_csv(scan, out)
    except OSError as exc:
        raise ReportIOError(f"cannot write {out}: {exc.strerror or exc}", path=str(out)) from exc


def cmd_localize(args):
    from .localization import detect_emitters, discrepancy_stats, read_map, register_grid
    m = read_map(args.map, scale=args.scale)
    fits = detect_emitters(m, args.threshold, args.half_window)
    if not fits:
        raise FitFailure(f"no emitters above {args.threshold} in {args.map}")
    centers = np.array([(f.x0, f.y0) for f in fits])
    reg = register_grid(centers, args.spacing)
    stats = discrepancy_stats(reg)
    if args.format == "csv":
        rows = [{"x_um": float(c[0]), "y_um": float(c[1]), "radial_um": float(r)}
                for c, r in zip(centers, reg.radial)]
        _emit(args, rows, "localization")
    else:
        _emit(args, {"emitters": [f.to_dict() for f in fits], "registration": reg.to_dict(),
                     "discrepancy": stats.to_dict()}, "localization")


def cmd_spectra_fit(args):
    from .spectra import fit_peak, read_spectrum_csv
    s = read_spectrum_csv(args.spectrum)
    s = _baseline(args, s)
    fit = fit_peak(s, args.center, args.model)
    _emit(args, _flat(fit.to_dict()) if args.format == "csv" else fit.to_dict(), "peak_fit")


def cmd_spectra_integrate(args):
    from .spectra import integrate_window, read_spectrum_csv, window_from_label
    s = read_spectrum_csv(args.spectrum)
    s = _baseline(args, s)
    rows = [{"window": w, "intensity": integrate_window(s, window_from_label(w))} for w in args.windows]
    _emit(args, rows, "windows")


def cmd_spectra_classify(args):
    from .feedback import background_reference, classify_site
    from .spectra import read_spectrum_csv, subtract_baseline
    s = read_spectrum_csv(args.spectrum)
    if args.baseline == "reference":
        s = subtract_baseline(s, "reference", reference=background_reference(grid=s.grid))
    else:
        s = _baseline(args, s)
    res = {"label": classify_site(s, k_sigma=args.k_sigma)}
    _emit(args, res, "classification")


def cmd_simulate_run(args):
    from .campaign import run_simulation, write_simulation
    cfg = _load_config(args)
    res = run_simulation(cfg)
    out = args.out or cfg.output_dir
    for p in write_simulation(res, cfg, out, args.format, _stamp(args)):
        log.info("wrote %s", p)


def cmd_simulate_dose_study(args):
    from .campaign import run_simulation
    cfg = _load_config(args)
    rows = run_simulation(cfg)["dose_study"]
    if args.out is None:
        sys.stdout.write(dumps_csv(rows, _stamp(args), ("dose", "window", "intensity")))
        return
    out = Path(args.out)
    if out.is_dir():
        out = out / "dose_study.csv"
    emit_report(rows, out, "csv", _stamp(args), columns=("dose", "window", "intensity"))


def cmd_feedback_run(args):
    from .campaign import run_feedback, write_feedback
    cfg = _load_config(args)
    res = run_feedback(cfg, args.stop)
    out = args.out or cfg.output_dir
    for p in write_feedback(res, cfg, out, args.format, _stamp(args)):
        log.info("wrote %s", p)


def cmd_feedback_detect(args):
    from .feedback import detect_changepoints
    from .traces import read_trace
    try:
        trace = read_trace(args.trace, args.bin_s)
    except (OSError, ValueError, IndexError) as exc:
        if isinstance(exc, SnvAnnealError):
            raise
        if isinstance(exc, OSError):
            raise ReportIOError(f"cannot read {args.trace}: {exc.strerror or exc}", path=args.trace) from exc
        raise InvalidInputError(f"{args.trace}: malformed trace ({exc})") from exc
    events = detect_changepoints(trace, args.sigma, args.min_dwell)
    rows = [e.to_dict() for e in events]
    _emit(args, rows if args.format == "csv" else {"trace": str(args.trace), "events": rows}, "changepoints")


def cmd_feedback_simulate_trace(args):
    from .kinetics import SiteState, State
    from .kinetics.emission import emit_spad_trace
    from .traces import write_trace
    steps = [(-np.inf, State.from_label(args.initial), args.zpl if State.from_label(args.initial).emitting else None)]
    for spec in args.step or []:
        t, label = spec.split(":")
        st = State.from_label(label)
        steps.append((float(t), st, args.zpl if st.emitting else None))
    site = SiteState(0, (0.0, 0.0), args.dose, args.n_sv, steps[0][1], steps[0][2], args.dose, (args.seed or 0, 0))
    tr = emit_spad_trace(steps, bin_width=args.bin_s, t_stop=args.duration, site=site, noise_seed=args.seed,
                         noiseless=args.noiseless)
    out = Path(args.out or "trace.csv")
    try:
        write_trace(tr, out)
    except OSError as exc:
        raise ReportIOError(f"cannot write {out}: {exc.strerror or exc}", path=str(out)) from exc


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

_GLOBAL_DEFAULTS = {"seed": None, "config": None, "out": None, "format": "json", "no_timestamp": False,
                    "verbose": False}


def _common(suppress: bool) -> argparse.ArgumentParser:
    """Global flags, accepted before or after the subcommand.

    Subcommand copies use SUPPRESS defaults so a flag given before the
    subcommand is not reset by the subparser.
    """
    d = (lambda k: argparse.SUPPRESS) if suppress else _GLOBAL_DEFAULTS.get
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=d("seed"), help="random seed (overrides the campaign seeds)")
    g.add_argument("--config", default=d("config"), help="campaign JSON file")
    g.add_argument("--out", default=d("out"), help="output file or directory (stdout when omitted)")
    g.add_argument("--format", choices=("json", "csv"), default=d("format"), help="report format")
    g.add_argument("--no-timestamp", action="store_true", default=d("no_timestamp"),
                   help="omit the generation timestamp line")
    g.add_argument("-v", "--verbose", action="store_true", default=d("verbose"))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="snvanneal", parents=[_common(suppress=False)],
                                     description="Spectroscopy analysis and laser-anneal simulation for "
                                                 "Sn-related colour centres in diamond.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def group(name, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        return p.add_subparsers(dest="action", required=True)

    def action(grp, name, fn, help_):
        p = grp.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=fn)
        return p

    vib = group("vibronic", "vibronic line shapes")
    p = action(vib, "synth", cmd_vibronic_synth, "synthesise a spectrum CSV")
    p.add_argument("--zpl", type=float, required=True, help="ZPL wavelength (nm)")
    p.add_argument("--huang-rhys", "-S", type=float, required=True)
    p.add_argument("--zpl-width", type=float, default=5.0, help="ZPL FWHM (meV)")
    p.add_argument("--grid", type=float, nargs=3, default=(560.0, 800.0, 0.1), metavar=("LO", "HI", "STEP"))
    p.add_argument("--counts", type=float, default=1e5, help="total counts scaling the unit-area density")
    p.add_argument("--noise", action="store_true", help="add Poisson noise")
    p = action(vib, "fit", cmd_vibronic_fit, "fit the Huang-Rhys factor of a spectrum CSV")
    p.add_argument("spectrum")
    p.add_argument("--zpl-hint", type=float, required=True, help="approximate ZPL wavelength (nm)")
    p.add_argument("--baseline", choices=("none", "constant", "linear"), default="none")
    p.add_argument("--quiet-band", type=float, nargs=2, action="append", metavar=("LO", "HI"))

    hbt = group("hbt", "second-order photon correlation")
    p = action(hbt, "simulate", cmd_hbt_simulate, "simulate a three-level emitter photon stream")
    p.add_argument("--n", type=int, default=1_000_000, help="detected photons")
    p.add_argument("--tau1", type=float, default=2.2, help="antibunching time (ns)")
    p.add_argument("--emitters", type=int, default=1)
    p = action(hbt, "synth", cmd_hbt_synth, "synthesise a g2 histogram JSON")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--tau1", type=float, default=1.4)
    p.add_argument("--tau2", type=float, default=9.7)
    p.add_argument("--counts-per-bin", type=float, default=500.0)
    p.add_argument("--bin-width", type=float, default=0.5)
    p.add_argument("--max-delay", type=float, default=100.0)
    p = action(hbt, "fit", cmd_hbt_fit, "correlate time tags (or read a histogram JSON) and fit g2")
    p.add_argument("input")
    p.add_argument("--bin-width", type=float, default=0.5, help="ns")
    p.add_argument("--max-delay", type=float, default=100.0, help="ns")
    p.add_argument("--rho", type=float, default=None, help="signal fraction for background correction")

    pol = group("polar", "polarisation (Malus) analysis")
    p = action(pol, "fit", cmd_polar_fit, "fit a polarisation scan CSV")
    p.add_argument("scan")
    p = action(pol, "synth", cmd_polar_synth, "synthesise a polarisation scan CSV")
    p.add_argument("--visibility", type=float, required=True)
    p.add_argument("--axis", type=float, default=0.0, help="deg")
    p.add_argument("--total", type=float, default=1000.0)
    p.add_argument("--noise", type=float, default=0.0, help="relative Gaussian noise")

    p = sub.add_parser("localize", help="detect emitters in a PL map and register them to a grid", parents=[common])
    p.set_defaults(func=cmd_localize)
    p.add_argument("map", help="PL map CSV (sidecar .json gives scale and origin)")
    p.add_argument("--spacing", type=float, default=0.78, help="grid pitch (µm)")
    p.add_argument("--threshold", type=float, required=True, help="detection threshold (counts above offset)")
    p.add_argument("--scale", type=float, default=None, help="µm per pixel when there is no sidecar")
    p.add_argument("--half-window", type=int, default=3)

    sim = group("simulate", "implantation and anneal campaigns")
    p = action(sim, "run", cmd_simulate_run, "run a campaign file and write logs and reports")
    p.add_argument("campaign", nargs="?")
    p = action(sim, "dose-study", cmd_simulate_dose_study, "window intensity versus dose (CSV)")
    p.add_argument("campaign", nargs="?")

    fb = group("feedback", "in-situ feedback control")
    p = action(fb, "run", cmd_feedback_run, "run the feedback protocol on every campaign array")
    p.add_argument("campaign", nargs="?")
    p.add_argument("--stop", choices=("on-activation", "on-deactivation", "max-cycles"), default=None)
    p = action(fb, "detect", cmd_feedback_detect, "find change points in a SPAD trace CSV")
    p.add_argument("trace")
    p.add_argument("--sigma", type=float, default=5.0, help="confirmation threshold (sigma)")
    p.add_argument("--min-dwell", type=int, default=25, help="bins a new level must persist")
    p.add_argument("--bin-s", type=float, default=None, help="bin width when the trace has no sidecar")
    p = action(fb, "simulate-trace", cmd_feedback_simulate_trace, "write a simulated SPAD trace CSV")
    p.add_argument("--initial", default="Dark", help="starting state label")
    p.add_argument("--step", action="append", metavar="T:STATE", help="transition, e.g. 40:SnV (repeatable)")
    p.add_argument("--zpl", type=float, default=620.0)
    p.add_argument("--dose", type=int, default=10)
    p.add_argument("--n-sv", type=int, default=4)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--bin-s", type=float, default=0.02)
    p.add_argument("--noiseless", action="store_true")

    spec = group("spectra", "spectrum fitting and window integration")
    p = action(spec, "fit", cmd_spectra_fit, "fit a single peak")
    p.add_argument("spectrum")
    p.add_argument("--center", type=float, required=True, help="seed centre (nm)")
    p.add_argument("--model", choices=("lorentzian", "gaussian"), default="lorentzian")
    p.add_argument("--baseline", choices=("none", "constant", "linear"), default="none")
    p.add_argument("--quiet-band", type=float, nargs=2, action="append", metavar=("LO", "HI"))
    p = action(spec, "integrate", cmd_spectra_integrate, "integrate named windows")
    p.add_argument("spectrum")
    p.add_argument("--windows", nargs="+", default=["TypeIISn", "SnV", "GR1"])
    p.add_argument("--baseline", choices=("none", "constant", "linear"), default="none")
    p.add_argument("--quiet-band", type=float, nargs=2, action="append", metavar=("LO", "HI"))
    p = action(spec, "classify", cmd_spectra_classify, "label a site spectrum TypeII / SnV / GR1-only")
    p.add_argument("spectrum")
    p.add_argument("--k-sigma", type=float, default=5.0)
    p.add_argument("--baseline", choices=("none", "constant", "linear", "reference"),
                   default="reference", help="reference = simulated blank-site background")
    p.add_argument("--quiet-band", type=float, nargs=2, action="append", metavar=("LO", "HI"))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, 0 for --help/--version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigurationError, InvalidInputError) as exc:
        key = getattr(exc, "key", None)
        print(f"error: {exc}" + (f" [{key}]" if key and key not in str(exc) else ""), file=sys.stderr)
        return EXIT_INVALID
    except (FitFailure, RegistrationFailure) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (ReportIOError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SnvAnnealError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
