"""Command-line interface.

Every command reads a spin file, writes plain-text results into
``--output-dir`` and finishes with ``manifest.json``, which records the
resolved configuration and is enough to repeat the run with ``rerun``.
Failures print one line ``error: <CODE>: <message>`` on stderr and exit with
2 (input), 3 (numerical) or 4 (fit did not converge).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .constants import (
    CONSTANTS_TABLE_VERSION,
    EVOLUTION_FIELD,
    FIELD_700MHZ,
    FIELD_CYCLING_HIGH,
)
from .dynamics import ProtocolError, canonical_schedule, thread_count
from .fitting import FitParameterSet, fit, synthesize_targets
from .hamiltonian import HamiltonianSpec, diagonalize
from .io import (
    SpinFileError,
    parse_spin_text,
    peak_table,
    read_spectrum1d,
    write_spectrum1d,
    write_spectrum2d,
    write_timeseries,
)
from .spectra import (
    Spectrum1D,
    highfield_spectrum,
    indirect_j_series,
    lorentzian_sum,
    match_peaks,
    pick_peaks,
    process_1d,
    zulf_stick_spectrum,
)
from .tocsy import TocsyConfig, tocsy2d

log = logging.getLogger("zulfchain")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_NONCONVERGENCE = 4

COMMANDS = ("hf-spectrum", "zulf-spectrum", "fieldcycle", "tocsy2d", "fit")


class CommandError(Exception):
    def __init__(self, code: int, tag: str, message: str):
        super().__init__(message)
        self.code = code
        self.tag = tag


@dataclass
class RunConfig:
    """Fully resolved settings of one command."""

    command: str
    input: str
    output_dir: str
    options: dict = field(default_factory=dict)
    seed: int = 0
    verbosity: int = 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--input", required=True, help="spin-system file")
    p.add_argument("--output-dir", required=True, help="directory for result files (created if missing)")
    p.add_argument("--seed", type=int, default=0, help="seed for pseudo-random noise (default 0)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_processing(p: argparse.ArgumentParser):
    p.add_argument("--window", choices=("exp", "gauss", "cos2", "none"), default="none")
    p.add_argument("--width", type=float, default=1.0, help="window broadening in Hz (exp, gauss)")
    p.add_argument("--zero-fill", type=int, default=4, help="zero-filling factor, a power of two")
    p.add_argument("--threshold", type=float, default=0.1, help="peak threshold as a fraction of the maximum")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zulfchain",
        description="Spin-dynamics simulations of field-cycling and high-field NMR of molecular spin chains.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--compare",
        nargs=2,
        metavar=("A", "B"),
        help="pick peaks in two 1D spectrum files and print frequency deltas",
    )
    parser.add_argument("--threshold", type=float, default=0.1, dest="compare_threshold",
                        help="peak threshold for --compare")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("hf-spectrum", help="high-field 1D spectra")
    _add_common(p)
    p.add_argument("--field", type=float, default=None, help=f"field in T (default: [fit] field or {FIELD_700MHZ:.6f})")
    p.add_argument("--observe", nargs="+", default=None, help="isotopes to observe (default: all)")
    p.add_argument("--linewidth", type=float, default=0.5, help="Lorentzian FWHM in Hz")
    p.add_argument("--truncation", choices=("full", "secular"), default="full")
    p.add_argument("--threshold", type=float, default=0.05)

    p = sub.add_parser("zulf-spectrum", help="zero-field stick spectrum")
    _add_common(p)
    p.add_argument("--field", type=float, default=0.0, help="field in T (default 0)")
    p.add_argument("--observe", nargs="+", default=None, help="sites detected (default: γ-weighted F_z)")
    p.add_argument("--linewidth", type=float, default=0.5, help="FWHM of the broadened spectrum in Hz")
    p.add_argument("--threshold", type=float, default=0.01)

    p = sub.add_parser("fieldcycle", help="indirectly detected J-spectra from a τ sweep")
    _add_common(p)
    _add_processing(p)
    p.add_argument("--field", type=float, default=None, help=f"evolution field in T (default {EVOLUTION_FIELD:g})")
    p.add_argument("--tau-max", type=float, default=None, help="largest τ in s (default 255 dwells)")
    p.add_argument("--dwell", type=float, default=0.5e-3, help="τ increment in s")
    p.add_argument("--observe", nargs="+", default=None, help="sites to detect (default: all)")

    p = sub.add_parser("tocsy2d", help="2D ZULF-TOCSY map")
    _add_common(p)
    p.add_argument("--field", type=float, default=FIELD_CYCLING_HIGH, help="high field in T")
    p.add_argument("--t-mix", type=float, default=0.05, help="mixing time in s")
    p.add_argument("--refocus-13c", action="store_true", help="π pulse on 13C in the middle of t1")
    p.add_argument("--observe", default="15N", help="detected (f2) isotope")
    p.add_argument("--evolve", default="1H", help="evolved (f1) isotope")
    p.add_argument("--td1", type=int, default=128, help="number of t1 increments")
    p.add_argument("--td2", type=int, default=1024, help="number of t2 points")
    p.add_argument("--dwell1", type=float, default=1e-3, help="t1 increment in s")
    p.add_argument("--dwell", type=float, default=2e-3, help="t2 dwell in s")
    p.add_argument("--zero-fill", type=int, default=4, help="zero-filling factor in both dimensions")

    p = sub.add_parser("fit", help="fit shifts and couplings to high-field spectra")
    _add_common(p)
    p.add_argument("--target", action="append", default=[], metavar="ISO=FILE",
                   help="target spectrum for an isotope; repeatable")
    p.add_argument("--field", type=float, default=None, help="override the [fit] field")
    p.add_argument("--observe", nargs="+", default=None, help="isotopes to synthesize when no targets are given")
    p.add_argument("--perturb", type=float, default=0.5,
                   help="synthetic mode: start every free J this many Hz further from zero")
    p.add_argument("--noise", type=float, default=0.0, help="synthetic mode: noise as a fraction of the maximum")
    p.add_argument("--max-iterations", type=int, default=100, help="iteration budget per LM run")
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    skip = {"command", "input", "output_dir", "seed", "verbose", "compare", "compare_threshold"}
    options = {k: v for k, v in vars(args).items() if k not in skip}
    return RunConfig(args.command, str(args.input), str(args.output_dir), options, args.seed, args.verbose)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _write_peaks(path: Path, spectrum: Spectrum1D, threshold: float):
    path.write_text(peak_table(pick_peaks(spectrum, threshold)))


def cmd_hf_spectrum(cfg: RunConfig, spin_file, out: Path) -> list[str]:
    o = cfg.options
    system = spin_file.system
    B = o["field"] if o["field"] is not None else spin_file.fit.get("field", FIELD_700MHZ)
    o["field"] = B
    spec = HamiltonianSpec(B, o["truncation"])
    isotopes = o["observe"] or list(dict.fromkeys(system.isotopes))
    o["observe"] = isotopes
    written = []
    for iso in isotopes:
        s = highfield_spectrum(system, spec, iso, o["linewidth"])
        name = f"hf_{iso}.txt"
        write_spectrum1d(out / name, s)
        _write_peaks(out / f"peaks_{iso}.txt", s, o["threshold"])
        written += [name, f"peaks_{iso}.txt"]
    return written


def cmd_zulf_spectrum(cfg: RunConfig, spin_file, out: Path) -> list[str]:
    o = cfg.options
    system = spin_file.system
    detection = None
    if o["observe"]:
        from .dynamics import site_observable

        members = [m for _, mem in system.select_sites(o["observe"]) for m in mem]
        detection = site_observable(system, members)
    eig = diagonalize(system, HamiltonianSpec(field=o["field"]))
    lines = zulf_stick_spectrum(system, detection=detection, threshold=1e-9, eig=eig)
    if not lines:
        raise CommandError(EXIT_INPUT, "INPUT", "the system has no zero-field transitions")
    freqs = np.array([ln.frequency for ln in lines])
    amps = np.array([ln.intensity for ln in lines])
    sticks = Spectrum1D(freqs, amps, {"kind": "zero-field sticks", "field_T": o["field"]})
    write_spectrum1d(out / "zulf_sticks.txt", sticks)
    grid = np.arange(0.0, max(float(freqs.max(initial=0.0)) * 1.1, 10.0), o["linewidth"] / 10)
    broad = Spectrum1D(grid, lorentzian_sum(grid, freqs, amps, o["linewidth"]),
                       {"kind": "zero-field", "linewidth_Hz": o["linewidth"], "field_T": o["field"]})
    write_spectrum1d(out / "zulf_spectrum.txt", broad)
    _write_peaks(out / "peaks_zulf.txt", broad, o["threshold"])
    return ["zulf_sticks.txt", "zulf_spectrum.txt", "peaks_zulf.txt"]


def cmd_fieldcycle(cfg: RunConfig, spin_file, out: Path) -> list[str]:
    o = cfg.options
    system = spin_file.system
    schedule = spin_file.schedule or canonical_schedule()
    if o["field"] is not None:
        from dataclasses import replace

        k = schedule.variable_index
        segs = list(schedule.segments)
        segs[k] = replace(segs[k], field=o["field"])
        schedule = replace(schedule, segments=tuple(segs))
    points = 256 if o["tau_max"] is None else int(round(o["tau_max"] / o["dwell"])) + 1
    o["tau_max"] = (points - 1) * o["dwell"]
    taus = o["dwell"] * np.arange(points)
    series = indirect_j_series(system, schedule, taus, observe=o["observe"])
    written = []
    for name, ts in series.items():
        write_timeseries(out / f"series_{name}.txt", ts)
        spec = process_1d(ts, o["window"], o["width"], o["zero_fill"])
        write_spectrum1d(out / f"jspec_{name}.txt", spec)
        _write_peaks(out / f"peaks_{name}.txt", spec, o["threshold"])
        written += [f"series_{name}.txt", f"jspec_{name}.txt", f"peaks_{name}.txt"]
    return written


def cmd_tocsy2d(cfg: RunConfig, spin_file, out: Path) -> list[str]:
    o = cfg.options
    zf = o["zero_fill"]
    config = TocsyConfig(high_field=o["field"], f1_size=o["td1"] * zf, f2_size=o["td2"] * zf)
    spec = tocsy2d(
        spin_file.system,
        o["dwell1"] * np.arange(o["td1"]),
        o["dwell"] * np.arange(o["td2"]),
        o["t_mix"],
        observe_f2=o["observe"],
        evolve_f1=o["evolve"],
        refocus_13C=o["refocus_13c"],
        config=config,
    )
    write_spectrum2d(out / "tocsy2d.txt", spec)
    return ["tocsy2d.txt"]


def cmd_fit(cfg: RunConfig, spin_file, out: Path) -> list[str]:
    o = cfg.options
    system = spin_file.system
    config = dict(spin_file.fit)
    if o["field"] is not None:
        config["field"] = o["field"]
    if "field" not in config:
        raise CommandError(EXIT_INPUT, "INPUT", "the input file has no [fit] section with a field")
    truth = FitParameterSet.from_config(system, config)
    if o["target"]:
        targets = []
        for item in o["target"]:
            iso, sep, path = item.partition("=")
            if not sep:
                raise CommandError(EXIT_INPUT, "INPUT", f"--target expects ISO=FILE, got {item!r}")
            targets.append((read_spectrum1d(path), iso))
        start = truth
    else:
        observe = o["observe"] or config.get("observe") or list(dict.fromkeys(system.isotopes))
        o["observe"] = list(observe)
        targets = synthesize_targets(truth, observe, noise=o["noise"], seed=cfg.seed)
        x0 = truth.values + o["perturb"] * np.sign(truth.values) * np.array(
            [p.kind == "J" for p in truth.parameters]
        )
        start = truth.with_values(np.clip(x0, truth.lower, truth.upper))
    result = fit(start, targets, max_iterations=o["max_iterations"])
    (out / "fit_report.txt").write_text(result.report())
    (out / "fit_result.txt").write_text(result.keyvalue())
    if not result.converged:
        raise CommandError(EXIT_NONCONVERGENCE, "NONCONVERGENCE",
                           f"fit stopped after {result.iterations} iterations without converging")
    return ["fit_report.txt", "fit_result.txt"]


HANDLERS = {
    "hf-spectrum": cmd_hf_spectrum,
    "zulf-spectrum": cmd_zulf_spectrum,
    "fieldcycle": cmd_fieldcycle,
    "tocsy2d": cmd_tocsy2d,
    "fit": cmd_fit,
}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def execute(cfg: RunConfig, input_text: str | None = None) -> int:
    """Run one command; raises CommandError on failure."""
    out = Path(cfg.output_dir)
    if input_text is None:
        try:
            input_text = Path(cfg.input).read_text()
        except OSError as exc:
            raise CommandError(EXIT_INPUT, "INPUT", f"{cfg.input}: cannot read file ({exc.strerror})") from None
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_INPUT, "INPUT", f"{out}: cannot create output directory ({exc.strerror})") from None
    started = time.perf_counter()
    try:
        spin_file = parse_spin_text(input_text, cfg.input)
        written = HANDLERS[cfg.command](cfg, spin_file, out)
    except CommandError:
        raise
    except (SpinFileError, ValueError, KeyError, OSError) as exc:
        raise CommandError(EXIT_INPUT, "INPUT", str(exc)) from exc
    except (np.linalg.LinAlgError, ProtocolError, FloatingPointError, ArithmeticError, RuntimeError) as exc:
        raise CommandError(EXIT_NUMERICAL, "NUMERICAL", str(exc)) from exc
    elapsed = time.perf_counter() - started
    manifest = {
        "zulfchain_version": __version__,
        "constants_table_version": CONSTANTS_TABLE_VERSION,
        "config": asdict(cfg),
        "input_sha256": hashlib.sha256(input_text.encode()).hexdigest(),
        "input_text": input_text,
        "outputs": {name: _sha256(out / name) for name in written},
        "threads": thread_count(),
        "timings": {"wall_clock_s": elapsed},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def rerun(manifest_path: str | Path, output_dir: str | Path) -> int:
    """Repeat the run recorded in a manifest, writing into ``output_dir``."""
    data = json.loads(Path(manifest_path).read_text())
    cfg = RunConfig(**data["config"])
    cfg.output_dir = str(output_dir)
    return execute(cfg, data["input_text"])


def compare_spectra(path_a: str | Path, path_b: str | Path, threshold: float = 0.1) -> str:
    """Peak-matched frequency deltas (B − A) as a text table."""
    a, b = read_spectrum1d(path_a), read_spectrum1d(path_b)
    pa, pb = pick_peaks(a.normalized(), threshold), pick_peaks(b.normalized(), threshold)
    lines = ["# freq_A_Hz freq_B_Hz delta_Hz"]
    for fa, fb, d in match_peaks(pa, pb):
        lines.append(f"{fa:.6f} {fb:.6f} {d:+.6f}")
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["rerun"]:
        p = argparse.ArgumentParser(prog="zulfchain rerun", description="repeat a run from its manifest")
        p.add_argument("manifest")
        p.add_argument("--output-dir", required=True)
        args = p.parse_args(argv[1:])
        return _guarded(lambda: rerun(args.manifest, args.output_dir))
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.compare:
        return _guarded(lambda: _print(compare_spectra(*args.compare, threshold=args.compare_threshold)))
    if not args.command:
        parser.print_usage(sys.stderr)
        print("error: INPUT: no command given", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    cfg = _resolve(args)
    return _guarded(lambda: execute(cfg))


def _print(text: str) -> int:
    sys.stdout.write(text)
    return EXIT_OK


def _guarded(fn) -> int:
    try:
        return fn()
    except CommandError as exc:
        print(f"error: {exc.tag}: {' '.join(str(exc).split())}", file=sys.stderr)
        return exc.code
    except (SpinFileError, ValueError, OSError) as exc:
        print(f"error: INPUT: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
