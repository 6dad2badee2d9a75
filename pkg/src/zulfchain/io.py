"""Spin-system input files and plain-text result formats.

Spin file format
----------------
Line-oriented text, ``#`` starts a comment.  Sections are introduced by a
``[name]`` line:

``[system]``
    ``name = <text>``
``[isotopes]``
    ``<symbol> <gamma MHz/T>``; adds to or overrides the built-in table.
``[spins]`` (required)
    ``<label> <isotope> <shift ppm> [count]``.  ``count`` > 1 declares a
    site of magnetically equivalent nuclei, expanded to members
    ``<label>a``, ``<label>b``, ...
``[couplings]``
    ``<label> <label> <J Hz>``.
``[jmatrix]``
    A header row of column labels, then one row per spin:
    ``<label> <J> <J> ...``; ``-`` leaves an entry blank.  Normally only the
    upper triangle is filled; the matrix is completed symmetrically.
``[groups]``
    ``<name> = <label> <label> ...`` groups individually declared spins.
``[protocol]``
    ``polarize <B>``, ``ramp <B_from> <B_to>``, ``switch <B>``,
    ``evolve <B> <seconds|tau>``, ``detect [site ...]``.
``[fit]``
    ``key = value`` settings: ``field``, ``truncation``, ``linewidth``,
    ``observe``, ``free_j`` (``all`` or ``A-B`` pairs), ``free_shift``,
    ``j_bounds = <lo> <hi>`` (Hz, applied to every free J).

Spins are listed in file order; spin 0 is the most significant bit of the
product basis.  Couplings that are never mentioned are exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .constants import GYROMAGNETIC_RATIOS
from .dynamics import (
    AdiabaticRamp,
    Detect,
    FreeEvolution,
    ProtocolSchedule,
    SuddenSwitch,
)
from .spectra import Spectrum1D, Spectrum2D, TimeSeries
from .spins import EquivalenceGroup, Isotope, Spin, SpinSystem, _member_labels, expand_equivalence

__all__ = [
    "SpinFileError",
    "SpinFile",
    "read_spin_file",
    "parse_spin_file",
    "parse_spin_text",
    "format_spin_file",
    "write_spectrum1d",
    "read_spectrum1d",
    "write_timeseries",
    "write_spectrum2d",
    "read_spectrum2d",
    "data_path",
]

SECTIONS = ("system", "isotopes", "spins", "couplings", "jmatrix", "groups", "protocol", "fit")


class SpinFileError(ValueError):
    """Malformed input; the message starts with ``<source>:<line>:``."""


def data_path(name: str = "butyronitrile.spin") -> Path:
    """Path of a data file shipped with the package."""
    return Path(__file__).parent / "data" / name


@dataclass
class SpinFile:
    """Everything read from one input file."""

    compact: SpinSystem
    system: SpinSystem
    schedule: ProtocolSchedule | None = None
    fit: dict = field(default_factory=dict)
    isotopes: dict = field(default_factory=dict)


def _num(tok: str, where: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise SpinFileError(f"{where}: expected a number, got {tok!r}") from None
    if not math.isfinite(v):
        raise SpinFileError(f"{where}: value must be finite, got {tok!r}")
    return v


def parse_spin_text(text: str, source: str = "<string>") -> SpinFile:
    sections: dict[str, list[tuple[int, list[str], str]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in SECTIONS:
                raise SpinFileError(f"{source}:{lineno}: unknown section [{current}]")
            if current in sections:
                raise SpinFileError(f"{source}:{lineno}: duplicate section [{current}]")
            sections[current] = []
            continue
        if current is None:
            raise SpinFileError(f"{source}:{lineno}: content before the first section header")
        sections[current].append((lineno, line.split(), line))

    def at(n):
        return f"{source}:{n}"

    name = ""
    for n, toks, line in sections.get("system", []):
        key, _, val = line.partition("=")
        if key.strip() == "name":
            name = val.strip()
        else:
            raise SpinFileError(f"{at(n)}: unknown [system] key {key.strip()!r}")

    table = dict(GYROMAGNETIC_RATIOS)
    for n, toks, _ in sections.get("isotopes", []):
        if len(toks) != 2:
            raise SpinFileError(f"{at(n)}: expected '<symbol> <gamma MHz/T>'")
        gamma = _num(toks[1], at(n))
        if gamma == 0:
            raise SpinFileError(f"{at(n)}: gyromagnetic ratio must be nonzero")
        table[toks[0]] = gamma

    if "spins" not in sections:
        raise SpinFileError(f"{source}: missing required section [spins]")
    spins: list[Spin] = []
    spin_line: dict[str, int] = {}
    for n, toks, _ in sections["spins"]:
        if len(toks) not in (3, 4):
            raise SpinFileError(f"{at(n)}: expected '<label> <isotope> <shift ppm> [count]'")
        label, sym = toks[0], toks[1]
        if label in spin_line:
            raise SpinFileError(f"{at(n)}: spin {label!r} already declared on line {spin_line[label]}")
        if sym not in table:
            raise SpinFileError(f"{at(n)}: unknown isotope symbol {sym!r}")
        shift = _num(toks[2], at(n))
        count = 1
        if len(toks) == 4:
            try:
                count = int(toks[3])
            except ValueError:
                raise SpinFileError(f"{at(n)}: group size must be an integer, got {toks[3]!r}") from None
            if count < 1:
                raise SpinFileError(f"{at(n)}: group size must be >= 1, got {count}")
        spins.append(Spin(label, Isotope(sym, table[sym]), shift, count))
        spin_line[label] = n
    if not spins:
        raise SpinFileError(f"{source}: section [spins] is empty")
    labels = [s.label for s in spins]
    index = {lab: i for i, lab in enumerate(labels)}

    J = np.zeros((len(spins), len(spins)))
    origin: dict[tuple[int, int], int] = {}

    def put(a: str, b: str, value: float, n: int):
        for lab in (a, b):
            if lab not in index:
                raise SpinFileError(f"{at(n)}: unknown spin {lab!r} in coupling")
        i, j = index[a], index[b]
        if i == j:
            raise SpinFileError(f"{at(n)}: self-coupling of {a!r} is not allowed")
        key = (min(i, j), max(i, j))
        if key in origin and J[i, j] != value:
            raise SpinFileError(
                f"{at(n)}: J({a},{b}) = {value:g} conflicts with J = {J[i, j]:g} given on line {origin[key]}"
            )
        origin.setdefault(key, n)
        J[i, j] = J[j, i] = value

    for n, toks, _ in sections.get("couplings", []):
        if len(toks) != 3:
            raise SpinFileError(f"{at(n)}: expected '<label> <label> <J Hz>'")
        put(toks[0], toks[1], _num(toks[2], at(n)), n)

    rows = sections.get("jmatrix", [])
    if rows:
        header_line, columns, _ = rows[0]
        for c in columns:
            if c not in index:
                raise SpinFileError(f"{at(header_line)}: unknown spin {c!r} in matrix header")
        for n, toks, _ in rows[1:]:
            if len(toks) - 1 > len(columns) or len(toks) < 2:
                raise SpinFileError(f"{at(n)}: row has {len(toks) - 1} entries for {len(columns)} columns")
            row = toks[0]
            for col, tok in zip(columns, toks[1:]):
                if tok in ("-", "."):
                    continue
                if col == row:
                    raise SpinFileError(f"{at(n)}: diagonal entry for {row!r} must be '-'")
                put(row, col, _num(tok, at(n)), n)

    groups: list[EquivalenceGroup] = []
    for n, toks, line in sections.get("groups", []):
        gname, eq, rest = line.partition("=")
        members = rest.split()
        if not eq or not gname.strip() or not members:
            raise SpinFileError(f"{at(n)}: expected '<name> = <label> <label> ...'")
        for m in members:
            if m not in index:
                raise SpinFileError(f"{at(n)}: unknown spin {m!r} in group")
        groups.append(EquivalenceGroup(gname.strip(), tuple(sorted(index[m] for m in members))))

    try:
        compact = SpinSystem(tuple(spins), J, tuple(groups), name)
        system = expand_equivalence(compact)
    except ValueError as exc:
        raise SpinFileError(f"{source}: {exc}") from None

    schedule = _parse_protocol(sections.get("protocol", []), at) if "protocol" in sections else None
    fit = _parse_fit(sections.get("fit", []), at)
    overrides = {k: v for k, v in table.items() if GYROMAGNETIC_RATIOS.get(k) != v}
    return SpinFile(compact, system, schedule, fit, overrides)


def _parse_protocol(lines, at) -> ProtocolSchedule:
    segments = []
    polarize = None
    for n, toks, _ in lines:
        op, args = toks[0].lower(), toks[1:]
        try:
            if op == "polarize" and len(args) == 1:
                polarize = _num(args[0], at(n))
            elif op == "ramp" and len(args) == 2:
                segments.append(AdiabaticRamp(_num(args[0], at(n)), _num(args[1], at(n))))
            elif op == "switch" and len(args) == 1:
                segments.append(SuddenSwitch(_num(args[0], at(n))))
            elif op == "evolve" and len(args) == 2:
                dur = None if args[1].lower() == "tau" else _num(args[1], at(n))
                segments.append(FreeEvolution(_num(args[0], at(n)), dur))
            elif op == "detect":
                segments.append(Detect(tuple(args)))
            else:
                raise SpinFileError(f"{at(n)}: cannot parse protocol step {' '.join(toks)!r}")
        except ValueError as exc:
            if isinstance(exc, SpinFileError):
                raise
            raise SpinFileError(f"{at(n)}: {exc}") from None
    if polarize is None:
        raise SpinFileError(f"{at(lines[0][0] if lines else 0)}: protocol needs a 'polarize <field>' step")
    try:
        return ProtocolSchedule(tuple(segments), polarize)
    except ValueError as exc:
        raise SpinFileError(f"{at(lines[-1][0])}: {exc}") from None


def _parse_fit(lines, at) -> dict:
    out = {}
    for n, _, line in lines:
        key, eq, val = line.partition("=")
        if not eq:
            raise SpinFileError(f"{at(n)}: expected 'key = value' in [fit]")
        key, val = key.strip(), val.strip()
        if key in ("field", "linewidth"):
            out[key] = _num(val, at(n))
        elif key == "j_bounds":
            parts = val.split()
            if len(parts) != 2:
                raise SpinFileError(f"{at(n)}: j_bounds needs two numbers")
            out[key] = (_num(parts[0], at(n)), _num(parts[1], at(n)))
        elif key in ("truncation",):
            out[key] = val
        elif key in ("observe", "free_shift", "free_j"):
            out[key] = val.split()
        else:
            raise SpinFileError(f"{at(n)}: unknown [fit] key {key!r}")
    return out


def read_spin_file(path: str | Path) -> SpinFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpinFileError(f"{path}: cannot read file ({exc.strerror})") from None
    return parse_spin_text(text, str(path))


def parse_spin_file(path: str | Path) -> SpinSystem:
    """The fully expanded spin system declared in ``path``."""
    return read_spin_file(path).system


def _collapsible(system: SpinSystem, g: EquivalenceGroup) -> bool:
    members = list(g.members)
    if members != list(range(members[0], members[0] + len(members))):
        return False
    if [system.labels[m] for m in members] != _member_labels(g.name, len(members)):
        return False
    J = system.couplings
    if np.any(J[np.ix_(members, members)] != 0):
        return False
    return all(_same_outside(J, members, m) for m in members)


def _same_outside(J, members, m) -> bool:
    outside = [k for k in range(J.shape[0]) if k not in members]
    return np.array_equal(J[members[0], outside], J[m, outside])


def format_spin_file(system: SpinSystem) -> str:
    """Serialize a spin system; collapsible equivalence groups become counted sites."""
    collapse = {g.members[0]: g for g in system.groups if _collapsible(system, g)}
    skip = {m for g in collapse.values() for m in g.members}
    rep = []  # (label, spin index representing the site, count)
    for i, s in enumerate(system.spins):
        if i in collapse:
            g = collapse[i]
            rep.append((g.name, i, len(g.members)))
        elif i not in skip:
            rep.append((s.label, i, 1))
    lines = ["[system]", f"name = {system.name}" if system.name else "name =", "", "[isotopes]"]
    for sym in dict.fromkeys(s.isotope.symbol for s in system.spins):
        gamma = next(s.isotope.gamma for s in system.spins if s.isotope.symbol == sym)
        lines.append(f"{sym} {float(gamma)!r}")
    lines += ["", "[spins]"]
    for label, i, count in rep:
        s = system.spins[i]
        lines.append(f"{label} {s.isotope.symbol} {float(s.shift)!r}" + (f" {count}" if count > 1 else ""))
    lines += ["", "[couplings]"]
    for a in range(len(rep)):
        for b in range(a + 1, len(rep)):
            val = system.couplings[rep[a][1], rep[b][1]]
            if val != 0:
                lines.append(f"{rep[a][0]} {rep[b][0]} {float(val)!r}")
    plain = [g for g in system.groups if g.members[0] not in collapse]
    if plain:
        lines += ["", "[groups]"]
        for g in plain:
            lines.append(f"{g.name} = " + " ".join(system.labels[m] for m in g.members))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# result files
# ---------------------------------------------------------------------------


def _header(meta: dict) -> list[str]:
    out = []
    for k in sorted(meta):
        v = meta[k]
        if isinstance(v, np.ndarray):
            continue
        if isinstance(v, float):
            v = repr(v)
        out.append(f"# {k}: {v}")
    return out


def write_spectrum1d(path: str | Path, spectrum: Spectrum1D) -> None:
    lines = ["# zulfchain 1D spectrum"] + _header(spectrum.metadata)
    cplx = np.iscomplexobj(spectrum.amplitudes)
    lines.append("# columns: frequency_Hz " + ("real imag" if cplx else "amplitude"))
    for f, a in zip(spectrum.frequencies, spectrum.amplitudes):
        lines.append(f"{f:.9f} {a.real:.12e} {a.imag:.12e}" if cplx else f"{f:.9f} {a:.12e}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_spectrum1d(path: str | Path) -> Spectrum1D:
    meta = {}
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.startswith("#"):
            key, sep, val = line[1:].partition(":")
            if sep:
                meta[key.strip()] = val.strip()
            continue
        if line.strip():
            try:
                rows.append([float(t) for t in line.split()])
            except ValueError:
                raise SpinFileError(f"{path}:{lineno}: malformed data row") from None
    if not rows:
        raise SpinFileError(f"{path}: no data rows")
    data = np.array(rows)
    amps = data[:, 1] + 1j * data[:, 2] if data.shape[1] == 3 else data[:, 1]
    return Spectrum1D(data[:, 0], amps, meta)


def write_timeseries(path: str | Path, series: TimeSeries) -> None:
    lines = ["# zulfchain time series", f"# label: {series.label}", f"# dwell_s: {series.dwell!r}"]
    lines += _header(series.metadata)
    lines.append("# columns: tau_s value")
    for t, v in zip(series.times, np.real(series.samples)):
        lines.append(f"{t:.9f} {v:.12e}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_spectrum2d(path: str | Path, spectrum: Spectrum2D) -> None:
    """Headered matrix: the first data row holds the f2 axis, every later row
    starts with its f1 frequency."""
    lines = [
        "# zulfchain 2D spectrum",
        f"# f1: {spectrum.f1_label} ({len(spectrum.f1)} points)",
        f"# f2: {spectrum.f2_label} ({len(spectrum.f2)} points)",
        f"# mode: {spectrum.mode}",
    ]
    lines += _header(spectrum.metadata)
    lines.append("f1_Hz\\f2_Hz " + " ".join(f"{f:.6f}" for f in spectrum.f2))
    for f1, row in zip(spectrum.f1, np.real(spectrum.matrix)):
        lines.append(f"{f1:.6f} " + " ".join(f"{v:.8e}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_spectrum2d(path: str | Path) -> Spectrum2D:
    body = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    f2 = np.array([float(t) for t in body[0].split()[1:]])
    rows = np.array([[float(t) for t in ln.split()] for ln in body[1:]])
    return Spectrum2D(rows[:, 1:], rows[:, 0], f2)


def peak_table(peaks: Iterable) -> str:
    lines = ["# frequency_Hz amplitude fwhm_Hz"]
    for p in peaks:
        lines.append(f"{p.frequency:.6f} {p.amplitude:.8e} {p.width:.6f}")
    return "\n".join(lines) + "\n"
