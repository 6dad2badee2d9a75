"""High-field line spectra, indirect J-spectra, zero-field stick spectra and peak picking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .constants import AMBIENT_TEMPERATURE, BOLTZMANN, PLANCK
from .dynamics import (
    EigenCache,
    ProtocolSchedule,
    canonical_schedule,
    measure_magnetization,
    run_protocol,
    tau_sweep,
)
from .lines import merge_lines
from .hamiltonian import EigenSystem, HamiltonianSpec, diagonalize, rotating_frame_allowed
from .spins import BlockOperator, SpinSystem, magnetization_sectors, spin_projections

__all__ = [
    "TimeSeries",
    "Spectrum1D",
    "Spectrum2D",
    "Peak",
    "Line",
    "highfield_eigensystem",
    "highfield_lines",
    "highfield_spectrum",
    "lorentzian_sum",
    "indirect_j_series",
    "process_1d",
    "apodization",
    "zulf_stick_spectrum",
    "pick_peaks",
    "DEFAULT_DWELL",
    "DEFAULT_POINTS",
]

DEFAULT_DWELL = 0.5e-3
DEFAULT_POINTS = 256
DEFAULT_LINEWIDTH = 0.5


@dataclass
class TimeSeries:
    samples: np.ndarray
    dwell: float
    start: float = 0.0
    label: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ValueError("time series must be one-dimensional")
        if not self.dwell > 0:
            raise ValueError("dwell must be positive")

    @property
    def times(self) -> np.ndarray:
        return self.start + self.dwell * np.arange(len(self.samples))

    def __len__(self):
        return len(self.samples)


@dataclass
class Spectrum1D:
    frequencies: np.ndarray
    amplitudes: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.amplitudes = np.asarray(self.amplitudes)
        if self.frequencies.shape != self.amplitudes.shape or self.frequencies.ndim != 1:
            raise ValueError("frequency axis and amplitudes must be 1-D arrays of equal length")
        if np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("frequency axis must be strictly increasing")

    def __len__(self):
        return len(self.frequencies)

    def normalized(self) -> "Spectrum1D":
        peak = float(np.max(np.abs(self.amplitudes), initial=0.0))
        scale = 1.0 / peak if peak > 0 else 1.0
        return Spectrum1D(self.frequencies, self.amplitudes * scale, dict(self.metadata))


@dataclass
class Spectrum2D:
    """Amplitudes indexed ``[f1, f2]``."""

    matrix: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    f1_label: str = ""
    f2_label: str = ""
    mode: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        self.f1 = np.asarray(self.f1, dtype=float)
        self.f2 = np.asarray(self.f2, dtype=float)
        if self.matrix.shape != (len(self.f1), len(self.f2)):
            raise ValueError(f"matrix shape {self.matrix.shape} does not match axes ({len(self.f1)}, {len(self.f2)})")


@dataclass(frozen=True)
class Peak:
    frequency: float
    amplitude: float
    width: float


@dataclass(frozen=True)
class Line:
    frequency: float
    intensity: float


# ---------------------------------------------------------------------------
# high-field spectra
# ---------------------------------------------------------------------------


def _lowering(system: SpinSystem, members: Sequence[int]) -> sp.csr_matrix:
    """Σ_a I_a^- over ``members`` as a sparse matrix (bit 0 -> 1 on each spin)."""
    n = system.n_spins
    states = np.arange(system.dim)
    m = spin_projections(n)
    rows, cols = [], []
    for a in members:
        up = states[m[a] > 0]
        cols.append(up)
        rows.append(up | (1 << (n - 1 - a)))
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(system.dim, system.dim))


def highfield_eigensystem(system: SpinSystem, spec: HamiltonianSpec) -> EigenSystem:
    """Eigen-system for line calculations, in the rotating frame when possible.

    Rotating-frame energies keep sub-μHz precision at high field, which the
    finite-difference derivatives of the fitting code depend on.
    """
    frame = "rotating" if rotating_frame_allowed(system, spec) else "lab"
    return diagonalize(system, spec, frame=frame)


def highfield_lines(
    system: SpinSystem,
    spec: HamiltonianSpec,
    observe: str,
    temperature: float = AMBIENT_TEMPERATURE,
    eig: EigenSystem | None = None,
    rel_threshold: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray]:
    """Transition offsets (Hz, relative to the bare Larmor frequency) and intensities.

    Intensities are ``|⟨j|I^-|k⟩|²`` times the thermal population difference of
    the two eigenstates; lines are reported so that higher shift means higher
    offset for both signs of γ.
    """
    if spec.field <= 0:
        raise ValueError("high-field spectrum requires field > 0")
    members = [i for i, s in enumerate(system.spins) if s.isotope.symbol == observe]
    if not members:
        raise ValueError(f"observed isotope {observe} is not present in the system")
    gamma = system.spins[members[0]].isotope.gamma
    eig = eig or highfield_eigensystem(system, spec)
    E = eig.eigenvalues
    Phi = eig.vector_matrix()
    L = (Phi.conj().T @ (_lowering(system, members) @ Phi)).tocoo()
    j, k, amp = L.row, L.col, L.data
    if eig.frame == "rotating":
        # lowering one observed spin adds exactly γB of bare Zeeman energy
        offset = np.sign(gamma) * (E[j] - E[k])
        gap = offset * np.sign(gamma) + gamma * 1e6 * spec.field
    else:
        offset = np.sign(gamma) * (E[j] - E[k]) - abs(gamma) * 1e6 * spec.field
        gap = E[j] - E[k]
    beta = PLANCK / (BOLTZMANN * temperature)
    intensity = np.abs(amp) ** 2 * beta * gap / system.dim * np.sign(gamma)
    keep = np.abs(intensity) > rel_threshold * np.max(np.abs(intensity), initial=0.0)
    return merge_lines(offset[keep], intensity[keep], 1e-6)


def _auto_grid(lines: np.ndarray, linewidth: float, margin: float = 20.0, step: float = 0.1) -> np.ndarray:
    """Union of windows of ±margin·linewidth around each line, sampled every step·linewidth."""
    if lines.size == 0:
        return np.arange(-margin * linewidth, margin * linewidth, step * linewidth)
    lo, hi = np.sort(lines - margin * linewidth), np.sort(lines + margin * linewidth)
    h = step * linewidth
    pieces, start, end = [], lo[0], hi[0]
    for a, b in zip(lo[1:], hi[1:]):
        if a > end:
            pieces.append((start, end))
            start = a
        end = max(end, b)
    pieces.append((start, end))
    # snap to a global lattice so neighbouring windows never produce duplicates
    grid = [np.arange(np.floor(a / h), np.ceil(b / h) + 1) * h for a, b in pieces]
    return np.unique(np.concatenate(grid))


def lorentzian_sum(
    grid: np.ndarray, centres: np.ndarray, heights: np.ndarray, linewidth: float, cutoff: float = 400.0
) -> np.ndarray:
    """Σ h·(w/2)²/((ν-ν₀)² + (w/2)²), each line evaluated within ±cutoff·linewidth."""
    grid = np.asarray(grid, dtype=float)
    out = np.zeros(grid.shape)
    if centres.size == 0:
        return out
    order = np.argsort(centres)
    c, h = centres[order], heights[order]
    hw2 = (0.5 * linewidth) ** 2
    reach = cutoff * linewidth
    chunk = 256
    for s in range(0, len(grid), chunk):
        g = grid[s:s + chunk]
        a = np.searchsorted(c, g[0] - reach)
        b = np.searchsorted(c, g[-1] + reach, side="right")
        if a == b:
            continue
        d = np.subtract.outer(g, c[a:b])
        np.multiply(d, d, out=d)
        d += hw2
        np.reciprocal(d, out=d)
        out[s:s + chunk] = hw2 * (d @ h[a:b])
    return out


def highfield_spectrum(
    system: SpinSystem,
    spec: HamiltonianSpec,
    observe: str,
    linewidth: float = DEFAULT_LINEWIDTH,
    frequencies: np.ndarray | None = None,
    temperature: float = AMBIENT_TEMPERATURE,
    eig: EigenSystem | None = None,
) -> Spectrum1D:
    """Lorentzian high-field spectrum of the ``observe`` isotope (offsets in Hz).

    ``frequencies`` fixes the evaluation grid; by default it covers every
    line by ±20 linewidths.  ``metadata['ppm']`` holds the same axis in ppm.
    """
    if not linewidth > 0:
        raise ValueError("linewidth must be positive")
    offsets, intens = highfield_lines(system, spec, observe, temperature, eig)
    grid = _auto_grid(offsets, linewidth) if frequencies is None else np.asarray(frequencies, dtype=float)
    amps = lorentzian_sum(grid, offsets, intens, linewidth)
    gamma = next(s.isotope.gamma for s in system.spins if s.isotope.symbol == observe)
    larmor = abs(gamma) * 1e6 * spec.field
    meta = {
        "kind": "high-field",
        "nucleus": observe,
        "field_T": spec.field,
        "truncation": spec.truncation,
        "linewidth_Hz": linewidth,
        "larmor_Hz": larmor,
        "ppm": grid / larmor * 1e6,
        "n_lines": int(offsets.size),
    }
    return Spectrum1D(grid, amps, meta)


# ---------------------------------------------------------------------------
# indirect J-spectra
# ---------------------------------------------------------------------------


def default_tau_grid(points: int = DEFAULT_POINTS, dwell: float = DEFAULT_DWELL) -> np.ndarray:
    return dwell * np.arange(points)


def _check_uniform(taus: np.ndarray) -> float:
    if taus.ndim != 1 or taus.size == 0:
        raise ValueError("τ grid must be a non-empty 1-D sequence")
    if np.any(taus < 0):
        raise ValueError("τ values must be >= 0")
    if taus.size == 1:
        return DEFAULT_DWELL
    d = np.diff(taus)
    if d[0] <= 0 or np.max(np.abs(d - d[0])) > 1e-9 * d[0]:
        raise ValueError("τ grid must be uniformly spaced and increasing")
    return float(d[0])


def indirect_j_series(
    system: SpinSystem,
    schedule: ProtocolSchedule | None = None,
    tau_grid: Sequence[float] | None = None,
    observe: Iterable[str] | None = None,
    temperature: float = AMBIENT_TEMPERATURE,
    method: str = "compiled",
    cache: EigenCache | None = None,
) -> dict[str, TimeSeries]:
    """Detected magnetization S_g(τ) of each observed site for a τ sweep.

    ``method='direct'`` runs the full protocol once per τ;
    ``'compiled'`` (default) gives the same numbers from a single pass.
    """
    schedule = schedule or canonical_schedule()
    taus = default_tau_grid() if tau_grid is None else np.asarray(tau_grid, dtype=float)
    dwell = _check_uniform(taus)
    schedule.variable_index  # validates the template
    cache = cache or EigenCache(system)
    if method == "compiled":
        values = tau_sweep(system, schedule, taus, observe, temperature, cache)
    elif method == "direct":
        nuclei = list(observe) if observe is not None else None
        if nuclei is None and schedule.detect is not None and schedule.detect.nuclei:
            nuclei = list(schedule.detect.nuclei)
        rows = []
        for t in taus:
            res = run_protocol(system, schedule.with_tau(t), temperature, cache=cache)
            rows.append(measure_magnetization(res.state, system, nuclei))
        values = {k: np.array([r[k] for r in rows]) for k in rows[0]}
    else:
        raise ValueError("method must be 'compiled' or 'direct'")
    return {
        name: TimeSeries(v, dwell, float(taus[0]), name, {"quantity": "Iz", "site": name})
        for name, v in values.items()
    }


def apodization(n: int, dwell: float, window: str = "none", width: float = 1.0) -> np.ndarray:
    """Window function over ``n`` samples.

    ``exp``: exp(-π·width·t) (width = Lorentzian broadening in Hz);
    ``gauss``: Gaussian broadening of FWHM ``width`` Hz;
    ``cos2``: cos² from 1 at t=0 to 0 at the last sample;
    ``none``: ones.
    """
    t = dwell * np.arange(n)
    key = {"exponential": "exp", "gaussian": "gauss", "cosine2": "cos2", "cos²": "cos2"}.get(window, window)
    if key == "none":
        return np.ones(n)
    if key == "exp":
        return np.exp(-np.pi * width * t)
    if key == "gauss":
        return np.exp(-((np.pi * width * t) ** 2) / (4 * np.log(2)))
    if key == "cos2":
        if n == 1:
            return np.ones(1)
        return np.cos(0.5 * np.pi * np.arange(n) / (n - 1)) ** 2
    raise ValueError(f"unknown window {window!r}; use exp, gauss, cos2 or none")


def process_1d(
    series: TimeSeries, window: str = "none", width: float = 1.0, zero_fill: int = 1
) -> Spectrum1D:
    """Mean subtraction, apodization, zero filling and FFT; returns the magnitude spectrum.

    Real series give the axis 0 .. 1/(2·dwell); complex series give the full
    centred axis.
    """
    x = np.asarray(series.samples)
    if x.size == 0:
        raise ValueError("cannot process an empty series")
    zero_fill = int(zero_fill)
    if zero_fill < 1 or zero_fill & (zero_fill - 1):
        raise ValueError("zero-fill factor must be a power of two >= 1")
    x = x - x.mean()
    x = x * apodization(len(x), series.dwell, window, width)
    nz = len(x) * zero_fill
    if np.iscomplexobj(x):
        spec = np.fft.fftshift(np.fft.fft(x, nz))
        freqs = np.fft.fftshift(np.fft.fftfreq(nz, series.dwell))
    else:
        spec = np.fft.rfft(x, nz)
        freqs = np.fft.rfftfreq(nz, series.dwell)
    meta = dict(series.metadata)
    meta.update(
        kind="indirect-J",
        site=series.label,
        dwell_s=series.dwell,
        points=len(x),
        window=window,
        window_width_Hz=width,
        zero_fill=zero_fill,
        processing="mean-subtract|window|zero-fill|fft|magnitude",
    )
    return Spectrum1D(freqs, np.abs(spec), meta)


# ---------------------------------------------------------------------------
# zero-field stick spectra
# ---------------------------------------------------------------------------


def _as_blocks(op, n_spins: int) -> BlockOperator:
    sectors = magnetization_sectors(n_spins)
    if isinstance(op, BlockOperator):
        return op
    op = np.asarray(op)
    if op.ndim == 1:
        return BlockOperator.from_diagonal(op, sectors)
    return BlockOperator.from_dense(op, sectors)


def zulf_stick_spectrum(
    system: SpinSystem,
    initial=None,
    detection=None,
    threshold: float = 1e-9,
    merge_tol: float = 0.01,
    eig: EigenSystem | None = None,
) -> list[Line]:
    """Zero-field transition frequencies and amplitudes.

    Each eigenstate pair (i, j) contributes at ``|E_i - E_j|`` with weight
    ``2|⟨i|D|j⟩⟨j|ρ₀|i⟩|``.  The default initial state and detection operator
    are both the γ-weighted total z-magnetization.  Lines closer than
    ``merge_tol`` are merged and lines below ``threshold`` times the largest
    are dropped.
    """
    n = system.n_spins
    if n < 2:
        return []
    weighted = (system.gammas[:, None] * spin_projections(n)).sum(axis=0)
    rho0 = _as_blocks(weighted if initial is None else initial, n)
    D = _as_blocks(weighted if detection is None else detection, n)
    eig = eig or diagonalize(system, HamiltonianSpec(field=0.0))
    freqs, amps = [], []
    for (vals, V), r, d in zip(eig.sector_view(), rho0.blocks, D.blocks):
        if len(vals) < 2:
            continue
        rp = V.conj().T @ r @ V
        dp = V.conj().T @ d @ V
        w = 2.0 * np.abs(dp * rp.T)
        iu = np.triu_indices(len(vals), k=1)
        freqs.append(np.abs(vals[iu[1]] - vals[iu[0]]))
        amps.append(w[iu])
    if not freqs:
        return []
    f, a = np.concatenate(freqs), np.concatenate(amps)
    keep = f > merge_tol
    f, a = merge_lines(f[keep], a[keep], merge_tol)
    if a.size == 0:
        return []
    keep = a > threshold * a.max()
    return [Line(float(x), float(y)) for x, y in zip(f[keep], a[keep])]


# ---------------------------------------------------------------------------
# peak picking
# ---------------------------------------------------------------------------


def _half_crossing(x, y, i, half, step):
    j = i
    while 0 <= j + step < len(y) and y[j + step] > half:
        j += step
    k = j + step
    if not 0 <= k < len(y):
        return None
    # linear interpolation between j (above) and k (at/below)
    return x[j] + (half - y[j]) * (x[k] - x[j]) / (y[k] - y[j])


def pick_peaks(spectrum: Spectrum1D, threshold: float = 0.1) -> list[Peak]:
    """Local maxima above ``threshold`` times the largest amplitude.

    Peak positions come from a parabola through the maximum and its two
    neighbours; widths are full widths at half the refined height, from
    linear interpolation of the half-maximum crossings (NaN if a crossing
    falls outside the spectrum).
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must be a fraction between 0 and 1")
    x = spectrum.frequencies
    y = np.real(spectrum.amplitudes) if not np.iscomplexobj(spectrum.amplitudes) else np.abs(spectrum.amplitudes)
    if len(y) < 3:
        return []
    top = float(np.max(y))
    if top <= 0:
        return []
    idx = np.flatnonzero((y[1:-1] > y[:-2]) & (y[1:-1] >= y[2:])) + 1
    peaks = []
    for i in idx:
        if y[i] <= threshold * top:
            continue
        x0, x1, x2 = x[i - 1], x[i], x[i + 1]
        y0, y1, y2 = y[i - 1], y[i], y[i + 1]
        denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
        a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
        b = (x2**2 * (y0 - y1) + x1**2 * (y2 - y0) + x0**2 * (y1 - y2)) / denom
        if a < 0:
            xv = -b / (2 * a)
            yv = y1 + a * (xv - x1) ** 2 + (2 * a * x1 + b) * (xv - x1)
        else:
            xv, yv = x1, y1
        half = 0.5 * yv
        left = _half_crossing(x, y, i, half, -1)
        right = _half_crossing(x, y, i, half, +1)
        width = (right - left) if left is not None and right is not None else float("nan")
        peaks.append(Peak(float(xv), float(yv), float(width)))
    return peaks


def match_peaks(reference: Sequence[Peak], other: Sequence[Peak], max_delta: float = np.inf):
    """Pair each reference peak with the nearest peak of ``other``.

    Returns ``(reference frequency, matched frequency or NaN, delta)`` rows.
    """
    rows = []
    freqs = np.array([p.frequency for p in other])
    for p in reference:
        if freqs.size == 0:
            rows.append((p.frequency, float("nan"), float("nan")))
            continue
        k = int(np.argmin(np.abs(freqs - p.frequency)))
        d = freqs[k] - p.frequency
        if abs(d) > max_delta:
            rows.append((p.frequency, float("nan"), float("nan")))
        else:
            rows.append((p.frequency, float(freqs[k]), float(d)))
    return rows
