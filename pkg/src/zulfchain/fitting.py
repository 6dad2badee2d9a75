"""Total-lineshape fitting of shifts and J-couplings to high-field spectra.

Parameters are defined per site, so the members of an equivalence group
share one shift and every coupling to another site is a single parameter.
Each target spectrum is normalized to unit maximum before differencing,
which makes the fit blind to the receiver scaling of each nucleus.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .constants import AMBIENT_TEMPERATURE
from .dynamics import _map
from .hamiltonian import HamiltonianSpec
from .spectra import Spectrum1D, highfield_eigensystem, highfield_lines, highfield_spectrum, lorentzian_sum
from .spins import SpinSystem

log = logging.getLogger(__name__)

__all__ = [
    "Parameter",
    "FitParameterSet",
    "FitResult",
    "residual",
    "fit",
    "synthesize_targets",
    "simulate_targets",
    "jacobian",
    "J_STEP",
    "SHIFT_STEP",
]

# forward-difference steps, well below the 0.05 Hz resolution target
J_STEP = 1e-4  # Hz
SHIFT_STEP = 1e-5  # ppm
OTHER_STEP = 1e-6

KINDS = ("J", "shift", "linewidth", "scale", "baseline")


@dataclass(frozen=True)
class Parameter:
    """One free parameter; ``sites`` names the site(s) it acts on."""

    name: str
    kind: str
    value: float
    lower: float = -np.inf
    upper: float = np.inf
    sites: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown parameter kind {self.kind!r}")
        if not self.lower <= self.upper:
            raise ValueError(f"{self.name}: inconsistent bounds [{self.lower}, {self.upper}]")
        if self.kind == "linewidth" and not self.value > 0:
            raise ValueError("linewidth must be positive")

    @property
    def step(self) -> float:
        return {"J": J_STEP, "shift": SHIFT_STEP}.get(self.kind, OTHER_STEP)


def _site_map(system: SpinSystem) -> dict[str, tuple[int, ...]]:
    return dict(system.sites())


def j_parameter(system: SpinSystem, a: str, b: str, lower=-np.inf, upper=np.inf, value=None) -> Parameter:
    sites = _site_map(system)
    if a not in sites or b not in sites:
        raise ValueError(f"unknown site in J({a},{b})")
    if a == b:
        raise ValueError("couplings inside a site are not observable")
    if value is None:
        value = float(system.couplings[sites[a][0], sites[b][0]])
    return Parameter(f"J({a},{b})", "J", float(value), lower, upper, (a, b))


def shift_parameter(system: SpinSystem, site: str, lower=-np.inf, upper=np.inf, value=None) -> Parameter:
    sites = _site_map(system)
    if site not in sites:
        raise ValueError(f"unknown site {site}")
    if value is None:
        value = float(system.spins[sites[site][0]].shift)
    return Parameter(f"shift({site})", "shift", float(value), lower, upper, (site,))


@dataclass(frozen=True)
class FitParameterSet:
    """Free parameters plus the fixed model they are applied to.

    ``system`` holds every fixed value; free parameters overwrite it.
    ``linewidth``, ``scale`` and ``baseline`` are used unless a parameter of
    that kind is free.
    """

    system: SpinSystem
    parameters: tuple[Parameter, ...]
    field: float
    truncation: str = "secular"
    linewidth: float = 0.5
    scale: float = 1.0
    baseline: float = 0.0
    temperature: float = AMBIENT_TEMPERATURE

    def __post_init__(self):
        if not self.linewidth > 0:
            raise ValueError("linewidth must be positive")
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise ValueError("parameters must be counted once")
        for kind in ("linewidth", "scale", "baseline"):
            if sum(p.kind == kind for p in self.parameters) > 1:
                raise ValueError(f"at most one {kind} parameter")
        sites = _site_map(self.system)
        for p in self.parameters:
            if any(s not in sites for s in p.sites):
                raise ValueError(f"{p.name}: unknown site")
        seen = set()
        for p in self.parameters:
            if p.kind == "J":
                key = frozenset(p.sites)
                if key in seen:
                    raise ValueError(f"{p.name}: coupling listed twice")
                seen.add(key)
        HamiltonianSpec(self.field, self.truncation)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.parameters]

    @property
    def values(self) -> np.ndarray:
        return np.array([p.value for p in self.parameters], dtype=float)

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lower for p in self.parameters], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.upper for p in self.parameters], dtype=float)

    @property
    def steps(self) -> np.ndarray:
        return np.array([p.step for p in self.parameters], dtype=float)

    def within_bounds(self, x=None) -> bool:
        x = self.values if x is None else np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def with_values(self, x) -> "FitParameterSet":
        x = np.asarray(x, dtype=float)
        if x.shape != (len(self.parameters),):
            raise ValueError("wrong number of parameter values")
        params = tuple(replace(p, value=float(v)) for p, v in zip(self.parameters, x))
        return replace(self, parameters=params)

    def model(self, x=None):
        """(system, linewidth, scale, baseline) for parameter vector ``x``."""
        x = self.values if x is None else np.asarray(x, dtype=float)
        sites = _site_map(self.system)
        J = self.system.couplings.copy()
        shifts = self.system.shifts.copy()
        lw, scale, base = self.linewidth, self.scale, self.baseline
        for p, v in zip(self.parameters, x):
            if p.kind == "J":
                a, b = sites[p.sites[0]], sites[p.sites[1]]
                J[np.ix_(a, b)] = v
                J[np.ix_(b, a)] = v
            elif p.kind == "shift":
                shifts[list(sites[p.sites[0]])] = v
            elif p.kind == "linewidth":
                lw = v
            elif p.kind == "scale":
                scale = v
            else:
                base = v
        return self.system.with_couplings(J).with_shifts(shifts), lw, scale, base

    @property
    def spec(self) -> HamiltonianSpec:
        return HamiltonianSpec(self.field, self.truncation)

    @classmethod
    def from_config(cls, system: SpinSystem, config: dict) -> "FitParameterSet":
        """Build from a parsed ``[fit]`` section.

        ``free_j = all`` frees every non-zero coupling between two different
        sites; zero entries stay fixed at exactly zero.
        """
        field_ = config.get("field")
        if field_ is None:
            raise ValueError("[fit] needs a field")
        lo, hi = config.get("j_bounds", (-np.inf, np.inf))
        names = [n for n, _ in system.sites()]
        sites = _site_map(system)
        params = []
        free_j = config.get("free_j", [])
        if free_j == ["all"]:
            pairs = [
                (a, b)
                for i, a in enumerate(names)
                for b in names[i + 1:]
                if system.couplings[sites[a][0], sites[b][0]] != 0.0
            ]
        else:
            pairs = []
            for tok in free_j:
                a, sep, b = tok.partition("-")
                if not sep:
                    raise ValueError(f"free_j entry {tok!r} is not of the form A-B")
                pairs.append((a, b))
        params += [j_parameter(system, a, b, lo, hi) for a, b in pairs]
        free_shift = config.get("free_shift", [])
        if free_shift == ["all"]:
            free_shift = names
        params += [shift_parameter(system, s) for s in free_shift]
        return cls(
            system,
            tuple(params),
            float(field_),
            config.get("truncation", "secular"),
            float(config.get("linewidth", 0.5)),
        )


Target = tuple[Spectrum1D, str]


@dataclass
class FitResult:
    """Outcome of :func:`fit`."""

    parameters: FitParameterSet
    residual_norm: float
    initial_residual_norm: float
    uncertainties: np.ndarray
    converged: bool
    iterations: int
    evaluations: int
    message: str
    history: list[float] = field(default_factory=list)
    sign_ambiguous: list[str] = field(default_factory=list)

    @property
    def uncertainties_available(self) -> bool:
        return bool(np.all(np.isfinite(self.uncertainties)))

    def value(self, name: str) -> float:
        return float(self.parameters.values[self.parameters.names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.parameters.names, self.parameters.values.tolist()))

    def report(self) -> str:
        lines = [
            f"converged: {'yes' if self.converged else 'no'} ({self.message})",
            f"iterations: {self.iterations}  evaluations: {self.evaluations}",
            f"residual norm: {self.residual_norm:.6e} (initial {self.initial_residual_norm:.6e})",
            "",
            f"{'parameter':<16} {'value':>12} {'uncertainty':>12}",
        ]
        for name, v, u in zip(self.parameters.names, self.parameters.values, self.uncertainties):
            ustr = f"{u:12.4f}" if np.isfinite(u) else f"{'n/a':>12}"
            lines.append(f"{name:<16} {v:12.4f} {ustr}")
        if self.sign_ambiguous:
            lines += ["", "sign not determined by the spectra: " + ", ".join(self.sign_ambiguous)]
        return "\n".join(lines) + "\n"

    def keyvalue(self) -> str:
        rows = [
            f"converged = {str(self.converged).lower()}",
            f"iterations = {self.iterations}",
            f"residual_norm = {self.residual_norm!r}",
        ]
        for name, v, u in zip(self.parameters.names, self.parameters.values, self.uncertainties):
            rows.append(f"{name} = {float(v)!r}")
            rows.append(f"{name}.uncertainty = {float(u)!r}")
        rows.append("sign_ambiguous = " + " ".join(self.sign_ambiguous))
        return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# model and residual
# ---------------------------------------------------------------------------


def _peak_height(a: np.ndarray) -> float:
    """Largest |a|, refined through the top sample and its two neighbours.

    The raw sampled maximum jumps between equal-height multiplet lines as
    they move against the grid.  1/y of a Lorentzian is quadratic in
    frequency, so a parabola through 1/y recovers the height of an isolated
    line exactly wherever the grid falls.
    """
    y = np.abs(a)
    if y.size == 0:
        return 0.0
    i = int(np.argmax(y))
    if 0 < i < len(y) - 1 and np.all(y[i - 1 : i + 2] > 0):
        u0, u1, u2 = 1.0 / y[i - 1 : i + 2]
        curv = u0 - 2 * u1 + u2
        if curv > 0:
            u_min = u1 - 0.125 * (u2 - u0) ** 2 / curv
            if u_min > 0:
                return float(1.0 / u_min)
    return float(y[i])


def _normalized(a: np.ndarray) -> np.ndarray:
    peak = _peak_height(a)
    return a / peak if peak > 0 else a


def simulate_targets(params: FitParameterSet, targets: Sequence[Target], x=None) -> list[np.ndarray]:
    """Unit-maximum simulated spectra on the grid of each target."""
    system, lw, scale, base = params.model(x)
    spec = params.spec
    eig = highfield_eigensystem(system, spec)
    out = []
    for target, iso in targets:
        offsets, intens = highfield_lines(system, spec, iso, params.temperature, eig)
        sim = lorentzian_sum(target.frequencies, offsets, intens, lw)
        out.append(scale * _normalized(sim) + base)
    return out


def residual(params: FitParameterSet, targets: Sequence[Target], x=None) -> np.ndarray:
    """Concatenated differences between normalized simulated and target spectra."""
    if not targets:
        raise ValueError("no target spectra")
    sims = simulate_targets(params, targets, x)
    return np.concatenate([s - _normalized(np.real(t.amplitudes)) for s, (t, _) in zip(sims, targets)])


def synthesize_targets(
    params: FitParameterSet,
    observe: Sequence[str],
    noise: float = 0.0,
    seed: int = 0,
) -> list[Target]:
    """Spectra of the current parameter values on their automatic grids.

    ``noise`` adds Gaussian noise with standard deviation ``noise`` times the
    maximum of each spectrum, drawn from a generator seeded with ``seed``.
    """
    system, lw, _, _ = params.model()
    eig = highfield_eigensystem(system, params.spec)
    rng = np.random.default_rng(seed)
    out = []
    for iso in observe:
        s = highfield_spectrum(system, params.spec, iso, lw, temperature=params.temperature, eig=eig)
        amps = s.amplitudes
        if noise:
            amps = amps + noise * np.max(np.abs(amps)) * rng.standard_normal(amps.shape)
        out.append((Spectrum1D(s.frequencies, amps, dict(s.metadata, noise=noise, seed=seed)), iso))
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def jacobian(params: FitParameterSet, targets, x, r0=None, central: bool = False) -> np.ndarray:
    """Finite-difference Jacobian of :func:`residual`; columns run in parallel."""
    x = np.asarray(x, dtype=float)
    h = params.steps
    if r0 is None and not central:
        r0 = residual(params, targets, x)

    def column(i):
        e = np.zeros_like(x)
        e[i] = h[i]
        if central:
            return (residual(params, targets, x + e) - residual(params, targets, x - e)) / (2 * h[i])
        return (residual(params, targets, x + e) - r0) / h[i]

    return np.column_stack(_map(column, range(len(x))))


def fit(
    initial: FitParameterSet,
    targets: Sequence[Target],
    max_iterations: int = 100,
    tolerance: float = 1e-10,
    check_signs: bool = True,
    escape_rounds: int = 3,
) -> FitResult:
    """Levenberg–Marquardt least squares on :func:`residual`.

    Steps are projected onto the bounds.  The damping is divided by 3 after
    an accepted step and multiplied by 4 after a rejected one.  Iteration
    stops when the relative decrease of the squared residual falls below
    ``tolerance``, when no step can reduce it further, or at
    ``max_iterations`` (reported as not converged).

    After convergence each J is probed at ±0.5 and ±1 linewidth.  If a probe
    lowers the residual, the search restarts from the best probe; at most
    ``escape_rounds`` restarts are made, each with its own iteration budget.
    Couplings smaller than the linewidth can otherwise settle in a shallow
    false minimum.
    """
    if not initial.within_bounds():
        raise ValueError("initial parameters are outside their bounds")
    run = _lm(initial, targets, initial.values, max_iterations, tolerance)
    x, r, cost, Jm, it, n_eval, converged, message, history = run
    rounds = 0
    while converged and rounds < escape_rounds:
        probe, n = _escape_probe(initial, targets, x, cost)
        n_eval += n
        if probe is None:
            break
        rounds += 1
        log.debug("escape round %d: restarting from residual %.6e", rounds, np.sqrt(probe[1]))
        run = _lm(initial, targets, probe[0], max_iterations, tolerance)
        x, r, cost, Jm, it2, n2, converged, message, h2 = run
        it += it2
        n_eval += n2
        history += h2
    best = initial.with_values(x)
    unc = _uncertainties(Jm if Jm is not None else jacobian(initial, targets, x, r), r, len(x))
    ambiguous = _sign_ambiguities(best, targets, cost) if check_signs else []
    return FitResult(best, float(np.sqrt(cost)), history[0], unc, converged, it, n_eval, message, history, ambiguous)


def _lm(params: FitParameterSet, targets, x, max_iterations: int, tolerance: float):
    lo, hi = params.lower, params.upper
    r = residual(params, targets, x)
    cost = float(r @ r)
    history = [np.sqrt(cost)]
    n_eval = 1
    lam = 1e-3
    converged, message = False, "maximum iterations reached"
    it = 0
    Jm = None
    for it in range(1, max_iterations + 1):
        Jm = jacobian(params, targets, x, r)
        n_eval += len(x)
        g = Jm.T @ r
        A = Jm.T @ Jm
        d = np.diag(A).copy()
        d[d <= 0] = 1.0
        accepted = False
        while lam < 1e12:
            try:
                step = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= 4
                continue
            x_new = np.clip(x + step, lo, hi)
            r_new = residual(params, targets, x_new)
            n_eval += 1
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                accepted = True
                break
            lam *= 4
        if not accepted:
            converged, message = True, "no further decrease possible"
            break
        rel = (cost - cost_new) / cost
        x, r, cost = x_new, r_new, cost_new
        history.append(np.sqrt(cost))
        lam = max(lam / 3, 1e-12)
        log.debug("iteration %d: residual %.6e", it, np.sqrt(cost))
        if rel < tolerance:
            converged, message = True, "relative residual change below tolerance"
            break
        if np.all(np.abs(step) <= 1e-10 * (np.abs(x) + 1e-10)):
            converged, message = True, "step below tolerance"
            break
    return x, r, cost, Jm, it, n_eval, converged, message, history


def _escape_probe(params: FitParameterSet, targets, x, cost: float):
    """Best single-J displacement by ±0.5 or ±1 linewidth that lowers the cost, or None."""
    lw = params.model(x)[1]
    trials = []
    for i, p in enumerate(params.parameters):
        if p.kind != "J":
            continue
        for f in (-1.0, -0.5, 0.5, 1.0):
            y = x.copy()
            y[i] = np.clip(x[i] + f * lw, p.lower, p.upper)
            if y[i] != x[i]:
                trials.append(y)
    if not trials:
        return None, 0
    costs = _map(lambda y: float(np.sum(residual(params, targets, y) ** 2)), trials)
    k = int(np.argmin(costs))
    if costs[k] >= cost * (1 - 1e-6):
        return None, len(trials)
    return (trials[k], costs[k]), len(trials)


def _uncertainties(Jm: np.ndarray, r: np.ndarray, n: int) -> np.ndarray:
    m = len(r)
    A = Jm.T @ Jm
    if n == 0:
        return np.zeros(0)
    if m <= n or np.linalg.cond(A) > 1e14:
        return np.full(n, np.nan)
    var = float(r @ r) / (m - n)
    return np.sqrt(np.abs(np.diag(np.linalg.inv(A))) * var)


def _sign_ambiguities(params: FitParameterSet, targets, cost: float) -> list[str]:
    """J parameters whose sign flip leaves the residual unchanged within 0.1 %."""
    x = params.values
    out = []
    for i, p in enumerate(params.parameters):
        if p.kind != "J" or x[i] == 0 or not (p.lower <= -x[i] <= p.upper):
            continue
        y = x.copy()
        y[i] = -y[i]
        r = residual(params, targets, y)
        if float(r @ r) <= cost * 1.001 + 1e-20:
            out.append(p.name)
    return out
