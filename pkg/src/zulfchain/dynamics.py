"""Thermal states, unitary propagation and ideal field-cycling protocols.

Density matrices are kept as :class:`~zulfchain.spins.BlockOperator` over
total-M sectors whenever possible.  Thermal states and everything produced
from them by field-along-z Hamiltonians and adiabatic maps stay block
diagonal, so the 12-spin simulations never touch a dense 4096x4096 matrix.
Arbitrary (e.g. transverse) states can still be propagated densely.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .constants import (
    AMBIENT_TEMPERATURE,
    BOLTZMANN,
    EVOLUTION_FIELD,
    FIELD_CYCLING_HIGH,
    PLANCK,
    SHUTTLE_FIELD,
)
from .lines import merge_lines
from .hamiltonian import (
    EigenSystem,
    HamiltonianSpec,
    block_decompose,
    diagonalize,
    group_spin_operator,
    hamiltonian_blocks,
)
from .spins import BlockOperator, SpinSystem, magnetization_sectors, spin_projections

log = logging.getLogger(__name__)

__all__ = [
    "DensityMatrix",
    "AdiabaticRamp",
    "SuddenSwitch",
    "FreeEvolution",
    "Detect",
    "ProtocolSchedule",
    "ProtocolResult",
    "ProtocolError",
    "LogEntry",
    "canonical_schedule",
    "thermal_state",
    "propagate",
    "sudden_switch",
    "adiabatic_ramp",
    "run_protocol",
    "tau_sweep",
    "compile_sweep",
    "CompiledSweep",
    "measure_magnetization",
    "EigenCache",
    "ramp_pairs",
    "thread_count",
]

THREADS_ENV = "ZULFCHAIN_THREADS"


def thread_count() -> int:
    """Worker threads for block-parallel loops, from ``ZULFCHAIN_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map(fn: Callable, items: Sequence) -> list:
    n = thread_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# density matrices
# ---------------------------------------------------------------------------


class DensityMatrix:
    """A spin density matrix, block diagonal over total M or dense."""

    def __init__(self, data: np.ndarray | BlockOperator, n_spins: int | None = None):
        if isinstance(data, BlockOperator):
            n = data.sectors.n_spins
        else:
            data = np.asarray(data)
            if data.ndim != 2 or data.shape[0] != data.shape[1]:
                raise ValueError("density matrix must be square")
            n = int(round(np.log2(data.shape[0])))
            if 2**n != data.shape[0]:
                raise ValueError("density matrix dimension must be a power of two")
        if n_spins is not None and n_spins != n:
            raise ValueError(f"density matrix of {n} spins does not match system of {n_spins}")
        self.data = data
        self.n_spins = n

    @classmethod
    def maximally_mixed(cls, n_spins: int) -> "DensityMatrix":
        dim = 2**n_spins
        return cls(BlockOperator.from_diagonal(np.full(dim, 1.0 / dim)))

    @property
    def dim(self) -> int:
        return 2**self.n_spins

    @property
    def is_blocked(self) -> bool:
        return isinstance(self.data, BlockOperator)

    def to_dense(self) -> np.ndarray:
        return self.data.to_dense() if self.is_blocked else self.data

    def blocked(self, atol: float | None = 1e-12) -> "DensityMatrix":
        """The same state as sector blocks (raises if it has coherences between sectors)."""
        if self.is_blocked:
            return self
        return DensityMatrix(BlockOperator.from_dense(self.data, atol=atol))

    def diagonal(self) -> np.ndarray:
        return np.real(self.data.diagonal() if self.is_blocked else np.diag(self.data))

    def trace(self) -> float:
        return float(np.real(self.data.trace() if self.is_blocked else np.trace(self.data)))

    def purity(self) -> float:
        if self.is_blocked:
            return float(sum(np.sum(np.abs(b) ** 2) for b in self.data.blocks))
        return float(np.sum(np.abs(self.data) ** 2))

    def eigenvalues(self) -> np.ndarray:
        if self.is_blocked:
            return np.sort(self.data.eigvalsh())
        return np.linalg.eigvalsh(self.data)

    def hermiticity_error(self) -> float:
        if self.is_blocked:
            return max(float(np.max(np.abs(b - b.conj().T), initial=0.0)) for b in self.data.blocks)
        return float(np.max(np.abs(self.data - self.data.conj().T)))

    def expectation(self, op: np.ndarray | BlockOperator) -> complex:
        """Tr(ρ·op)."""
        if self.is_blocked and isinstance(op, BlockOperator):
            return complex(sum(np.sum(a * b.T) for a, b in zip(self.data.blocks, op.blocks)))
        A = self.to_dense()
        B = op.to_dense() if isinstance(op, BlockOperator) else np.asarray(op)
        return complex(np.sum(A * B.T))

    def __repr__(self):
        kind = "blocked" if self.is_blocked else "dense"
        return f"DensityMatrix({self.n_spins} spins, {kind})"


def thermal_state(system: SpinSystem, field: float, temperature: float = AMBIENT_TEMPERATURE) -> DensityMatrix:
    """High-temperature thermal state ``2^-N (1 - h H / (k_B T))`` at ``field``.

    ``temperature=np.inf`` gives the maximally mixed state.
    """
    if field <= 0:
        raise ValueError("thermal state requires a positive polarizing field")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    dim = system.dim
    H = hamiltonian_blocks(system, HamiltonianSpec(field=field))
    beta = PLANCK / (BOLTZMANN * temperature)
    # Gershgorin bound on the spectral radius
    norm = max(float(np.max(np.sum(np.abs(b), axis=1), initial=0.0)) for b in H.blocks)
    if beta * norm >= 1.0:
        raise OverflowError(
            f"high-temperature expansion invalid: h|H|/kT = {beta * norm:.3g} >= 1"
        )
    blocks = [(np.eye(len(b)) - beta * b) / dim for b in H.blocks]
    rho = BlockOperator(H.sectors, blocks)
    tr = float(np.real(rho.trace()))
    return DensityMatrix(rho * (1.0 / tr))


# ---------------------------------------------------------------------------
# propagation primitives
# ---------------------------------------------------------------------------

HamiltonianLike = Union[np.ndarray, BlockOperator, EigenSystem]


def _as_eigensystem(H: HamiltonianLike, n_spins: int) -> EigenSystem:
    if isinstance(H, EigenSystem):
        return H
    return block_decompose(H, n_spins)


def _dense_vectors(eig: EigenSystem) -> tuple[np.ndarray, np.ndarray]:
    return eig.eigenvalues, eig.vector_matrix().toarray()


def propagate(rho: DensityMatrix, H: HamiltonianLike, t: float) -> DensityMatrix:
    """``U ρ U†`` with ``U = exp(-2πi H t)`` built from the eigen-decomposition of ``H`` (Hz)."""
    if t < 0:
        raise ValueError("evolution time must be >= 0")
    dim_h = H.dim if isinstance(H, (EigenSystem, BlockOperator)) else np.asarray(H).shape[0]
    if dim_h != rho.dim:
        raise ValueError(f"dimension mismatch: state {rho.dim}, Hamiltonian {dim_h}")
    if t == 0:
        return rho
    eig = _as_eigensystem(H, rho.n_spins)
    if rho.is_blocked and eig.blocked:
        views = eig.sector_view()

        def step(args):
            (vals, V), r = args
            if r.size == 0:
                return r
            U = (V * np.exp(-2j * np.pi * vals * t)) @ V.conj().T
            return U @ r @ U.conj().T

        blocks = _map(step, list(zip(views, rho.data.blocks)))
        return DensityMatrix(BlockOperator(rho.data.sectors, blocks))
    vals, V = _dense_vectors(eig)
    U = (V * np.exp(-2j * np.pi * vals * t)) @ V.conj().T
    return DensityMatrix(U @ rho.to_dense() @ U.conj().T)


def sudden_switch(rho: DensityMatrix, from_H: HamiltonianLike | None = None, to_H: HamiltonianLike | None = None) -> DensityMatrix:
    """Sudden field change: the state is untouched, only the generator changes."""
    return rho


@dataclass
class RampReport:
    """Diagnostics of one adiabatic map."""

    coherence_norm: float = 0.0  # largest discarded eigenbasis coherence
    sector_leak: float = 0.0  # largest discarded coherence between M sectors
    degenerate_from: int = 0
    degenerate_to: int = 0

    def notes(self) -> list[str]:
        out = []
        if self.degenerate_from or self.degenerate_to:
            out.append(
                f"degenerate levels ordered by dominant basis index "
                f"(from: {self.degenerate_from} clusters, to: {self.degenerate_to} clusters)"
            )
        out.append(f"discarded coherence max {self.coherence_norm:.3e}")
        if self.sector_leak > 0:
            out.append(f"discarded inter-sector coherence max {self.sector_leak:.3e}")
        return out


def _clusters(vals: np.ndarray) -> np.ndarray:
    tol = 1e-13 * float(np.max(np.abs(vals), initial=0.0)) + 1e-9
    return np.concatenate([[0], np.cumsum(np.diff(vals) > tol)]) if vals.size else np.zeros(0, int)


def _count_degenerate(views) -> int:
    count = 0
    for vals, _ in views:
        cid = _clusters(vals)
        if cid.size:
            count += int(np.sum(np.bincount(cid) > 1))
    return count


def symmetry_basis(symmetry: BlockOperator) -> list[list[tuple[float, np.ndarray]]]:
    """Per sector: (label, orthonormal basis of that eigenspace of ``symmetry``)."""
    out = []
    for S in symmetry.blocks:
        if S.size == 0:
            out.append([])
            continue
        lab, Q = np.linalg.eigh(S)
        lab = np.round(lab, 6)
        out.append([(float(l), Q[:, lab == l]) for l in np.unique(lab)])
    return out


def labelled_views(H_blocks: Sequence[np.ndarray], sectors, basis=None):
    """Eigen-decomposition per sector as (energies, vectors, labels).

    With a symmetry ``basis`` (from :func:`symmetry_basis`) every symmetry
    block is diagonalized separately, so eigenvectors carry exact labels.
    Within each label, equal energies are ordered by dominant basis index.
    """
    views = []
    for k, H in enumerate(H_blocks):
        idx = sectors.indices[k].astype(float)
        parts = basis[k] if basis is not None else [(0.0, np.eye(len(H)))]
        vals, vecs, labs = [], [], []
        for lab, Q in parts:
            h = Q.conj().T @ H @ Q
            h = 0.5 * (h + h.conj().T)
            w, W = np.linalg.eigh(h)
            V = Q @ W
            cid = _clusters(w)
            for c in np.flatnonzero(np.bincount(cid) > 1) if cid.size else []:
                cols = np.flatnonzero(cid == c)
                Vc = V[:, cols]
                _, R = np.linalg.eigh(Vc.conj().T @ (idx[:, None] * Vc))
                V[:, cols] = Vc @ R
            vals.append(w)
            vecs.append(V)
            labs.append(np.full(len(w), lab))
        if not vals:
            views.append((np.zeros(0), np.zeros((0, 0)), np.zeros(0)))
            continue
        vals, V, labs = np.concatenate(vals), np.hstack(vecs), np.concatenate(labs)
        dom = np.argmax(np.abs(V), axis=0)
        # energy-cluster ids must be computed in one global sort
        order = np.argsort(vals, kind="stable")
        cid = np.empty(len(vals), dtype=np.int64)
        cid[order] = _clusters(vals[order])
        order = np.lexsort((dom, cid))
        views.append((vals[order], V[:, order], labs[order]))
    return views


def ramp_pairs(src_views, dst_views):
    """Column-aligned eigenvector pairs (V_from, V_to) for each total-M sector.

    Eigenstates are paired by energy rank among states with the same
    symmetry label (all labels are equal when no symmetry is resolved).
    """
    pairs = []
    for (v1, V1, l1), (v2, V2, l2) in zip(src_views, dst_views):
        c1 = np.lexsort((np.arange(len(l1)), l1))
        c2 = np.lexsort((np.arange(len(l2)), l2))
        if not np.array_equal(l1[c1], l2[c2]):
            raise ValueError("symmetry labels differ between the two Hamiltonians")
        pairs.append((V1[:, c1], V2[:, c2]))
    return pairs


def _sector_blocks(H: HamiltonianLike, n: int) -> list[np.ndarray]:
    if isinstance(H, BlockOperator):
        return list(H.blocks)
    if isinstance(H, EigenSystem):
        return [(V * v) @ V.conj().T for v, V in H.sector_view()]
    return list(BlockOperator.from_dense(np.asarray(H), magnetization_sectors(n), atol=1e-10).blocks)


def adiabatic_ramp(
    rho: DensityMatrix,
    from_H: HamiltonianLike,
    to_H: HamiltonianLike,
    report: RampReport | None = None,
    symmetry: BlockOperator | None = None,
    pairs=None,
) -> DensityMatrix:
    """Ideal adiabatic map between two Hamiltonians.

    Within each total-M sector the eigenstates of ``from_H`` and ``to_H`` are
    both sorted by energy and paired by rank; populations move with the
    pairing and every coherence is dropped.  ``symmetry`` (e.g.
    :func:`~zulfchain.hamiltonian.group_spin_operator`) refines the sectors
    by a further conserved quantity, see :func:`ramp_pairs`.
    """
    n = rho.n_spins
    sectors = magnetization_sectors(n)
    rep = report if report is not None else RampReport()
    if pairs is None:
        basis = symmetry_basis(symmetry) if symmetry is not None else None
        src = labelled_views(_sector_blocks(from_H, n), sectors, basis)
        dst = labelled_views(_sector_blocks(to_H, n), sectors, basis)
        rep.degenerate_from = _count_degenerate([v[:2] for v in src])
        rep.degenerate_to = _count_degenerate([v[:2] for v in dst])
        pairs = ramp_pairs(src, dst)
    if rho.is_blocked:
        rblocks = rho.data.blocks
    else:
        dense = rho.data
        off = sectors.sector_of[:, None] != sectors.sector_of[None, :]
        rep.sector_leak = float(np.max(np.abs(dense[off]), initial=0.0))
        rblocks = [dense[np.ix_(i, i)] for i in sectors.indices]

    def one(args):
        (V1, V2), r = args
        R = V1.conj().T @ r @ V1
        p = np.real(np.diag(R)).copy()
        coh = float(np.max(np.abs(R - np.diag(np.diag(R))), initial=0.0))
        return (V2 * p) @ V2.conj().T, coh

    results = _map(one, list(zip(pairs, rblocks)))
    rep.coherence_norm = max([c for _, c in results], default=0.0)
    return DensityMatrix(BlockOperator(sectors, [b for b, _ in results]))


def _ramp_adjoint(O: BlockOperator, pairs) -> BlockOperator:
    """Heisenberg picture of :func:`adiabatic_ramp`: observable after -> before."""
    blocks = []
    for (V1, V2), o in zip(pairs, O.blocks):
        q = np.real(np.sum(V2.conj() * (o @ V2), axis=0))
        blocks.append((V1 * q) @ V1.conj().T)
    return BlockOperator(O.sectors, blocks)


# ---------------------------------------------------------------------------
# observables
# ---------------------------------------------------------------------------


def _site_selection(system: SpinSystem, nuclei: Iterable[str] | None):
    return system.select_sites(None if nuclei is None or len(list(nuclei)) == 0 else nuclei)


def measure_magnetization(
    rho: DensityMatrix, system: SpinSystem, nuclei: Iterable[str] | None = None, per_spin: bool = False
) -> dict[str, float]:
    """⟨I_z⟩ per detection site (equivalence groups summed) or per spin.

    ``nuclei`` selects sites by name, spin label or isotope symbol; ``None``
    selects everything.
    """
    if rho.n_spins != system.n_spins:
        raise ValueError("state and system sizes differ")
    m = spin_projections(system.n_spins)
    pops = rho.diagonal()
    sites = _site_selection(system, nuclei)
    if per_spin:
        wanted = sorted({i for _, members in sites for i in members})
        return {system.labels[i]: float(m[i] @ pops) for i in wanted}
    return {name: float(m[list(members)].sum(axis=0) @ pops) for name, members in sites}


def site_observable(system: SpinSystem, members: Sequence[int]) -> BlockOperator:
    """Σ_{a ∈ members} I_az as a (diagonal) block operator."""
    diag = spin_projections(system.n_spins)[list(members)].sum(axis=0)
    return BlockOperator.from_diagonal(diag, magnetization_sectors(system.n_spins))


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------


def _check_field(value: float, what: str):
    if value is None or not np.isfinite(value) or value < 0:
        raise ValueError(f"{what} must be a finite field >= 0 T, got {value}")


@dataclass(frozen=True)
class AdiabaticRamp:
    from_field: float
    to_field: float

    def __post_init__(self):
        _check_field(self.from_field, "ramp start field")
        _check_field(self.to_field, "ramp end field")


@dataclass(frozen=True)
class SuddenSwitch:
    to_field: float

    def __post_init__(self):
        _check_field(self.to_field, "switch field")


@dataclass(frozen=True)
class FreeEvolution:
    """Evolution at ``field`` for ``duration`` s; ``None`` marks the swept τ of a template."""

    field: float
    duration: float | None = None

    def __post_init__(self):
        _check_field(self.field, "evolution field")
        if self.duration is not None and not (np.isfinite(self.duration) and self.duration >= 0):
            raise ValueError(f"evolution duration must be >= 0 s, got {self.duration}")


@dataclass(frozen=True)
class Detect:
    """Read out ⟨I_z⟩ of the selected sites (all sites if empty)."""

    nuclei: tuple[str, ...] = ()


Segment = Union[AdiabaticRamp, SuddenSwitch, FreeEvolution, Detect]


@dataclass(frozen=True)
class ProtocolSchedule:
    """Thermal polarization at ``polarization_field`` followed by ``segments``."""

    segments: tuple[Segment, ...]
    polarization_field: float = FIELD_CYCLING_HIGH

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not self.polarization_field > 0:
            raise ValueError("polarization field must be > 0 T")
        for k, s in enumerate(segs):
            if not isinstance(s, (AdiabaticRamp, SuddenSwitch, FreeEvolution, Detect)):
                raise TypeError(f"segment {k}: unknown segment type {type(s).__name__}")
            if isinstance(s, Detect) and k != len(segs) - 1:
                raise ValueError("a Detect segment must be the last segment")

    @property
    def variable_index(self) -> int:
        """Index of the swept free evolution."""
        free = [k for k, s in enumerate(self.segments) if isinstance(s, FreeEvolution)]
        marked = [k for k in free if self.segments[k].duration is None]
        if len(marked) == 1:
            return marked[0]
        if not marked and len(free) == 1:
            return free[0]
        raise ValueError("schedule must contain exactly one variable-duration free evolution")

    def with_tau(self, tau: float) -> "ProtocolSchedule":
        k = self.variable_index
        segs = list(self.segments)
        segs[k] = FreeEvolution(segs[k].field, float(tau))
        return ProtocolSchedule(tuple(segs), self.polarization_field)

    @property
    def detect(self) -> Detect | None:
        return self.segments[-1] if self.segments and isinstance(self.segments[-1], Detect) else None


def canonical_schedule(
    tau: float | None = None,
    high_field: float = FIELD_CYCLING_HIGH,
    shuttle_field: float = SHUTTLE_FIELD,
    evolution_field: float = EVOLUTION_FIELD,
    nuclei: Sequence[str] = (),
) -> ProtocolSchedule:
    """Polarize at high field, shuttle adiabatically, switch suddenly to ultralow
    field, evolve for ``tau``, switch back, shuttle back and detect."""
    return ProtocolSchedule(
        (
            AdiabaticRamp(high_field, shuttle_field),
            SuddenSwitch(evolution_field),
            FreeEvolution(evolution_field, tau),
            SuddenSwitch(shuttle_field),
            AdiabaticRamp(shuttle_field, high_field),
            Detect(tuple(nuclei)),
        ),
        polarization_field=high_field,
    )


@dataclass
class LogEntry:
    index: int
    kind: str
    field_from: float
    field_to: float
    duration: float = 0.0
    trace: float = float("nan")
    purity: float = float("nan")
    magnetization: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def format(self) -> str:
        mz = " ".join(f"{k}={v:+.6e}" for k, v in self.magnetization.items())
        txt = (
            f"[{self.index:02d}] {self.kind:<14s} B {self.field_from:.6g} T -> {self.field_to:.6g} T"
            f" dt={self.duration:.6g} s trace={self.trace:.12f} purity={self.purity:.12e} {mz}"
        )
        return txt + "".join(f"\n     note: {n}" for n in self.notes)


class ProtocolError(RuntimeError):
    """A segment failed; ``log`` holds the entries completed so far."""

    def __init__(self, message: str, log: list[LogEntry]):
        super().__init__(message)
        self.log = log


@dataclass
class ProtocolResult:
    state: DensityMatrix
    log: list[LogEntry]
    detected: dict[str, float] | None = None

    def format_log(self) -> str:
        return "\n".join(e.format() for e in self.log) + "\n"


class EigenCache:
    """Full-truncation eigen-systems of one spin system, keyed by field.

    With ``resolve_symmetry`` (default) adiabatic pairings are made within
    blocks of equal equivalence-group spins as well as equal total M.
    """

    def __init__(self, system: SpinSystem, resolve_symmetry: bool = True):
        self.system = system
        self.resolve_symmetry = resolve_symmetry
        self._store: dict[float, EigenSystem] = {}
        self._pairs: dict[tuple[float, float], list] = {}
        self._symmetry = None
        self._symmetry_done = False
        self._basis = None
        self._labelled: dict[float, list] = {}

    def __call__(self, field: float) -> EigenSystem:
        key = float(field)
        if key not in self._store:
            self._store[key] = diagonalize(self.system, HamiltonianSpec(field=key))
        return self._store[key]

    def views(self, field: float):
        return self(field).sector_view()

    @property
    def symmetry(self) -> BlockOperator | None:
        if not self._symmetry_done:
            self._symmetry_done = True
            if self.resolve_symmetry:
                self._symmetry = group_spin_operator(self.system)
        return self._symmetry

    def labelled(self, field: float):
        key = float(field)
        if key not in self._labelled:
            sym = self.symmetry
            if self._basis is None and sym is not None:
                self._basis = symmetry_basis(sym)
            blocks = hamiltonian_blocks(self.system, HamiltonianSpec(field=key))
            self._labelled[key] = labelled_views(blocks.blocks, blocks.sectors, self._basis)
        return self._labelled[key]

    def pairs(self, from_field: float, to_field: float):
        key = (float(from_field), float(to_field))
        if key not in self._pairs:
            self._pairs[key] = ramp_pairs(self.labelled(from_field), self.labelled(to_field))
        return self._pairs[key]


def _entry(k, kind, b0, b1, rho, system, duration=0.0, notes=()):
    return LogEntry(
        k, kind, b0, b1, duration, rho.trace(), rho.purity(),
        measure_magnetization(rho, system), list(notes),
    )


def _run_segments(system, segments, rho, current, cache, entries, offset=0):
    """Execute segments in order; returns (state, field, detected)."""
    detected = None
    for k, seg in enumerate(segments, start=offset):
        try:
            if isinstance(seg, SuddenSwitch):
                rho = sudden_switch(rho)
                entries.append(_entry(k, "sudden-switch", current, seg.to_field, rho, system))
                current = seg.to_field
            elif isinstance(seg, AdiabaticRamp):
                notes = []
                if seg.from_field != current:
                    notes.append(f"implicit sudden switch {current:.6g} T -> {seg.from_field:.6g} T")
                rep = RampReport(
                    degenerate_from=_count_degenerate([v[:2] for v in cache.labelled(seg.from_field)]),
                    degenerate_to=_count_degenerate([v[:2] for v in cache.labelled(seg.to_field)]),
                )
                pairs = cache.pairs(seg.from_field, seg.to_field)
                rho = adiabatic_ramp(rho, None, None, rep, pairs=pairs)
                if cache.symmetry is not None:
                    notes.append("pairing resolved by equivalence-group spin")
                entries.append(
                    _entry(k, "adiabatic-ramp", seg.from_field, seg.to_field, rho, system, notes=notes + rep.notes())
                )
                current = seg.to_field
            elif isinstance(seg, FreeEvolution):
                if seg.duration is None:
                    raise ValueError("free evolution has no duration (template schedule)")
                notes = []
                if seg.field != current:
                    notes.append(f"implicit sudden switch {current:.6g} T -> {seg.field:.6g} T")
                rho = propagate(rho, cache(seg.field), seg.duration)
                entries.append(_entry(k, "free-evolution", seg.field, seg.field, rho, system, seg.duration, notes))
                current = seg.field
            elif isinstance(seg, Detect):
                detected = measure_magnetization(rho, system, seg.nuclei or None)
                entries.append(_entry(k, "detect", current, current, rho, system))
        except Exception as exc:  # abort with the partial log
            raise ProtocolError(f"segment {k} ({type(seg).__name__}) failed: {exc}", entries) from exc
    return rho, current, detected


def run_protocol(
    system: SpinSystem,
    schedule: ProtocolSchedule,
    temperature: float = AMBIENT_TEMPERATURE,
    initial: DensityMatrix | None = None,
    cache: EigenCache | None = None,
) -> ProtocolResult:
    """Thermal polarization then every segment of ``schedule`` in order."""
    cache = cache or EigenCache(system)
    entries: list[LogEntry] = []
    B0 = schedule.polarization_field
    try:
        rho = initial if initial is not None else thermal_state(system, B0, temperature)
    except Exception as exc:
        raise ProtocolError(f"thermal polarization failed: {exc}", entries) from exc
    entries.append(_entry(0, "polarize", B0, B0, rho, system, notes=[f"T = {temperature:g} K"]))
    rho, _, detected = _run_segments(system, schedule.segments, rho, B0, cache, entries, offset=1)
    return ProtocolResult(rho, entries, detected)


class CompiledSweep:
    """Signal ``S(τ) = Σ_jk X_jk exp(-2πi (E_j - E_k) τ)`` of a τ-swept protocol.

    ``X = ρ' ∘ G'ᵀ`` per total-M sector, with ρ' the state entering the swept
    evolution and G' the detection observable carried back to the same point,
    both in the eigenbasis (energies E) of the evolution Hamiltonian.
    """

    def __init__(self, energies: list[np.ndarray], weights: dict[str, list[np.ndarray]]):
        self.energies = energies
        self.weights = weights

    @property
    def names(self) -> list[str]:
        return list(self.weights)

    def evaluate(self, taus: Sequence[float]) -> dict[str, np.ndarray]:
        taus = np.asarray(taus, dtype=float)

        def sector(i):
            vals = self.energies[i]
            res = {}
            if vals.size == 0:
                return res
            phase = 2 * np.pi * vals[:, None] * taus[None, :]
            c = s = e = None
            for name, Xs in self.weights.items():
                X = Xs[i]
                if not np.iscomplexobj(X):
                    if c is None:
                        c, s = np.cos(phase), np.sin(phase)
                    res[name] = np.sum(c * (X @ c), axis=0) + np.sum(s * (X @ s), axis=0)
                else:
                    if e is None:
                        e = np.exp(-1j * phase)
                    res[name] = np.real(np.sum(e * (X @ e.conj()), axis=0))
            return res

        out = {name: np.zeros(len(taus)) for name in self.weights}
        for res in _map(sector, list(range(len(self.energies)))):
            for name, v in res.items():
                out[name] += v
        return out

    def lines(self, name: str, threshold: float = 1e-9, merge_tol: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
        """Frequencies (Hz, > merge_tol) and cosine amplitudes of every component of S(τ).

        Components closer than ``merge_tol`` are combined as complex amplitudes.
        """
        freqs, amps = [], []
        for vals, X in zip(self.energies, self.weights[name]):
            if vals.size < 2:
                continue
            j, k = np.triu_indices(len(vals), k=1)
            d = vals[j] - vals[k]
            a = np.where(d >= 0, X[j, k], np.conj(X[j, k]))
            freqs.append(np.abs(d))
            amps.append(2 * a)
        if not freqs:
            return np.zeros(0), np.zeros(0)
        f, a = np.concatenate(freqs), np.concatenate(amps)
        keep = f > merge_tol
        f, a = merge_lines(f[keep], a[keep], merge_tol)
        mag = np.abs(a)
        keep = mag > threshold * mag.max() if mag.size else np.zeros(0, dtype=bool)
        return f[keep], mag[keep]


def compile_sweep(
    system: SpinSystem,
    schedule: ProtocolSchedule,
    nuclei: Iterable[str] | None = None,
    temperature: float = AMBIENT_TEMPERATURE,
    cache: EigenCache | None = None,
) -> CompiledSweep:
    """Reduce a τ-swept protocol to per-eigenpair weights.

    The segments before the swept evolution run once.  The detection
    observables are carried backwards through the later segments (the adjoint
    of each map), so every τ afterwards costs only phase factors.
    """
    cache = cache or EigenCache(system)
    k_var = schedule.variable_index
    pre = schedule.segments[:k_var]
    evo = schedule.segments[k_var]
    post = schedule.segments[k_var + 1:]
    det = schedule.detect
    if nuclei is None and det is not None and det.nuclei:
        nuclei = det.nuclei
    if det is not None:
        post = post[:-1]

    entries: list[LogEntry] = []
    rho = thermal_state(system, schedule.polarization_field, temperature)
    rho, _, _ = _run_segments(system, pre, rho, schedule.polarization_field, cache, entries)

    sites = _site_selection(system, nuclei)
    obs = {name: site_observable(system, members) for name, members in sites}
    for seg in reversed(post):
        if isinstance(seg, AdiabaticRamp):
            pairs = cache.pairs(seg.from_field, seg.to_field)
            obs = {k: _ramp_adjoint(O, pairs) for k, O in obs.items()}
        elif isinstance(seg, FreeEvolution):
            if seg.duration is None:
                raise ValueError("only one free evolution may be variable")
            U = cache(seg.field).propagator(seg.duration)
            obs = {k: U.dagger() @ O @ U for k, O in obs.items()}

    views = cache.views(evo.field)
    rho_b = rho.blocked(atol=None).data

    def sector(i):
        vals, V = views[i]
        rp = V.conj().T @ rho_b.blocks[i] @ V
        return {name: rp * (V.conj().T @ O.blocks[i] @ V).T for name, O in obs.items()}

    per_sector = _map(sector, list(range(len(views))))
    weights = {name: [ps[name] for ps in per_sector] for name in obs}
    return CompiledSweep([v for v, _ in views], weights)


def tau_sweep(
    system: SpinSystem,
    schedule: ProtocolSchedule,
    taus: Sequence[float],
    nuclei: Iterable[str] | None = None,
    temperature: float = AMBIENT_TEMPERATURE,
    cache: EigenCache | None = None,
) -> dict[str, np.ndarray]:
    """Detected site magnetizations for every τ of the variable free evolution."""
    return compile_sweep(system, schedule, nuclei, temperature, cache).evaluate(taus)
