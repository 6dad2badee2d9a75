"""2D ZULF-TOCSY simulation.

The experiment is simulated as a chain of linear maps on the state:

1. transverse magnetization of the ``f1`` isotope evolves for t1 under the
   secular high-field Hamiltonian, optionally with an ideal π pulse on 13C at
   t1/2;
2. a 90° storage pulse turns the evolved component back along z;
3. the adiabatic ramp to zero field keeps the populations of the high-field
   eigenstates and hands them to the paired low-field eigenstates;
4. the state evolves for ``t_mix`` at the evolution field and is ramped back;
5. a 90° pulse on the ``f2`` isotope starts the detected FID.

Steps 3 and 4 act on populations only, so the whole mixing stage is a
population-transfer matrix per total-M sector.  Everything else is sparse
because the secular high-field eigenbasis only mixes equivalent spins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .constants import (
    EVOLUTION_FIELD,
    FIELD_CYCLING_HIGH,
    SHUTTLE_FIELD,
)
from .dynamics import EigenCache, _clusters
from .hamiltonian import HamiltonianSpec, build_sparse_hamiltonian, conserved_labels, group_spin_operator
from .spectra import Spectrum2D, _lowering, apodization
from .spins import SpinSystem, magnetization_sectors, spin_projections

__all__ = [
    "TocsyConfig",
    "tocsy2d",
    "tocsy_time_data",
    "process_2d",
    "default_t1_grid",
    "default_t2_grid",
    "ridge_intensity",
    "f1_multiplet_spread",
    "TRANSFER_TIME",
]

# one-way shuttle time of the reference set-up; logged, not simulated
TRANSFER_TIME = 0.479

DEFAULT_T1_POINTS = 128
DEFAULT_T1_SIZE = 512
DEFAULT_T2_POINTS = 1024
DEFAULT_T2_SIZE = 4096


def default_t1_grid(points: int = DEFAULT_T1_POINTS, dwell: float = 1e-3) -> np.ndarray:
    return dwell * np.arange(points)


def default_t2_grid(points: int = DEFAULT_T2_POINTS, dwell: float = 2e-3) -> np.ndarray:
    return dwell * np.arange(points)


@dataclass(frozen=True)
class TocsyConfig:
    """Fields and processing sizes for :func:`tocsy2d`."""

    high_field: float = FIELD_CYCLING_HIGH
    shuttle_field: float = SHUTTLE_FIELD
    mixing_field: float = EVOLUTION_FIELD
    f1_size: int = DEFAULT_T1_SIZE
    f2_size: int = DEFAULT_T2_SIZE
    axial: bool = False

    def __post_init__(self):
        if not self.high_field > 0:
            raise ValueError("high_field must be positive")
        if self.shuttle_field < 0 or self.mixing_field < 0:
            raise ValueError("fields must be non-negative")
        for n in (self.f1_size, self.f2_size):
            if n < 1 or n & (n - 1):
                raise ValueError("processed sizes must be powers of two")


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def _members(system: SpinSystem, symbol: str) -> list[int]:
    out = [i for i, s in enumerate(system.spins) if s.isotope.symbol == symbol]
    if not out:
        raise ValueError(f"isotope {symbol} is not present in the system")
    return out


def pulse_operator(system: SpinSystem, members, angle: float, phase: float = 0.0) -> sp.csr_matrix:
    """exp(-i·angle·(cos φ F_x + sin φ F_y)) over ``members`` as a sparse Kronecker product."""
    c, s = np.cos(angle / 2), np.sin(angle / 2)
    r = np.array([[c, -1j * s * np.exp(-1j * phase)], [-1j * s * np.exp(1j * phase), c]])
    chosen = set(members)
    out = sp.identity(1, dtype=complex, format="csr")
    for i in range(system.n_spins):
        out = sp.kron(out, r if i in chosen else sp.identity(2), format="csr")
    return out


def _transverse(system: SpinSystem, members, phase: float) -> sp.csr_matrix:
    """cos φ F_x + sin φ F_y over ``members``."""
    lower = _lowering(system, members).astype(complex)
    raise_ = lower.T.tocsr()
    return (0.5 * np.exp(-1j * phase) * raise_ + 0.5 * np.exp(1j * phase) * lower).tocsr()


def _z_operator(system: SpinSystem, members, weights) -> sp.csr_matrix:
    m = spin_projections(system.n_spins)
    diag = np.zeros(system.dim)
    for a, w in zip(members, weights):
        diag += w * m[a]
    return sp.diags(diag).tocsr()


def _group_spin_sparse(system: SpinSystem) -> sp.csr_matrix | None:
    S = group_spin_operator(system)
    if S is None:
        return None
    rows, cols, vals = [], [], []
    for idx, b in zip(S.sectors.indices, S.blocks):
        r, c = np.nonzero(np.abs(b) > 1e-12)
        rows.append(idx[r])
        cols.append(idx[c])
        vals.append(b[r, c])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(system.dim, system.dim)
    )


# ---------------------------------------------------------------------------
# high-field eigenbasis
# ---------------------------------------------------------------------------


@dataclass
class _HighFieldBasis:
    energies: np.ndarray  # per eigenstate id
    labels: np.ndarray  # symmetry label per eigenstate id
    vectors: sp.csr_matrix  # columns are eigenstates in the product basis
    sector_states: list[np.ndarray]  # eigenstate ids per total-M sector, ramp order


def _canonical(vals, V, idx):
    """Rotate degenerate clusters onto the basis-index operator and fix signs."""
    cid = _clusters(vals)
    for c in np.flatnonzero(np.bincount(cid) > 1) if cid.size else []:
        cols = np.flatnonzero(cid == c)
        Vc = V[:, cols]
        _, R = np.linalg.eigh(Vc.conj().T @ (idx[:, None] * Vc))
        V[:, cols] = Vc @ R
    k = np.argmax(np.abs(V), axis=0)
    ph = V[k, np.arange(V.shape[1])]
    return V / (ph / np.abs(ph))


def _high_field_basis(system: SpinSystem, field: float, resolve_symmetry: bool) -> _HighFieldBasis:
    spec = HamiltonianSpec(field=field, truncation="secular")
    # blocks of conserved cluster magnetization, with equivalent spins kept together
    # so that every block carries whole group-spin multiplets
    key, _ = conserved_labels(system, spec, merge=[g.members for g in system.groups])
    Hs = build_sparse_hamiltonian(system, spec).tocsr()
    S = _group_spin_sparse(system) if resolve_symmetry else None
    total_m = spin_projections(system.n_spins).sum(axis=0)
    order = np.argsort(key, kind="stable")
    bounds = np.flatnonzero(np.diff(key[order])) + 1
    energies, labels, mz, dom = [], [], [], []
    rows, cols, data = [], [], []
    col = 0
    for idx in np.split(order, bounds):
        Hb = Hs[idx][:, idx].toarray()
        # the Zeeman part is constant within a block; keep it out of eigh
        shift = float(np.mean(np.diag(Hb)))
        H = Hb - shift * np.eye(len(idx))
        if S is not None:
            lab, Q = np.linalg.eigh(S[idx][:, idx].toarray())
            lab = np.round(lab, 6)
            parts = [(l, Q[:, lab == l]) for l in np.unique(lab)]
        else:
            parts = [(0.0, np.eye(len(idx)))]
        for l, Q in parts:
            h = Q.conj().T @ H @ Q
            w, W = np.linalg.eigh(0.5 * (h + h.conj().T))
            V = _canonical(w, (Q @ W).astype(complex), idx.astype(float))
            for j in range(V.shape[1]):
                nz = np.flatnonzero(np.abs(V[:, j]) > 1e-13)
                rows.append(idx[nz])
                cols.append(np.full(len(nz), col))
                data.append(V[nz, j])
                dom.append(idx[np.argmax(np.abs(V[:, j]))])
                col += 1
            energies.append(w + shift)
            labels.append(np.full(len(w), l))
            mz.append(np.full(len(w), total_m[idx[0]]))
    dim = system.dim
    vectors = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim))
    energies, labels, mz, dom = map(np.concatenate, (energies, labels, mz, [np.asarray(dom)]))
    sectors = magnetization_sectors(system.n_spins)
    sector_states = []
    for m in sectors.labels:
        ids = np.flatnonzero(np.isclose(mz, m))
        ids = ids[np.argsort(energies[ids], kind="stable")]
        cid = _clusters(energies[ids])
        sector_states.append(ids[np.lexsort((dom[ids], cid))])
    return _HighFieldBasis(energies, labels, vectors, sector_states)


def _transfer_blocks(system, basis: _HighFieldBasis, t_mix: float, config: TocsyConfig, cache: EigenCache):
    """Population-transfer matrix per sector: HF → shuttle → mixing field (t_mix) → shuttle → HF."""
    low = cache.labelled(config.shuttle_field)
    mix = cache(config.mixing_field).sector_view()
    out = []
    for ids, (_, V2, l2), (E, W) in zip(basis.sector_states, low, mix):
        if len(ids) == 0:
            out.append((ids, np.zeros((0, 0))))
            continue
        # pair by energy rank within each symmetry label (both sides are energy ordered)
        l1 = basis.labels[ids] if cache.symmetry is not None else np.zeros(len(ids))
        c1 = np.lexsort((np.arange(len(l1)), l1))
        c2 = np.lexsort((np.arange(len(l2)), l2))
        if not np.array_equal(l1[c1], l2[c2]):
            raise ValueError("symmetry labels differ between the high and low field eigenbases")
        V = V2[:, c2]
        U = (W * np.exp(-2j * np.pi * E * t_mix)) @ W.conj().T
        A = V.conj().T @ U @ V
        out.append((ids[c1], np.abs(A) ** 2))
    return out


# ---------------------------------------------------------------------------
# time-domain data
# ---------------------------------------------------------------------------


def _rotating_energies(system, basis: _HighFieldBasis, carriers: dict[str, float]) -> np.ndarray:
    """Eigen-energies in the frame rotating at each isotope's carrier."""
    m = spin_projections(system.n_spins)
    # eigenstates have definite isotope magnetizations; read them off the dominant component
    dom = np.asarray(np.abs(basis.vectors).argmax(axis=0)).ravel()
    E = basis.energies.copy()
    for sym, nu in carriers.items():
        members = _members(system, sym)
        gamma = system.spins[members[0]].isotope.gamma
        E += np.sign(gamma) * nu * m[members][:, dom].sum(axis=0)
    return E


def _coherences(rho0t: sp.coo_matrix, E: np.ndarray, flip: sp.csr_matrix | None):
    """(rows, cols, coefficients, frequencies) of the t1-evolved state.

    Without ``flip`` the state is Σ c·e^{-2πiνt}|j⟩⟨k| with ν = E_j − E_k.
    With an ideal π pulse at t1/2 the frequency is the mean of the
    frequencies before and after the pulse.
    """
    j, k, c = rho0t.row, rho0t.col, rho0t.data
    if flip is None:
        return j, k, c, E[j] - E[k]
    F = flip.tocsc()
    rows, cols, coef, freq = [], [], [], []
    for jj, kk, cc in zip(j, k, c):
        a0, a1 = F.indptr[jj], F.indptr[jj + 1]
        b0, b1 = F.indptr[kk], F.indptr[kk + 1]
        ra, va = F.indices[a0:a1], F.data[a0:a1]
        rb, vb = F.indices[b0:b1], F.data[b0:b1]
        ca = np.repeat(ra, len(rb))
        cb = np.tile(rb, len(ra))
        rows.append(ca)
        cols.append(cb)
        coef.append(cc * np.outer(va, vb.conj()).ravel())
        freq.append(0.5 * (E[jj] - E[kk] + E[ca] - E[cb]))
    return tuple(np.concatenate(x) for x in (rows, cols, coef, freq))


def tocsy_time_data(
    system: SpinSystem,
    t1_grid,
    t2_grid,
    t_mix: float,
    observe_f2: str = "15N",
    evolve_f1: str = "1H",
    refocus_13C: bool = False,
    config: TocsyConfig | None = None,
    cache: EigenCache | None = None,
) -> tuple[np.ndarray, dict]:
    """Hypercomplex States-TPPI data, shape (2, len(t1), len(t2)).

    Index 0 holds the FIDs with x-phase excitation, index 1 those with
    y-phase excitation.  Odd t1 increments carry the TPPI inversion of the
    excitation and receiver phases.
    """
    config = config or TocsyConfig()
    t1 = np.asarray(t1_grid, dtype=float)
    t2 = np.asarray(t2_grid, dtype=float)
    if t1.size == 0 or t2.size == 0:
        raise ValueError("t1 and t2 grids must not be empty")
    for g in (t1, t2):
        if g.size > 1 and not np.allclose(np.diff(g), g[1] - g[0], rtol=1e-9, atol=1e-15):
            raise ValueError("t1 and t2 grids must be uniform")
    if t_mix < 0:
        raise ValueError("t_mix must be non-negative")
    f1_spins = _members(system, evolve_f1)
    f2_spins = _members(system, observe_f2)
    if refocus_13C:
        c_spins = [i for i, s in enumerate(system.spins) if s.isotope.symbol == "13C"]
        if evolve_f1 == "13C":
            raise ValueError("refocusing 13C while evolving 13C in t1 removes the f1 shift")
    cache = cache or EigenCache(system)

    B = config.high_field
    basis = _high_field_basis(system, B, cache.symmetry is not None)
    Phi = basis.vectors
    PhiH = Phi.conj().T.tocsr()

    def carrier(sym, spins):
        gamma = system.spins[spins[0]].isotope.gamma
        shift = 0.5 * (min(system.spins[i].shift for i in spins) + max(system.spins[i].shift for i in spins))
        return abs(gamma) * 1e6 * B * (1 + shift * 1e-6), abs(gamma) * 1e6 * B

    nu1, larmor1 = carrier(evolve_f1, f1_spins)
    nu2, larmor2 = carrier(observe_f2, f2_spins)
    E1 = _rotating_energies(system, basis, {evolve_f1: nu1})

    # storage and detection pulses in the eigenbasis
    Rt = (PhiH @ pulse_operator(system, f1_spins, np.pi / 2, -np.pi / 2) @ Phi).tocsc()
    Pt = (PhiH @ pulse_operator(system, f2_spins, np.pi / 2, np.pi / 2) @ Phi).tocsr()
    flip = None
    if refocus_13C and c_spins:
        flip = (PhiH @ pulse_operator(system, c_spins, np.pi, 0.0) @ Phi).tocsr()
        flip.data[np.abs(flip.data) < 1e-13] = 0
        flip.eliminate_zeros()

    transfer = _transfer_blocks(system, basis, t_mix, config, cache)

    # detection: line (j,k) has amplitude Σ_i Pt_ji conj(Pt_ki) q_i · ⟨j|F^-|k⟩
    L = (PhiH @ _lowering(system, f2_spins) @ Phi).tocoo()
    keep = np.abs(L.data) > 1e-12
    lj, lk, lv = L.row[keep], L.col[keep], L.data[keep]
    Y = Pt[lk].multiply(Pt[lj].conj()).tocsr()
    Y = sp.diags(lv) @ Y
    gamma2 = system.spins[f2_spins[0]].isotope.gamma
    nu_lines = np.sign(gamma2) * (basis.energies[lj] - basis.energies[lk]) - nu2
    if gamma2 < 0:
        Y = Y.conj()
    E2 = np.exp(2j * np.pi * np.outer(nu_lines, t2))

    gamma1 = system.spins[f1_spins[0]].isotope.gamma
    axial = None
    if config.axial:
        others = [i for i in range(system.n_spins) if i not in f1_spins]
        zt = PhiH @ _z_operator(system, others, [system.spins[i].isotope.gamma / gamma1 for i in others]) @ Phi
        axial = np.real(zt.diagonal())

    out = np.zeros((2, t1.size, t2.size), dtype=complex)
    tppi = (-1.0) ** np.arange(t1.size)
    for q, phase in enumerate((0.0, 0.5 * np.pi)):
        rho0t = (PhiH @ _transverse(system, f1_spins, phase) @ Phi).tocoo()
        rho0t.data[np.abs(rho0t.data) < 1e-13] = 0
        rho0t.eliminate_zeros()
        j, k, c, nu = _coherences(rho0t, E1, flip)
        # stored populations for every t1: p_i(t1) = Σ_e Rt_ij conj(Rt_ik) c_e e^{-2πiν_e t1}
        G = Rt[:, j].multiply(Rt[:, k].conj()).tocsr()
        phases = np.exp(-2j * np.pi * np.outer(nu, t1)) * c[:, None]
        P = np.real(G @ phases)
        # TPPI: excitation inverted on odd increments
        P = P * tppi
        if axial is not None:
            P = P + axial[:, None]
        Q = np.zeros_like(P)
        for ids, T in transfer:
            if len(ids):
                Q[ids] = T @ P[ids]
        amps = Y @ Q  # (lines, t1)
        # receiver inverted on odd increments
        out[q] = (amps * tppi).T @ E2
    meta = {
        "f1_isotope": evolve_f1,
        "f2_isotope": observe_f2,
        "f1_carrier_Hz": nu1 - larmor1,
        "f2_carrier_Hz": nu2 - larmor2,
        "f1_larmor_Hz": larmor1,
        "f2_larmor_Hz": larmor2,
        "high_field_T": B,
        "t_mix_s": float(t_mix),
        "refocus_13C": bool(refocus_13C),
        "transfer_time_s": TRANSFER_TIME,
        "transfer_note": "transfer time logged only; ideal adiabatic map without extra evolution",
    }
    return out, meta


def _fft_axis(n: int, dwell: float) -> np.ndarray:
    return np.fft.fftshift(np.fft.fftfreq(n, dwell))


def process_2d(data: np.ndarray, dwell1: float, dwell2: float, f1_size: int, f2_size: int) -> np.ndarray:
    """cos² windows in both dimensions, zero filling and States-TPPI Fourier transform.

    Returns the real (absorption) matrix indexed ``[f1, f2]`` on centred axes.
    """
    n1, n2 = data.shape[1:]
    if f1_size < n1 or f2_size < n2:
        raise ValueError("processed sizes must not be smaller than the acquired sizes")
    d = data * apodization(n2, dwell2, "cos2")[None, None, :]
    d = d * apodization(n1, dwell1, "cos2")[None, :, None]
    d[:, :, 0] *= 0.5
    d[:, 0, :] *= 0.5
    spec2 = np.fft.fftshift(np.fft.fft(d, n=f2_size, axis=2), axes=2)
    # the paired TPPI inversions cancel for t1-modulated signal, while axial
    # signal keeps the alternation and lands on the f1 edge
    hyper = spec2[0].real + 1j * spec2[1].real
    spec = np.fft.fftshift(np.fft.fft(hyper, n=f1_size, axis=0), axes=0)
    return spec.real


def tocsy2d(
    system: SpinSystem,
    t1_grid=None,
    t2_grid=None,
    t_mix: float = 0.05,
    observe_f2: str = "15N",
    evolve_f1: str = "1H",
    refocus_13C: bool = False,
    config: TocsyConfig | None = None,
    cache: EigenCache | None = None,
) -> Spectrum2D:
    """Simulated 2D ZULF-TOCSY spectrum (f1 = ``evolve_f1``, f2 = ``observe_f2``).

    Both axes are offsets in Hz from the bare Larmor frequency of their
    isotope at the high field, so chemical shifts appear at δ·ν₀.
    ``metadata`` carries ppm axes and the run parameters.

    Examples
    --------
    >>> from zulfchain.io import parse_spin_text
    >>> s = parse_spin_text('''
    ... [spins]
    ... N 15N 245
    ... H 1H 2.0
    ... [couplings]
    ... N H 3.0
    ... ''').system
    >>> spec = tocsy2d(s, t_mix=0.05)
    >>> spec.matrix.shape
    (512, 4096)
    """
    config = config or TocsyConfig()
    t1 = default_t1_grid() if t1_grid is None else np.asarray(t1_grid, dtype=float)
    t2 = default_t2_grid() if t2_grid is None else np.asarray(t2_grid, dtype=float)
    data, meta = tocsy_time_data(system, t1, t2, t_mix, observe_f2, evolve_f1, refocus_13C, config, cache)
    dwell1 = t1[1] - t1[0] if t1.size > 1 else 1.0
    dwell2 = t2[1] - t2[0] if t2.size > 1 else 1.0
    matrix = process_2d(data, dwell1, dwell2, config.f1_size, config.f2_size)
    f1 = _fft_axis(config.f1_size, dwell1) + meta["f1_carrier_Hz"]
    f2 = _fft_axis(config.f2_size, dwell2) + meta["f2_carrier_Hz"]
    meta.update(
        f1_ppm=f1 / meta["f1_larmor_Hz"] * 1e6,
        f2_ppm=f2 / meta["f2_larmor_Hz"] * 1e6,
        t1_points=int(t1.size),
        t2_points=int(t2.size),
        window="cos2",
    )
    return Spectrum2D(matrix, f1, f2, evolve_f1, observe_f2, "States-TPPI", meta)


# ---------------------------------------------------------------------------
# analysis helpers
# ---------------------------------------------------------------------------


def ridge_intensity(spectrum: Spectrum2D, f1_centre: float, halfwidth: float) -> float:
    """Largest |amplitude| with f1 within ``halfwidth`` Hz of ``f1_centre``."""
    sel = np.abs(spectrum.f1 - f1_centre) <= halfwidth
    if not sel.any():
        return 0.0
    return float(np.max(np.abs(spectrum.matrix[sel])))


def f1_multiplet_spread(spectrum: Spectrum2D, f1_centre: float, halfwidth: float) -> float:
    """Intensity-weighted RMS distance from ``f1_centre`` of the f1 skyline projection."""
    sel = np.abs(spectrum.f1 - f1_centre) <= halfwidth
    w = np.max(np.abs(spectrum.matrix[sel]), axis=1)
    if not w.sum():
        return 0.0
    d = spectrum.f1[sel] - f1_centre
    return float(np.sqrt(np.sum(w * d * d) / np.sum(w)))
