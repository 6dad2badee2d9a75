"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from conftest import make_system
from zulfchain.dynamics import DensityMatrix, adiabatic_ramp, canonical_schedule, propagate
from zulfchain.fitting import FitParameterSet, fit, synthesize_targets
from zulfchain.hamiltonian import (
    HamiltonianSpec,
    build_sparse_hamiltonian,
    build_total_hamiltonian,
    diagonalize,
    scaled_couplings,
)
from zulfchain.spectra import (
    default_tau_grid,
    indirect_j_series,
    pick_peaks,
    process_1d,
    zulf_stick_spectrum,
)
from zulfchain.tocsy import f1_multiplet_spread, ridge_intensity, tocsy2d

J_CH3 = 126.09  # C5-H8
J_CH2 = 130.61  # C4-H7


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line past the capture, then assert."""

    def report(criterion: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"criterion {criterion}: {detail}"

    return report


def nearest(freqs, target):
    freqs = np.asarray(freqs)
    return float(freqs[np.argmin(np.abs(freqs - target))]) if freqs.size else np.inf


# ---------------------------------------------------------------------------
# 1, 2: XA3 and XA2 signatures
# ---------------------------------------------------------------------------


def test_criterion_1_xa3_signature(butyronitrile, verdict):
    system = butyronitrile.subsystem(["C5", "H8"])
    start = time.perf_counter()
    series = indirect_j_series(system, canonical_schedule(), default_tau_grid(256, 0.5e-3), observe=["C5"])
    spec = process_1d(series["C5"], "none", zero_fill=4)
    elapsed = time.perf_counter() - start
    sticks = zulf_stick_spectrum(system)
    peaks = sorted(pick_peaks(spec, 0.1), key=lambda p: -p.amplitude)[:2]
    found = sorted(p.frequency for p in peaks)
    stick_f = sorted(ln.frequency for ln in sorted(sticks, key=lambda ln: -abs(ln.intensity))[:2])
    ok = (
        len(found) == 2
        and abs(found[0] - J_CH3) <= 2.0
        and abs(found[1] - 2 * J_CH3) <= 2.0
        and abs(stick_f[0] - J_CH3) <= 0.1
        and abs(stick_f[1] - 2 * J_CH3) <= 0.1
        and elapsed < 1.0
    )
    verdict("1", ok, f"FFT peaks {np.round(found, 2)} Hz, sticks {np.round(stick_f, 4)} Hz, "
                     f"expected {J_CH3}/{2 * J_CH3}; {elapsed:.3f} s")


def test_criterion_2_xa2_signature(butyronitrile, verdict):
    system = butyronitrile.subsystem(["C4", "H7"])
    start = time.perf_counter()
    sticks = zulf_stick_spectrum(system)
    elapsed = time.perf_counter() - start
    top = max(sticks, key=lambda ln: abs(ln.intensity))
    peak = abs(top.intensity)
    at_2j = max((abs(ln.intensity) for ln in sticks if abs(ln.frequency - 2 * J_CH2) <= 0.5), default=0.0)
    ok = abs(top.frequency - 195.92) <= 0.1 and at_2j <= 1e-8 * peak and elapsed < 1.0
    verdict("2", ok, f"dominant stick {top.frequency:.4f} Hz (3J/2 = {1.5 * J_CH2:.3f}), "
                     f"2J stick {at_2j / peak:.1e} relative; {elapsed:.3f} s")


# ---------------------------------------------------------------------------
# 3: full 12-spin field cycling
# ---------------------------------------------------------------------------


def test_criterion_3_full_system(reference, verdict):
    system = reference.system
    start = time.perf_counter()
    eig = diagonalize(system, HamiltonianSpec(field=50e-9))
    t_eig = time.perf_counter() - start
    # 1024 points: 256 do not separate the dense 12-spin multiplets
    series = indirect_j_series(system, reference.schedule, default_tau_grid(1024, 0.5e-3), observe=["C3", "C4", "C5"])
    markers = {"C5": [J_CH3, 2 * J_CH3], "C4": [1.5 * J_CH2], "C3": [1.5 * 135.2]}
    misses, found = [], {}
    for site, wanted in markers.items():
        freqs = [p.frequency for p in pick_peaks(process_1d(series[site], "none", zero_fill=4), 0.1)]
        for m in wanted:
            f = nearest(freqs, m)
            found[f"{site}@{m:.2f}"] = round(f, 2)
            if abs(f - m) > 2.0:
                misses.append(f"{site}@{m:.2f}")
    ok = not misses and eig.blocked and eig.dim == 4096 and t_eig < 300
    verdict("3", ok, f"nearest peaks {found}; misses {misses}; blocked eigendecomposition {t_eig:.1f} s")


# ---------------------------------------------------------------------------
# 4: Hamiltonian properties
# ---------------------------------------------------------------------------


def _sparse_total_spin(n):
    ops = {"x": np.array([[0, 0.5], [0.5, 0]]), "y": np.array([[0, -0.5j], [0.5j, 0]]), "z": np.diag([0.5, -0.5])}
    out = {}
    for axis, p in ops.items():
        total = sp.csr_matrix((2**n, 2**n), dtype=complex)
        for i in range(n):
            total = total + sp.kron(sp.kron(sp.identity(2**i), p), sp.identity(2 ** (n - i - 1)), format="csr")
        out[axis] = total
    return out


def test_criterion_4_hamiltonian_properties(butyronitrile, verdict):
    s = butyronitrile
    H = build_total_hamiltonian(s, HamiltonianSpec(field=50e-6))
    herm = float(np.max(np.abs(H - H.conj().T)) / np.max(np.abs(H)))
    HJ = build_sparse_hamiltonian(s, HamiltonianSpec(field=0.0))
    F = _sparse_total_spin(s.n_spins)
    comm = max(float(np.max(np.abs((HJ @ F[a] - F[a] @ HJ).data), initial=0.0)) for a in "xyz")
    blocked = np.sort(diagonalize(s, HamiltonianSpec(field=0.0), partition="total").eigenvalues)
    dense = np.linalg.eigvalsh(HJ.toarray())
    eig_diff = float(np.max(np.abs(blocked - dense)))
    c = 1.7
    scaled = np.sort(diagonalize(scaled_couplings(s, c), HamiltonianSpec(field=0.0)).eigenvalues)
    base = np.sort(diagonalize(s, HamiltonianSpec(field=0.0)).eigenvalues)
    lin = float(np.max(np.abs(scaled - c * base)) / np.max(np.abs(c * base)))
    ok = herm <= 1e-12 and comm <= 1e-10 and eig_diff <= 1e-8 and lin <= 1e-10
    verdict("4", ok, f"hermiticity {herm:.1e}, max|[H_J,F]| {comm:.1e} Hz, "
                     f"blocked vs dense {eig_diff:.1e} Hz, J-scaling {lin:.1e}")


# ---------------------------------------------------------------------------
# 5: propagation oracle
# ---------------------------------------------------------------------------


def _random_system(rng):
    n = int(rng.integers(1, 5))
    iso = ["1H", "13C", "15N"]
    specs = [(f"S{i}", iso[int(rng.integers(3))], float(rng.uniform(0, 200))) for i in range(n)]
    J = {(f"S{a}", f"S{b}"): float(rng.uniform(-200, 200)) for a in range(n) for b in range(a + 1, n)}
    return make_system(specs, J, name=f"random{n}")


def test_criterion_5_propagation_oracle(verdict):
    rng = np.random.default_rng(20240501)
    worst_u, worst_cons = 0.0, 0.0
    for _ in range(20):
        s = _random_system(rng)
        field = float(10 ** rng.uniform(-9, -4))
        spec = HamiltonianSpec(field=field)
        H = build_total_hamiltonian(s, spec)
        A = rng.standard_normal((s.dim, s.dim)) + 1j * rng.standard_normal((s.dim, s.dim))
        rho0 = A @ A.conj().T
        rho0 /= np.trace(rho0).real
        rho = DensityMatrix(rho0)
        eig = diagonalize(s, spec)
        for _ in range(5):
            t = float(rng.uniform(0, 0.02))
            new = propagate(rho, eig, t)
            U = scipy.linalg.expm(-2j * np.pi * H * t)
            oracle = U @ rho.to_dense() @ U.conj().T
            worst_u = max(worst_u, float(np.max(np.abs(new.to_dense() - oracle))))
            worst_cons = max(worst_cons, abs(new.trace() - rho.trace()), abs(new.purity() - rho.purity()))
            rho = new
    ok = worst_u <= 1e-8 and worst_cons <= 1e-10
    verdict("5", ok, f"max entry difference {worst_u:.1e}, trace/purity drift {worst_cons:.1e} per step")


# ---------------------------------------------------------------------------
# 6: fit round trip
# ---------------------------------------------------------------------------


def _round_trip(reference, noise):
    truth = FitParameterSet.from_config(reference.system, reference.fit)
    targets = synthesize_targets(truth, reference.fit["observe"], noise=noise, seed=0)
    start = truth.with_values(truth.values + 0.5 * np.sign(truth.values))
    t0 = time.perf_counter()
    res = fit(start, targets, check_signs=False)
    elapsed = time.perf_counter() - t0
    err = np.abs(res.parameters.values - truth.values)
    worst = truth.names[int(np.argmax(err))]
    return res, float(err.max()), worst, elapsed


@pytest.mark.slow
def test_criterion_6_fit_round_trip(reference, verdict):
    res, err, worst, elapsed = _round_trip(reference, 0.0)
    ok = err <= 0.05 and elapsed < 1800
    verdict("6", ok, f"noise-free: {len(res.parameters.names)} free J, max error {err:.4f} Hz ({worst}), "
                     f"{res.iterations} iterations, {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_6_fit_round_trip_noisy(reference, verdict):
    res, err, worst, elapsed = _round_trip(reference, 0.01)
    ok = err <= 0.1 and elapsed < 1800
    verdict("6", ok, f"1% noise: max error {err:.4f} Hz ({worst}), {res.iterations} iterations, {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 7: 2D ZULF-TOCSY
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tocsy_maps(reference):
    s = reference.system
    return {
        "zero": tocsy2d(s, t_mix=0.0),
        "mixed": tocsy2d(s, t_mix=0.05),
        "refocused": tocsy2d(s, t_mix=0.05, refocus_13C=True),
    }


def test_criterion_7a_no_cross_ridges_without_mixing(tocsy_maps, verdict):
    # a known failure; the analysis is in the decisions ledger
    ratio = np.abs(tocsy_maps["zero"].matrix).max() / np.abs(tocsy_maps["mixed"].matrix).max()
    verdict("7a", ratio <= 1e-6, f"t_mix = 0 cross-ridge maximum is {ratio:.2e} of the 50 ms maximum (limit 1e-6)")


def test_criterion_7b_cross_ridges_and_refocusing(tocsy_maps, reference, verdict):
    mixed, refoc = tocsy_maps["mixed"], tocsy_maps["refocused"]
    peak = np.abs(mixed.matrix).max()
    larmor = mixed.metadata["f1_larmor_Hz"] * 1e-6
    shifts = {g: reference.system.spins[reference.system.labels.index(g + "a")].shift for g in ("H6", "H7", "H8")}
    ridges = {g: ridge_intensity(mixed, d * larmor, 100.0) / peak for g, d in shifts.items()}
    spreads = {
        g: (f1_multiplet_spread(mixed, d * larmor, 100.0), f1_multiplet_spread(refoc, d * larmor, 100.0))
        for g, d in shifts.items()
    }
    ok = all(r > 1e-2 for r in ridges.values()) and all(b < a for a, b in spreads.values())
    detail = ", ".join(
        f"{g} ridge {ridges[g]:.2f}, spread {spreads[g][0]:.1f}->{spreads[g][1]:.1f} Hz" for g in shifts
    )
    verdict("7b", ok, detail)


# ---------------------------------------------------------------------------
# 8: adiabatic map against a finite sweep
# ---------------------------------------------------------------------------


def _kron_hamiltonian(J, gammas, field):
    """Two-spin H/h in Hz from explicit Kronecker products."""
    sx = np.array([[0, 0.5], [0.5, 0]])
    sy = np.array([[0, -0.5j], [0.5j, 0]])
    sz = np.diag([0.5, -0.5])
    one = np.eye(2)
    H = -J * sum(np.kron(a, a) for a in (sx, sy, sz))
    for g, op in zip(gammas, (np.kron(sz, one), np.kron(one, sz))):
        H = H - g * 1e6 * field * op
    return H


def test_criterion_8_adiabatic_map_vs_sweep(ch_pair, verdict):
    J = ch_pair.coupling("C", "H")
    gammas = [s.isotope.gamma for s in ch_pair.spins]
    high, steps, dt = 9.4, 10_000, 1e-3
    fields = np.append(high * np.geomspace(1.0, 1e-12, steps - 1), 0.0)
    _, V0 = np.linalg.eigh(_kron_hamiltonian(J, gammas, high))
    pops0 = np.array([0.1, 0.2, 0.3, 0.4])
    rho = V0 @ np.diag(pops0) @ V0.conj().T
    for B in fields:
        w, V = np.linalg.eigh(_kron_hamiltonian(J, gammas, B))
        U = (V * np.exp(-2j * np.pi * w * dt)) @ V.conj().T
        rho = U @ rho @ U.conj().T
    # zero-field basis: |αα>, T0, S, |ββ> are also eigenstates of total I_z
    r = 1 / np.sqrt(2)
    basis = np.array([[1, 0, 0, 0], [0, r, r, 0], [0, r, -r, 0], [0, 0, 0, 1]]).T
    swept = np.real(np.diag(basis.T @ rho @ basis))
    ideal = adiabatic_ramp(
        DensityMatrix(V0 @ np.diag(pops0) @ V0.conj().T),
        build_total_hamiltonian(ch_pair, HamiltonianSpec(field=high)),
        build_total_hamiltonian(ch_pair, HamiltonianSpec(field=0.0)),
    ).to_dense()
    mapped = np.real(np.diag(basis.T @ ideal @ basis))
    diff = float(np.max(np.abs(swept - mapped)))
    verdict("8", diff <= 1e-3, f"{steps}-step sweep populations {np.round(swept, 4)}, "
                               f"ideal map {np.round(mapped, 4)}, max difference {diff:.1e}")
