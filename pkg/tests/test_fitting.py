import numpy as np
import pytest

from conftest import make_system
from zulfchain.fitting import (
    FitParameterSet,
    Parameter,
    _escape_probe,
    fit,
    j_parameter,
    jacobian,
    residual,
    shift_parameter,
    synthesize_targets,
)

FIELD = 16.440801


def three_spin():
    return make_system(
        [("C", "13C", 20.0), ("H", "1H", 2.0), ("N", "15N", 245.0)],
        {("C", "H"): 130.0, ("C", "N"): -9.5, ("H", "N"): 2.5},
    )


def params_for(system, names=None, **kw):
    pairs = names or [(a, b) for a, b in (("C", "H"), ("C", "N"), ("H", "N"))]
    return FitParameterSet(system, tuple(j_parameter(system, a, b) for a, b in pairs), FIELD, **kw)


def test_parameter_validation():
    with pytest.raises(ValueError):
        Parameter("x", "J", 1.0, lower=2.0, upper=1.0)
    with pytest.raises(ValueError):
        Parameter("x", "colour", 1.0)
    with pytest.raises(ValueError):
        Parameter("lw", "linewidth", 0.0)
    s = three_spin()
    with pytest.raises(ValueError):
        j_parameter(s, "C", "C")
    with pytest.raises(ValueError):
        j_parameter(s, "C", "Q")
    with pytest.raises(ValueError):
        FitParameterSet(s, (j_parameter(s, "C", "H"), j_parameter(s, "H", "C")), FIELD)
    with pytest.raises(ValueError):
        FitParameterSet(s, (), FIELD, linewidth=0.0)


def test_residual_zero_at_truth():
    p = params_for(three_spin())
    targets = synthesize_targets(p, ["1H", "13C", "15N"])
    r = residual(p, targets)
    assert np.linalg.norm(r) < 1e-8


def test_residual_grows_with_perturbation():
    s = make_system([("C", "13C", 20.0), ("H", "1H", 2.0)], {("C", "H"): 135.2})
    p = params_for(s, [("C", "H")])
    targets = synthesize_targets(p, ["1H"])
    r0 = np.linalg.norm(residual(p, targets))
    r1 = np.linalg.norm(residual(p, targets, p.values + 1.0))
    assert r1 > 0 and r1 > r0


def test_residual_needs_targets():
    with pytest.raises(ValueError):
        residual(params_for(three_spin()), [])


def test_forward_vs_central_jacobian():
    p = params_for(three_spin())
    targets = synthesize_targets(p, ["1H", "13C", "15N"])
    x = p.values + np.array([0.3, -0.2, 0.1])
    fwd = jacobian(p, targets, x)
    cen = jacobian(p, targets, x, central=True)
    # forward differences carry an O(h / linewidth) error; a kink would be far larger
    rel = np.linalg.norm(fwd - cen, axis=0) / np.linalg.norm(cen, axis=0)
    assert np.all(rel <= 1e-2)


def test_start_at_truth_fixed_point():
    p = params_for(three_spin())
    targets = synthesize_targets(p, ["1H", "13C", "15N"])
    res = fit(p, targets)
    assert res.converged
    assert res.iterations <= 2
    assert np.max(np.abs(res.parameters.values - p.values)) <= 1e-6


def test_escape_probe_finds_linewidth_displacement():
    p = params_for(three_spin())
    targets = synthesize_targets(p, ["1H", "13C", "15N"])
    x = p.values.copy()
    x[2] += p.linewidth  # J(H,N) one linewidth too large
    cost = float(np.sum(residual(p, targets, x) ** 2))
    probe, n = _escape_probe(p, targets, x, cost)
    assert n == 12
    assert probe is not None and probe[1] < 1e-12 * cost
    assert np.allclose(probe[0], p.values)


def test_escape_probe_quiet_at_optimum():
    p = params_for(three_spin())
    targets = synthesize_targets(p, ["1H", "13C", "15N"])
    probe, _ = _escape_probe(p, targets, p.values, 0.0)
    assert probe is None


def test_escape_disabled_matches_plain_run():
    p = params_for(three_spin())
    targets = synthesize_targets(p, ["1H", "13C", "15N"])
    start = p.with_values(p.values + 0.3)
    a = fit(start, targets, escape_rounds=0, check_signs=False)
    b = fit(start, targets, check_signs=False)
    # the plain run already reaches the global minimum, so no probe fires
    assert a.iterations == b.iterations
    assert np.array_equal(a.parameters.values, b.parameters.values)
    assert b.evaluations > a.evaluations


def test_round_trip_three_spin():
    p = params_for(three_spin())
    targets = synthesize_targets(p, ["1H", "13C", "15N"])
    start = p.with_values(p.values + 0.5 * np.sign(p.values))
    res = fit(start, targets)
    assert res.converged
    assert res.residual_norm <= res.initial_residual_norm
    assert np.all(np.diff(res.history) <= 0)
    assert np.max(np.abs(res.parameters.values - p.values)) < 0.05
    assert "J(C,H)" in res.report() and "J(C,H).uncertainty" in res.keyvalue()


def test_noisy_round_trip_uncertainties():
    p = params_for(three_spin())
    targets = synthesize_targets(p, ["1H", "13C", "15N"], noise=0.01, seed=3)
    start = p.with_values(p.values + 0.5)
    res = fit(start, targets)
    assert res.uncertainties_available
    assert np.all(res.uncertainties >= 0)
    assert np.max(np.abs(res.parameters.values - p.values)) < 0.1


def test_noise_is_seeded():
    p = params_for(three_spin())
    a = synthesize_targets(p, ["1H"], noise=0.01, seed=5)[0][0].amplitudes
    b = synthesize_targets(p, ["1H"], noise=0.01, seed=5)[0][0].amplitudes
    c = synthesize_targets(p, ["1H"], noise=0.01, seed=6)[0][0].amplitudes
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_target_order_invariance():
    p = params_for(three_spin())
    targets = synthesize_targets(p, ["1H", "13C", "15N"])
    start = p.with_values(p.values + np.array([0.4, -0.3, 0.2]))
    a = fit(start, targets, check_signs=False)
    b = fit(start, targets[::-1], check_signs=False)
    assert np.max(np.abs(a.parameters.values - b.parameters.values)) <= 1e-8


def test_bounds_respected():
    s = make_system([("C", "13C", 20.0), ("H", "1H", 2.0)], {("C", "H"): 135.2})
    truth = params_for(s, [("C", "H")])
    targets = synthesize_targets(truth, ["1H"])
    boxed = FitParameterSet(s, (j_parameter(s, "C", "H", 134.0, 135.0, value=134.5),), FIELD)
    res = fit(boxed, targets)
    assert 134.0 <= res.parameters.values[0] <= 135.0
    assert res.parameters.values[0] == pytest.approx(135.0)
    with pytest.raises(ValueError):
        fit(FitParameterSet(s, (j_parameter(s, "C", "H", 0, 1, value=5.0),), FIELD), targets)


def test_shift_parameter_fit():
    s = make_system([("C", "13C", 20.0), ("H", "1H", 2.0)], {("C", "H"): 135.2})
    truth = FitParameterSet(s, (shift_parameter(s, "H"),), FIELD)
    targets = synthesize_targets(truth, ["1H"])
    res = fit(truth.with_values([2.0004]), targets)
    assert res.parameters.values[0] == pytest.approx(2.0, abs=1e-6)


def test_sign_ambiguity_reported():
    # a lone heteronuclear doublet cannot tell the sign of J
    s = make_system([("C", "13C", 20.0), ("H", "1H", 2.0)], {("C", "H"): 135.2})
    p = params_for(s, [("C", "H")])
    res = fit(p, synthesize_targets(p, ["1H"]))
    assert res.sign_ambiguous == ["J(C,H)"]


def test_singular_uncertainties_unavailable():
    # the C-N coupling does not show in a 1H-only spectrum
    p = params_for(three_spin(), [("C", "N")])
    res = fit(p, synthesize_targets(p, ["1H"]), check_signs=False)
    assert not res.uncertainties_available


def test_from_config(reference):
    p = FitParameterSet.from_config(reference.system, reference.fit)
    assert p.field == 16.440801 and p.truncation == "secular"
    assert len(p.parameters) == 25
    assert "J(N1,C2)" in p.names and "J(N1,C5)" not in p.names
    # group couplings are one parameter each
    assert "J(H6,H7)" in p.names
    custom = FitParameterSet.from_config(
        reference.system, {"field": 9.4, "free_j": ["N1-C2"], "free_shift": ["H6"], "j_bounds": (0.0, 30.0)}
    )
    assert custom.names == ["J(N1,C2)", "shift(H6)"]
    assert custom.upper[0] == 30.0
    with pytest.raises(ValueError):
        FitParameterSet.from_config(reference.system, {"free_j": ["all"]})


def test_group_parameter_applies_to_all_members(reference):
    p = FitParameterSet.from_config(reference.system, {"field": 9.4, "free_j": ["C5-H8"]})
    system, *_ = p.model([100.0])
    assert system.coupling("C5", "H8a") == system.coupling("C5", "H8c") == 100.0


@pytest.mark.parametrize("seed", range(4))
def test_random_small_system_round_trip(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    iso = ["1H", "13C", "15N"]
    specs = [(f"S{i}", iso[i % 3] if i < 3 else iso[rng.integers(3)], float(rng.uniform(0, 200))) for i in range(n)]
    J = {}
    for a in range(n):
        for b in range(a + 1, n):
            J[(f"S{a}", f"S{b}")] = float(rng.choice([-1, 1]) * rng.uniform(3, 150))
    s = make_system(specs, J)
    truth = params_for(s, list(J))
    observe = sorted(set(s.isotopes))
    targets = synthesize_targets(truth, observe)
    start = truth.with_values(truth.values + rng.uniform(-0.5, 0.5, len(J)))
    res = fit(start, targets, check_signs=False)
    # ten times the 0.05 Hz uncertainty floor
    assert np.max(np.abs(res.parameters.values - truth.values)) <= 0.5
