import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_system
from zulfchain.spins import (
    EquivalenceGroup,
    Isotope,
    Spin,
    SpinSystem,
    expand_equivalence,
    isotope,
    magnetization_sectors,
    single_spin_operator,
    total_spin_operator,
)

SIGMA = {
    "x": np.array([[0, 0.5], [0.5, 0]]),
    "y": np.array([[0, -0.5j], [0.5j, 0]]),
    "z": np.array([[0.5, 0], [0, -0.5]]),
}


def kron_oracle(n, index, axis):
    # independent brute-force construction from a list of 2x2 factors
    factors = [np.eye(2)] * n
    factors[index] = SIGMA[axis]
    out = np.array([[1.0]])
    for f in factors:
        out = np.einsum("ij,kl->ikjl", out, f).reshape(out.shape[0] * 2, out.shape[1] * 2)
    return out


def test_isotope_validation():
    with pytest.raises(ValueError):
        Isotope("X", 0.0)
    with pytest.raises(ValueError):
        Isotope("X", float("nan"))
    with pytest.raises(ValueError):
        Isotope("X", 1.0, spin=1.0)
    with pytest.raises(ValueError):
        isotope("2H")
    assert isotope("15N").gamma < 0


def test_single_spin_z_one_spin():
    assert np.allclose(single_spin_operator(1, 0, "z"), np.diag([0.5, -0.5]))


def test_single_spin_z_msb_convention():
    assert np.allclose(np.diag(single_spin_operator(2, 0, "z")), [0.5, 0.5, -0.5, -0.5])


def test_single_spin_x_matches_kron_oracle():
    assert np.array_equal(single_spin_operator(3, 1, "x"), kron_oracle(3, 1, "x"))


@pytest.mark.parametrize("n,index,axis", [(1, 0, "y"), (2, 1, "y"), (4, 2, "z"), (4, 0, "x")])
def test_single_spin_against_oracle(n, index, axis):
    assert np.allclose(single_spin_operator(n, index, axis), kron_oracle(n, index, axis))


def test_single_spin_errors():
    with pytest.raises(IndexError):
        single_spin_operator(2, 2, "z")
    with pytest.raises(IndexError):
        single_spin_operator(2, -1, "z")
    with pytest.raises(ValueError):
        single_spin_operator(2, 0, "w")


def test_total_spin_z_two_spins():
    assert np.allclose(np.diag(total_spin_operator(2, "z")), [1, 0, 0, -1])


def test_total_spin_singleton_subset():
    for axis in "xyz":
        assert np.allclose(total_spin_operator(3, axis, [1]), single_spin_operator(3, 1, axis))


def test_total_spin_bad_subset():
    with pytest.raises(IndexError):
        total_spin_operator(2, "x", [0, 5])


def test_proton_total_z_traceless(butyronitrile):
    protons = [i for i, s in enumerate(butyronitrile.spins) if s.isotope.symbol == "1H"]
    assert len(protons) == 7
    Fz = total_spin_operator(butyronitrile, "z", protons)
    assert Fz.shape == (4096, 4096)
    assert abs(np.trace(Fz)) < 1e-12


@pytest.mark.parametrize("n", [1, 2, 3])
def test_angular_momentum_commutators(n):
    for a in range(n):
        ops = {ax: single_spin_operator(n, a, ax) for ax in "xyz"}
        for p, q, r in (("x", "y", "z"), ("y", "z", "x"), ("z", "x", "y")):
            comm = ops[p] @ ops[q] - ops[q] @ ops[p]
            assert np.max(np.abs(comm - 1j * ops[r])) <= 1e-12


def test_distinct_spins_commute():
    n = 3
    for a, b in itertools.combinations(range(n), 2):
        for p, q in itertools.product("xyz", repeat=2):
            A, B = single_spin_operator(n, a, p), single_spin_operator(n, b, q)
            assert np.max(np.abs(A @ B - B @ A)) <= 1e-14


@given(n=st.integers(1, 4), data=st.data())
@settings(max_examples=30, deadline=None)
def test_operators_traceless(n, data):
    index = data.draw(st.integers(0, n - 1))
    axis = data.draw(st.sampled_from("xyz"))
    assert abs(np.trace(single_spin_operator(n, index, axis))) < 1e-14


def test_expand_butyronitrile(reference):
    sysx = reference.system
    assert sysx.n_spins == 12
    iso = sysx.isotopes
    assert iso.count("13C") == 4 and iso.count("15N") == 1 and iso.count("1H") == 7
    assert [g.name for g in sysx.groups] == ["H6", "H7", "H8"]
    assert sysx.coupling("N1", "C2") == 17.37
    # intra-group couplings zero, replication to every member
    for g in sysx.groups:
        m = list(g.members)
        assert np.all(sysx.couplings[np.ix_(m, m)] == 0)
    assert sysx.coupling("C5", "H8a") == sysx.coupling("C5", "H8c") == 126.09


def test_expand_identity_without_groups(ch_pair):
    assert expand_equivalence(ch_pair) is ch_pair


def test_expand_two_member_group():
    compact = SpinSystem(
        (Spin("A", isotope("1H"), 1.0, 2), Spin("X", isotope("13C"), 0.0)),
        np.array([[0, 5.0], [5.0, 0]]),
    )
    full = expand_equivalence(compact)
    assert full.labels == ("Aa", "Ab", "X")
    assert full.coupling("Aa", "X") == full.coupling("Ab", "X") == 5.0
    assert full.coupling("Aa", "Ab") == 0.0
    assert full.groups == (EquivalenceGroup("A", (0, 1)),)


def test_expand_idempotent(reference):
    once = expand_equivalence(reference.compact)
    assert expand_equivalence(once) == once


def test_invalid_systems():
    H = isotope("1H")
    with pytest.raises(ValueError):
        SpinSystem((Spin("A", H), Spin("B", H)), np.array([[0, 1.0], [2.0, 0]]))
    with pytest.raises(ValueError):
        SpinSystem((Spin("A", H),), np.array([[1.0]]))
    with pytest.raises(ValueError):
        SpinSystem((Spin("A", H, 0.0, 0),), np.zeros((1, 1)))
    with pytest.raises(ValueError, match="conflicting isotopes"):
        SpinSystem((Spin("A", H), Spin("B", isotope("13C"))), np.zeros((2, 2)), (EquivalenceGroup("g", (0, 1)),))
    with pytest.raises(ValueError, match="more than one"):
        SpinSystem(
            (Spin("A", H), Spin("B", H)),
            np.zeros((2, 2)),
            (EquivalenceGroup("g", (0, 1)), EquivalenceGroup("h", (1,))),
        )


def test_sector_sizes_binomial():
    assert magnetization_sectors(12).sizes == (1, 12, 66, 220, 495, 792, 924, 792, 495, 220, 66, 12, 1)


def test_subsystem_selects_group(butyronitrile):
    sub = butyronitrile.subsystem(["C5", "H8"])
    assert sub.labels == ("C5", "H8a", "H8b", "H8c")
    assert sub.groups[0].members == (1, 2, 3)


def test_make_system_helper_symmetric():
    s = make_system([("A", "1H", 0), ("B", "1H", 1)], {("A", "B"): 3.0})
    assert s.coupling("B", "A") == 3.0
