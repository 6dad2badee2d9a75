import numpy as np
import pytest

from zulfchain.io import data_path, read_spin_file
from zulfchain.spins import Spin, SpinSystem, isotope


def make_system(specs, couplings=None, name="test"):
    """Small helper: ``specs`` is a list of (label, isotope, shift[, count])."""
    spins = tuple(Spin(s[0], isotope(s[1]), float(s[2]), *(s[3:])) for s in specs)
    n = len(spins)
    J = np.zeros((n, n))
    labels = [s.label for s in spins]
    for (a, b), v in (couplings or {}).items():
        i, j = labels.index(a), labels.index(b)
        J[i, j] = J[j, i] = v
    return SpinSystem(spins, J, (), name)


@pytest.fixture(scope="session")
def reference():
    return read_spin_file(data_path())


@pytest.fixture(scope="session")
def butyronitrile(reference):
    return reference.system


@pytest.fixture
def ch_pair():
    return make_system([("C", "13C", 0.0), ("H", "1H", 0.0)], {("C", "H"): 135.2})
