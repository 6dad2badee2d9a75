"""Spin-system data model and product-basis spin operators.

Basis convention
----------------
The product basis of N spin-1/2 nuclei is ordered with spin 0 as the most
significant bit, i.e. operators are embedded as ``A_0 ⊗ A_1 ⊗ ... ⊗ A_{N-1}``.
Bit value 0 is the ``|α⟩`` (m = +1/2) state, so basis index 0 is the fully
up state and basis index ``2**N - 1`` the fully down state.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .constants import GYROMAGNETIC_RATIOS

__all__ = [
    "Isotope",
    "Spin",
    "EquivalenceGroup",
    "SpinSystem",
    "Sectors",
    "BlockOperator",
    "isotope",
    "expand_equivalence",
    "single_spin_operator",
    "total_spin_operator",
    "spin_projections",
    "magnetization_sectors",
]

PAULI = {
    "x": np.array([[0.0, 0.5], [0.5, 0.0]]),
    "y": np.array([[0.0, -0.5j], [0.5j, 0.0]]),
    "z": np.array([[0.5, 0.0], [0.0, -0.5]]),
}


@dataclass(frozen=True)
class Isotope:
    """A spin-1/2 nuclear isotope.

    ``gamma`` is the gyromagnetic ratio divided by 2π, in MHz/T (signed).
    """

    symbol: str
    gamma: float
    spin: float = 0.5

    def __post_init__(self):
        if self.spin != 0.5:
            raise ValueError(f"{self.symbol}: only spin-1/2 nuclei are supported")
        if not np.isfinite(self.gamma) or self.gamma == 0.0:
            raise ValueError(f"{self.symbol}: gyromagnetic ratio must be finite and nonzero")

    def larmor(self, field: float) -> float:
        """Signed bare Larmor frequency in Hz at ``field`` tesla."""
        return self.gamma * 1e6 * field


def isotope(symbol: str, table: dict[str, float] | None = None) -> Isotope:
    table = GYROMAGNETIC_RATIOS if table is None else table
    try:
        return Isotope(symbol, table[symbol])
    except KeyError:
        raise ValueError(f"unknown isotope symbol {symbol!r}") from None


@dataclass(frozen=True)
class Spin:
    """One site of a spin system.

    ``count`` > 1 describes a compact site standing for ``count`` magnetically
    equivalent nuclei (e.g. a CH3 group); :func:`expand_equivalence` turns it
    into individual spins.
    """

    label: str
    isotope: Isotope
    shift: float = 0.0
    count: int = 1


@dataclass(frozen=True)
class EquivalenceGroup:
    name: str
    members: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class SpinSystem:
    """Isotopes, chemical shifts (ppm) and the symmetric J matrix (Hz)."""

    spins: tuple[Spin, ...]
    couplings: np.ndarray
    groups: tuple[EquivalenceGroup, ...] = ()
    name: str = ""

    def __post_init__(self):
        spins = tuple(self.spins)
        n = len(spins)
        J = np.array(self.couplings, dtype=float, copy=True).reshape(n, n) if n else np.zeros((0, 0))
        if not np.all(np.isfinite(J)):
            raise ValueError("coupling matrix contains non-finite values")
        if not np.array_equal(J, J.T):
            bad = np.argwhere(J != J.T)[0]
            raise ValueError(
                f"coupling matrix is not symmetric: J[{bad[0]},{bad[1]}]={J[bad[0], bad[1]]} "
                f"vs J[{bad[1]},{bad[0]}]={J[bad[1], bad[0]]}"
            )
        if np.any(np.diag(J) != 0.0):
            raise ValueError("coupling matrix must have a zero diagonal")
        J.setflags(write=False)
        labels = [s.label for s in spins]
        if len(set(labels)) != n:
            raise ValueError("spin labels must be unique")
        for s in spins:
            if s.count < 1:
                raise ValueError(f"{s.label}: group size must be >= 1, got {s.count}")
        seen: set[int] = set()
        groups = tuple(self.groups)
        for g in groups:
            for m in g.members:
                if not 0 <= m < n:
                    raise ValueError(f"group {g.name}: member index {m} out of range")
                if m in seen:
                    raise ValueError(f"spin {labels[m]} appears in more than one equivalence group")
                seen.add(m)
            first = spins[g.members[0]]
            for m in g.members[1:]:
                if spins[m].isotope != first.isotope:
                    raise ValueError(f"group {g.name}: members have conflicting isotopes")
                if spins[m].shift != first.shift:
                    raise ValueError(f"group {g.name}: members have different chemical shifts")
        object.__setattr__(self, "spins", spins)
        object.__setattr__(self, "couplings", J)
        object.__setattr__(self, "groups", groups)

    # -- basic accessors -------------------------------------------------
    @property
    def n_spins(self) -> int:
        return len(self.spins)

    @property
    def dim(self) -> int:
        return 2**self.n_spins

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(s.label for s in self.spins)

    @property
    def isotopes(self) -> tuple[str, ...]:
        return tuple(s.isotope.symbol for s in self.spins)

    @property
    def gammas(self) -> np.ndarray:
        return np.array([s.isotope.gamma for s in self.spins])

    @property
    def shifts(self) -> np.ndarray:
        return np.array([s.shift for s in self.spins])

    @property
    def is_expanded(self) -> bool:
        return all(s.count == 1 for s in self.spins)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"no spin labelled {label!r}") from None

    def coupling(self, a: str | int, b: str | int) -> float:
        a = self.index(a) if isinstance(a, str) else a
        b = self.index(b) if isinstance(b, str) else b
        return float(self.couplings[a, b])

    def with_couplings(self, couplings: np.ndarray) -> "SpinSystem":
        return replace(self, couplings=np.asarray(couplings, dtype=float))

    def with_shifts(self, shifts: Sequence[float]) -> "SpinSystem":
        spins = tuple(replace(s, shift=float(d)) for s, d in zip(self.spins, shifts))
        return replace(self, spins=spins)

    def sites(self) -> list[tuple[str, tuple[int, ...]]]:
        """Detection sites: every equivalence group plus every ungrouped spin.

        Sites are returned in order of their first member index.
        """
        grouped = {m: g for g in self.groups for m in g.members}
        out, done = [], set()
        for i, s in enumerate(self.spins):
            if i in grouped:
                g = grouped[i]
                if g.name not in done:
                    out.append((g.name, tuple(g.members)))
                    done.add(g.name)
            else:
                out.append((s.label, (i,)))
        return out

    def select_sites(self, selectors: Iterable[str] | None) -> list[tuple[str, tuple[int, ...]]]:
        """Sites whose name, member label or isotope matches one of ``selectors``."""
        sites = self.sites()
        if selectors is None:
            return sites
        selectors = list(selectors)
        chosen = []
        for name, members in sites:
            keys = {name, self.spins[members[0]].isotope.symbol} | {self.spins[m].label for m in members}
            if keys & set(selectors):
                chosen.append((name, members))
        unknown = [
            s for s in selectors
            if not any(s in {n, self.spins[m[0]].isotope.symbol} | {self.spins[i].label for i in m} for n, m in sites)
        ]
        if unknown:
            raise ValueError(f"unknown spins or isotopes: {', '.join(unknown)}")
        return chosen

    def subsystem(self, labels: Sequence[str]) -> "SpinSystem":
        """Restrict to the named spins or sites (group names select every member)."""
        names = dict(self.sites())
        idx: list[int] = []
        for lab in labels:
            idx.extend(names[lab] if lab in names else (self.index(lab),))
        idx = sorted(set(idx))
        remap = {old: new for new, old in enumerate(idx)}
        groups = tuple(
            EquivalenceGroup(g.name, tuple(remap[m] for m in g.members))
            for g in self.groups
            if all(m in remap for m in g.members)
        )
        return SpinSystem(
            spins=tuple(self.spins[i] for i in idx),
            couplings=self.couplings[np.ix_(idx, idx)],
            groups=groups,
            name=self.name,
        )

    def __eq__(self, other):
        if not isinstance(other, SpinSystem):
            return NotImplemented
        return (
            self.spins == other.spins
            and self.groups == other.groups
            and np.array_equal(self.couplings, other.couplings)
        )

    def __hash__(self):
        return hash((self.spins, self.groups, self.couplings.tobytes()))

    def __repr__(self):
        return f"SpinSystem({self.name or 'unnamed'}: {self.n_spins} sites, {', '.join(self.labels)})"


def _member_labels(label: str, count: int) -> list[str]:
    if count == 1:
        return [label]
    if count <= 26:
        return [label + string.ascii_lowercase[k] for k in range(count)]
    return [f"{label}_{k}" for k in range(count)]


def expand_equivalence(system: SpinSystem) -> SpinSystem:
    """Expand compact sites (``count`` > 1) into individual, grouped spins.

    Couplings from a group to any other spin are copied to every member and
    couplings between members of one group are set to zero.  Applying the
    function to an already expanded system returns it unchanged.
    """
    if system.is_expanded:
        return system
    spins: list[Spin] = []
    owner: list[int] = []
    groups: list[EquivalenceGroup] = []
    old_groups = {m: g for g in system.groups for m in g.members}
    carried: dict[str, list[int]] = {}
    for i, s in enumerate(system.spins):
        start = len(spins)
        for lab in _member_labels(s.label, s.count):
            spins.append(Spin(lab, s.isotope, s.shift))
            owner.append(i)
        if s.count > 1:
            groups.append(EquivalenceGroup(s.label, tuple(range(start, len(spins)))))
        elif i in old_groups:
            carried.setdefault(old_groups[i].name, []).append(start)
    groups.extend(EquivalenceGroup(name, tuple(m)) for name, m in carried.items())
    owner_arr = np.array(owner)
    J = system.couplings[np.ix_(owner_arr, owner_arr)].copy()
    J[owner_arr[:, None] == owner_arr[None, :]] = 0.0
    groups.sort(key=lambda g: g.members[0])
    return SpinSystem(tuple(spins), J, tuple(groups), system.name)


# ---------------------------------------------------------------------------
# basis bookkeeping
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def spin_projections(n_spins: int) -> np.ndarray:
    """m_a for every spin a and basis state: array of shape (n_spins, 2**n_spins)."""
    states = np.arange(2**n_spins)
    bits = (states[None, :] >> (n_spins - 1 - np.arange(n_spins))[:, None]) & 1
    m = 0.5 - bits.astype(float)
    m.setflags(write=False)
    return m


@dataclass(frozen=True, eq=False)
class Sectors:
    """Total-magnetization sectors of the product basis, highest M first."""

    n_spins: int
    labels: tuple[float, ...]
    indices: tuple[np.ndarray, ...]
    position: np.ndarray = field(repr=False)  # basis index -> position within its sector
    sector_of: np.ndarray = field(repr=False)  # basis index -> sector number

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(i) for i in self.indices)

    @property
    def dim(self) -> int:
        return 2**self.n_spins

    def __len__(self):
        return len(self.labels)


@lru_cache(maxsize=32)
def magnetization_sectors(n_spins: int) -> Sectors:
    total = spin_projections(n_spins).sum(axis=0) if n_spins else np.zeros(1)
    labels = tuple(float(m) for m in np.arange(n_spins / 2, -n_spins / 2 - 0.5, -1.0))
    position = np.empty(2**n_spins, dtype=np.int64)
    sector_of = np.empty(2**n_spins, dtype=np.int64)
    indices = []
    for k, m in enumerate(labels):
        idx = np.flatnonzero(total == m)
        idx.setflags(write=False)
        position[idx] = np.arange(len(idx))
        sector_of[idx] = k
        indices.append(idx)
    return Sectors(n_spins, labels, tuple(indices), position, sector_of)


class BlockOperator:
    """Operator that is block diagonal over total-magnetization sectors."""

    __array_priority__ = 20

    def __init__(self, sectors: Sectors, blocks: Sequence[np.ndarray]):
        if len(blocks) != len(sectors):
            raise ValueError("one block per sector required")
        for b, n in zip(blocks, sectors.sizes):
            if b.shape != (n, n):
                raise ValueError(f"block of shape {b.shape} does not match sector size {n}")
        self.sectors = sectors
        self.blocks = tuple(blocks)

    @classmethod
    def from_dense(
        cls, matrix: np.ndarray, sectors: Sectors | None = None, atol: float | None = 1e-12
    ) -> "BlockOperator":
        """Cut ``matrix`` into sector blocks.

        Raises if an off-block entry exceeds ``atol`` times the largest entry;
        ``atol=None`` skips the check and silently drops off-block parts.
        """
        n = int(round(np.log2(matrix.shape[0])))
        sectors = sectors or magnetization_sectors(n)
        if atol is not None:
            off = sectors.sector_of[:, None] != sectors.sector_of[None, :]
            scale = float(np.max(np.abs(matrix))) if matrix.size else 0.0
            leak = float(np.max(np.abs(matrix[off]), initial=0.0))
            if leak > atol * max(scale, 1e-300):
                raise ValueError(f"matrix is not block diagonal over magnetization sectors (leak {leak:.3g})")
        return cls(sectors, [matrix[np.ix_(i, i)].copy() for i in sectors.indices])

    @classmethod
    def from_diagonal(cls, diag: np.ndarray, sectors: Sectors | None = None) -> "BlockOperator":
        n = int(np.log2(len(diag)))
        sectors = sectors or magnetization_sectors(n)
        return cls(sectors, [np.diag(diag[i]) for i in sectors.indices])

    @property
    def dim(self) -> int:
        return self.sectors.dim

    @property
    def shape(self) -> tuple[int, int]:
        return (self.dim, self.dim)

    @property
    def dtype(self):
        return np.result_type(*self.blocks)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim), dtype=self.dtype)
        for idx, b in zip(self.sectors.indices, self.blocks):
            out[np.ix_(idx, idx)] = b
        return out

    def diagonal(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=self.dtype)
        for idx, b in zip(self.sectors.indices, self.blocks):
            out[idx] = np.diag(b)
        return out

    def trace(self):
        return sum(np.trace(b) for b in self.blocks)

    def dagger(self) -> "BlockOperator":
        return BlockOperator(self.sectors, [b.conj().T for b in self.blocks])

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(b))) for b in self.blocks if b.size), default=0.0)

    def eigvalsh(self) -> np.ndarray:
        return np.concatenate([np.linalg.eigvalsh(b) for b in self.blocks])

    def _binary(self, other, op):
        if isinstance(other, BlockOperator):
            return BlockOperator(self.sectors, [op(a, b) for a, b in zip(self.blocks, other.blocks)])
        if np.isscalar(other):
            return BlockOperator(self.sectors, [op(a, other) for a in self.blocks])
        return NotImplemented

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, other):
        if np.isscalar(other):
            return BlockOperator(self.sectors, [a * other for a in self.blocks])
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        if isinstance(other, BlockOperator):
            return BlockOperator(self.sectors, [a @ b for a, b in zip(self.blocks, other.blocks)])
        return NotImplemented

    def __repr__(self):
        return f"BlockOperator(dim={self.dim}, sectors={self.sectors.sizes})"


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def _n_of(system: SpinSystem | int) -> int:
    return system if isinstance(system, (int, np.integer)) else system.n_spins


def single_spin_operator(system: SpinSystem | int, index: int, axis: str) -> np.ndarray:
    """``1 ⊗ … ⊗ I_axis ⊗ … ⊗ 1`` with the spin-1/2 operator at ``index``.

    The result is real for the x and z axes and complex for y.
    """
    n = _n_of(system)
    if not 0 <= index < n:
        raise IndexError(f"spin index {index} out of range for {n} spins")
    try:
        op = PAULI[axis]
    except KeyError:
        raise ValueError(f"axis must be one of x, y, z; got {axis!r}") from None
    left = np.eye(2**index)
    right = np.eye(2 ** (n - index - 1))
    return np.kron(np.kron(left, op), right)


def total_spin_operator(
    system: SpinSystem | int, axis: str, subset: Iterable[int] | None = None
) -> np.ndarray:
    """Sum of :func:`single_spin_operator` over ``subset`` (all spins if empty)."""
    n = _n_of(system)
    subset = sorted(set(subset)) if subset else list(range(n))
    for i in subset:
        if not 0 <= i < n:
            raise IndexError(f"spin index {i} out of range for {n} spins")
    if axis == "z":
        # diagonal, so skip the Kronecker products
        return np.diag(spin_projections(n)[subset].sum(axis=0))
    out = None
    for i in subset:
        term = single_spin_operator(n, i, axis)
        out = term if out is None else out + term
    return out
