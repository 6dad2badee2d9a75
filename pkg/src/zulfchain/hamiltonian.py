"""Field-dependent Zeeman + isotropic J Hamiltonians and block diagonalization.

All Hamiltonians are stored as H/h in Hz.  The J term carries the explicit
minus sign ``H_J/h = -Σ_{a<b} J_ab I_a·I_b``; observables only depend on
eigenvalue differences, so spectra do not depend on that global sign.

Both the Zeeman term (field along z) and the isotropic J term conserve total
I_z, so every Hamiltonian built here is block diagonal over total-M sectors.
With secular truncation the conserved set is larger: the z-magnetization of
every cluster of spins connected by retained flip-flop terms is conserved,
and :func:`diagonalize` uses that finer partition.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .spins import BlockOperator, SpinSystem, magnetization_sectors, spin_projections

log = logging.getLogger(__name__)

__all__ = [
    "HamiltonianSpec",
    "EigenBlock",
    "EigenSystem",
    "rotating_frame_allowed",
    "larmor_frequencies",
    "retained_flip_pairs",
    "build_j_hamiltonian",
    "build_zeeman_hamiltonian",
    "build_total_hamiltonian",
    "build_sparse_hamiltonian",
    "hamiltonian_blocks",
    "block_decompose",
    "diagonalize",
    "conserved_labels",
    "group_spin_operator",
]

TRUNCATIONS = ("full", "secular")


@dataclass(frozen=True)
class HamiltonianSpec:
    """Field (T), truncation mode and the homonuclear weak-coupling threshold."""

    field: float = 0.0
    truncation: str = "full"
    strong_coupling_factor: float = 10.0

    def __post_init__(self):
        if not np.isfinite(self.field) or self.field < 0:
            raise ValueError(f"field must be a finite value >= 0 T, got {self.field}")
        if self.truncation not in TRUNCATIONS:
            raise ValueError(f"truncation must be one of {TRUNCATIONS}, got {self.truncation!r}")
        if self.strong_coupling_factor <= 0:
            raise ValueError("strong_coupling_factor must be positive")


def larmor_frequencies(system: SpinSystem, field: float) -> np.ndarray:
    """Signed Larmor frequencies γ·B·(1 + δ·1e-6) in Hz, shift included."""
    return system.gammas * 1e6 * field * (1.0 + system.shifts * 1e-6)


def retained_flip_pairs(system: SpinSystem, spec: HamiltonianSpec) -> list[tuple[int, int]]:
    """Coupled pairs (a < b) whose flip-flop part survives the truncation."""
    if spec.truncation == "secular" and spec.field == 0:
        raise ValueError("secular truncation requested at zero field")
    J = system.couplings
    a_idx, b_idx = np.nonzero(np.triu(J != 0.0, k=1))
    if spec.truncation == "full":
        return list(zip(a_idx.tolist(), b_idx.tolist()))
    nu = larmor_frequencies(system, spec.field)
    iso = system.isotopes
    keep = []
    for a, b in zip(a_idx.tolist(), b_idx.tolist()):
        if iso[a] != iso[b]:
            continue
        if abs(nu[a] - nu[b]) > spec.strong_coupling_factor * abs(J[a, b]):
            continue
        keep.append((a, b))
    return keep


def _terms(system: SpinSystem, spec: HamiltonianSpec, rotating: bool = False):
    """Diagonal and flip-flop matrix elements of H/h in the product basis.

    ``rotating`` keeps only the shift part of the Zeeman term.
    """
    n = system.n_spins
    m = spin_projections(n)
    if rotating:
        nu = system.gammas * spec.field * system.shifts
    else:
        nu = larmor_frequencies(system, spec.field)
    diag = -(nu[:, None] * m).sum(axis=0) if n else np.zeros(1)
    J = system.couplings
    a_idx, b_idx = np.nonzero(np.triu(J != 0.0, k=1))
    for a, b in zip(a_idx, b_idx):
        diag = diag - J[a, b] * m[a] * m[b]
    rows, cols, vals = [], [], []
    states = np.arange(2**n)
    for a, b in retained_flip_pairs(system, spec):
        differ = np.flatnonzero(m[a] != m[b])
        mask = (1 << (n - 1 - a)) | (1 << (n - 1 - b))
        rows.append(states[differ])
        cols.append(states[differ] ^ mask)
        vals.append(np.full(len(differ), -0.5 * J[a, b]))
    if rows:
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    return diag, rows, cols, vals


def build_j_hamiltonian(system: SpinSystem) -> np.ndarray:
    """Isotropic coupling Hamiltonian ``-Σ J_ab I_a·I_b`` as a dense real matrix (Hz)."""
    return build_total_hamiltonian(system, HamiltonianSpec(field=0.0))


def build_zeeman_hamiltonian(system: SpinSystem, field: float) -> np.ndarray:
    """``-Σ_a γ_a B (1 + δ_a·1e-6) I_az`` (Hz), diagonal in the product basis."""
    if field < 0:
        raise ValueError("field must be >= 0")
    m = spin_projections(system.n_spins)
    nu = larmor_frequencies(system, field)
    return np.diag(-(nu[:, None] * m).sum(axis=0))


def build_total_hamiltonian(system: SpinSystem, spec: HamiltonianSpec) -> np.ndarray:
    """Zeeman + J Hamiltonian as a dense real matrix (Hz)."""
    diag, rows, cols, vals = _terms(system, spec)
    H = np.diag(diag)
    H[rows, cols] = vals
    return H


def build_sparse_hamiltonian(system: SpinSystem, spec: HamiltonianSpec) -> sp.csr_matrix:
    diag, rows, cols, vals = _terms(system, spec)
    dim = system.dim
    r = np.concatenate([np.arange(dim), rows])
    c = np.concatenate([np.arange(dim), cols])
    v = np.concatenate([diag, vals])
    return sp.csr_matrix((v, (r, c)), shape=(dim, dim))


def hamiltonian_blocks(system: SpinSystem, spec: HamiltonianSpec) -> BlockOperator:
    """The Hamiltonian cut into total-M sector blocks without forming the dense matrix."""
    diag, rows, cols, vals = _terms(system, spec)
    sectors = magnetization_sectors(system.n_spins)
    blocks = []
    sec_of_row = sectors.sector_of[rows]
    for k, idx in enumerate(sectors.indices):
        b = np.diag(diag[idx])
        sel = sec_of_row == k
        b[sectors.position[rows[sel]], sectors.position[cols[sel]]] = vals[sel]
        blocks.append(b)
    return BlockOperator(sectors, blocks)


def conserved_labels(
    system: SpinSystem, spec: HamiltonianSpec, merge: Sequence[Sequence[int]] = ()
) -> tuple[np.ndarray, list[list[int]]]:
    """Per-state block keys for the finest conserved-magnetization partition.

    Returns an integer key per basis state and the spin clusters whose
    z-magnetizations are separately conserved.  Each collection of spins in
    ``merge`` is forced into one cluster.
    """
    n = system.n_spins
    pairs = list(retained_flip_pairs(system, spec))
    for group in merge:
        group = list(group)
        pairs += [(group[0], b) for b in group[1:]]
    if n == 0:
        return np.zeros(1, dtype=np.int64), []
    graph = sp.coo_matrix(
        (np.ones(len(pairs)), ([p[0] for p in pairs], [p[1] for p in pairs])), shape=(n, n)
    )
    n_comp, comp = connected_components(graph, directed=False)
    clusters = [np.flatnonzero(comp == c).tolist() for c in range(n_comp)]
    m = spin_projections(n)
    key = np.zeros(2**n, dtype=np.int64)
    for cl in clusters:
        # number of down spins in the cluster, mixed-radix encoded
        downs = np.rint(len(cl) / 2 - m[cl].sum(axis=0)).astype(np.int64)
        key = key * (len(cl) + 1) + downs
    return key, clusters


# ---------------------------------------------------------------------------
# eigen-systems
# ---------------------------------------------------------------------------


def _degeneracy_tol(values: np.ndarray) -> float:
    scale = float(np.max(np.abs(values))) if values.size else 0.0
    return 1e-13 * scale + 1e-9


def _clusters(values: np.ndarray, tol: float) -> np.ndarray:
    """Cluster id per (sorted) eigenvalue; consecutive values within ``tol`` share an id."""
    if values.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([[0], np.cumsum(np.diff(values) > tol)])


def _canonical_eigh(block: np.ndarray, basis_index: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """eigh with degenerate subspaces rotated onto the product basis.

    Within a degenerate cluster the eigenvectors are chosen to diagonalize the
    basis-index operator, which makes them as close as possible to single
    basis states and orders them by their dominant basis index.
    """
    if np.iscomplexobj(block) and not np.any(block.imag):
        block = block.real
    if block.shape == (1, 1):
        return np.real(np.diag(block)).astype(float), np.ones((1, 1), dtype=block.dtype), 0
    values, vectors = np.linalg.eigh(block)
    cid = _clusters(values, _degeneracy_tol(values))
    n_deg = 0
    if cid.size and cid[-1] + 1 < len(values):
        order_op = np.diag(basis_index.astype(float))
        for c in np.unique(cid):
            cols = np.flatnonzero(cid == c)
            if len(cols) < 2:
                continue
            n_deg += 1
            Vc = vectors[:, cols]
            _, W = np.linalg.eigh(Vc.conj().T @ order_op @ Vc)
            vectors[:, cols] = Vc @ W
            values[cols] = values[cols].mean()
    # fix the arbitrary sign: largest component real positive
    k = np.argmax(np.abs(vectors), axis=0)
    phase = vectors[k, np.arange(vectors.shape[1])]
    phase = phase / np.abs(phase)
    vectors = vectors / phase.conj() if np.iscomplexobj(vectors) else vectors * np.sign(phase)
    return values, vectors, n_deg


@dataclass(frozen=True, eq=False)
class EigenBlock:
    label: tuple
    mz: float
    indices: np.ndarray
    values: np.ndarray
    vectors: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Eigenvalues (Hz) and eigenvectors, stored block by block.

    ``blocked`` is False when the Hamiltonian did not commute with total I_z
    and a single dense diagonalization was used instead.
    """

    n_spins: int
    blocks: tuple[EigenBlock, ...]
    blocked: bool = True
    degenerate_clusters: int = 0
    frame: str = "lab"

    @property
    def dim(self) -> int:
        return 2**self.n_spins

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.concatenate([b.values for b in self.blocks])

    @property
    def block_sizes(self) -> tuple[int, ...]:
        return tuple(b.size for b in self.blocks)

    @property
    def block_labels(self) -> tuple:
        return tuple(b.label for b in self.blocks)

    def reconstruct(self) -> np.ndarray:
        """V diag(λ) V† as a dense matrix."""
        dtype = np.result_type(*(b.vectors for b in self.blocks))
        H = np.zeros((self.dim, self.dim), dtype=dtype)
        for b in self.blocks:
            H[np.ix_(b.indices, b.indices)] = (b.vectors * b.values) @ b.vectors.conj().T
        return H

    def vector_matrix(self) -> sp.csr_matrix:
        """Sparse V whose columns are the eigenvectors in block order (built once, then cached)."""
        cached = self.__dict__.get("_vector_matrix")
        if cached is not None:
            return cached
        sizes = np.array([b.size for b in self.blocks])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        rows = np.concatenate([np.repeat(b.indices, b.size) for b in self.blocks])
        cols = np.concatenate([np.tile(np.arange(b.size) + o, b.size) for b, o in zip(self.blocks, offsets)])
        vals = np.concatenate([b.vectors.ravel() for b in self.blocks])
        out = sp.csr_matrix((vals, (rows, cols)), shape=(self.dim, self.dim))
        out.eliminate_zeros()
        object.__setattr__(self, "_vector_matrix", out)
        return out

    def state_mz(self) -> np.ndarray:
        """Total M of every eigenstate, in block order."""
        return np.concatenate([np.full(b.size, b.mz) for b in self.blocks])

    def sector_view(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per total-M sector: (ascending eigenvalues, eigenvectors in sector-local rows).

        Within a sector, eigenvalues that coincide within tolerance are ordered
        by the global basis index of each eigenvector's dominant component.
        """
        if not self.blocked:
            raise ValueError("eigen-system was not blocked by magnetization; no sector view")
        sectors = magnetization_sectors(self.n_spins)
        out = []
        for k, m in enumerate(sectors.labels):
            members = [b for b in self.blocks if b.mz == m]
            n_s = sectors.sizes[k]
            dtype = np.result_type(*(b.vectors for b in members)) if members else float
            V = np.zeros((n_s, n_s), dtype=dtype)
            vals = np.empty(n_s)
            dom = np.empty(n_s, dtype=np.int64)
            col = 0
            for b in members:
                rows = sectors.position[b.indices]
                V[rows, col:col + b.size] = b.vectors
                vals[col:col + b.size] = b.values
                dom[col:col + b.size] = b.indices[np.argmax(np.abs(b.vectors), axis=0)]
                col += b.size
            if col != n_s:
                raise ValueError(f"blocks do not tile sector M={m}")
            order = np.argsort(vals, kind="stable")
            cid = _clusters(vals[order], _degeneracy_tol(vals))
            order = order[np.lexsort((dom[order], cid))]
            out.append((vals[order], V[:, order]))
        return out

    def propagator(self, t: float) -> BlockOperator:
        """exp(-2πi H t) as total-M blocks."""
        sectors = magnetization_sectors(self.n_spins)
        blocks = []
        for vals, V in self.sector_view():
            blocks.append((V * np.exp(-2j * np.pi * vals * t)) @ V.conj().T)
        return BlockOperator(sectors, blocks)

    def dump(self) -> str:
        """Text dump: one line per block with its label and eigenvalues."""
        lines = [f"# eigen-system: {self.n_spins} spins, {len(self.blocks)} blocks, blocked={self.blocked}"]
        for b in self.blocks:
            vals = " ".join(f"{v:.9f}" for v in b.values)
            lines.append(f"block M={b.mz:+g} label={b.label} size={b.size}: {vals}")
        return "\n".join(lines) + "\n"


def _eigen_from_partition(diag, rows, cols, vals, key, n_spins) -> EigenSystem:
    dim = 2**n_spins
    mz = spin_projections(n_spins).sum(axis=0) if n_spins else np.zeros(1)
    # order blocks by total M (descending) then key
    uniq, inverse = np.unique(key, return_inverse=True)
    block_mz = np.zeros(len(uniq))
    block_mz[inverse] = mz
    order = np.lexsort((uniq, -block_mz))
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    bid = rank[inverse]
    members = np.argsort(bid, kind="stable")
    bounds = np.searchsorted(bid[members], np.arange(len(uniq) + 1))
    position = np.empty(dim, dtype=np.int64)
    for k in range(len(uniq)):
        idx = members[bounds[k]:bounds[k + 1]]
        position[idx] = np.arange(len(idx))
    # group flip elements by block
    fb = bid[rows]
    forder = np.argsort(fb, kind="stable")
    fbounds = np.searchsorted(fb[forder], np.arange(len(uniq) + 1))
    mats = []
    for k in range(len(uniq)):
        idx = members[bounds[k]:bounds[k + 1]]
        h = np.diag(diag[idx].astype(vals.dtype if vals.size else diag.dtype))
        sel = forder[fbounds[k]:fbounds[k + 1]]
        h[position[rows[sel]], position[cols[sel]]] = vals[sel]
        mats.append((idx, h))
    eigs = _batched_canonical_eigh(mats)
    blocks, n_deg = [], 0
    for k, ((idx, _), (values, vectors, nd)) in enumerate(zip(mats, eigs)):
        n_deg += nd
        m = float(mz[idx[0]])
        blocks.append(EigenBlock((m, int(uniq[order[k]])), m, idx, values, vectors))
    return EigenSystem(n_spins, tuple(blocks), True, n_deg)


def _batched_canonical_eigh(mats):
    """``_canonical_eigh`` over many blocks, stacking equal small sizes into one LAPACK call.

    Blocks with a degenerate spectrum fall back to the per-block routine.
    """
    out = [None] * len(mats)
    by_size = {}
    for k, (idx, h) in enumerate(mats):
        by_size.setdefault(len(idx), []).append(k)
    for size, ks in by_size.items():
        if size > 8 or len(ks) < 8:
            for k in ks:
                out[k] = _canonical_eigh(mats[k][1], mats[k][0])
            continue
        H = np.stack([mats[k][1] for k in ks])
        if np.iscomplexobj(H) and not np.any(H.imag):
            H = H.real
        values, vectors = np.linalg.eigh(H)
        scale = np.max(np.abs(values), axis=1)
        tol = 1e-13 * scale + 1e-9
        degenerate = np.any(np.diff(values, axis=1) <= tol[:, None], axis=1)
        kmax = np.argmax(np.abs(vectors), axis=1)
        phase = np.take_along_axis(vectors, kmax[:, None, :], axis=1)
        phase = phase / np.abs(phase)
        vectors = vectors / phase.conj() if np.iscomplexobj(vectors) else vectors * np.sign(phase)
        for j, k in enumerate(ks):
            if degenerate[j]:
                out[k] = _canonical_eigh(mats[k][1], mats[k][0])
            else:
                out[k] = (values[j], vectors[j], 0)
    return out


def rotating_frame_allowed(system: SpinSystem, spec: HamiltonianSpec) -> bool:
    """True when every retained flip-flop pair is homonuclear.

    The bare Zeeman term then commutes with everything kept and can be
    dropped before diagonalizing.
    """
    sym = [s.isotope.symbol for s in system.spins]
    return all(sym[a] == sym[b] for a, b in retained_flip_pairs(system, spec))


def diagonalize(
    system: SpinSystem, spec: HamiltonianSpec, partition: str = "fine", frame: str = "lab"
) -> EigenSystem:
    """Blocked eigen-decomposition built straight from the Hamiltonian terms.

    ``partition='total'`` uses total-M sectors; ``'fine'`` additionally splits
    by the separately conserved cluster magnetizations (identical to total-M
    when the retained flip-flop graph is connected).

    ``frame='rotating'`` leaves out the bare Zeeman term ``-Σ γ_a B I_az``
    (chemical shifts stay), so eigenvalues are of order kHz rather than
    hundreds of MHz and keep their absolute precision.  The eigenvectors are
    those of the lab frame.  It needs the fine partition and
    :func:`rotating_frame_allowed`.
    """
    if frame not in ("lab", "rotating"):
        raise ValueError("frame must be 'lab' or 'rotating'")
    if frame == "rotating" and (partition != "fine" or not rotating_frame_allowed(system, spec)):
        raise ValueError("rotating frame needs the fine partition and homonuclear flip-flop terms only")
    diag, rows, cols, vals = _terms(system, spec, rotating=frame == "rotating")
    if partition == "total":
        key = np.zeros(system.dim, dtype=np.int64)
    elif partition == "fine":
        key, _ = conserved_labels(system, spec)
    else:
        raise ValueError("partition must be 'fine' or 'total'")
    eig = _eigen_from_partition(diag, rows, cols, vals, key, system.n_spins)
    return replace(eig, frame=frame) if frame != "lab" else eig


def block_decompose(
    H: np.ndarray | BlockOperator, system: SpinSystem | int, atol: float = 1e-10
) -> EigenSystem:
    """Diagonalize ``H`` sector by sector over total magnetization.

    If ``H`` does not commute with total I_z (relative tolerance ``atol``)
    the blocking is refused and one dense diagonalization is returned with
    ``blocked=False``.
    """
    n = system if isinstance(system, (int, np.integer)) else system.n_spins
    sectors = magnetization_sectors(n)
    if isinstance(H, BlockOperator):
        blocks = H.blocks
    else:
        H = np.asarray(H)
        if H.shape != (2**n, 2**n):
            raise ValueError(f"Hamiltonian of shape {H.shape} does not match {n} spins")
        off = sectors.sector_of[:, None] != sectors.sector_of[None, :]
        scale = float(np.max(np.abs(H))) if H.size else 0.0
        leak = float(np.max(np.abs(H[off]), initial=0.0))
        if leak > atol * max(scale, 1e-300):
            log.warning("Hamiltonian does not commute with total Iz (leak %.3g); not blocking", leak)
            values, vectors, nd = _canonical_eigh(H, np.arange(2**n))
            block = EigenBlock((None,), float("nan"), np.arange(2**n), values, vectors)
            return EigenSystem(n, (block,), False, nd)
        blocks = [H[np.ix_(i, i)] for i in sectors.indices]
    out, n_deg = [], 0
    for m, idx, h in zip(sectors.labels, sectors.indices, blocks):
        values, vectors, nd = _canonical_eigh(np.asarray(h), idx)
        n_deg += nd
        out.append(EigenBlock((m,), m, idx, values, vectors))
    return EigenSystem(n, tuple(out), True, n_deg)


def group_spin_operator(system: SpinSystem) -> BlockOperator | None:
    """``Σ_g 10^g F_g²`` over the equivalence groups, or None if there are none.

    Every F_g² commutes with the Hamiltonian at any field (members of a group
    share shift and couplings), so eigenstates can be labelled by the group
    spins.  The powers of ten keep the combined label unique.
    """
    if not system.groups:
        return None
    K = np.zeros((system.n_spins, system.n_spins))
    const = 0.0
    for g, grp in enumerate(system.groups):
        w = 10.0**g
        m = list(grp.members)
        K[np.ix_(m, m)] = -2.0 * w
        const += 0.75 * len(m) * w
    np.fill_diagonal(K, 0.0)
    op = hamiltonian_blocks(system.with_couplings(K), HamiltonianSpec(field=0.0))
    return BlockOperator(op.sectors, [b + const * np.eye(len(b)) for b in op.blocks])


def scaled_couplings(system: SpinSystem, factor: float) -> SpinSystem:
    return system.with_couplings(system.couplings * factor)


def permuted(system: SpinSystem, perm: Sequence[int]) -> SpinSystem:
    """Relabel spins: new spin k is old spin ``perm[k]``."""
    perm = list(perm)
    inv = {old: new for new, old in enumerate(perm)}
    groups = tuple(type(g)(g.name, tuple(sorted(inv[m] for m in g.members))) for g in system.groups)
    return SpinSystem(
        tuple(system.spins[p] for p in perm),
        system.couplings[np.ix_(perm, perm)],
        groups,
        system.name,
    )
