"""Eigen-analysis of Koopman matrices and the state-space fields it induces."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg as sla

from .dynamics import InitialConditionGrid, grid_initial_conditions
from .edmd import KoopmanModel
from .errors import NumericalError, PreconditionError, ValidationError

log = logging.getLogger(__name__)

__all__ = [
    "SpectralDecomposition",
    "EigenfunctionField",
    "Partition",
    "BlockDiagonalization",
    "decompose",
    "unit_multiplicity",
    "data_grid",
    "eigenfunction_field",
    "unit_cluster_fields",
    "localized_cluster_basis",
    "extract_partition",
    "block_diagonalize",
    "group_by_partition",
    "eigenvalue_clusters",
    "write_eigenvalues_csv",
    "write_field_csv",
    "write_partition_csv",
]

DEFAULT_UNIT_TOL = 0.05
DEFAULT_RANK_TOL = 1e-8


def _normalize_phase(V: np.ndarray) -> np.ndarray:
    """Rotate each column so its largest-modulus entry is real positive; unit norm."""
    V = np.array(V, dtype=complex)
    for j in range(V.shape[1]):
        v = V[:, j]
        nrm = np.linalg.norm(v)
        if nrm == 0:
            continue
        k = int(np.argmax(np.abs(v)))
        v = v * (np.abs(v[k]) / v[k]) / nrm
        v[k] = abs(v[k])
        V[:, j] = v
    return V


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Sorted eigenpairs of K plus the indices of the cluster around 1."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    unit_cluster: tuple
    unit_tol: float
    K_norm: float

    def residuals(self, K) -> np.ndarray:
        K = np.asarray(K)
        return np.linalg.norm(K @ self.eigenvectors - self.eigenvectors * self.eigenvalues, axis=0)


def decompose(model, unit_tol: float = DEFAULT_UNIT_TOL) -> SpectralDecomposition:
    """Full eigendecomposition of ``model.K`` (or a bare matrix).

    Eigenvalues are ordered by decreasing modulus, then by distance to 1,
    then by decreasing imaginary part.
    """
    K = np.asarray(model.K if isinstance(model, KoopmanModel) else model)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValidationError(f"K must be square, got {K.shape}")
    if not np.all(np.isfinite(K)):
        raise NumericalError("K has non-finite entries")
    try:
        w, V = np.linalg.eig(K)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed (cond(K) ~ {np.linalg.cond(K):.3e}): {exc}") from exc
    w = w.astype(complex)
    order = np.lexsort((-w.imag, np.abs(w - 1), -np.abs(w)))
    w, V = w[order], _normalize_phase(V[:, order])
    unit = tuple(int(i) for i in np.flatnonzero(np.abs(w - 1) < unit_tol))
    return SpectralDecomposition(w, V, unit, unit_tol, float(np.linalg.norm(K)))


def unit_multiplicity(spec: SpectralDecomposition, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of linearly independent eigenvectors in the unit cluster."""
    if not spec.unit_cluster:
        return 0
    s = np.linalg.svd(spec.eigenvectors[:, list(spec.unit_cluster)], compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > rank_tol * s[0]))


def data_grid(states, resolution: int = 100, pad: float = 0.1) -> InitialConditionGrid:
    """Lattice over the bounding box of ``states`` enlarged by ``pad`` of its span."""
    X = np.asarray(states, dtype=float)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    lo, hi = lo - pad / 2 * span, hi + pad / 2 * span
    return InitialConditionGrid(tuple(lo), tuple(hi), (resolution,) * X.shape[1])


@dataclass(frozen=True, eq=False)
class EigenfunctionField:
    """phi(x) = Psi(x)^T v sampled on the nodes of ``grid``."""

    grid: InitialConditionGrid
    nodes: np.ndarray
    values: np.ndarray
    eigenvalue: complex

    @property
    def peak(self) -> np.ndarray:
        return self.nodes[int(np.argmax(np.abs(self.values)))]


def eigenfunction_field(model: KoopmanModel, eigvec, grid: InitialConditionGrid,
                        eigenvalue: complex = np.nan) -> EigenfunctionField:
    if any(c < 2 for c in grid.counts):
        raise ValidationError("field grids need resolution >= 2 on every axis")
    v = np.asarray(eigvec)
    if v.shape != (model.N,):
        raise ValidationError(f"eigenvector of shape {v.shape} does not match N={model.N}")
    if len(grid.counts) != model.dictionary.dim:
        raise ValidationError("grid dimension does not match the dictionary")
    nodes = grid_initial_conditions(grid)
    values = model.dictionary.evaluate(nodes).T @ v
    if not np.all(np.isfinite(values)):
        raise NumericalError("eigenfunction field is not finite")
    return EigenfunctionField(grid, nodes, values.astype(complex), complex(eigenvalue))


def localized_cluster_basis(Phi: np.ndarray, V: np.ndarray):
    """Re-express a cluster's eigenvectors so each field localizes.

    ``Phi`` holds the cluster fields as columns (nodes x p) and ``V`` the
    matching coefficient vectors. Column-pivoted QR on ``Phi^H`` picks p
    well-separated nodes; the returned basis spans the same subspace and
    its i-th field is 1 at the i-th selected node and 0 at the others.
    """
    p = Phi.shape[1]
    _, _, piv = sla.qr(Phi.conj().T, mode="economic", pivoting=True)
    nodes = np.sort(piv[:p])
    T = np.linalg.inv(Phi[nodes, :])
    return V @ T, Phi @ T, nodes


def unit_cluster_fields(model: KoopmanModel, spec: SpectralDecomposition,
                        grid: InitialConditionGrid, localize: bool = True) -> list[EigenfunctionField]:
    """Fields of the eigenvalue-1 cluster.

    Individual eigenvectors of a nearly degenerate cluster are not
    determined by the data (any rotation within the cluster is as good), so
    by default the fields are taken from a localized basis of the cluster's
    invariant subspace. Each field carries its Rayleigh quotient as
    eigenvalue.
    """
    idx = list(spec.unit_cluster)
    if not idx:
        return []
    V = spec.eigenvectors[:, idx]
    nodes = grid_initial_conditions(grid)
    Psi = model.dictionary.evaluate(nodes).T
    if localize and len(idx) > 1:
        V, _, _ = localized_cluster_basis(Psi @ V, V)
        V = _normalize_phase(V)
    K = np.asarray(model.K)
    out = []
    for j in range(V.shape[1]):
        v = V[:, j]
        lam = complex(v.conj() @ K @ v / (v.conj() @ v)) if localize else spec.eigenvalues[idx[j]]
        out.append(EigenfunctionField(grid, nodes, (Psi @ v).astype(complex), lam))
    return out


@dataclass(frozen=True, eq=False)
class Partition:
    """Per-node labels 0..v-1 (``-1`` = unassigned) and each label's peak state."""

    nodes: np.ndarray
    labels: np.ndarray
    v: int
    representative_peaks: np.ndarray
    field_index: tuple


def extract_partition(fields: Sequence[EigenfunctionField], level: float = 0.5) -> Partition:
    """Assign each node to the field that dominates it after peak normalization.

    A node goes to field i when i maximizes |phi_j| / max|phi_j| over the
    fields (lowest index on ties) and that ratio is at least ``level``.
    Identically zero fields contribute no label.
    """
    if not fields:
        raise ValidationError("need at least one field")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    nodes = fields[0].nodes
    for f in fields[1:]:
        if f.nodes.shape != nodes.shape or not np.array_equal(f.nodes, nodes):
            raise ValidationError("all fields must share one grid")
    A = np.abs(np.array([f.values for f in fields]))
    peaks = A.max(axis=1)
    live = peaks > 0
    R = np.zeros_like(A)
    R[live] = A[live] / peaks[live, None]
    R[~live] = -np.inf
    best = np.argmax(R, axis=0)
    ok = R[best, np.arange(R.shape[1])] >= level
    raw = np.where(ok, best, -1)
    field_index = tuple(int(i) for i in np.unique(raw[raw >= 0]))
    labels = np.full(len(nodes), -1)
    reps = []
    for new, old in enumerate(field_index):
        mask = raw == old
        labels[mask] = new
        cand = np.flatnonzero(mask)
        reps.append(nodes[cand[np.argmax(A[old, cand])]])
    reps = np.array(reps) if reps else np.empty((0, nodes.shape[1]))
    return Partition(nodes, labels, len(field_index), reps, field_index)


def eigenvalue_clusters(w: np.ndarray, tol: float) -> list[list[int]]:
    """Group indices whose eigenvalues are chained within ``tol`` of each other."""
    n = len(w)
    parent = list(range(n))

    def root(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if abs(w[i] - w[j]) <= tol:
                parent[root(j)] = root(i)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(root(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


@dataclass(frozen=True, eq=False)
class BlockDiagonalization:
    """``inv(transform) @ K @ transform`` is block diagonal with ``blocks``.

    ``groups`` lists, per block, the coordinate (``support`` mode) or
    eigenvalue indices (eigenbasis modes) it is built from.
    """

    transform: np.ndarray
    blocks: list
    groups: list
    off_block_mass: float

    def __iter__(self):
        return iter((self.transform, self.blocks))


def _check_nondefective(K, spec, cluster_tol, rank_tol):
    scale = max(1.0, float(np.max(np.abs(spec.eigenvalues))))
    for cl in eigenvalue_clusters(spec.eigenvalues, cluster_tol * scale):
        if len(cl) < 2:
            continue
        s = np.linalg.svd(spec.eigenvectors[:, cl], compute_uv=False)
        geo = int(np.sum(s > rank_tol * s[0]))
        if geo < len(cl):
            lam = complex(np.mean(spec.eigenvalues[cl]))
            raise PreconditionError(
                f"eigenvalue cluster near {lam:.6g} is defective: algebraic "
                f"multiplicity {len(cl)} > geometric multiplicity {geo}"
            )


def _support_groups(K, tol):
    n = K.shape[0]
    A = np.abs(K) > tol
    A = A | A.T
    seen = np.zeros(n, dtype=bool)
    groups = []
    for s in range(n):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in np.flatnonzero(A[i] & ~seen):
                seen[j] = True
                stack.append(int(j))
        groups.append(sorted(comp))
    return groups


def block_diagonalize(model, spec: SpectralDecomposition | None = None, groups="support",
                      cluster_tol: float = 1e-6, rank_tol: float = DEFAULT_RANK_TOL,
                      support_tol: float = 0.0) -> BlockDiagonalization:
    """Split K into decoupled diagonal blocks.

    ``groups`` selects the grouping:

    ``"support"``
        connected components of the sparsity pattern of K; the transform is
        a permutation and the blocks are submatrices of K.
    ``"unit"``
        the eigenvalue-1 cluster against everything else, in the eigenbasis.
    sequence of ints
        an explicit group label per eigenvalue index (eigenbasis).

    Every eigenvalue cluster must be non-defective.
    """
    K = np.asarray(model.K if isinstance(model, KoopmanModel) else model)
    if spec is None:
        spec = decompose(K)
    _check_nondefective(K, spec, cluster_tol, rank_tol)
    n = K.shape[0]
    if isinstance(groups, str) and groups == "support":
        parts = _support_groups(K, support_tol)
        perm = [i for g in parts for i in g]
        T = np.eye(n)[:, perm]
        blocks = [K[np.ix_(g, g)] for g in parts]
        return BlockDiagonalization(T, blocks, parts, 0.0)
    if isinstance(groups, str):
        if groups != "unit":
            raise ValidationError(f"unknown grouping {groups!r}")
        unit = list(spec.unit_cluster)
        rest = [i for i in range(n) if i not in spec.unit_cluster]
        parts = [g for g in (unit, rest) if g]
    else:
        lab = list(groups)
        if len(lab) != n:
            raise ValidationError(f"need one group label per eigenvalue ({n}), got {len(lab)}")
        parts = [[i for i in range(n) if lab[i] == g] for g in dict.fromkeys(lab)]
    order = [i for g in parts for i in g]
    T = spec.eigenvectors[:, order]
    try:
        B = np.linalg.solve(T, K @ T)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigenvector matrix is singular: {exc}") from exc
    blocks, mask, off = [], np.zeros((n, n), dtype=bool), 0
    for g in parts:
        sl = slice(off, off + len(g))
        blocks.append(B[sl, sl])
        mask[sl, sl] = True
        off += len(g)
    off_mass = float(np.linalg.norm(B[~mask]))
    if off_mass > 1e-6 * max(spec.K_norm, np.finfo(float).tiny):
        log.warning("block diagonalization leaves off-block mass %.3e", off_mass)
    return BlockDiagonalization(T, blocks, parts, off_mass)


def group_by_partition(model: KoopmanModel, spec: SpectralDecomposition,
                       partition: Partition) -> list[int]:
    """Group label per eigenvector: the partition region holding most of its field energy.

    Eigenvectors whose fields vanish on every labelled node get ``-1``.
    """
    Psi = model.dictionary.evaluate(partition.nodes).T
    E = np.abs(Psi @ spec.eigenvectors) ** 2
    out = []
    for j in range(E.shape[1]):
        mass = [E[partition.labels == lab, j].sum() for lab in range(partition.v)]
        out.append(int(np.argmax(mass)) if mass and max(mass) > 0 else -1)
    return out


def write_eigenvalues_csv(path, spec: SpectralDecomposition) -> None:
    unit = set(spec.unit_cluster)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["re", "im", "abs", "in_unit_cluster"])
        for i, lam in enumerate(spec.eigenvalues):
            w.writerow([repr(float(lam.real)), repr(float(lam.imag)), repr(float(abs(lam))),
                        int(i in unit)])


def _coord_header(d):
    return [f"x{i + 1}" for i in range(d)]


def write_field_csv(path, field: EigenfunctionField) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_coord_header(field.nodes.shape[1]) + ["re_phi", "im_phi", "abs_phi"])
        for x, phi in zip(field.nodes, field.values):
            w.writerow([repr(float(v)) for v in x]
                       + [repr(float(phi.real)), repr(float(phi.imag)), repr(float(abs(phi)))])


def write_partition_csv(path, partition: Partition) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_coord_header(partition.nodes.shape[1]) + ["label"])
        for x, lab in zip(partition.nodes, partition.labels):
            w.writerow([repr(float(v)) for v in x] + [int(lab)])
