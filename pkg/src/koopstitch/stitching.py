"""Block-diagonal assembly of local Koopman models with gated observables."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .dynamics import InitialConditionGrid, SystemSpec, grid_initial_conditions, read_trajectories_csv
from .edmd import KoopmanModel, learning_error, model_from_dict, model_to_dict, predict
from .errors import ValidationError
from .spectral import (
    DEFAULT_UNIT_TOL,
    EigenfunctionField,
    SpectralDecomposition,
    decompose,
    unit_cluster_fields,
)

log = logging.getLogger(__name__)

__all__ = [
    "MembershipClassifier",
    "StitchedModel",
    "stitch",
    "classify",
    "classify_batch",
    "stitched_lift",
    "stitched_predict",
    "stitched_decompose",
    "stitched_unit_fields",
    "save_stitched",
    "load_stitched",
    "write_mask_csv",
]

METHODS = ("nearest_snapshot", "residual_argmin")


@dataclass(eq=False)
class MembershipClassifier:
    """Computable stand-in for the indicator functions of the invariant sets.

    ``nearest_snapshot`` returns the block whose training snapshot is
    closest to the query (lowest block on exact ties). ``residual_argmin``
    scores a short query trajectory with each local model and returns the
    block with the smallest n-step learning error.
    """

    method: str
    n_blocks: int
    reference: np.ndarray | None = None
    reference_labels: np.ndarray | None = None
    locals: tuple = ()
    n: int = 10
    _tree: cKDTree | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown classifier method {self.method!r}")
        if self.method == "nearest_snapshot" and self.n_blocks > 1:
            self._tree = cKDTree(self.reference)


def classify_batch(classifier: MembershipClassifier, X) -> tuple[np.ndarray, np.ndarray]:
    """Block index per row of ``X`` and a mask flagging tie-broken (boundary) rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise ValidationError("query states must be finite")
    if classifier.n_blocks == 1:
        return np.zeros(len(X), dtype=int), np.zeros(len(X), dtype=bool)
    if classifier.method != "nearest_snapshot":
        raise ValidationError("batch classification needs the nearest_snapshot method")
    k = min(8, len(classifier.reference))
    d, idx = classifier._tree.query(X, k=k)
    d, idx = d.reshape(len(X), k), idx.reshape(len(X), k)
    labs = classifier.reference_labels[idx]
    tied = d == d[:, :1]
    masked = np.where(tied, labs, np.iinfo(int).max)
    out = masked.min(axis=1)
    boundary = (np.where(tied, labs, out[:, None]) != out[:, None]).any(axis=1)
    return out.astype(int), boundary


def classify(classifier: MembershipClassifier, x) -> int:
    """Block index of a state (or, for ``residual_argmin``, of a short trajectory)."""
    if classifier.n_blocks == 1:
        return 0
    if classifier.method == "residual_argmin":
        traj = np.atleast_2d(np.asarray(x, dtype=float))
        errs = [learning_error(m, traj, classifier.n) for m in classifier.locals]
        return int(np.argmin(errs))
    labels, boundary = classify_batch(classifier, np.asarray(x, dtype=float)[None, :])
    if boundary[0]:
        log.warning("state %s is equidistant from several invariant sets", x)
    return int(labels[0])


@dataclass(frozen=True, eq=False)
class StitchedModel:
    """Local models K_1..K_v acting on disjoint coordinate blocks.

    The L x L operator is kept as its diagonal blocks; :attr:`K_S` builds a
    sparse view on demand.
    """

    locals: tuple
    block_offsets: tuple
    classifier: MembershipClassifier

    @property
    def labels(self) -> list[str]:
        return [m.label for m in self.locals]

    @property
    def L(self) -> int:
        return self.block_offsets[-1] + self.locals[-1].N

    @property
    def blocks(self) -> list[np.ndarray]:
        return [m.K for m in self.locals]

    @property
    def K_S(self) -> sparse.csr_matrix:
        return sparse.block_diag(self.blocks, format="csr")

    def block_slice(self, p: int) -> slice:
        return slice(self.block_offsets[p], self.block_offsets[p] + self.locals[p].N)


def stitch(locals: Sequence[KoopmanModel], method: str = "nearest_snapshot",
           n: int = 10) -> StitchedModel:
    if not locals:
        raise ValidationError("need at least one local model")
    labels = [m.label for m in locals]
    if len(set(labels)) != len(labels):
        raise ValidationError(f"duplicate local model labels: {labels}")
    offsets, off = [], 0
    for m in locals:
        offsets.append(off)
        off += m.N
    if method == "nearest_snapshot":
        missing = [m.label for m in locals if m.training_states is None]
        if missing and len(locals) > 1:
            raise ValidationError(f"local models without training snapshots: {missing}")
        if len(locals) > 1:
            ref = np.vstack([m.training_states for m in locals])
            lab = np.concatenate([np.full(len(m.training_states), p) for p, m in enumerate(locals)])
        else:
            ref, lab = None, None
        clf = MembershipClassifier(method, len(locals), ref, lab)
    elif method == "residual_argmin":
        clf = MembershipClassifier(method, len(locals), locals=tuple(locals), n=n)
    else:
        raise ValidationError(f"unknown classifier method {method!r}")
    return StitchedModel(tuple(locals), tuple(offsets), clf)


def stitched_lift(model: StitchedModel, x, label: int | None = None) -> np.ndarray:
    """Gated observable vector: the classified block's lift, zeros elsewhere."""
    x = np.asarray(x, dtype=float)
    p = classify(model.classifier, x) if label is None else label
    out = np.zeros(model.L)
    out[model.block_slice(p)] = model.locals[p].dictionary.evaluate(x[None, :])[:, 0]
    return out


def stitched_predict(model: StitchedModel, x0, n: int, label: int | None = None):
    """Rows Psi_S(x0), K_S Psi_S(x0), ..., K_S^n Psi_S(x0), and the block used."""
    x0 = np.asarray(x0, dtype=float)
    p = classify(model.classifier, x0) if label is None else label
    out = np.zeros((n + 1, model.L))
    out[:, model.block_slice(p)] = predict(model.locals[p], x0, n)
    return out, p


def stitched_decompose(model: StitchedModel, unit_tol: float = DEFAULT_UNIT_TOL) -> SpectralDecomposition:
    """Eigenpairs of K_S assembled from the blocks, eigenvectors zero-padded."""
    ws, vs = [], []
    for p, m in enumerate(model.locals):
        spec = decompose(m, unit_tol)
        V = np.zeros((model.L, m.N), dtype=complex)
        V[model.block_slice(p)] = spec.eigenvectors
        ws.append(spec.eigenvalues)
        vs.append(V)
    w, V = np.concatenate(ws), np.hstack(vs)
    order = np.lexsort((-w.imag, np.abs(w - 1), -np.abs(w)))
    w, V = w[order], V[:, order]
    unit = tuple(int(i) for i in np.flatnonzero(np.abs(w - 1) < unit_tol))
    knorm = float(np.sqrt(sum(np.linalg.norm(b) ** 2 for b in model.blocks)))
    return SpectralDecomposition(w, V, unit, unit_tol, knorm)


def stitched_unit_fields(model: StitchedModel, grid: InitialConditionGrid,
                         unit_tol: float = DEFAULT_UNIT_TOL, localize: bool = True):
    """Eigenvalue-1 fields of K_S on ``grid``.

    Each block's fields are evaluated through that block's dictionary and
    are zero wherever the classifier assigns another block.
    """
    nodes = grid_initial_conditions(grid)
    labels, _ = classify_batch(model.classifier, nodes)
    out: list[tuple[int, EigenfunctionField]] = []
    for p, m in enumerate(model.locals):
        for f in unit_cluster_fields(m, decompose(m, unit_tol), grid, localize):
            vals = np.where(labels == p, f.values, 0)
            out.append((p, EigenfunctionField(grid, nodes, vals, f.eigenvalue)))
    return out


def stitched_to_dict(model: StitchedModel) -> dict:
    clf = model.classifier
    ref = [
        {"label": m.label, "data": m.provenance.get("data"), "traj_ids": m.provenance.get("traj_ids")}
        for m in model.locals
    ]
    return {
        "locals": [model_to_dict(m) for m in model.locals],
        "block_offsets": list(model.block_offsets),
        "classifier": {"method": clf.method, "n": clf.n, "reference": ref},
    }


def save_stitched(model: StitchedModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(stitched_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_stitched(path, system: SystemSpec | None = None) -> StitchedModel:
    """Load a stitched model; training snapshots are re-read from each local's data file.

    Relative data paths are taken relative to the directory of ``path``.
    """
    with open(path) as fh:
        d = json.load(fh)
    locals_ = [model_from_dict(m) for m in d["locals"]]
    clf = d.get("classifier", {})
    method = clf.get("method", "nearest_snapshot")
    if method == "nearest_snapshot" and len(locals_) > 1:
        if system is None:
            raise ValidationError("loading a nearest_snapshot classifier needs the system")
        cache: dict = {}
        restored = []
        for m in locals_:
            src, ids = m.provenance.get("data"), m.provenance.get("traj_ids")
            if src is None or ids is None:
                raise ValidationError(f"local model {m.label!r} has no training provenance")
            if not os.path.isabs(src):
                src = os.path.join(os.path.dirname(os.path.abspath(path)), src)
            if src not in cache:
                cache[src] = {tr.id: tr for tr in read_trajectories_csv(src, system)}
            states = np.vstack([cache[src][i].states for i in ids])
            restored.append(dataclasses.replace(m, training_states=states))
        locals_ = restored
    model = stitch(locals_, method, clf.get("n", 10))
    if tuple(d.get("block_offsets", model.block_offsets)) != model.block_offsets:
        raise ValidationError("block offsets in file do not match the local model sizes")
    return model


def write_mask_csv(path, model: StitchedModel) -> None:
    """Nonzeros of K_S as ``row,col,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for p, m in enumerate(model.locals):
            off = model.block_offsets[p]
            rows, cols = np.nonzero(m.K)
            for i, j in zip(rows, cols):
                w.writerow([off + int(i), off + int(j), repr(float(m.K[i, j]))])
