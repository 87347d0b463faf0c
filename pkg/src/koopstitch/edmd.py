"""Snapshot pairing and least-squares Koopman operator fitting."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import Trajectory
from .errors import NumericalError, RankZeroError, ValidationError
from .lifting import Dictionary

log = logging.getLogger(__name__)

__all__ = [
    "SnapshotPairs",
    "KoopmanModel",
    "build_pairs",
    "pseudo_inverse",
    "fit",
    "fit_trajectories",
    "predict",
    "learning_error",
    "save_model",
    "load_model",
]

DEFAULT_REL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SnapshotPairs:
    """Predecessor/successor states as columns of ``Xp`` and ``Xf`` (d x m).

    Successors lie ``lag`` samples after their predecessors.
    """

    Xp: np.ndarray
    Xf: np.ndarray
    provenance: list
    lag: int = 1

    @property
    def m(self) -> int:
        return self.Xp.shape[1]


def build_pairs(trajectories: Sequence[Trajectory], lag: int = 1) -> SnapshotPairs:
    """Stack the pairs (x_s, x_{s+lag}) of every trajectory, never across trajectories.

    With ``lag=1`` these are consecutive samples. A larger lag fits the
    Koopman matrix of the flow over ``lag * dt`` while still using every
    sample as a predecessor.
    """
    if not trajectories:
        raise ValidationError("no trajectories given")
    if int(lag) != lag or lag < 1:
        raise ValidationError(f"lag must be a positive integer, got {lag!r}")
    lag = int(lag)
    dims = {tr.states.shape[1] for tr in trajectories}
    if len(dims) != 1:
        raise ValidationError(f"trajectories have mixed dimensions {sorted(dims)}")
    Xp = np.hstack([tr.states[:-lag].T for tr in trajectories])
    Xf = np.hstack([tr.states[lag:].T for tr in trajectories])
    prov = [(tr.id, s) for tr in trajectories for s in range(len(tr.states) - lag)]
    return SnapshotPairs(Xp, Xf, prov, lag)


def pseudo_inverse(A, rel_tol: float = DEFAULT_REL_TOL):
    """Moore-Penrose inverse by SVD with relative hard truncation.

    Singular values at or below ``rel_tol * s_max`` are dropped.

    Returns
    -------
    (numpy.ndarray, int)
        The pseudo-inverse and the number of retained singular values.
    """
    A = np.asarray(A)
    if not np.all(np.isfinite(A)):
        raise NumericalError("pseudo_inverse: matrix has non-finite entries")
    if A.size == 0:
        return np.zeros(A.shape[::-1], dtype=A.dtype), 0
    U, s, Vh = np.linalg.svd(A, full_matrices=False)
    if s[0] == 0:
        return np.zeros(A.shape[::-1], dtype=A.dtype), 0
    r = int(np.sum(s > rel_tol * s[0]))
    pinv = (Vh[:r].conj().T / s[:r]) @ U[:, :r].conj().T
    return pinv, r


@dataclass(frozen=True, eq=False)
class KoopmanModel:
    """Finite-dimensional Koopman matrix acting on Psi: Psi(x+) ~ K Psi(x).

    One application of ``K`` advances ``lag`` samples of the training data.
    """

    K: np.ndarray
    dictionary: Dictionary
    training_stats: dict = field(default_factory=dict)
    label: str = ""
    provenance: dict = field(default_factory=dict)
    training_states: np.ndarray | None = field(default=None, repr=False)
    lag: int = 1

    def __post_init__(self):
        if int(self.lag) != self.lag or self.lag < 1:
            raise ValidationError(f"lag must be a positive integer, got {self.lag!r}")
        object.__setattr__(self, "lag", int(self.lag))
        K = np.asarray(self.K, dtype=float)
        n = self.dictionary.N
        if K.shape != (n, n):
            raise ValidationError(f"K has shape {K.shape}, dictionary needs ({n}, {n})")
        K.setflags(write=False)
        object.__setattr__(self, "K", K)

    @property
    def N(self) -> int:
        return self.dictionary.N


def fit(
    pairs: SnapshotPairs,
    dictionary: Dictionary,
    rel_tol: float = DEFAULT_REL_TOL,
    label: str = "",
    provenance: dict | None = None,
    training_states=None,
) -> KoopmanModel:
    """Least-squares Koopman matrix K = Yf Yp^+ on lifted snapshot pairs."""
    if pairs.m < 1:
        raise ValidationError("need at least one snapshot pair (trajectories shorter than lag?)")
    Yp = dictionary.evaluate(pairs.Xp.T)
    Yf = dictionary.evaluate(pairs.Xf.T)
    if not np.any(Yp):
        raise RankZeroError("lifted predecessor matrix is identically zero")
    pinv, rank = pseudo_inverse(Yp, rel_tol)
    if rank == 0:
        raise RankZeroError("lifted predecessor matrix has numerical rank zero")
    K = Yf @ pinv
    R = K @ Yp - Yf
    stats = {
        "m": pairs.m,
        "frobenius_residual": float(np.linalg.norm(R)),
        "max_column_residual": float(np.max(np.linalg.norm(R, axis=0))),
        "svd_rank": rank,
        "truncation_tol": rel_tol,
    }
    return KoopmanModel(K, dictionary, stats, label, dict(provenance or {}), training_states,
                        pairs.lag)


def fit_trajectories(
    trajectories: Sequence[Trajectory],
    dictionary: Dictionary,
    rel_tol: float = DEFAULT_REL_TOL,
    label: str = "",
    data_path: str | None = None,
    lag: int = 1,
) -> KoopmanModel:
    """:func:`fit` on the pairs of ``trajectories``, recording their ids."""
    pairs = build_pairs(trajectories, lag)
    prov = {"traj_ids": [tr.id for tr in trajectories]}
    if data_path is not None:
        prov["data"] = str(data_path)
    states = np.vstack([tr.states for tr in trajectories])
    return fit(pairs, dictionary, rel_tol, label, prov, states)


def predict(model: KoopmanModel, x0, n: int) -> np.ndarray:
    """Rows Psi(x0), K Psi(x0), ..., K^n Psi(x0) by repeated multiplication.

    Row k approximates the lift of the state ``k * model.lag`` samples ahead.
    """
    if n < 0:
        raise ValidationError("n must be >= 0")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.dictionary.dim,):
        raise ValidationError(f"x0 of shape {x0.shape} does not match dim {model.dictionary.dim}")
    out = np.empty((n + 1, model.N))
    out[0] = model.dictionary.evaluate(x0[None, :])[:, 0]
    for i in range(1, n + 1):
        out[i] = model.K @ out[i - 1]
    return out


def learning_error(model: KoopmanModel, trajectory, n: int) -> float:
    """Worst n-step lifted prediction error over all start indices of a trajectory.

    max_s |K^n Psi(x_s) - Psi(x_{s+n*lag})|_2

    ``trajectory`` is a :class:`Trajectory` or a bare ``(len, dim)`` array.
    """
    states = np.asarray(getattr(trajectory, "states", trajectory), dtype=float)
    if n < 0:
        raise ValidationError("n must be >= 0")
    span = n * model.lag
    if span >= len(states):
        raise ValidationError(
            f"horizon n={n} at lag {model.lag} needs at least {span + 1} states, "
            f"trajectory has {len(states)}"
        )
    if n == 0:
        return 0.0
    Y = model.dictionary.evaluate(states)
    P = Y[:, :-span]
    for _ in range(n):
        P = model.K @ P
    return float(np.max(np.linalg.norm(P - Y[:, span:], axis=0)))


def model_to_dict(model: KoopmanModel) -> dict:
    return {
        "label": model.label,
        "lag": model.lag,
        "dictionary": model.dictionary.to_dict(),
        "K": {"rows": model.N, "cols": model.N, "data": model.K.ravel().tolist()},
        "training_stats": dict(model.training_stats),
        "provenance": dict(model.provenance),
    }


def model_from_dict(d: dict, pairs: SnapshotPairs | None = None) -> KoopmanModel:
    dictionary = Dictionary.from_dict(d["dictionary"])
    k = d["K"]
    rows, cols = int(k["rows"]), int(k["cols"])
    if rows != cols:
        raise ValidationError(f"K must be square, got {rows}x{cols}")
    data = np.array(k["data"], dtype=float)
    if data.size != rows * cols:
        raise ValidationError("K data length does not match its dims")
    stats = dict(d.get("training_stats", {}))
    model = KoopmanModel(data.reshape(rows, cols), dictionary, stats, d.get("label", ""),
                         dict(d.get("provenance", {})), lag=d.get("lag", 1))
    if pairs is not None:
        Yp = dictionary.evaluate(pairs.Xp.T)
        Yf = dictionary.evaluate(pairs.Xf.T)
        audited = float(np.linalg.norm(model.K @ Yp - Yf))
        recorded = stats.get("frobenius_residual")
        if recorded is not None and not np.isclose(audited, recorded, rtol=1e-8, atol=1e-12):
            log.warning("audit: recorded residual %r differs from recomputed %r", recorded, audited)
        stats["frobenius_residual"] = audited
    return model


def save_model(model: KoopmanModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path, pairs: SnapshotPairs | None = None) -> KoopmanModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh), pairs)
