"""Observable dictionaries and lifting of states into observable space."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InsufficientDataError, ValidationError

__all__ = [
    "Dictionary",
    "LiftedMatrix",
    "rbf_value",
    "build_dictionary",
    "lift",
    "lift_batch",
    "kmeanspp_centers",
]

KINDS = ("gaussian_rbf", "coordinate", "custom")


def rbf_value(x, center, sigma: float) -> float:
    """Gaussian bump exp(-|x - c|^2 / sigma^2)."""
    if not sigma > 0:
        raise ValidationError("sigma must be positive")
    x, c = np.asarray(x, dtype=float), np.asarray(center, dtype=float)
    if x.shape != c.shape:
        raise ValidationError(f"dimension mismatch: {x.shape} vs {c.shape}")
    d = x - c
    return float(np.exp(-np.dot(d, d) / sigma**2))


@dataclass(frozen=True, eq=False)
class Dictionary:
    """A finite set of observables psi_1..psi_N.

    For ``gaussian_rbf`` the observables are Gaussian bumps of common width
    ``sigma`` at ``centers``; ``coordinate`` returns the state itself;
    ``custom`` wraps user callables. ``constant=True`` appends psi = 1.
    """

    kind: str
    dim: int
    centers: np.ndarray | None = None
    sigma: float | None = None
    seed: int | None = None
    constant: bool = False
    functions: Sequence[Callable] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown dictionary kind {self.kind!r}")
        if self.dim < 1:
            raise ValidationError("dim must be >= 1")
        if self.kind == "gaussian_rbf":
            c = np.asarray(self.centers, dtype=float)
            if c.ndim != 2 or c.shape[1] != self.dim or len(c) < 1:
                raise ValidationError(f"centers must have shape (N, {self.dim})")
            if self.sigma is None or not self.sigma > 0:
                raise ValidationError("sigma must be positive")
            if len(np.unique(c, axis=0)) != len(c):
                raise ValidationError("RBF centers must be pairwise distinct")
            c.setflags(write=False)
            object.__setattr__(self, "centers", c)
            object.__setattr__(self, "sigma", float(self.sigma))
        elif self.kind == "custom":
            if not self.functions:
                raise ValidationError("custom dictionary needs at least one function")

    @property
    def N(self) -> int:
        if self.kind == "gaussian_rbf":
            n = len(self.centers)
        elif self.kind == "coordinate":
            n = self.dim
        else:
            n = len(self.functions)
        return n + int(self.constant)

    def evaluate(self, states) -> np.ndarray:
        """Lift an ``(m, dim)`` array; returns ``(N, m)``."""
        X = np.asarray(states, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValidationError(
                f"dimension mismatch: states of shape {X.shape}, dictionary dim {self.dim}"
            )
        if self.kind == "gaussian_rbf":
            diff = X[None, :, :] - self.centers[:, None, :]
            Y = np.exp(-np.einsum("nmd,nmd->nm", diff, diff) / self.sigma**2)
        elif self.kind == "coordinate":
            Y = X.T.copy()
        else:
            Y = np.array([[f(x) for x in X] for f in self.functions], dtype=float)
        if self.constant:
            Y = np.vstack([Y, np.ones((1, len(X)))])
        return Y

    def to_dict(self) -> dict:
        if self.kind == "custom":
            raise ValidationError("custom dictionaries cannot be serialized")
        return {
            "kind": self.kind,
            "dim": self.dim,
            "sigma": self.sigma,
            "centers": None if self.centers is None else self.centers.tolist(),
            "seed": self.seed,
            "flags": {"constant": self.constant},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dictionary":
        flags = d.get("flags", {})
        return cls(
            kind=d["kind"],
            dim=int(d["dim"]),
            centers=None if d.get("centers") is None else np.array(d["centers"], dtype=float),
            sigma=d.get("sigma"),
            seed=d.get("seed"),
            constant=bool(flags.get("constant", False)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Dictionary":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class LiftedMatrix:
    """Columns are Psi(x_j) for the recorded source states, in order."""

    values: np.ndarray
    dictionary: Dictionary
    source: list | None = None

    @property
    def shape(self):
        return self.values.shape


def kmeanspp_centers(data, n: int, seed: int = 0) -> np.ndarray:
    """k-means++ seeding: ``n`` distinct rows of ``data`` spread over its extent.

    The first center is drawn uniformly from the distinct rows; each next one
    is drawn with probability proportional to its squared distance from the
    nearest center chosen so far. Deterministic for a fixed ``seed``.
    """
    cand = np.unique(np.asarray(data, dtype=float), axis=0)
    if len(cand) < n:
        raise InsufficientDataError(f"need {n} distinct candidate centers, have {len(cand)}")
    if len(cand) == n:
        return cand
    rng = np.random.default_rng(seed)
    idx = [int(rng.integers(len(cand)))]
    d2 = np.sum((cand - cand[idx[0]]) ** 2, axis=1)
    for _ in range(n - 1):
        i = int(rng.choice(len(cand), p=d2 / d2.sum()))
        idx.append(i)
        d2 = np.minimum(d2, np.sum((cand - cand[i]) ** 2, axis=1))
    return cand[idx]


def build_dictionary(
    kind: str,
    data=None,
    N: int | None = None,
    sigma: float | None = None,
    seed: int = 0,
    *,
    dim: int | None = None,
    constant: bool = False,
    functions: Sequence[Callable] | None = None,
) -> Dictionary:
    """Construct a dictionary, placing RBF centers on the data when needed."""
    if kind == "gaussian_rbf":
        if data is None or len(data) == 0:
            raise InsufficientDataError("gaussian_rbf dictionary needs data")
        if N is None or N < 1:
            raise ValidationError("N must be >= 1")
        data = np.asarray(data, dtype=float)
        centers = kmeanspp_centers(data, N, seed)
        return Dictionary(kind, data.shape[1], centers, sigma, seed, constant)
    if kind == "coordinate":
        if dim is None:
            if data is None:
                raise ValidationError("coordinate dictionary needs dim or data")
            dim = np.asarray(data).shape[1]
        return Dictionary(kind, dim, constant=constant)
    if kind == "custom":
        if dim is None:
            raise ValidationError("custom dictionary needs dim")
        return Dictionary(kind, dim, constant=constant, functions=tuple(functions or ()))
    raise ValidationError(f"unknown dictionary kind {kind!r}")


def lift(dictionary: Dictionary, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (dictionary.dim,):
        raise ValidationError(f"state of shape {x.shape} does not match dim {dictionary.dim}")
    return dictionary.evaluate(x[None, :])[:, 0]


def lift_batch(dictionary: Dictionary, states, source: list | None = None) -> LiftedMatrix:
    """Columns Psi(x_j) in input order; any malformed state rejects the whole batch."""
    try:
        states = np.asarray(states, dtype=float)
    except ValueError as exc:
        raise ValidationError(f"states do not form an (m, dim) array: {exc}") from exc
    if states.ndim != 2 or len(states) == 0:
        raise ValidationError("lift_batch needs a nonempty (m, dim) array of states")
    return LiftedMatrix(dictionary.evaluate(states), dictionary, source)
