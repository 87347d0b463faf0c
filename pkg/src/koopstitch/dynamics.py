"""Benchmark vector fields, fixed-step RK4 integration and trajectory sampling."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import optimize

from .errors import DomainError, IntegrationError, ValidationError

__all__ = [
    "SystemSpec",
    "Trajectory",
    "InitialConditionGrid",
    "TOGGLE_SWITCH",
    "SECOND_ORDER",
    "SYSTEMS",
    "get_system",
    "toggle_switch_field",
    "second_order_field",
    "rk4_step",
    "simulate",
    "simulate_batch",
    "grid_initial_conditions",
    "find_fixed_points",
    "attractors",
    "label_by_final_state",
    "write_trajectories_csv",
    "read_trajectories_csv",
]

TOGGLE_DEFAULT_PARAMS = {
    "alpha1": 1.0,
    "alpha2": 1.0,
    "beta": 3.55,
    "gamma": 3.53,
    "kappa1": 0.5,
    "kappa2": 0.5,
}


def toggle_switch_field(x, params: Mapping[str, float] = TOGGLE_DEFAULT_PARAMS):
    """Genetic toggle switch: mutual repression of two repressors.

    ``x`` may carry leading batch axes; the last axis holds the two
    concentrations.
    """
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    with np.errstate(all="ignore"):
        dx1 = params["alpha1"] / (1.0 + x2 ** params["beta"]) - params["kappa1"] * x1
        dx2 = params["alpha2"] / (1.0 + x1 ** params["gamma"]) - params["kappa2"] * x2
    out = np.stack([dx1, dx2], axis=-1)
    if not np.all(np.isfinite(out)):
        raise DomainError("toggle switch field is not finite at this state", state=x)
    return out


def second_order_field(x, params: Mapping[str, float] | None = None):
    """Polynomial planar system with a saddle at the origin and two sinks at (+-sqrt2, 1)."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x1 - x1 * x2, x1 * x1 - 2.0 * x2], axis=-1)


_FIELDS: dict[str, Callable] = {
    "toggle_switch": toggle_switch_field,
    "second_order": second_order_field,
}


@dataclass(frozen=True)
class SystemSpec:
    """A named continuous-time system x' = f(x; params)."""

    name: str
    dim: int
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")
        if self.name not in _FIELDS:
            raise ValidationError(f"unknown system {self.name!r}")
        for key in ("kappa1", "kappa2"):
            if key in self.params and not self.params[key] > 0:
                raise ValidationError(f"{key} must be > 0")
        object.__setattr__(self, "params", dict(self.params))

    @property
    def field(self) -> Callable:
        return partial(_FIELDS[self.name], params=self.params)

    def to_dict(self) -> dict:
        return {"name": self.name, "dim": self.dim, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SystemSpec":
        return cls(name=d["name"], dim=int(d["dim"]), params=dict(d.get("params", {})))

    def __hash__(self):
        return hash((self.name, self.dim, tuple(sorted(self.params.items()))))


TOGGLE_SWITCH = SystemSpec("toggle_switch", 2, TOGGLE_DEFAULT_PARAMS)
SECOND_ORDER = SystemSpec("second_order", 2, {})
SYSTEMS = {s.name: s for s in (TOGGLE_SWITCH, SECOND_ORDER)}

# Root-finding seeds for the stable equilibria, keyed by basin label, and
# for the saddles separating them.
ATTRACTOR_SEEDS = {
    "toggle_switch": {"left": (0.16, 2.0), "right": (2.0, 0.16)},
    "second_order": {"left": (-math.sqrt(2.0), 1.0), "right": (math.sqrt(2.0), 1.0)},
}
SADDLE_SEEDS = {
    "toggle_switch": [(1.0, 1.0)],
    "second_order": [(0.0, 0.0)],
}


def get_system(name: str, params: Mapping[str, float] | None = None) -> SystemSpec:
    try:
        base = SYSTEMS[name]
    except KeyError:
        raise ValidationError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    if params is None:
        return base
    merged = dict(base.params)
    unknown = set(params) - set(merged)
    if unknown:
        raise ValidationError(f"unknown parameters for {name}: {sorted(unknown)}")
    merged.update(params)
    return SystemSpec(name, base.dim, merged)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Samples x_0, x_1, ... of one solution, spaced ``dt`` apart."""

    system: SystemSpec
    dt: float
    states: np.ndarray
    id: int = 0

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[1] != self.system.dim:
            raise ValidationError(
                f"states must have shape (n, {self.system.dim}), got {states.shape}"
            )
        if len(states) < 2:
            raise ValidationError("a trajectory needs at least 2 states")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        object.__setattr__(self, "states", states)

    def __len__(self):
        return len(self.states)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.dt


@dataclass(frozen=True)
class InitialConditionGrid:
    lower: tuple
    upper: tuple
    counts: tuple

    def __post_init__(self):
        lo, hi, n = (tuple(v) for v in (self.lower, self.upper, self.counts))
        if not (len(lo) == len(hi) == len(n)):
            raise ValidationError("lower, upper and counts must have equal length")
        if any(c < 1 for c in n):
            raise ValidationError("counts must be >= 1 on every axis")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValidationError(f"invalid grid: lower {lo} must be < upper {hi}")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))
        object.__setattr__(self, "counts", tuple(int(v) for v in n))

    @property
    def size(self) -> int:
        return math.prod(self.counts)

    def bounding_box(self, factor: float = 10.0):
        """Box with the same centre and ``factor`` times the side lengths."""
        lo, hi = np.array(self.lower), np.array(self.upper)
        mid, half = (lo + hi) / 2, (hi - lo) / 2 * factor
        return mid - half, mid + half


DEFAULT_GRIDS = {
    "toggle_switch": InitialConditionGrid((0.0, 0.0), (3.0, 3.0), (9, 9)),
    "second_order": InitialConditionGrid((-2.0, -1.0), (2.0, 3.0), (9, 9)),
}


def grid_initial_conditions(grid: InitialConditionGrid) -> np.ndarray:
    """Lattice points of ``grid``, first axis varying fastest.

    An axis with a single point contributes its lower bound.
    """
    axes = [
        np.array([lo]) if n == 1 else np.linspace(lo, hi, n)
        for lo, hi, n in zip(grid.lower, grid.upper, grid.counts)
    ]
    pts = [p[::-1] for p in itertools.product(*reversed(axes))]
    return np.array(pts, dtype=float)


def rk4_step(f: Callable, x, dt: float):
    """One classical fourth-order Runge-Kutta step of x' = f(x)."""
    if not dt > 0:
        raise ValidationError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    for k, name in ((k1, "k1"), (k2, "k2"), (k3, "k3"), (k4, "k4")):
        if not np.all(np.isfinite(k)):
            raise IntegrationError(f"non-finite RK4 stage {name}", state=x)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate_batch(
    system: SystemSpec,
    x0s,
    dt: float,
    steps: int,
    substeps: int = 1,
    bounds=None,
    ids: Sequence[int] | None = None,
) -> list[Trajectory]:
    """Integrate several initial conditions in lockstep.

    Each of the ``steps`` sampling intervals of length ``dt`` is covered by
    ``substeps`` RK4 steps. ``bounds`` is an optional ``(lower, upper)``
    box; leaving it aborts with :class:`IntegrationError`.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if substeps < 1:
        raise ValidationError("substeps must be >= 1")
    x = np.array(x0s, dtype=float)
    if x.ndim != 2 or x.shape[1] != system.dim:
        raise ValidationError(f"initial conditions must have shape (k, {system.dim})")
    ids = list(range(len(x))) if ids is None else list(ids)
    if bounds is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    f = system.field
    h = dt / substeps
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    for i in range(1, steps + 1):
        try:
            for _ in range(substeps):
                x = rk4_step(f, x, h)
        except IntegrationError as exc:
            bad = _first_bad_row(x, f)
            raise IntegrationError(
                f"trajectory {ids[bad]}: {exc} during sample {i}", state=x[bad], step=i
            ) from exc
        if bounds is not None:
            outside = np.any((x < lo) | (x > hi), axis=1)
            if outside.any():
                bad = int(np.argmax(outside))
                raise IntegrationError(
                    f"trajectory {ids[bad]} left the domain box at sample {i}: {x[bad]}",
                    state=x[bad],
                    step=i,
                )
        out[i] = x
    return [Trajectory(system, dt, out[:, k, :].copy(), ids[k]) for k in range(len(ids))]


def _first_bad_row(x, f) -> int:
    for k in range(len(x)):
        try:
            if np.all(np.isfinite(f(x[k]))):
                continue
        except IntegrationError:
            pass
        return k
    return 0


def simulate(
    system: SystemSpec,
    x0,
    dt: float,
    steps: int,
    substeps: int = 1,
    bounds=None,
    traj_id: int = 0,
) -> Trajectory:
    """Sample the solution from ``x0`` at ``steps + 1`` equally spaced times."""
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    return simulate_batch(system, x0, dt, steps, substeps, bounds, ids=[traj_id])[0]


def find_fixed_points(system: SystemSpec, seeds, tol: float = 1e-13) -> np.ndarray:
    """Refine equilibria of ``system`` from the given seed states."""
    f = system.field
    roots = []
    for seed in seeds:
        sol = optimize.root(lambda z: f(z), np.asarray(seed, dtype=float), method="hybr", tol=tol)
        if not sol.success:
            raise IntegrationError(f"fixed-point search from {seed} failed: {sol.message}")
        roots.append(sol.x)
    return np.array(roots)


def attractors(system: SystemSpec) -> dict[str, np.ndarray]:
    """Stable equilibria of a registered system keyed by basin label."""
    seeds = ATTRACTOR_SEEDS[system.name]
    pts = find_fixed_points(system, list(seeds.values()))
    return dict(zip(seeds, pts))


def label_by_final_state(trajectories, targets: Mapping[str, np.ndarray], radius: float = 0.5):
    """Basin label of each trajectory by proximity of its last state.

    Trajectories whose final state is not within ``radius`` of any target
    get ``None``.
    """
    names = list(targets)
    pts = np.array([targets[k] for k in names])
    labels = []
    for tr in trajectories:
        d = np.linalg.norm(pts - tr.states[-1], axis=1)
        k = int(np.argmin(d))
        labels.append(names[k] if d[k] < radius else None)
    return labels


def write_trajectories_csv(path, trajectories: Sequence[Trajectory]) -> None:
    """Write ``traj_id,t,x1,...,xd`` rows; floats use round-trip repr."""
    if not trajectories:
        raise ValidationError("no trajectories to write")
    dim = trajectories[0].system.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "t"] + [f"x{i + 1}" for i in range(dim)])
        for tr in trajectories:
            for i, x in enumerate(tr.states):
                w.writerow([tr.id, repr(i * tr.dt)] + [repr(float(v)) for v in x])


def read_trajectories_csv(path, system: SystemSpec) -> list[Trajectory]:
    """Inverse of :func:`write_trajectories_csv`; rows of one id must be contiguous."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty trajectory file")
    header = rows[0]
    expected = ["traj_id", "t"] + [f"x{i + 1}" for i in range(system.dim)]
    if header != expected:
        raise ValidationError(f"{path}: header {header} does not match {expected}")
    groups: dict[int, list] = {}
    order = []
    for row in rows[1:]:
        tid = int(row[0])
        if tid not in groups:
            groups[tid] = []
            order.append(tid)
        groups[tid].append([float(v) for v in row[1:]])
    out = []
    for tid in order:
        arr = np.array(groups[tid])
        if len(arr) < 2:
            raise ValidationError(f"{path}: trajectory {tid} has fewer than 2 samples")
        out.append(Trajectory(system, float(arr[1, 0] - arr[0, 0]), arr[:, 1:], tid))
    return out
