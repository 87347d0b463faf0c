"""Incremental discovery of invariant sets by novelty-triggered refitting.

A model trained on part of the phase space predicts trajectories from the
same invariant set well and fails on trajectories from sets it has not
seen. Each incoming trajectory is scored by its worst n-step lifted
prediction error; exceeding the current threshold triggers a refit on
everything accepted so far, and the eigenvalue-1 multiplicity of the new
model is recorded.
"""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dynamics import Trajectory
from .edmd import DEFAULT_REL_TOL, KoopmanModel, fit_trajectories, learning_error
from .errors import ValidationError
from .lifting import build_dictionary
from .spectral import DEFAULT_RANK_TOL, DEFAULT_UNIT_TOL, decompose, unit_multiplicity

__all__ = [
    "HistoryRecord",
    "DiscoveryState",
    "NoveltyVerdict",
    "estimate_epsilon",
    "novelty_test",
    "initialize",
    "incorporate",
    "run_discovery",
    "write_history_jsonl",
    "POLICIES",
]

POLICIES = ("keep", "reseed-from-all-data")


@dataclass(frozen=True)
class HistoryRecord:
    event: str  # "init", "accepted" or "refit"
    traj_id: int
    multiplicity: int
    epsilon: float
    observed_error: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class NoveltyVerdict:
    is_novel: bool
    observed_error: float
    threshold: float
    horizon: int


@dataclass(frozen=True)
class DictionarySettings:
    kind: str = "gaussian_rbf"
    N: int = 30
    sigma: float = 0.4
    seed: int = 0
    constant: bool = False


@dataclass(frozen=True, eq=False)
class DiscoveryState:
    """Current model, threshold and event log of a discovery run.

    ``pool`` holds every snapshot known to the run; it is where the
    ``reseed-from-all-data`` policy places dictionary centers.
    """

    model: KoopmanModel
    epsilon: float
    accepted: tuple
    history: tuple
    trajectories: dict = field(repr=False)
    pool: np.ndarray = field(repr=False)
    pool_ids: frozenset = frozenset()
    n: int = 10
    safety: float = 1.5
    dictionary_policy: str = "reseed-from-all-data"
    dictionary_settings: DictionarySettings = DictionarySettings()
    rel_tol: float = DEFAULT_REL_TOL
    unit_tol: float = DEFAULT_UNIT_TOL
    rank_tol: float = DEFAULT_RANK_TOL
    lag: int = 1

    @property
    def multiplicities(self) -> list[int]:
        return [r.multiplicity for r in self.history]

    @property
    def refits(self) -> int:
        return sum(r.event == "refit" for r in self.history)

    def is_monotone(self) -> bool:
        m = self.multiplicities
        return all(a <= b for a, b in zip(m, m[1:]))


def estimate_epsilon(model: KoopmanModel, trajectories: Sequence[Trajectory], n: int,
                     safety: float = 1.5) -> float:
    """``safety`` times the worst training learning error at horizon ``n``."""
    if not trajectories:
        raise ValidationError("need at least one training trajectory")
    if safety < 1:
        raise ValidationError("safety must be >= 1")
    if n < 1:
        raise ValidationError("horizon n must be >= 1")
    worst = max(learning_error(model, tr, n) for tr in trajectories)
    return max(safety * worst, np.finfo(float).tiny)


def novelty_test(state: DiscoveryState, trajectory: Trajectory, n: int | None = None) -> NoveltyVerdict:
    n = state.n if n is None else n
    if n == 0:
        warnings.warn("novelty test with horizon 0 is vacuous", stacklevel=2)
    err = learning_error(state.model, trajectory, n)
    return NoveltyVerdict(err > state.epsilon, err, state.epsilon, n)


def _multiplicity(model, unit_tol, rank_tol) -> int:
    return unit_multiplicity(decompose(model, unit_tol), rank_tol)


def _make_dictionary(settings: DictionarySettings, data):
    return build_dictionary(settings.kind, data, settings.N, settings.sigma, settings.seed,
                            constant=settings.constant)


def initialize(
    initial: Sequence[Trajectory],
    stream: Sequence[Trajectory] = (),
    n: int = 10,
    safety: float = 1.5,
    dictionary_policy: str = "reseed-from-all-data",
    dictionary_settings: DictionarySettings = DictionarySettings(),
    rel_tol: float = DEFAULT_REL_TOL,
    unit_tol: float = DEFAULT_UNIT_TOL,
    rank_tol: float = DEFAULT_RANK_TOL,
    lag: int = 1,
) -> DiscoveryState:
    """Fit the starting model on ``initial``.

    Under ``keep`` the dictionary is placed on the initial data and never
    changes; under ``reseed-from-all-data`` it is placed on the initial data
    together with ``stream``.
    """
    if not initial:
        raise ValidationError("initial subset must be nonempty")
    if dictionary_policy not in POLICIES:
        raise ValidationError(f"unknown dictionary policy {dictionary_policy!r}")
    trajs = {tr.id: tr for tr in initial}
    pool_trajs = list(initial) + [tr for tr in stream if tr.id not in trajs]
    pool = np.vstack([tr.states for tr in pool_trajs])
    data = pool if dictionary_policy == "reseed-from-all-data" else np.vstack(
        [tr.states for tr in initial])
    dictionary = _make_dictionary(dictionary_settings, data)
    model = fit_trajectories(list(initial), dictionary, rel_tol, label="discovery", lag=lag)
    eps = estimate_epsilon(model, list(initial), n, safety)
    mult = _multiplicity(model, unit_tol, rank_tol)
    history = tuple(HistoryRecord("init", tr.id, mult, eps) for tr in initial)
    pool_ids = frozenset(tr.id for tr in pool_trajs)
    return DiscoveryState(model, eps, tuple(trajs), history, trajs, pool, pool_ids, n, safety,
                          dictionary_policy, dictionary_settings, rel_tol, unit_tol, rank_tol,
                          lag)


def incorporate(state: DiscoveryState, trajectory: Trajectory,
                dictionary_policy: str | None = None) -> DiscoveryState:
    """Accept one trajectory, refitting when it is novel for the current model."""
    if trajectory.id in state.trajectories:
        return state
    policy = dictionary_policy or state.dictionary_policy
    if policy not in POLICIES:
        raise ValidationError(f"unknown dictionary policy {policy!r}")
    verdict = novelty_test(state, trajectory)
    trajs = dict(state.trajectories)
    trajs[trajectory.id] = trajectory
    accepted = state.accepted + (trajectory.id,)
    if not verdict.is_novel:
        rec = HistoryRecord("accepted", trajectory.id, state.history[-1].multiplicity,
                            state.epsilon, verdict.observed_error)
        return dataclasses.replace(state, accepted=accepted, history=state.history + (rec,),
                                   trajectories=trajs)
    pool, pool_ids = state.pool, state.pool_ids
    if trajectory.id not in pool_ids:
        pool = np.vstack([pool, trajectory.states])
        pool_ids = pool_ids | {trajectory.id}
    train = [trajs[i] for i in accepted]
    if policy == "keep":
        dictionary = state.model.dictionary
    else:
        dictionary = _make_dictionary(state.dictionary_settings, pool)
    model = fit_trajectories(train, dictionary, state.rel_tol, label="discovery",
                             lag=state.lag)
    eps = estimate_epsilon(model, train, state.n, state.safety)
    mult = _multiplicity(model, state.unit_tol, state.rank_tol)
    rec = HistoryRecord("refit", trajectory.id, mult, eps, verdict.observed_error)
    return dataclasses.replace(state, model=model, epsilon=eps, accepted=accepted,
                               history=state.history + (rec,), trajectories=trajs, pool=pool,
                               pool_ids=pool_ids)


def run_discovery(
    stream: Iterable[Trajectory],
    initial: Sequence[Trajectory],
    n: int = 10,
    safety: float = 1.5,
    dictionary_policy: str = "reseed-from-all-data",
    dictionary_settings: DictionarySettings = DictionarySettings(),
    rel_tol: float = DEFAULT_REL_TOL,
    unit_tol: float = DEFAULT_UNIT_TOL,
    rank_tol: float = DEFAULT_RANK_TOL,
    lag: int = 1,
) -> DiscoveryState:
    """Initialize on ``initial`` and fold :func:`incorporate` over ``stream``."""
    stream = list(stream)
    state = initialize(initial, stream, n, safety, dictionary_policy, dictionary_settings,
                       rel_tol, unit_tol, rank_tol, lag)
    for tr in stream:
        state = incorporate(state, tr)
    return state


def write_history_jsonl(path, state: DiscoveryState) -> None:
    with open(path, "w") as fh:
        for rec in state.history:
            fh.write(json.dumps(rec.to_dict()) + "\n")
