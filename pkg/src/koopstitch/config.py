"""Run configuration: one JSON document with full defaults."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .dynamics import DEFAULT_GRIDS, InitialConditionGrid, SystemSpec, get_system
from .errors import ValidationError

__all__ = ["RunConfig", "DictionaryConfig", "EdmdConfig", "SpectralConfig", "DiscoveryConfig",
           "PathsConfig", "load_config"]


def _strict(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ValidationError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class DictionaryConfig:
    kind: str = "gaussian_rbf"
    N: int = 30
    sigma: float = 0.4
    seed: int = 0
    constant: bool = False


@dataclass(frozen=True)
class EdmdConfig:
    rel_tol: float = 1e-10
    lag: int = 15


@dataclass(frozen=True)
class SpectralConfig:
    unit_tol: float = 0.05
    rank_tol: float = 1e-8
    resolution: int = 100
    pad: float = 0.1
    level: float = 0.5
    localize: bool = True


@dataclass(frozen=True)
class DiscoveryConfig:
    n: int = 10
    safety: float = 1.5
    dictionary_policy: str = "reseed-from-all-data"
    order_seed: int = 0


@dataclass(frozen=True)
class PathsConfig:
    data: str | None = None
    out: str = "out"


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run depends on.

    ``dt`` is the sampling interval; each interval is integrated with
    ``substeps`` RK4 steps. Koopman matrices advance ``edmd.lag`` samples per
    application. ``domain_factor`` scales the initial-condition box into the
    box trajectories may not leave.
    """

    system: SystemSpec = field(default_factory=lambda: get_system("toggle_switch"))
    dt: float = 0.1
    steps: int = 1000
    substeps: int = 1
    ic_grid: InitialConditionGrid = field(default_factory=lambda: DEFAULT_GRIDS["toggle_switch"])
    domain_factor: float = 10.0
    basin_radius: float = 0.5
    dictionary: DictionaryConfig = DictionaryConfig()
    edmd: EdmdConfig = EdmdConfig()
    spectral: SpectralConfig = SpectralConfig()
    discovery: DiscoveryConfig = DiscoveryConfig()
    paths: PathsConfig = PathsConfig()

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        if self.steps < 1 or self.substeps < 1:
            raise ValidationError("steps and substeps must be >= 1")
        if self.edmd.lag < 1:
            raise ValidationError("edmd.lag must be >= 1")
        if len(self.ic_grid.counts) != self.system.dim:
            raise ValidationError("ic_grid dimension does not match the system")

    @classmethod
    def for_system(cls, name: str, **overrides) -> "RunConfig":
        return cls(system=get_system(name), ic_grid=DEFAULT_GRIDS[name], **overrides)

    def to_dict(self) -> dict:
        d = {
            "system": {"name": self.system.name, "params": dict(self.system.params)},
            "ic_grid": {"lower": list(self.ic_grid.lower), "upper": list(self.ic_grid.upper),
                        "counts": list(self.ic_grid.counts)},
        }
        for f in fields(self):
            if f.name in d:
                continue
            v = getattr(self, f.name)
            d[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValidationError("config must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"config: unknown keys {sorted(unknown)}")
        sysd = d.get("system", {"name": "toggle_switch"})
        if isinstance(sysd, str):
            sysd = {"name": sysd}
        extra = set(sysd) - {"name", "params"}
        if extra:
            raise ValidationError(f"system: unknown keys {sorted(extra)}")
        system = get_system(sysd.get("name", "toggle_switch"), sysd.get("params"))
        kw = {"system": system}
        g = d.get("ic_grid")
        if g is None:
            kw["ic_grid"] = DEFAULT_GRIDS[system.name]
        else:
            extra = set(g) - {"lower", "upper", "counts"}
            if extra:
                raise ValidationError(f"ic_grid: unknown keys {sorted(extra)}")
            kw["ic_grid"] = InitialConditionGrid(tuple(g["lower"]), tuple(g["upper"]),
                                                 tuple(g["counts"]))
        for key in ("dt", "steps", "substeps", "domain_factor", "basin_radius"):
            if key in d:
                kw[key] = d[key]
        sub = {"dictionary": DictionaryConfig, "edmd": EdmdConfig, "spectral": SpectralConfig,
               "discovery": DiscoveryConfig, "paths": PathsConfig}
        for key, klass in sub.items():
            if key in d:
                kw[key] = _strict(klass, d[key], key)
        return cls(**kw)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(d)
