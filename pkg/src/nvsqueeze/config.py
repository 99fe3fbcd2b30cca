"""Run configuration: schema, loading and canonical hashing.

Configs are YAML or JSON trees validated against a versioned schema.  Unknown
keys are rejected and every error names the offending key path.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from pathlib import Path
from typing import Annotated, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .constants import J0_MHZ_NM3, ppm_nm_to_areal
from .errors import CapacityError, ConfigError

SCHEMA_VERSION = 1
KINDS = ("ensemble", "twist", "generation", "readout", "map", "squeeze", "crossover")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Linspace(_Strict):
    start: float
    stop: float
    num: int = Field(ge=1)

    def values(self) -> list[float]:
        return [float(v) for v in np.linspace(self.start, self.stop, self.num)]


Grid = list[float] | Linspace


def grid_values(g: Grid) -> list[float]:
    return g.values() if isinstance(g, Linspace) else [float(v) for v in g]


class NoPrelude(_Strict):
    kind: Literal["none"] = "none"


class RemovalPrelude(_Strict):
    kind: Literal["hard_cutoff", "shelving", "depolarization"]
    radius: float = Field(ge=0)
    coupling_source: Literal["nearest", "mean_field"] = "nearest"


class RampPrelude(_Strict):
    kind: Literal["ramp"]
    h0: float = Field(gt=0, description="initial field, rad/us")
    k: float = Field(gt=0)
    duration: float = Field(gt=0)
    steps: int = Field(default=100, ge=10)
    wait: bool = True


Prelude = Annotated[NoPrelude | RemovalPrelude | RampPrelude, Field(discriminator="kind")]


class Geometry(_Strict):
    """Areal density (ppm*nm, converted with the diamond number density) and layer thickness (nm)."""

    density_ppm_nm: float = Field(default=8.0, gt=0)
    thickness: float = Field(default=7.0, ge=0)
    n_spins: int = Field(default=16, ge=1, description="active spins per realization after engineering")
    prelude: Prelude = NoPrelude()

    @property
    def density(self) -> float:
        return ppm_nm_to_areal(self.density_ppm_nm)


class Engine(_Strict):
    name: Literal["exact", "dtwa"] = "exact"
    eta: float = Field(default=1.0, ge=0, le=1)
    n_traj: int = Field(default=1, ge=1)
    n_realizations: int = Field(default=1, ge=1)
    steps_per_radian: float = Field(default=20.0, gt=0)
    max_spins: int = Field(default=24, ge=1)
    J0_mhz_nm3: float = Field(default=J0_MHZ_NM3, gt=0)

    @property
    def J0(self) -> float:
        return 2 * math.pi * self.J0_mhz_nm3

    @model_validator(mode="after")
    def _traj(self):
        if self.name == "dtwa" and self.n_traj < 2:
            raise ValueError("the cluster engine needs n_traj >= 2")
        return self


class Grids(_Strict):
    t_g: Grid = [0.0]
    theta: Grid = [0.0]
    t_r: Grid = [0.0]
    phi: Grid = [0.0]

    @field_validator("t_g", "theta", "t_r", "phi")
    @classmethod
    def _increasing(cls, v):
        vals = grid_values(v)
        if not vals:
            raise ValueError("grid must not be empty")
        if any(not math.isfinite(x) for x in vals):
            raise ValueError("grid values must be finite")
        if any(b <= a for a, b in itertools.pairwise(vals)):
            raise ValueError("grid must be strictly increasing")
        return v

    @field_validator("t_r")
    @classmethod
    def _starts_at_zero(cls, v):
        if grid_values(v)[0] != 0.0:
            raise ValueError("t_r grid must start at 0")
        return v


class Analysis(_Strict):
    t_max: list[float] | None = None
    p_mode: Literal["global"] | float = "global"
    map_tolerance: float = Field(default=0.1, gt=0)
    twist_phi: float = Field(default=math.pi / 4)
    twist_times: Grid = Linspace(start=0.02, stop=0.4, num=20)
    twist_max_ratio: float = Field(default=0.2, gt=0)

    @field_validator("twist_phi")
    @classmethod
    def _tip(cls, v):
        if not 0 < abs(v) < math.pi / 2:
            raise ValueError("twist_phi must satisfy 0 < |phi| < pi/2")
        return v


class Crossover(_Strict):
    r_min: list[float] = [4.0, 8.0, 16.0]
    t: Grid = Linspace(start=0.01, stop=10.0, num=50)


class Output(_Strict):
    dir: str = "results"


class RunConfig(_Strict):
    version: int
    kind: Literal[KINDS]  # type: ignore[valid-type]
    name: str = "run"
    seed: int = Field(default=0, ge=0, lt=2**64)
    geometry: Geometry = Geometry()
    engine: Engine = Engine()
    grids: Grids = Grids()
    analysis: Analysis = Analysis()
    crossover: Crossover = Crossover()
    output: Output = Output()

    @field_validator("version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {v} (expected {SCHEMA_VERSION})")
        return v

    def check_capacity(self):
        exact_run = self.engine.name == "exact" and self.kind not in ("ensemble", "crossover")
        if exact_run and self.geometry.n_spins > self.engine.max_spins:
            raise CapacityError(
                f"geometry.n_spins = {self.geometry.n_spins} exceeds the exact engine limit "
                f"engine.max_spins = {self.engine.max_spins}"
            )

    def semantic_dict(self) -> dict:
        """Canonical content that defines the results (output location excluded)."""
        d = self.model_dump(mode="json")
        d.pop("output")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed=None, out=None) -> RunConfig:
        upd = {}
        if seed is not None:
            upd["seed"] = seed
        if out is not None:
            upd["output"] = Output(dir=str(out))
        return parse_config({**self.model_dump(mode="json"), **{k: _dump(v) for k, v in upd.items()}})


def _dump(v):
    return v.model_dump(mode="json") if isinstance(v, BaseModel) else v


def parse_config(data) -> RunConfig:
    """Validate a config tree.

    Raises :class:`ConfigError` naming the bad key, or :class:`CapacityError`
    when the exact engine is asked for more spins than its limit.
    """
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        # for unions, the deepest location is the most specific complaint
        err = max(exc.errors(), key=lambda e: len(e["loc"]))
        raise ConfigError(err["msg"], _clean_loc(err["loc"])) from None
    cfg.check_capacity()
    return cfg


_PRELUDE_TAGS = {"none", "hard_cutoff", "shelving", "depolarization", "ramp"}


def _clean_loc(loc) -> tuple:
    """Drop the union member names pydantic inserts into error locations."""
    out = []
    for p in loc:
        if isinstance(p, str) and (p.startswith(("list[", "function-")) or p in ("Linspace", "float")):
            continue
        if out and out[-1] == "prelude" and p in _PRELUDE_TAGS:
            continue
        out.append(p)
    return tuple(out)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return parse_config(data)
