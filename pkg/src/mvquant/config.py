"""Scenario configuration: one YAML (or JSON) document validated against a published schema.

Every default lives here and is echoed into the run manifest, so each number
in a report traces back to either the config file or a default below.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .coeffs import A_CATALOG, CATALOG
from .errors import ConfigInvalid

SUBSETS = {
    "linfp": (1, 2, 9),
    "density": (3,),
    "nonlinear": (4, 5, 6),
    "kernels": (7, 8),
    "stable": (10,),
    "particles": (11,),
    "determinism": (12,),
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSpec(_Strict):
    x_min: float = -8.0
    x_max: float = 8.0
    dx: float = Field(0.02, gt=0)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        if (self.x_max - self.x_min) / self.dx < 4:
            raise ValueError("fewer than 4 cells")
        return self


class TimeSpec(_Strict):
    T: float = Field(1.0, gt=0)
    dt: float = Field(5e-4, gt=0)
    n_save: int = Field(100, ge=2)


class CatalogModel(_Strict):
    key: str = "median-attracting-ou"
    params: dict[str, float] = Field(default_factory=dict)

    @field_validator("key")
    @classmethod
    def _known(cls, v):
        if v not in CATALOG:
            raise ValueError(f"unknown model {v!r}; known: {sorted(CATALOG)}")
        return v


class TableModel(_Strict):
    t_nodes: list[float]
    x_nodes: list[float]
    omega_nodes: list[float]
    drift: list[list[list[float]]]
    diffusion: list[list[list[float]]]
    m: Optional[float] = None
    kappa: Optional[float] = None


class StableSpec(_Strict):
    alpha_s: float = Field(1.5, gt=1.0, le=2.0)
    a_key: str = "constant"
    a_params: dict[str, float] = Field(default_factory=dict)

    @field_validator("a_key")
    @classmethod
    def _known(cls, v):
        if v not in A_CATALOG:
            raise ValueError(f"unknown a(x) field {v!r}; known: {sorted(A_CATALOG)}")
        return v


class InitSpec(_Strict):
    kind: Literal["gaussian", "dirac", "csv"] = "gaussian"
    mean: float = 0.0
    var: float = Field(0.5, gt=0)
    xi: float = 0.0
    width_cells: float = Field(2.0, gt=0)
    path: Optional[str] = None

    @model_validator(mode="after")
    def _csv_needs_path(self):
        if self.kind == "csv" and not self.path:
            raise ValueError("csv initial data needs 'path'")
        return self


class PicardSpec(_Strict):
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(50, ge=1)
    split_factor: int = Field(2, ge=2)
    max_splits: int = Field(6, ge=0)
    relaxation: float = Field(1.0, gt=0, le=1)
    ratio_after: int = Field(3, ge=1)
    certificate_eps: float = Field(1e-3, gt=0, lt=1)


class ParticleSpec(_Strict):
    N: int = Field(20000, ge=2)
    dt: float = Field(1e-3, gt=0)
    seeds: list[int] = Field(default_factory=lambda: [0])
    snapshot_times: list[float] = Field(default_factory=list)
    compare_pde: bool = True

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed")
        if any(s < 0 for s in v):
            raise ValueError("seeds must be non-negative")
        return v


class VerifySpec(_Strict):
    subset: Optional[str] = None
    scratch: Optional[str] = None

    @field_validator("subset")
    @classmethod
    def _subset(cls, v):
        if v is not None and v not in SUBSETS:
            raise ValueError(f"unknown subset {v!r}; known: {sorted(SUBSETS)}")
        return v


class ScenarioConfig(_Strict):
    kind: Literal["linfp", "nonlinear", "stable", "particles", "verify"]
    grid: GridSpec = Field(default_factory=GridSpec)
    time: TimeSpec = Field(default_factory=TimeSpec)
    model: Union[CatalogModel, TableModel] = Field(default_factory=CatalogModel)
    stable: StableSpec = Field(default_factory=StableSpec)
    init: InitSpec = Field(default_factory=InitSpec)
    alpha: Union[float, list[float]] = 0.5
    omega: Optional[float] = Field(None, description="constant quantile curve for linfp runs; default: Q_alpha(u0)")
    picard: PicardSpec = Field(default_factory=PicardSpec)
    particles: ParticleSpec = Field(default_factory=ParticleSpec)
    verify: VerifySpec = Field(default_factory=VerifySpec)
    out: str = "out"
    workers: int = Field(1, ge=1)

    @field_validator("alpha")
    @classmethod
    def _levels(cls, v):
        vals = v if isinstance(v, list) else [v]
        if not vals:
            raise ValueError("at least one quantile level")
        for a in vals:
            if not 0.0 < a < 1.0:
                raise ValueError(f"quantile level {a} outside (0, 1)")
        if len(vals) > 1:
            raise ValueError("the solvers are one-dimensional: give a single quantile level")
        return v

    @property
    def alpha_value(self) -> float:
        return float(self.alpha[0] if isinstance(self.alpha, list) else self.alpha)


def _field_path(loc) -> str:
    # pydantic puts union branch names into the location; keep only real field names
    parts = [str(p) for p in loc if not (isinstance(p, str) and p[:1].isupper())]
    return ".".join(parts) or "<root>"


def validate(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigInvalid("<root>", "config must be a mapping")
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        raise ConfigInvalid(_field_path(err["loc"]), err["msg"]) from None


def load(path: str | Path) -> ScenarioConfig:
    """Read a YAML or JSON config file (JSON is a subset of YAML)."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigInvalid("<file>", str(e)) from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigInvalid("<file>", f"not valid YAML: {e}") from None
    return validate(data or {})


def schema() -> dict:
    return ScenarioConfig.model_json_schema()


def echo(cfg: ScenarioConfig) -> dict:
    """Fully expanded config (defaults included) for manifests."""
    return json.loads(cfg.model_dump_json())
