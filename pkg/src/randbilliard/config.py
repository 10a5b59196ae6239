"""Run configuration: YAML files validated by a strict pydantic schema."""
from __future__ import annotations

import copy
from importlib import resources
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, \
    model_validator

from .errors import ConfigError

EXPERIMENTS = ("simulate-chain", "simulate-sde", "compute-matrices", "verify-generator",
               "stationary-test", "chain-vs-sde")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------- profiles

class FlatSpec(_Strict):
    type: Literal["flat"]
    periods: list[PositiveFloat] = [1.0]


class ArcSpec(_Strict):
    type: Literal["arc"]
    a1: PositiveFloat = 1.0
    R: PositiveFloat = 3.0


class MovingWallSpec(_Strict):
    type: Literal["moving_wall"]
    a1: PositiveFloat = 1.0
    R: PositiveFloat = 3.0          # radius of the inner arc
    m0: PositiveFloat = 1.0
    m1: PositiveFloat = 1.0
    a0: PositiveFloat | None = None


class TentSpec(_Strict):
    type: Literal["tent"]
    m: PositiveFloat
    masses: list[PositiveFloat]
    length: PositiveFloat = 1.0


ProfileSpec = Annotated[Union[FlatSpec, ArcSpec, MovingWallSpec, TentSpec], Field(discriminator="type")]


class HiddenSpec(_Strict):
    k: Annotated[int, Field(ge=0)] = 0
    sigma2: PositiveFloat | None = None
    # physical wall variance; converted to sigma2 = (m0/m1) sigma0_sq / a1^2 for the moving wall
    sigma0_sq: PositiveFloat | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.sigma2 is not None and self.sigma0_sq is not None:
            raise ValueError("give either sigma2 or sigma0_sq, not both")
        if self.k > 0 and self.sigma2 is None and self.sigma0_sq is None:
            raise ValueError("hidden coordinates need sigma2 (or sigma0_sq)")
        return self


class FamilySpec(_Strict):
    type: Literal["flat", "tent", "arc", "moving_wall"]
    k: PositiveInt = 1              # tent: number of wall masses; flat: dimension n
    heat_bath: bool = True          # tent: wall velocities hidden
    alpha: PositiveFloat = 1.0      # moving wall coupling m1/m0 = alpha kappa^2 / 4


class ModelSpec(_Strict):
    type: Literal["mb", "legendre", "laguerre", "laguerre_normalized", "zero"]
    lambdas: list[float] | list[list[float]] | None = None   # mb: full Lambda; legendre: Lambda
    k: Annotated[int, Field(ge=0)] = 1                        # mb: hidden coordinates
    sigma2: PositiveFloat | None = None
    lam: PositiveFloat | None = None                          # laguerre
    scale: PositiveFloat = 1.0                                # multiplies Lambda
    dim: PositiveInt = 1                                      # zero model

    @model_validator(mode="after")
    def _check(self):
        if self.type in ("mb", "legendre") and self.lambdas is None:
            raise ValueError(f"{self.type} model needs lambdas")
        if self.type == "mb" and self.sigma2 is None:
            raise ValueError("mb model needs sigma2")
        if self.type == "laguerre" and (self.lam is None or self.sigma2 is None):
            raise ValueError("laguerre model needs lam and sigma2")
        return self


class PhiSpec(_Strict):
    center: list[float]
    radius: PositiveFloat
    project: list[int] | None = None     # evaluate on these coordinates only


class ChainSection(_Strict):
    steps: PositiveInt
    initial: list[float] | Literal["stationary"] = "stationary"
    speed: PositiveFloat = 1.0           # speed of the stationary start when k = 0
    max_resamples: PositiveInt = 100


class SDESection(_Strict):
    model: ModelSpec
    dt: PositiveFloat
    steps: PositiveInt
    initial: list[float]
    record_every: PositiveInt = 1
    max_retries: PositiveInt = 50


class GeneratorSection(_Strict):
    family: FamilySpec
    phi: PhiSpec
    probes: list[list[float]]
    h_sequence: list[PositiveFloat] = [0.04, 0.01, 0.0025]
    n0: PositiveFloat = 16.0
    sampler: Literal["mc", "rqmc"] = "rqmc"
    replicates: PositiveInt = 16
    denominator: Literal["h", "trace_A"] = "h"
    cap: PositiveInt = 10**9


class StationarySection(_Strict):
    steps: PositiveInt
    bins: PositiveInt = 60
    speed: PositiveFloat = 1.0


class MatricesSection(_Strict):
    quadrature_points: Annotated[int, Field(ge=1000)] = 1000
    family: FamilySpec | None = None
    h_sequence: list[PositiveFloat] | None = None


class CompareSection(_Strict):
    family: FamilySpec
    model: ModelSpec
    t_end: PositiveFloat
    n_paths: PositiveInt
    h_sequence: list[PositiveFloat]
    initial: list[float]
    sde_dt: PositiveFloat | None = None


class RunConfig(_Strict):
    experiment: Literal[EXPERIMENTS]
    description: str | None = None
    seed: Annotated[int, Field(ge=0)] = 0
    threads: PositiveInt | None = None
    out: str | None = None              # output directory (the --out flag takes precedence)
    profile: ProfileSpec | None = None
    hidden: HiddenSpec = HiddenSpec()
    chain: ChainSection | None = None
    sde: SDESection | None = None
    generator: GeneratorSection | None = None
    stationary: StationarySection | None = None
    matrices: MatricesSection | None = None
    compare: CompareSection | None = None

    @model_validator(mode="after")
    def _sections(self):
        need = {"simulate-chain": ("profile", "chain"), "simulate-sde": ("sde",),
                "compute-matrices": ("profile",), "verify-generator": ("generator",),
                "stationary-test": ("profile", "stationary"), "chain-vs-sde": ("compare",)}
        for name in need[self.experiment]:
            if getattr(self, name) is None:
                raise ValueError(f"experiment {self.experiment!r} requires section {name!r}")
        return self


# ------------------------------------------------------------------ loading

def _set_path(d, dotted, value):
    keys = dotted.split(".")
    cur = d
    for key in keys[:-1]:
        if not isinstance(cur.get(key), dict):
            cur[key] = {}
        cur = cur[key]
    cur[keys[-1]] = value


def apply_overrides(raw: dict, overrides):
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, val = item.split("=", 1)
        _set_path(raw, key.strip(), yaml.safe_load(val))
    return raw


def validate(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(p) for p in err["loc"])
        raise ConfigError(f"{field}: {err['msg']}", field=field) from None


def load_yaml(path):
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    return raw


def preset_names():
    files = resources.files("randbilliard").joinpath("presets")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def load_preset(name):
    path = resources.files("randbilliard").joinpath("presets", f"{name}.yaml")
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}", field="preset")
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    return raw


def preset_description(name):
    return load_preset(name).get("description", "")
