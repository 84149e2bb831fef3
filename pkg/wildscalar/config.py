"""Grid, construction parameters, run config and the key = value file reader."""
import logging
import math
import os
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from wildscalar.errors import UsageError

logger = logging.getLogger("wildscalar")

COMMANDS = ("symbol-check", "wave-build", "t4-solve", "integrate", "verify")

DEFAULT_OUT_DIR = os.environ.get("WILDSCALAR_OUT", "wildscalar_out")
DEFAULT_WORKERS = int(os.environ.get("WILDSCALAR_WORKERS", "1"))


class GridSpec(BaseModel):
    """Uniform grid of (0,T)×𝕋ⁿ: cell-centred time samples, x_j = 2πj/N_x."""

    model_config = ConfigDict(frozen=True)

    n: int = 2
    N_x: int = 64
    N_t: int = 64
    T: float = 1.0
    dealias: bool = False

    @field_validator("n")
    @classmethod
    def _dimension(cls, v):
        if v < 2:
            raise ValueError(f"spatial dimension must be >= 2, got {v}")
        return v

    @field_validator("N_x")
    @classmethod
    def _spatial_points(cls, v):
        if v < 4 or v & (v - 1):
            raise ValueError(f"N_x must be a power of two >= 4, got {v}")
        return v

    @field_validator("N_t")
    @classmethod
    def _time_samples(cls, v):
        if v < 2:
            raise ValueError(f"N_t must be >= 2, got {v}")
        return v

    @field_validator("T")
    @classmethod
    def _horizon(cls, v):
        if not v > 0:
            raise ValueError(f"T must be positive, got {v}")
        return v

    @property
    def dx(self):
        return 2 * math.pi / self.N_x

    @property
    def dt(self):
        return self.T / self.N_t

    @property
    def spatial_shape(self):
        return (self.N_x,) * self.n

    @property
    def spatial_axes(self):
        return tuple(range(-self.n, 0))

    @property
    def cell_volume(self):
        return self.dt * self.dx ** self.n

    def x_axis(self):
        return self.dx * np.arange(self.N_x)

    def t_axis(self):
        return self.dt * (np.arange(self.N_t) + 0.5)

    def coordinates(self):
        """Spatial coordinate arrays, each of shape spatial_shape."""
        return np.meshgrid(*([self.x_axis()] * self.n), indexing="ij")


class ConstructionParams(BaseModel):
    """Every free parameter of the construction."""

    grid: GridSpec = Field(default_factory=lambda: GridSpec(N_x=64, N_t=64, T=64.0))
    symbol: str = "pm2d"
    patch_centers: Optional[tuple[tuple[float, ...], tuple[float, ...]]] = None
    cone_width: float = 0.2
    lam: float = 0.5
    epsilon: float = 0.1
    epsilon1: float = 0.5
    epsilon2: float = 0.1
    delta0: float = 2 * math.pi
    delta_decay: float = 0.5
    s: float = 0.05
    eta: float = 0.15
    steps: int = 12
    stages: int = 3
    max_balls: int = 6
    time_margin: float = 0.125
    profile_order: int = 3
    seed: int = 0
    workers: int = DEFAULT_WORKERS
    tol_div: float = 1e-8
    strict: bool = True

    @field_validator("lam", "epsilon", "epsilon1", "epsilon2", "cone_width", "delta_decay")
    @classmethod
    def _unit_interval(cls, v, info):
        if not 0 < v < 1:
            raise ValueError(f"{info.field_name} must lie in (0,1), got {v}")
        return v

    @field_validator("s")
    @classmethod
    def _shrink(cls, v):
        if not 0 < v <= 0.25:
            raise ValueError(f"s must lie in (0, 1/4], got {v}")
        return v

    @field_validator("eta")
    @classmethod
    def _eta(cls, v):
        if not (v > 0 and (1 - v) ** 3 > 0.5):
            raise ValueError(f"eta={v} violates (1-eta)^3 > 1/2")
        return v

    @field_validator("time_margin")
    @classmethod
    def _margin(cls, v):
        if not 0 < v < 0.5:
            raise ValueError(f"time_margin must lie in (0, 1/2), got {v}")
        return v

    @field_validator("delta0")
    @classmethod
    def _delta0(cls, v):
        if not v > 0:
            raise ValueError(f"delta0 must be positive, got {v}")
        return v

    @field_validator("stages", "profile_order", "max_balls", "workers")
    @classmethod
    def _counts(cls, v, info):
        minimum = 0 if info.field_name == "stages" else 1
        if v < minimum:
            raise ValueError(f"{info.field_name} must be >= {minimum}, got {v}")
        return v

    @model_validator(mode="after")
    def _steps(self):
        if self.steps < 4 or self.steps % 4:
            raise ValueError(f"steps N must be a positive multiple of 4, got {self.steps}")
        if (1 - self.eta) ** (self.steps - 4) >= 0.5:
            raise ValueError(f"steps N={self.steps} violates (1-eta)^(N-4) < 1/2 at eta={self.eta}")
        if self.patch_centers is not None:
            for c in self.patch_centers:
                if len(c) != self.grid.n:
                    raise ValueError(f"patch center {c} does not match dimension {self.grid.n}")
        return self

    def delta_at(self, stage):
        """δ-schedule: δ₀·γ^(stage-1)."""
        return self.delta0 * self.delta_decay ** (stage - 1)


class RunConfig(BaseModel):
    command: Literal["symbol-check", "wave-build", "t4-solve", "integrate", "verify"]
    params: ConstructionParams = Field(default_factory=ConstructionParams)
    config_path: Optional[Path] = None
    input_path: Optional[Path] = None
    out_dir: Path = Path(DEFAULT_OUT_DIR)
    seed: int = 0
    verbosity: int = 0
    basket_size: int = 20


# ═══ key = value files ═══

# File keys → (section, field). Section "grid" feeds GridSpec.
CONFIG_KEYS = {
    "symbol": ("params", "symbol"),
    "name": ("params", "symbol"),
    "n": ("grid", "n"),
    "nx": ("grid", "N_x"),
    "nt": ("grid", "N_t"),
    "t": ("grid", "T"),
    "horizon": ("grid", "T"),
    "grid": ("grid", "grid"),
    "cone_width": ("params", "cone_width"),
    "lambda": ("params", "lam"),
    "lam": ("params", "lam"),
    "epsilon": ("params", "epsilon"),
    "epsilon1": ("params", "epsilon1"),
    "epsilon2": ("params", "epsilon2"),
    "delta0": ("params", "delta0"),
    "delta_decay": ("params", "delta_decay"),
    "s": ("params", "s"),
    "eta": ("params", "eta"),
    "steps": ("params", "steps"),
    "stages": ("params", "stages"),
    "max_balls": ("params", "max_balls"),
    "time_margin": ("params", "time_margin"),
    "profile_order": ("params", "profile_order"),
    "patches": ("params", "patch_centers"),
    "workers": ("params", "workers"),
    "strict": ("params", "strict"),
    "seed": ("run", "seed"),
    "out": ("run", "out_dir"),
    "input": ("run", "input_path"),
    "basket_size": ("run", "basket_size"),
}


def normalize_key(key):
    return key.strip().lower().lstrip("-").replace("-", "_")


def load_config_file(path):
    """Parse a UTF-8 `key = value` file into a dict of raw strings."""
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def parse_grid(text):
    """'64x64' or '64x64x3' → (N_x, N_t[, n])."""
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise UsageError(f"grid must look like NXxNT or NXxNTxN, got {text!r}") from None
    if len(parts) not in (2, 3):
        raise UsageError(f"grid must look like NXxNT or NXxNTxN, got {text!r}")
    out = {"N_x": parts[0], "N_t": parts[1]}
    if len(parts) == 3:
        out["n"] = parts[2]
    return out


def parse_patches(text):
    """'1,0;0,1' → ((1.0, 0.0), (0.0, 1.0))."""
    try:
        centers = tuple(tuple(float(c) for c in chunk.split(",")) for chunk in text.split(";") if chunk.strip())
    except ValueError:
        raise UsageError(f"patch centers must be numbers, got {text!r}") from None
    if len(centers) != 2:
        raise UsageError(f"patches needs exactly two centers separated by ';', got {text!r}")
    return centers


def build_run_config(command, values, defaults=None):
    """Assemble a RunConfig from merged raw values (flags already layered over the file)."""
    defaults = defaults or ConstructionParams()
    grid_kw = defaults.grid.model_dump()
    params_kw = defaults.model_dump(exclude={"grid"})
    run_kw = {}
    for key, value in values.items():
        if value is None:
            continue
        section, name = CONFIG_KEYS[key]
        if section == "grid":
            if name == "grid":
                grid_kw.update(parse_grid(value) if isinstance(value, str) else value)
            else:
                grid_kw[name] = value
        elif section == "params":
            params_kw[name] = parse_patches(value) if name == "patch_centers" and isinstance(value, str) else value
        else:
            run_kw[name] = value
    params_kw["grid"] = GridSpec(**grid_kw)
    params = ConstructionParams(**params_kw)
    if "seed" in run_kw:
        params = params.model_copy(update={"seed": int(run_kw["seed"])})
    return RunConfig(command=command, params=params, **run_kw)
