import copy
import json
import pathlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple

from constants import DELTA_MIN_FRACTION, SYSTEM_DEFAULTS
from interval import BoxRegion
from util import UsageError

CONFIG_DIR = pathlib.Path(__file__).resolve().parent.parent / "config"
TEMPLATE_PATH = CONFIG_DIR / "template.json"
LOCAL_PATH = CONFIG_DIR / "local.json"

# sections whose keys are not fixed by the template
OPEN_SECTIONS = {"params"}


class ConfigError(UsageError):
    """A configuration file or flag is malformed, unknown or out of range."""


def _read(path: pathlib.Path) -> dict:
    try:
        with open(path) as file:
            return json.load(file)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e


def merge(base: dict, override: dict, where: str = "") -> dict:
    """Recursive merge where override wins; keys absent from base are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown configuration key '{path}'")
        if isinstance(base[key], dict) and key not in OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}' must be an object")
            out[key] = merge(base[key], value, path)
        else:
            out[key] = copy.deepcopy(value)
    return out


CONFIG = _read(TEMPLATE_PATH)
if LOCAL_PATH.exists():
    CONFIG = merge(CONFIG, _read(LOCAL_PATH))


class LossMode(str, Enum):
    ZUBOV = "zubov"
    # the expected-violation loss of earlier neural Lyapunov work, kept for comparison
    LYAPUNOV_RISK = "lyapunov-risk"


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


@dataclass(frozen=True)
class TrainConfig:
    r1: BoxRegion
    alpha: float
    certificate_dims: Tuple[int, ...]
    policy_dims: Tuple[int, ...]
    trajectories: int = 8
    batch_size: int = 64
    lambda_0: float = 5.0
    lambda_c: float = 0.5
    lambda_b: float = 5.0
    iterations: int = 3000
    learning_rate: float = 1e-3
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    region_scale: float = 0.9
    seed: int = 0
    loss_mode: LossMode = LossMode.ZUBOV
    risk_regularizer: float = 0.0
    actuation: str = "box-squash"
    anchor_policy: bool = True
    grad_guard: float = 1e-8
    dt: float = 0.01
    t_max: float = 30.0
    r_conv: float = 1e-3
    r_div: float = 50.0
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        r1 = self.r1 if isinstance(self.r1, BoxRegion) else BoxRegion.from_bounds(self.r1)
        object.__setattr__(self, "r1", r1)
        object.__setattr__(self, "certificate_dims", tuple(int(d) for d in self.certificate_dims))
        object.__setattr__(self, "policy_dims", tuple(int(d) for d in self.policy_dims))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        object.__setattr__(self, "loss_mode", LossMode(self.loss_mode))

        _require(self.trajectories > 0 and self.batch_size > 0, "trajectories and batch_size must be positive")
        _require(self.iterations > 0, f"iterations must be positive, got {self.iterations}")
        _require(
            min(self.lambda_0, self.lambda_c, self.lambda_b, self.risk_regularizer) >= 0,
            "loss weights must be non-negative",
        )
        _require(self.alpha > 0, f"alpha must be positive, got {self.alpha}")
        _require(self.region_scale > 0, f"region_scale must be positive, got {self.region_scale}")
        _require(self.learning_rate > 0 and self.adam_epsilon > 0, "learning rate and adam epsilon must be positive")
        _require(all(0 <= b < 1 for b in self.adam_betas), f"adam betas must lie in [0, 1), got {self.adam_betas}")
        _require(r1.contains_origin_strictly(), f"r1 {r1.to_bounds()} must contain the origin strictly inside")
        _require(self.certificate_dims[-1] == 1, "the certificate network must have a scalar output")
        _require(
            self.certificate_dims[0] == r1.dim and self.policy_dims[0] == r1.dim,
            f"network input dims must match the {r1.dim}-dimensional region",
        )
        _require(self.actuation in ("box-squash", "vertex-softmax"), f"unknown actuation '{self.actuation}'")
        _require(self.dt > 0 and self.t_max > 0 and 0 < self.r_conv < self.r_div, "invalid simulation settings")
        _require(self.grad_guard > 0, "grad_guard must be positive")
        _require(self.checkpoint_every > 0 and self.log_every > 0, "checkpoint and log intervals must be positive")

    @property
    def r2(self) -> BoxRegion:
        return self.r1.scale(self.region_scale)


@dataclass(frozen=True)
class VerifyConfig:
    # None means: bisect for the largest certifiable level
    c: Optional[float] = None
    epsilon: float = 0.1
    # None means: a fixed fraction of the region diameter
    delta_min: Optional[float] = None
    budget: int = 10_000_000
    tol: float = 1e-3
    area_samples: int = 100_000
    chunk: int = 4096
    threads: int = 1

    def __post_init__(self):
        _require(self.c is None or 0 < self.c < 1, f"c must lie in (0, 1), got {self.c}")
        _require(self.epsilon > 0 and self.tol > 0, "epsilon and tol must be positive")
        _require(self.delta_min is None or self.delta_min > 0, "delta_min must be positive")
        _require(self.budget >= 1, f"budget must be at least 1, got {self.budget}")
        _require(self.area_samples > 0 and self.chunk > 0, "area_samples and chunk must be positive")
        _require(self.threads >= 1, f"threads must be at least 1, got {self.threads}")

    def resolved_delta_min(self, region: BoxRegion) -> float:
        return self.delta_min if self.delta_min is not None else DELTA_MIN_FRACTION * region.diameter()


@dataclass(frozen=True)
class PathsConfig:
    weights_out: pathlib.Path = pathlib.Path("data/weights")
    report_out: pathlib.Path = pathlib.Path("data/report.json")
    data_out: pathlib.Path = pathlib.Path("data")

    def __post_init__(self):
        for name in ("weights_out", "report_out", "data_out"):
            object.__setattr__(self, name, pathlib.Path(getattr(self, name)))


@dataclass(frozen=True)
class RunConfig:
    system: str
    train: TrainConfig
    verify: VerifyConfig
    paths: PathsConfig
    seed: int = 0
    params: Dict[str, Any] = field(default_factory=dict)

    @property
    def reference_c(self) -> float:
        return SYSTEM_DEFAULTS[self.system]["reference_c"]


def load_run_config(path: Optional[pathlib.Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    """
    Layers, last one wins: config/template.json (plus config/local.json), the per-system defaults
    for anything left null, the user's file, then command-line overrides.
    """
    merged = copy.deepcopy(CONFIG)
    if path is not None:
        merged = merge(merged, _read(pathlib.Path(path)))
    if overrides:
        merged = merge(merged, overrides)

    name = merged["system"]["name"]
    if name not in SYSTEM_DEFAULTS:
        raise ConfigError(f"unknown system '{name}', expected one of {sorted(SYSTEM_DEFAULTS)}")
    defaults = SYSTEM_DEFAULTS[name]
    train_section = merged["train"]
    for key in ("alpha", "r1", "certificate_dims", "policy_dims"):
        if train_section[key] is None:
            train_section[key] = copy.deepcopy(defaults[key])

    try:
        seed = int(merged["seed"])
        return RunConfig(
            system=name,
            train=TrainConfig(**train_section, seed=seed),
            verify=VerifyConfig(**merged["verify"]),
            paths=PathsConfig(**merged["paths"]),
            seed=seed,
            params=dict(merged["system"]["params"]),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {e}") from e
