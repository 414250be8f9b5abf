"""Run configuration, presets, and construction of models from configs."""

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .density import PriorModel
from .elbo import InferenceFn
from .errors import ConfigError, MetFlowError
from .flows import FlowStack
from .grad import ParamTree
from .kernels import DirectionDist, RatioFamily
from .model import MetFlowModel
from .targets import get_target
from .train import SETTINGS, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

METHODS = ("metflow", "nf")


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a training run.

    ``dim`` defaults to the target's dimension and ``hidden`` to
    :func:`default_hidden`.  ``method`` picks the MetFlow
    objective or the plain-flow baseline; the baseline always uses per-step
    parameters without noise.
    """

    seed: int
    target: str = "mog2d"
    target_params: dict = field(default_factory=dict)
    dim: Optional[int] = None
    n_steps: int = 5
    n_blocks: int = 2
    hidden: Optional[int] = None
    setting: str = "pseudo"
    family: str = "mh"
    nu: str = "uniform"
    r: str = "uniform"
    method: str = "metflow"
    prior_mu: float = 0.0
    prior_log_scale: float = 0.0
    train_prior: bool = True
    init_scale: float = 0.0
    mode_radius: Optional[float] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)):
            raise ConfigError("seed must be an integer")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", _train_from_dict(self.train))
        if self.n_steps < 1 or self.n_blocks < 1 or (self.hidden is not None and self.hidden < 1):
            raise ConfigError("n_steps, n_blocks and hidden must be >= 1")
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}")
        if self.family not in ("mh", "barker"):
            raise ConfigError("family must be 'mh' or 'barker'")
        if self.nu not in ("uniform", "trainable"):
            raise ConfigError("nu must be 'uniform' or 'trainable'")
        if self.r not in ("uniform", "bernoulli"):
            raise ConfigError("r must be 'uniform' or 'bernoulli'")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.mode_radius is not None and self.mode_radius <= 0:
            raise ConfigError("mode_radius must be positive")
        target = make_target(self)
        if self.dim is None:
            object.__setattr__(self, "dim", target.dim)
        elif self.dim != target.dim:
            raise ConfigError(f"dim={self.dim} but target {self.target!r} has dimension {target.dim}")
        if self.hidden is None:
            object.__setattr__(self, "hidden", default_hidden(self.dim))

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a table")
        if "seed" not in data:
            raise ConfigError("configuration is missing the mandatory 'seed'")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        data = dict(data)
        data["train"] = _train_from_dict(data.get("train", {}))
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["target_params"] = _jsonable(self.target_params)
        return d

    def with_overrides(self, **changes):
        return replace(self, **changes)

    def frozen_prefixes(self):
        return () if self.train_prior else ("prior/",)

    @property
    def noisy(self):
        return self.method == "metflow" and self.setting != "deterministic"


def default_hidden(dim):
    return 4 if dim == 2 else 2 * dim


def _train_from_dict(data):
    if isinstance(data, TrainConfig):
        return data
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown train keys: {unknown}")
    try:
        return TrainConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in np.asarray(obj).tolist()] if isinstance(obj, np.ndarray) else [
            _jsonable(v) for v in obj
        ]
    return obj


def load_config(path):
    """Read a RunConfig from TOML or JSON (chosen by file extension)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def make_target(run):
    try:
        return get_target(run.target, **run.target_params)
    except MetFlowError:
        raise
    except Exception as exc:
        raise ConfigError(f"cannot build target {run.target!r}: {exc}") from exc


def build_model(run):
    target = make_target(run)
    noisy = run.noisy
    stack = FlowStack(run.dim, run.n_steps, run.n_blocks, run.hidden, shared=noisy, noisy=noisy)
    return MetFlowModel(
        target=target,
        prior=PriorModel(run.dim),
        stack=stack,
        nu=DirectionDist(run.n_steps, trainable=run.nu == "trainable"),
        family=RatioFamily(run.family),
        r=InferenceFn(run.n_steps, run.r),
        setting=run.setting if run.method == "metflow" else "deterministic",
    )


def init_params(model, run, rng):
    p = {}
    p.update(model.prior.init_params(run.prior_mu, run.prior_log_scale))
    p.update(model.stack.init_params(rng, run.init_scale))
    p.update(model.nu.init_params())
    p.update(model.r.init_params())
    return ParamTree(p)


def seed_streams(seed):
    """Independent generators for initialization, setup noise and training."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


# ---------------------------------------------------------------------------
# presets

_BASE_TRAIN = {"iterations": 5000, "batch_size": 100, "learning_rate": 1e-3, "early_stop_patience": 250}

PRESETS = {
    "mog2d": {"target": "mog2d", "n_steps": 5, "setting": "pseudo", "out": "runs/mog2d"},
    "mog2d-nf": {"target": "mog2d", "n_steps": 5, "method": "nf", "setting": "deterministic", "out": "runs/mog2d-nf"},
    "funnel": {"target": "funnel", "n_steps": 5, "setting": "pseudo", "out": "runs/funnel"},
    "hypercube": {"target": "hypercube", "target_params": {"d": 4}, "n_steps": 5, "setting": "pseudo", "out": "runs/hypercube"},
    "hypercube-nf": {
        "target": "hypercube",
        "target_params": {"d": 4},
        "n_steps": 5,
        "method": "nf",
        "setting": "deterministic",
        "out": "runs/hypercube-nf",
    },
    "gauss1d": {
        "target": "gaussian",
        "target_params": {"mean": [3.0], "std": 1.0},
        "n_steps": 1,
        "setting": "deterministic",
        "r": "bernoulli",
        "train": {
            "iterations": 3000,
            "batch_size": 100,
            "learning_rate": 5e-3,
            "early_stop_patience": 1000,
            "grad_clip": 10.0,
        },
        "out": "runs/gauss1d",
    },
}


def preset_names():
    return sorted(PRESETS)


def preset(name, seed=0, **overrides):
    """RunConfig for a named preset; ``overrides`` replace top-level fields and
    a ``train`` dict is merged into the preset's schedule."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in PRESETS[name].items()}
    train = dict(_BASE_TRAIN)
    train.update(data.pop("train", {}))
    train.update(overrides.pop("train", {}))
    data.update(overrides)
    data["train"] = train
    data["seed"] = seed
    return RunConfig.from_dict(data)
