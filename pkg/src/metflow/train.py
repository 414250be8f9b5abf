"""Stochastic-gradient training with Adam, early stopping and checkpoints."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import grad as G
from .elbo import elbo_and_grad, nf_baseline_grad
from .errors import ConfigError, NumericalError, ShapeError

CHECKPOINT_VERSION = 1
SETTINGS = ("deterministic", "pseudo", "full")


@dataclass(frozen=True)
class NoiseSetting:
    """How innovation noise reaches the flows.

    ``deterministic``: per-step parameters and no noise.  ``pseudo``: shared
    parameters with ``u_1..u_K`` drawn once at setup.  ``full``: shared
    parameters with fresh noise for every chain at every iteration.
    """

    kind: str = "deterministic"

    def __post_init__(self):
        if self.kind not in SETTINGS:
            raise ConfigError(f"unknown noise setting {self.kind!r}; expected one of {SETTINGS}")

    @property
    def noisy(self):
        return self.kind != "deterministic"

    def setup_noise(self, rng, n_steps, dim):
        return rng.standard_normal((n_steps, dim)) if self.kind == "pseudo" else None

    def iteration_noise(self, rng, fixed, n_steps, n, dim):
        if self.kind == "pseudo":
            return fixed
        if self.kind == "full":
            return rng.standard_normal((n_steps, n, dim))
        return None


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 250
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    early_stop_patience: int = 250
    ema_decay: float = 0.99
    grad_clip: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.iterations < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ConfigError("iterations, batch_size and early_stop_patience must be positive")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ConfigError("learning_rate and adam_eps must be positive")
        if len(self.adam_betas) != 2 or not all(0.0 < b < 1.0 for b in self.adam_betas):
            raise ConfigError("adam_betas must be two numbers in (0, 1)")
        if self.early_stop_patience > self.iterations:
            raise ConfigError("early_stop_patience cannot exceed iterations")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, params):
        n = params.total_dim
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state, params, grads, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update in the ascent direction.

    Returns:
        ``(state', params')``; neither input is modified.
    """
    if list(params) != list(grads) or params.shapes() != grads.shapes():
        raise ShapeError("gradient tree does not match the parameter tree")
    b1, b2 = betas
    g = grads.flatten()
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new = params.flatten() + lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m, v, t), params.unflatten(new)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingLog:
    elbo: list = field(default_factory=list)
    ema: list = field(default_factory=list)
    accept: list = field(default_factory=list)
    stopped_early: bool = False
    noise: Optional[np.ndarray] = None

    @property
    def n_iterations(self):
        return len(self.elbo)

    def rows(self):
        for i, (e, m, a) in enumerate(zip(self.elbo, self.ema, self.accept)):
            yield i + 1, e, m, a

    def write_csv(self, path, n_steps):
        header = ["iteration", "elbo", "elbo_ema"] + [f"accept_{k + 1}" for k in range(n_steps)]
        lines = [",".join(header)]
        for it, e, m, a in self.rows():
            lines.append(",".join([str(it), repr(float(e)), repr(float(m))] + [repr(float(x)) for x in a]))
        Path(path).write_text("\n".join(lines) + "\n")


def _objective(rng, model, params, n, u, method):
    if method == "nf":
        values, grads = nf_baseline_grad(rng, model, params, n, u)
        return values, grads, np.ones(model.n_steps)
    values, grads, traj = elbo_and_grad(rng, model, params, n, u)
    return values, grads, traj.a.mean(axis=0)


def _mask_frozen(grads, frozen):
    if not frozen:
        return grads
    out = grads.copy()
    for name in out:
        if any(name.startswith(prefix) for prefix in frozen):
            out[name] = np.zeros_like(out[name])
    return out


def train(config, run, callback=None):
    """Maximize the bound for the model described by ``run``.

    Args:
        config: TrainConfig (``run.train`` when ``None``).
        run: RunConfig with the model, seed and setting.
        callback: optional ``callback(iteration, params, mean_elbo)``.

    Returns:
        ``(params, log)`` with the final ParamTree and a TrainingLog; the fixed
        noise of the pseudo-random setting is in ``log.noise``.

    Raises:
        NumericalError: with attributes ``last_good`` (parameters before the
            failing iteration) and ``log``.
    """
    from .config import build_model, init_params, seed_streams

    config = run.train if config is None else config
    model = build_model(run)
    init_rng, noise_rng, train_rng = seed_streams(run.seed)
    params = init_params(model, run, init_rng)
    setting = NoiseSetting(run.setting)
    fixed_u = setting.setup_noise(noise_rng, model.n_steps, model.dim)
    log = TrainingLog(noise=fixed_u)
    state = AdamState.zeros(params)
    frozen = run.frozen_prefixes()
    best, since, ema = -np.inf, 0, None
    for it in range(config.iterations):
        u = setting.iteration_noise(train_rng, fixed_u, model.n_steps, config.batch_size, model.dim)
        try:
            values, grads, accept = _objective(train_rng, model, params, config.batch_size, u, run.method)
            grads = _mask_frozen(grads, frozen)
            if config.grad_clip is not None:
                grads = grads.unflatten(np.clip(grads.flatten(), -config.grad_clip, config.grad_clip))
            state, new_params = adam_step(
                state, params, grads, config.learning_rate, config.adam_betas, config.adam_eps
            )
        except NumericalError as exc:
            exc.last_good = params
            exc.log = log
            exc.step = it if exc.step is None else exc.step
            raise
        params = new_params
        mean = float(np.mean(values))
        ema = mean if ema is None else config.ema_decay * ema + (1 - config.ema_decay) * mean
        log.elbo.append(mean)
        log.ema.append(ema)
        log.accept.append(np.asarray(accept, dtype=np.float64))
        if callback is not None:
            callback(it, params, mean)
        if ema > best:
            best, since = ema, 0
        else:
            since += 1
            if since >= config.early_stop_patience:
                log.stopped_early = True
                break
    return params, log


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, params, run, buffers=None):
    """Write ``checkpoint.bin`` (little-endian float64) and ``checkpoint.json``.

    The manifest lists names, shapes and offsets of parameters and buffers
    (e.g. the fixed noise) followed by the run configuration.  Both files are
    a pure function of their inputs.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    tables = [("param", params.items())]
    if buffers:
        tables.append(("buffer", sorted(buffers.items())))
    for kind, items in tables:
        for name, value in items:
            arr = np.ascontiguousarray(value, dtype="<f8")
            entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.ravel())
            offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    (directory / "checkpoint.bin").write_bytes(flat.astype("<f8").tobytes())
    manifest = {"version": CHECKPOINT_VERSION, "entries": entries, "size": offset, "run": run.to_dict()}
    (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory):
    """Inverse of :func:`save_checkpoint`: ``(params, buffers, run)``."""
    from .config import RunConfig

    directory = Path(directory)
    try:
        manifest = json.loads((directory / "checkpoint.json").read_text())
        raw = (directory / "checkpoint.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint in {directory}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {manifest.get('version')}")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if flat.size != manifest["size"]:
        raise ConfigError("checkpoint data does not match its manifest")
    params, buffers = G.ParamTree(), {}
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        value = flat[e["offset"] : e["offset"] + n].reshape(e["shape"])
        if e["kind"] == "param":
            params[e["name"]] = value
        else:
            buffers[e["name"]] = value
    run = RunConfig.from_dict(manifest["run"])
    return params, buffers, run
