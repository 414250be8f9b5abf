"""Unnormalized target densities with analytic gradients and a name registry."""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import grad as G
from .errors import ConfigError

RING_RADIUS = 8.0
HYPERCUBE_HALF_WIDTH = 5.0


@dataclass(frozen=True)
class TargetModel:
    """Unnormalized log-density ``log π̃`` on R^D.

    ``log_density`` and ``grad_log_density`` take a point ``(D,)`` or a batch
    ``(N, D)``.  ``sample`` is an exact sampler when one is known, and
    ``log_normalizer`` is ``log ∫π̃`` when it has a closed form.
    """

    dim: int
    log_density: Callable
    grad_log_density: Callable
    name: str = "custom"
    sample: Optional[Callable] = None
    log_normalizer: Optional[float] = None
    centers: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __call__(self, z):
        return log_density(self, z)


def log_density(target, z):
    """``log π̃(z)``; records a tape node when ``z`` is a tape value."""
    if isinstance(z, G.Var):
        return G.apply(z, target.log_density, target.grad_log_density)
    return target.log_density(np.asarray(z, dtype=np.float64))


@dataclass(frozen=True)
class MixtureSpec:
    centers: np.ndarray
    sigma: float = 1.0
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        if centers.size == 0:
            raise ConfigError("a mixture needs at least one center")
        object.__setattr__(self, "centers", centers)
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.weights is None:
            w = np.full(len(centers), 1.0 / len(centers))
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (len(centers),) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ConfigError("mixture weights must be a probability vector over the centers")
        object.__setattr__(self, "weights", w)


def gaussian_mixture(spec, name="mixture"):
    """Isotropic Gaussian mixture with unnormalized kernels.

    ``log π̃(z) = log Σ_m w_m exp(-|z - c_m|^2 / (2σ^2))``.
    """
    if not isinstance(spec, MixtureSpec):
        spec = MixtureSpec(**spec)
    centers, sigma, weights = spec.centers, float(spec.sigma), spec.weights
    log_w = np.log(np.where(weights > 0, weights, 1e-300))
    dim = centers.shape[1]

    def _logits(z):
        diff = z[..., None, :] - centers
        return log_w - 0.5 * np.sum(diff * diff, axis=-1) / sigma**2

    def logpdf(z):
        z = np.asarray(z, dtype=np.float64)
        return G._logsumexp(_logits(z))

    def grad(z):
        z = np.asarray(z, dtype=np.float64)
        logits = _logits(z)
        resp = np.exp(logits - G._logsumexp(logits)[..., None])
        return (resp @ centers - z) / sigma**2

    def sample(rng, n):
        comp = rng.choice(len(centers), size=n, p=weights)
        return centers[comp] + sigma * rng.standard_normal((n, dim))

    log_c = 0.5 * dim * np.log(2 * np.pi * sigma**2)
    return TargetModel(
        dim=dim,
        log_density=logpdf,
        grad_log_density=grad,
        name=name,
        sample=sample,
        log_normalizer=float(log_c),
        centers=centers,
        info={"sigma": sigma, "weights": weights},
    )


def ring_centers(n_modes=8, radius=RING_RADIUS):
    angles = 2 * np.pi * np.arange(n_modes) / n_modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def eight_gaussians(radius=RING_RADIUS, sigma=1.0):
    """Eight equal-weight Gaussians evenly spaced on a circle in R^2."""
    return gaussian_mixture(MixtureSpec(ring_centers(8, radius), sigma), name="mog2d")


def hypercube_centers(d, half_width=HYPERCUBE_HALF_WIDTH):
    """Eight distinct corners of ``{-c, +c}^d`` for ``d >= 3``.

    Corner ``m`` takes the sign of bit ``j mod 3`` of ``m`` on coordinate
    ``j``, so the first three coordinates enumerate all sign patterns and any
    two corners differ in at least one coordinate (separation >= 2c).
    """
    bits = np.array([[(m >> (j % 3)) & 1 for j in range(d)] for m in range(8)])
    return half_width * (2.0 * bits - 1.0)


def hypercube_mixture(d, half_width=HYPERCUBE_HALF_WIDTH, sigma=1.0, ring_radius=RING_RADIUS):
    """Eight unit-variance Gaussians on hypercube corners.

    For ``d == 2`` a square has only four corners, so the eight-mode ring is
    used instead.
    """
    if d < 2:
        raise ConfigError("hypercube mixture needs d >= 2")
    if d == 2:
        target = eight_gaussians(ring_radius, sigma)
    else:
        target = gaussian_mixture(MixtureSpec(hypercube_centers(d, half_width), sigma))
    return replace(target, name=f"hypercube{d}")


def neal_funnel(sigma1=1.0):
    """Neal's funnel on R^2: ``z1 ~ N(0, σ1²)`` and ``z2 | z1 ~ N(0, e^{z1})``.

    ``log π̃(z) = -z1²/(2σ1²) - z2² e^{-z1}/2 - z1/2``, normalizer ``2π σ1``.
    """
    if sigma1 <= 0:
        raise ConfigError("sigma1 must be positive")
    s2 = float(sigma1) ** 2

    def logpdf(z):
        z = np.asarray(z, dtype=np.float64)
        z1, z2 = z[..., 0], z[..., 1]
        return -0.5 * z1 * z1 / s2 - 0.5 * z2 * z2 * np.exp(-z1) - 0.5 * z1

    def grad(z):
        z = np.asarray(z, dtype=np.float64)
        z1, z2 = z[..., 0], z[..., 1]
        e = np.exp(-z1)
        return np.stack([-z1 / s2 + 0.5 * z2 * z2 * e - 0.5, -z2 * e], axis=-1)

    def sample(rng, n):
        z1 = np.sqrt(s2) * rng.standard_normal(n)
        z2 = np.exp(0.5 * z1) * rng.standard_normal(n)
        return np.stack([z1, z2], axis=1)

    return TargetModel(
        dim=2,
        log_density=logpdf,
        grad_log_density=grad,
        name="funnel",
        sample=sample,
        log_normalizer=float(np.log(2 * np.pi * np.sqrt(s2))),
        info={"sigma1": float(sigma1)},
    )


def gaussian(mean, std=1.0):
    """Diagonal Gaussian with the unnormalized kernel ``exp(-|(z-m)/s|²/2)``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape).copy()
    if np.any(std <= 0):
        raise ConfigError("std must be positive")

    def logpdf(z):
        r = (np.asarray(z, dtype=np.float64) - mean) / std
        return -0.5 * np.sum(r * r, axis=-1)

    def grad(z):
        return -(np.asarray(z, dtype=np.float64) - mean) / std**2

    def sample(rng, n):
        return mean + std * rng.standard_normal((n, mean.size))

    return TargetModel(
        dim=mean.size,
        log_density=logpdf,
        grad_log_density=grad,
        name="gaussian",
        sample=sample,
        log_normalizer=float(np.sum(np.log(std * np.sqrt(2 * np.pi)))),
        centers=mean[None, :],
        info={"mean": mean, "std": std},
    )


# ---------------------------------------------------------------------------
# registry

_REGISTRY = {}


def register_factory(name, factory):
    _REGISTRY[name] = factory


def register_target(name, log_density, grad_log_density, dim, vectorized=False):
    """Register a user density given as two callables.

    Unless ``vectorized`` is set, the callables receive one float64 vector of
    length ``dim`` at a time and are looped over batch rows.
    """

    def batched(fn, scalar):
        if vectorized:
            return fn

        def wrapped(z):
            z = np.asarray(z, dtype=np.float64)
            if z.ndim == 1:
                return fn(z)
            rows = [fn(np.ascontiguousarray(row)) for row in z.reshape(-1, dim)]
            out = np.asarray(rows, dtype=np.float64)
            return out.reshape(z.shape[:-1]) if scalar else out.reshape(z.shape)

        return wrapped

    model = TargetModel(
        dim=int(dim),
        log_density=batched(log_density, True),
        grad_log_density=batched(grad_log_density, False),
        name=name,
    )
    _REGISTRY[name] = lambda: model
    return model


def get_target(name, **params):
    if name not in _REGISTRY:
        raise ConfigError(f"unknown target {name!r}; registered: {sorted(_REGISTRY)}")
    try:
        return _REGISTRY[name](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for target {name!r}: {exc}") from exc


def registered_targets():
    return sorted(_REGISTRY)


register_factory("mog2d", eight_gaussians)
register_factory("funnel", neal_funnel)
register_factory("hypercube", hypercube_mixture)
register_factory("gaussian", gaussian)
register_factory(
    "mixture",
    lambda centers, sigma=1.0, weights=None: gaussian_mixture(MixtureSpec(np.asarray(centers), sigma, weights)),
)
