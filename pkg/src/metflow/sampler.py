"""Sampling from trained models, kernel iteration and sample diagnostics."""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .elbo import simulate_trajectory
from .errors import ConfigError, NumericalError
from .kernels import metflow_step


@dataclass
class SampleSet:
    points: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.shape[0] < 1:
            raise ConfigError("a sample set needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise NumericalError("sample set contains non-finite points")

    def __len__(self):
        return self.points.shape[0]


def config_hash(run):
    blob = json.dumps(run.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sample(model, params, n, extra_kernels=1, rng=None, u=None, seed=None):
    """``n`` independent draws from the model iterated ``extra_kernels`` times.

    The first K steps use the trained noise ``u`` (pseudo-random) or fresh
    per-chain noise (fully random).  Each further round of K MetFlow steps
    draws new per-chain innovations, which keeps every step π-invariant.  With
    ``extra_kernels == 1`` the output equals the endpoints of
    :func:`simulate_trajectory` on the same random stream.

    Raises:
        ConfigError: ``extra_kernels > 1`` for a model without noise, which
            cannot produce new kernels.
    """
    if extra_kernels < 1:
        raise ConfigError("extra_kernels must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    K, D = model.n_steps, model.dim
    if extra_kernels > 1 and model.setting == "deterministic":
        raise ConfigError("the deterministic setting has no innovation noise to draw new kernels from")
    if model.setting == "full":
        u = rng.standard_normal((K, n, D))
    elif model.setting == "pseudo" and u is None:
        raise ConfigError("pseudo-random sampling needs the fixed training noise")
    traj = simulate_trajectory(rng, model, params, n=n, u=u if model.setting != "deterministic" else None)
    z = traj.z
    accepts = [traj.a.mean(axis=0)]
    for _ in range(extra_kernels - 1):
        rates = np.empty(K)
        for k in range(K):
            u_k = rng.standard_normal((n, D))
            out = metflow_step(rng, model.target, model.stack, params, k, z, u_k, model.nu, model.family)
            z = out.z_next
            rates[k] = out.a.mean()
        accepts.append(rates)
    meta = {
        "seed": seed,
        "n": int(n),
        "extra_kernels": int(extra_kernels),
        "kernel_count": int(extra_kernels * K),
        "accept_rate": float(np.mean(np.concatenate(accepts))) if K else 1.0,
    }
    return SampleSet(z, meta)


def sample_baseline(model, params, n, rng=None, seed=None):
    """Pushforward draws of the plain-flow baseline."""
    if rng is None:
        rng = np.random.default_rng(seed)
    z = model.prior.reparam(params, rng.standard_normal((n, model.dim)))
    for k in range(model.n_steps):
        z, _ = model.stack.step_forward(params, k, z)
    return SampleSet(z, {"seed": seed, "n": int(n), "extra_kernels": 1, "kernel_count": 0})


def mode_count(samples, centers, radius, min_hits=10):
    """Number of centers with at least ``min_hits`` samples within ``radius``.

    Returns:
        ``(count, occupancy)`` where ``occupancy[j]`` is the fraction of
        samples in the ball around center ``j``.
    """
    if radius <= 0:
        raise ConfigError("radius must be positive")
    pts = samples.points if isinstance(samples, SampleSet) else np.atleast_2d(samples)
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    d2 = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    hits = np.sum(d2 <= radius * radius, axis=0)
    return int(np.sum(hits >= min_hits)), hits / pts.shape[0]


def default_mode_radius(dim, sigma=1.0):
    return 4.0 * np.sqrt(dim) * sigma


def _pairwise(x, y):
    return np.sqrt(np.maximum(np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1), 0.0))


def energy_test(x, y, rng, n_perm=200):
    """Two-sample energy statistic and its permutation p-value."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    pooled = np.concatenate([x, y])
    dist = _pairwise(pooled, pooled)
    n, m = len(x), len(y)

    def stat(idx_x, idx_y):
        dxy = dist[np.ix_(idx_x, idx_y)].mean()
        dxx = dist[np.ix_(idx_x, idx_x)].sum() / (n * (n - 1))
        dyy = dist[np.ix_(idx_y, idx_y)].sum() / (m * (m - 1))
        return 2 * dxy - dxx - dyy

    all_idx = np.arange(n + m)
    observed = stat(all_idx[:n], all_idx[n:])
    exceed = 0
    for _ in range(n_perm):
        perm = rng.permutation(n + m)
        exceed += stat(perm[:n], perm[n:]) >= observed
    return float(observed), (exceed + 1) / (n_perm + 1)


def invariance_test(kernel, sampler, n, rng, level=0.01, n_perm=200, n_energy=400):
    """Check that one kernel step leaves the exact target law unchanged.

    ``n`` exact draws are moved once.  Coordinate means of moved points are
    compared with a fresh exact draw (z-test over both samples), and a
    subsample of ``n_energy`` moved points is compared with fresh draws by a
    permutation energy test.  PASS iff the energy p-value exceeds ``level``
    and every mean z-score is at most 3.
    """
    z = np.asarray(sampler(rng, n), dtype=np.float64)
    moved = np.asarray(kernel(rng, z), dtype=np.float64).reshape(z.shape)
    fresh = np.asarray(sampler(rng, n), dtype=np.float64)
    se = np.sqrt(moved.var(axis=0, ddof=1) / n + fresh.var(axis=0, ddof=1) / n)
    mean_z = np.abs(moved.mean(axis=0) - fresh.mean(axis=0)) / np.maximum(se, 1e-300)
    m = min(n_energy, n)
    energy, p_value = energy_test(moved[:m], fresh[:m], rng, n_perm=n_perm)
    passed = bool(p_value > level and np.all(mean_z <= 3.0))
    return {"passed": passed, "p_value": p_value, "energy": energy, "max_mean_z": float(mean_z.max())}


def marginal_ks(samples, coord, cdf):
    """One-sample Kolmogorov–Smirnov test of one coordinate against ``cdf``."""
    pts = samples.points if isinstance(samples, SampleSet) else np.atleast_2d(samples)
    res = stats.kstest(pts[:, coord], cdf)
    return float(res.statistic), float(res.pvalue)


def write_samples(path, samples):
    """CSV with header ``z1..zD`` plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = samples.points.shape[1]
    lines = [",".join(f"z{j + 1}" for j in range(d))]
    lines += [",".join(repr(float(x)) for x in row) for row in samples.points]
    path.write_text("\n".join(lines) + "\n")
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(samples.meta, indent=2, sort_keys=True, default=_plain) + "\n")
    return path, sidecar


def read_samples(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")
