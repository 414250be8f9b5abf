"""Exact densities of MetFlow iterates.

After ``K`` steps the iterate has density

    m^K(z) = Σ_v ν(v) Σ_a m^K(z, a | v),

where each path component inverts the accepted moves in reverse order,

    m^K(z, a | v) = m^0(x_0) Π_i J_i Π_i α̂_i(x_{i-1}, v_i)^{a_i}
                    (1 - α̂_i(x_{i-1}, v_i))^{1 - a_i},

with ``x_K = z`` and ``x_{i-1} = T_i^{-v_i a_i}(x_i)``.  Everything is
evaluated in log space; the marginal enumerates all ``4^K`` (a, v) pairs and
shares work between paths with a common suffix.
"""

import numpy as np

from . import grad as G
from .errors import CapacityError, ShapeError
from .kernels import metflow_log_accept
from .targets import log_density

K_MAX = 12
LOG_2PI = float(np.log(2 * np.pi))


class PriorModel:
    """Diagonal Gaussian ``N(μ, diag(σ²))`` with ``σ = exp(log_scale)``."""

    def __init__(self, dim, prefix="prior/"):
        self.dim = int(dim)
        self.prefix = prefix

    def __repr__(self):
        return f"PriorModel(dim={self.dim})"

    def param_shapes(self):
        return {self.prefix + "mu": (self.dim,), self.prefix + "log_scale": (self.dim,)}

    def init_params(self, mu=0.0, log_scale=0.0):
        return {
            self.prefix + "mu": np.broadcast_to(np.asarray(mu, dtype=np.float64), (self.dim,)).copy(),
            self.prefix + "log_scale": np.broadcast_to(np.asarray(log_scale, dtype=np.float64), (self.dim,)).copy(),
        }

    def reparam(self, params, y):
        """``μ + σ ⊙ y``; a tape value when the parameters are."""
        return params[self.prefix + "mu"] + G.exp(params[self.prefix + "log_scale"]) * y

    def log_prob_from_noise(self, params, y):
        """``log m^0(μ + σ ⊙ y)`` computed from the standard-normal draw ``y``."""
        y = np.asarray(y, dtype=np.float64)
        base = -0.5 * np.sum(y * y, axis=-1) - 0.5 * self.dim * LOG_2PI
        return base - G.sum(params[self.prefix + "log_scale"])

    def logpdf(self, params, z):
        mu = np.asarray(G.value_of(params[self.prefix + "mu"]))
        log_scale = np.asarray(G.value_of(params[self.prefix + "log_scale"]))
        r = (np.asarray(z, dtype=np.float64) - mu) * np.exp(-log_scale)
        return -0.5 * np.sum(r * r, axis=-1) - np.sum(log_scale) - 0.5 * self.dim * LOG_2PI


def prior_logpdf(prior, params, z):
    return prior.logpdf(params, z)


def _grid(model, z):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = z[None, :] if single else z
    if z.ndim != 2 or z.shape[1] != model.dim:
        raise ShapeError(f"expected points of dimension {model.dim}, got shape {z.shape}")
    return z, single


def _u_at(u, i):
    if u is None:
        return None
    u_i = np.asarray(u[i], dtype=np.float64)
    if u_i.ndim != 1:
        raise ShapeError("density evaluation needs one shared noise vector per step")
    return u_i


def _log_accept_reject(model, params, i, x, v, u_i):
    n = x.shape[0]
    res = metflow_log_accept(model.target, model.stack, params, i, x, np.full(n, v), u_i, model.nu, model.family)
    return np.asarray(res["log_alpha"]), np.asarray(model.family.log_reject(res["log_t"]))


def _log_nu(model, params, i, v):
    return float(model.nu.log_prob(params, i, np.array([v]))[0])


def one_step_logpdf(model, params, k, z, v, u=None, base_logpdf=None):
    """Log-density after the single step ``k`` with direction ``v``.

    ``m(z | v) = α̂(x, v) m(x) J_{T^{-v}}(z) + (1 - α̂(z, v)) m(z)`` with
    ``x = T_k^{-v}(z)``.  ``base_logpdf`` is the log-density before the step
    and defaults to the prior.
    """
    z, single = _grid(model, z)
    if base_logpdf is None:
        def base_logpdf(x):
            return prior_logpdf(model.prior, params, x)
    u_k = None if u is None else np.asarray(u, dtype=np.float64)
    x, lj = model.stack.step(params, k, z, u_k, -v)
    la_x, _ = _log_accept_reject(model, params, k, x, v, u_k)
    _, lr_z = _log_accept_reject(model, params, k, z, v, u_k)
    out = np.logaddexp(la_x + base_logpdf(x) + lj, lr_z + base_logpdf(z))
    return out[0] if single else out


def component_logpdf(model, params, z, a, v, u=None):
    """``log m^K(z, a | v)`` for one accept pattern and one direction vector."""
    z, single = _grid(model, z)
    K = model.n_steps
    a = np.asarray(a, dtype=int).reshape(-1)
    v = np.asarray(v, dtype=int).reshape(-1)
    if a.shape != (K,) or v.shape != (K,):
        raise ShapeError(f"a and v must have length K={K}")
    x = z
    acc = np.zeros(z.shape[0])
    for i in range(K - 1, -1, -1):
        u_i = _u_at(u, i)
        if a[i]:
            x, lj = model.stack.step(params, i, x, u_i, -v[i])
            acc = acc + lj
        la, lr = _log_accept_reject(model, params, i, x, v[i], u_i)
        acc = acc + (la if a[i] else lr)
    out = acc + prior_logpdf(model.prior, params, x)
    return out[0] if single else out


def marginal_logpdf(model, params, z, u=None):
    """``log m^K(z)`` summing every accept pattern and direction.

    Raises:
        CapacityError: ``K`` exceeds ``K_MAX``; the enumeration has ``4^K``
            terms.
    """
    K = model.n_steps
    if K > K_MAX:
        raise CapacityError(f"exact marginal enumerates 4^K paths; K={K} exceeds K_MAX={K_MAX}")
    z, single = _grid(model, z)
    family = model.family

    def descend(i, x, lp_x, acc):
        # acc: log weight of the suffix (steps i+1..K); lp_x: log π̃(x)
        if i < 0:
            return acc + prior_logpdf(model.prior, params, x)
        u_i = _u_at(u, i)
        # T^{+v} x is the proposal of a v-move from x and the predecessor of
        # an accepted (-v)-move into x, so two flow calls serve all four terms
        moved = {}
        for w in (1, -1):
            y, lj = model.stack.step(params, i, x, u_i, w)
            moved[w] = (y, lj, log_density(model.target, y))
        total = np.full(x.shape[0], -np.inf)
        for v in (1, -1):
            log_nu = _log_nu(model, params, i, v)
            if log_nu == -np.inf:
                continue
            dnu = _log_nu(model, params, i, -v) - log_nu
            y, lj, lp_y = moved[v]
            log_t = lp_y - lp_x + lj + dnu
            total = np.logaddexp(total, descend(i - 1, x, lp_x, acc + log_nu + family.log_reject(log_t)))
            x_prev, lj_back, lp_prev = moved[-v]
            log_t = lp_x - lp_prev - lj_back + dnu
            total = np.logaddexp(
                total, descend(i - 1, x_prev, lp_prev, acc + log_nu + lj_back + family.log_accept(log_t))
            )
        return total

    with np.errstate(over="ignore"):
        out = descend(K - 1, z, log_density(model.target, z), np.zeros(z.shape[0]))
    return out[0] if single else out


def grid_mass(logpdf_values, cell_volume):
    """Riemann-sum mass of a density tabulated on a regular grid."""
    return float(np.sum(np.exp(logpdf_values)) * cell_volume)
