"""One-step Markov kernels: MetFlow, RWM, MALA and HMC.

The MetFlow kernel draws a direction ``v``, proposes ``T_k^v(z)`` and accepts
with ``φ(t)`` where

    t = π(T^v z) ν(-v) J_{T^v}(z) / (π(z) ν(v)).

Everything is computed in log space; ``RatioFamily`` supplies ``log φ`` and
``log(1 - φ)`` as functions of ``log t``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from . import grad as G
from .errors import ConfigError, ConvergenceError, DomainError, NumericalError
from .flows import signed_step
from .targets import log_density


@dataclass(frozen=True)
class RatioFamily:
    """Acceptance function ``φ`` with ``t φ(1/t) = φ(t)`` and ``φ(∞) = 1``.

    ``kind`` is ``"mh"`` for ``min(1, t)`` or ``"barker"`` for ``t/(1+t)``.
    """

    kind: str = "mh"

    def __post_init__(self):
        if self.kind not in ("mh", "barker"):
            raise ConfigError(f"unknown ratio family {self.kind!r}")

    def log_accept(self, log_t):
        if self.kind == "mh":
            return G.minimum(log_t, 0.0)
        return -G.softplus(-log_t)

    def log_reject(self, log_t):
        if self.kind == "mh":
            return G.log1mexp(G.minimum(log_t, 0.0))
        return -G.softplus(log_t)


MH = RatioFamily("mh")
BARKER = RatioFamily("barker")


def accept_ratio(family, t):
    """``φ(t)`` for ``t >= 0``; ``t = inf`` maps to 1."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise DomainError("acceptance ratio argument must be nonnegative")
    with np.errstate(divide="ignore"):
        log_t = np.log(t)
    return np.exp(family.log_accept(log_t))


class DirectionDist:
    """Independent Rademacher directions, one per step.

    ``probs[k]`` is the probability of ``v = +1`` at step ``k``.  With
    ``trainable=True`` the probabilities are ``sigmoid(logits)`` read from the
    parameter tree under ``prefix + "logits"``.  Steps beyond the configured
    range (extra kernels at sampling time) use the uniform distribution.
    """

    def __init__(self, n_steps, probs=None, trainable=False, prefix="nu/"):
        self.n_steps = int(n_steps)
        self.trainable = bool(trainable)
        self.prefix = prefix
        if probs is None:
            probs = np.full(self.n_steps, 0.5)
        self.probs = np.broadcast_to(np.asarray(probs, dtype=np.float64), (self.n_steps,)).copy()
        if np.any((self.probs < 0) | (self.probs > 1)):
            raise ConfigError("direction probabilities must lie in [0, 1]")

    def __repr__(self):
        return f"DirectionDist(n_steps={self.n_steps}, trainable={self.trainable})"

    @property
    def key(self):
        return self.prefix + "logits"

    def param_shapes(self):
        return {self.key: (self.n_steps,)} if self.trainable else {}

    def init_params(self):
        if not self.trainable:
            return {}
        p = np.clip(self.probs, 1e-6, 1 - 1e-6)
        return {self.key: np.log(p) - np.log1p(-p)}

    def is_uniform(self, k):
        return not self.trainable and (k >= self.n_steps or self.probs[k] == 0.5)

    def prob_plus(self, params, k):
        if k >= self.n_steps:
            return 0.5
        if self.trainable:
            return float(G._sigmoid(G.value_of(params[self.key])[k]))
        return float(self.probs[k])

    def sample(self, rng, params, k, n):
        p = self.prob_plus(params, k)
        return np.where(rng.random(n) < p, 1, -1)

    def log_prob(self, params, k, v):
        """``log ν_k(v)`` row by row; a tape value when the logits are."""
        v = np.asarray(v)
        plus = (v == 1).astype(np.float64)
        if k >= self.n_steps:
            return np.full(v.shape, -np.log(2.0))
        if not self.trainable:
            p = self.probs[k]
            with np.errstate(divide="ignore"):
                return np.where(plus == 1, np.log(p), np.log1p(-p))
        logit = params[self.key]
        if isinstance(logit, G.Var):
            onehot = np.zeros(self.n_steps)
            onehot[k] = 1.0
            lk = G.sum(logit * onehot)
        else:
            lk = logit[k]
        return -G.softplus(-lk) * plus - G.softplus(lk) * (1 - plus)


@dataclass
class StepOutcome:
    """Result of one kernel step on a batch (or a single point).

    ``log_alpha`` is the log-acceptance probability of the proposal, and
    ``log_jac`` the signed log-Jacobian contributed to the state (zero on
    rejection).
    """

    z_next: np.ndarray
    a: np.ndarray
    v: Optional[np.ndarray]
    log_alpha: np.ndarray
    log_jac: np.ndarray


# ---------------------------------------------------------------------------
# MetFlow


def metflow_log_accept(target, stack, params, k, z, v, u, nu, family, log_pi_z=None):
    """Proposal and log-acceptance of the MetFlow move ``T_k^v`` at a batch.

    Returns:
        dict with ``proposal``, ``log_jac`` (signed), ``log_t``,
        ``log_alpha`` and ``log_pi_proposal``; values are tape values when the
        parameters are.
    """
    v = np.asarray(v)
    prop, lj = signed_step(stack, params, k, z, u, v)
    lp_prop = log_density(target, prop)
    lp_z = log_density(target, z) if log_pi_z is None else log_pi_z
    log_t = lp_prop - lp_z + lj
    if not nu.is_uniform(k):
        log_t = log_t + nu.log_prob(params, k, -v) - nu.log_prob(params, k, v)
    return {
        "proposal": prop,
        "log_jac": lj,
        "log_t": log_t,
        "log_alpha": family.log_accept(log_t),
        "log_pi_proposal": lp_prop,
    }


def _batched(z):
    z = np.asarray(z, dtype=np.float64)
    return (z[None, :], True) if z.ndim == 1 else (z, False)


def metflow_accept_prob(target, stack, params, k, z, v, u, nu, family):
    """``α̂(z, v)`` for the k-th MetFlow step; ``z`` is a point or a batch."""
    z, single = _batched(z)
    v = np.broadcast_to(np.asarray(v), (z.shape[0],))
    if not nu.is_uniform(k):
        p = nu.prob_plus(params, k)
        if (p == 0.0 and np.any(v == 1)) or (p == 1.0 and np.any(v == -1)):
            raise DomainError("ν(v) = 0 for a requested direction")
    out = np.exp(metflow_log_accept(target, stack, params, k, z, v, u, nu, family)["log_alpha"])
    return out[0] if single else out


def metflow_step(rng, target, stack, params, k, z, u, nu, family):
    """Draw ``v ~ ν_k`` and ``a ~ Bernoulli(α̂(z, v))`` and move accordingly."""
    z, single = _batched(z)
    n = z.shape[0]
    v = nu.sample(rng, params, k, n)
    res = metflow_log_accept(target, stack, params, k, z, v, u, nu, family)
    log_alpha = np.asarray(res["log_alpha"], dtype=np.float64)
    if np.any(np.isnan(log_alpha)):
        raise NumericalError("non-finite acceptance probability", step=k)
    a = rng.random(n) < np.exp(log_alpha)
    z_next = np.where(a[:, None], res["proposal"], z)
    log_jac = np.where(a, res["log_jac"], 0.0)
    out = StepOutcome(z_next, a.astype(int), v, log_alpha, log_jac)
    if single:
        out = StepOutcome(z_next[0], out.a[0], v[0], log_alpha[0], log_jac[0])
    return out


# ---------------------------------------------------------------------------
# random walk and Langevin


def rwm_step(rng, target, cov_root, z, u=None):
    """Random-walk Metropolis with proposal ``z + Σ^{1/2} u``."""
    cov_root = np.atleast_2d(np.asarray(cov_root, dtype=np.float64))
    d = cov_root.shape[0]
    if cov_root.shape != (d, d) or np.linalg.matrix_rank(cov_root) < d:
        raise ConfigError("cov_root must be a nonsingular square matrix")
    z, single = _batched(z)
    if u is None:
        u = rng.standard_normal(z.shape)
    prop = z + np.asarray(u).reshape(z.shape) @ cov_root.T
    log_alpha = np.minimum(0.0, target.log_density(prop) - target.log_density(z))
    a = rng.random(z.shape[0]) < np.exp(log_alpha)
    z_next = np.where(a[:, None], prop, z)
    zeros = np.zeros(z.shape[0])
    if single:
        return StepOutcome(z_next[0], int(a[0]), None, log_alpha[0], 0.0)
    return StepOutcome(z_next, a.astype(int), None, log_alpha, zeros)


def mala_forward(target, gamma, z, u):
    """``z + γ ∇log π̃(z) + sqrt(2γ) u``."""
    z = np.asarray(z, dtype=np.float64)
    return z + gamma * target.grad_log_density(z) + np.sqrt(2.0 * gamma) * np.asarray(u)


def mala_inverse(target, gamma, y, u, tol=1e-10, max_iter=200, full_output=False):
    """Invert :func:`mala_forward` by fixed-point iteration.

    Iterates ``z <- y - sqrt(2γ) u - γ ∇log π̃(z)``, a contraction when
    ``γ L <= 1/2`` for the Lipschitz constant ``L`` of the gradient.

    Once the residual is within ``tol`` the iteration continues while the
    residual keeps decreasing, so the result is accurate to rounding when the
    contraction allows it.

    Returns:
        The preimage, or ``(z, info)`` when ``full_output`` is set; ``info``
        holds ``iterations`` (steps until the residual met ``tol``),
        ``total_iterations`` and the residual history.

    Raises:
        ConvergenceError: the residual ``|T(z) - y|_inf`` is above ``tol``
            after ``max_iter`` iterations.
    """
    y = np.asarray(y, dtype=np.float64)
    shift = y - np.sqrt(2.0 * gamma) * np.asarray(u)
    z = shift.copy()
    residuals = []
    reached = None
    for it in range(max_iter + 1):
        res = float(np.max(np.abs(mala_forward(target, gamma, z, u) - y)))
        if reached is not None and res >= residuals[-1]:
            z = z_prev
            break
        residuals.append(res)
        if reached is None and res <= tol:
            reached = it
        if it == max_iter or res == 0.0:
            break
        z_prev = z
        z = shift - gamma * target.grad_log_density(z)
    if reached is not None:
        if full_output:
            return z, {"iterations": reached, "total_iterations": len(residuals) - 1, "residuals": residuals}
        return z
    raise ConvergenceError(
        f"fixed point not reached in {max_iter} iterations (residual {residuals[-1]:.3e})",
        residual=residuals[-1],
        iterations=max_iter,
    )


def mala_step(rng, target, gamma, z):
    """Standard MALA step with the Gaussian proposal-density correction."""
    z, single = _batched(z)
    u = rng.standard_normal(z.shape)
    prop = mala_forward(target, gamma, z, u)

    def log_q(to, frm):
        mean = frm + gamma * target.grad_log_density(frm)
        return -np.sum((to - mean) ** 2, axis=-1) / (4.0 * gamma)

    log_t = target.log_density(prop) + log_q(z, prop) - target.log_density(z) - log_q(prop, z)
    log_alpha = np.minimum(0.0, log_t)
    a = rng.random(z.shape[0]) < np.exp(log_alpha)
    z_next = np.where(a[:, None], prop, z)
    if single:
        return StepOutcome(z_next[0], int(a[0]), None, log_alpha[0], 0.0)
    return StepOutcome(z_next, a.astype(int), None, log_alpha, np.zeros(z.shape[0]))


# ---------------------------------------------------------------------------
# Hamiltonian moves on the extended state (q, p)


def leapfrog(target, gamma, n_steps, q, p):
    """``n_steps`` leapfrog updates for the potential ``U = -log π̃``."""
    if n_steps < 1:
        raise ConfigError("leapfrog needs n_steps >= 1")
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    for _ in range(n_steps):
        p = p + 0.5 * gamma * target.grad_log_density(q)
        q = q + gamma * p
        p = p + 0.5 * gamma * target.grad_log_density(q)
    return q, p


def hmc_proposal(target, gamma, n_steps, q, p):
    """The involution ``LF_{γ,n} ∘ S`` with momentum flip ``S(q, p) = (q, -p)``."""
    return leapfrog(target, gamma, n_steps, q, -np.asarray(p, dtype=np.float64))


def hamiltonian(target, q, p):
    return -target.log_density(q) + 0.5 * np.sum(np.asarray(p) ** 2, axis=-1)


def hmc_flip_step(rng, target, gamma, n_steps, q, p, family=MH):
    """Propose ``LF(q, -p)`` and accept with ``φ(exp(-ΔH))``.

    Returns a StepOutcome whose ``z_next`` is the extended state
    ``concat(q, p)``.
    """
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    single = q.ndim == 1
    q2, p2 = (q[None], p[None]) if single else (q, p)
    qn, pn = hmc_proposal(target, gamma, n_steps, q2, p2)
    log_t = hamiltonian(target, q2, p2) - hamiltonian(target, qn, pn)
    log_t = np.where(np.isnan(log_t), -np.inf, log_t)
    log_alpha = np.asarray(family.log_accept(log_t))
    a = rng.random(q2.shape[0]) < np.exp(log_alpha)
    z_next = np.concatenate([np.where(a[:, None], qn, q2), np.where(a[:, None], pn, p2)], axis=-1)
    if single:
        return StepOutcome(z_next[0], int(a[0]), None, log_alpha[0], 0.0)
    return StepOutcome(z_next, a.astype(int), None, log_alpha, np.zeros(q2.shape[0]))


def momentum_refresh(rng, a_coef, p, u=None):
    """Autoregressive refresh ``a p + sqrt(1 - a²) u`` with ``u ~ N(0, I)``."""
    if not 0.0 < a_coef < 1.0:
        raise ConfigError("refresh coefficient must lie in (0, 1)")
    p = np.asarray(p, dtype=np.float64)
    if u is None:
        u = rng.standard_normal(p.shape)
    return a_coef * p + np.sqrt(1.0 - a_coef**2) * np.asarray(u)


# ---------------------------------------------------------------------------
# kernels as callables ``kernel(rng, z) -> z_next`` on batches


def identity_kernel(rng, z):
    return np.array(z, dtype=np.float64, copy=True)


def metflow_kernel(target, stack, params, k, u, nu, family=MH):
    def kernel(rng, z):
        return metflow_step(rng, target, stack, params, k, z, u, nu, family).z_next

    return kernel


def unadjusted_flow_kernel(stack, params, k, u):
    """Plain pushforward through ``T_k`` with no accept/reject (not invariant)."""

    def kernel(rng, z):
        return stack.step_forward(params, k, np.asarray(z, dtype=np.float64), u)[0]

    return kernel


def rwm_kernel(target, cov_root):
    return lambda rng, z: rwm_step(rng, target, cov_root, z).z_next


def mala_kernel(target, gamma):
    return lambda rng, z: mala_step(rng, target, gamma, z).z_next


def hmc_kernel(target, gamma, n_steps, a_coef=0.5):
    """Momentum drawn fresh, partially refreshed, then one flip move; returns q."""

    def kernel(rng, q):
        q = np.asarray(q, dtype=np.float64)
        p = momentum_refresh(rng, a_coef, rng.standard_normal(q.shape))
        out = hmc_flip_step(rng, target, gamma, n_steps, q, p)
        return out.z_next[..., : q.shape[-1]]

    return kernel


def detailed_balance_check(kernel, sampler, rng, n=100_000, edges=None, tol=None):
    """Empirical check of ``π(A) M(A, B) = π(B) M(B, A)`` on a box partition.

    Draws ``z ~ π`` with ``sampler(rng, n)``, moves each point once, and bins
    the pairs ``(z, z')`` on the product partition given by ``edges`` (one
    edge array per coordinate; the outer cells are unbounded).  Under
    reversibility the pair-count matrix is symmetric in expectation.

    Args:
        tol: maximal allowed standardized asymmetry.  Defaults to a two-sided
            Bonferroni threshold at family-wise level 0.01 over all cell
            pairs.

    Returns:
        dict with ``max_asymmetry`` (largest ``|N_ij - N_ji| / n``),
        ``max_z``, ``threshold`` and ``passed``.
    """
    z = np.asarray(sampler(rng, n), dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    z_next = np.asarray(kernel(rng, z), dtype=np.float64).reshape(z.shape)
    d = z.shape[1]
    if edges is None:
        edges = [np.quantile(z[:, j], [0.2, 0.4, 0.6, 0.8]) for j in range(d)]

    def cell(x):
        idx = np.zeros(len(x), dtype=np.intp)
        for j in range(d):
            idx = idx * (len(edges[j]) + 1) + np.searchsorted(edges[j], x[:, j])
        return idx

    n_cells = int(np.prod([len(e) + 1 for e in edges]))
    counts = np.zeros((n_cells, n_cells))
    np.add.at(counts, (cell(z), cell(z_next)), 1.0)
    diff = counts - counts.T
    total = counts + counts.T
    iu = np.triu_indices(n_cells, k=1)
    zscores = np.where(total[iu] > 0, np.abs(diff[iu]) / np.sqrt(np.maximum(total[iu], 1.0)), 0.0)
    n_pairs = max(len(iu[0]), 1)
    threshold = float(stats.norm.isf(0.005 / n_pairs)) if tol is None else float(tol)
    max_z = float(zscores.max()) if zscores.size else 0.0
    return {
        "max_asymmetry": float(np.abs(diff).max() / n),
        "max_z": max_z,
        "threshold": threshold,
        "passed": bool(max_z <= threshold),
        "n": n,
    }
