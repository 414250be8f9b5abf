"""Auxiliary-variable lower bound and its unbiased gradient.

For a trajectory with accept bits ``a`` and directions ``v`` the per-sample
bound is

    log π̃(z_K) + log r(a | z_K) - log m(z_K, a | v),

with ``log m`` the path-component log-density.  Since the joint of
``(z_K, a)`` factors through ``z_0`` and the accept draws, its gradient needs
a score-function correction for ``a`` (and for ``v`` when ν is trainable)
on top of the pathwise term.  :func:`grad_estimate` builds the surrogate

    mean( f + stop_grad(f) · (Σ log α̂^{a} + Σ log ν(v)) ),

whose gradient is that estimator.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import grad as G
from .errors import ConfigError, NumericalError
from .kernels import metflow_log_accept
from .targets import log_density


class InferenceFn:
    """Auxiliary distribution ``r(a | z)`` over accept bits.

    ``"uniform"`` puts mass ``2^{-K}`` on every pattern.  ``"bernoulli"`` uses
    independent bits with trainable logits under ``prefix + "logits"``.
    """

    def __init__(self, n_steps, kind="uniform", prefix="r/"):
        if kind not in ("uniform", "bernoulli"):
            raise ConfigError(f"unknown inference function {kind!r}")
        self.n_steps = int(n_steps)
        self.kind = kind
        self.prefix = prefix

    def __repr__(self):
        return f"InferenceFn(n_steps={self.n_steps}, kind={self.kind!r})"

    @property
    def key(self):
        return self.prefix + "logits"

    def param_shapes(self):
        if self.kind == "bernoulli" and self.n_steps:
            return {self.key: (self.n_steps,)}
        return {}

    def init_params(self):
        return {name: np.zeros(shape) for name, shape in self.param_shapes().items()}

    def log_prob(self, params, a):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a.shape[1] != self.n_steps:
            raise ConfigError(f"accept pattern has {a.shape[1]} bits, expected {self.n_steps}")
        if self.kind == "uniform" or not self.n_steps:
            return np.full(a.shape[0], -self.n_steps * np.log(2.0))
        beta = params[self.key]
        return G.sum(-G.softplus(-beta) * a - G.softplus(beta) * (1.0 - a))


@dataclass
class Trajectory:
    """A batch of simulated MetFlow runs.

    Arrays have a leading batch axis ``n``.  ``log_alpha`` holds
    ``log α̂^{a_k}`` (log-reject for rejected steps) per step, and
    ``log_jac`` the summed signed log-Jacobians of accepted moves.  When the
    run was recorded, ``graph`` holds the tape values needed for gradients.
    """

    y: np.ndarray
    u: Optional[np.ndarray]
    v: np.ndarray
    a: np.ndarray
    states: list
    log_alpha: np.ndarray
    log_jac: np.ndarray
    log_q0: np.ndarray
    log_target: np.ndarray
    tape: Optional[G.Tape] = None
    graph: dict = field(default_factory=dict)

    @property
    def z(self):
        return self.states[-1]

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def log_q(self):
        """``log m(z_K, a | v)`` per trajectory."""
        return self.log_q0 - self.log_jac + self.log_alpha.sum(axis=1)


def _u_step(u, k):
    return None if u is None else u[k]


def simulate_trajectory(rng, model, params, n=1, u=None, tape=None):
    """Draw ``z_0 ~ m^0`` and run the K MetFlow steps on ``n`` chains.

    Args:
        u: per-step noise with leading axis K: ``(K, D)`` shared across the
            batch or ``(K, n, D)`` per chain; ``None`` for plain flows.
        tape: when given, every quantity depending on the parameters is
            recorded so :func:`grad_estimate` can differentiate.

    The random stream is consumed as: ``y`` for all chains, then for each
    step the directions followed by the accept uniforms.
    """
    D, K = model.dim, model.n_steps
    P = tape.watch(params) if tape is not None else params
    y = rng.standard_normal((n, D))
    z = model.prior.reparam(P, y)
    log_q0 = model.prior.log_prob_from_noise(P, y)
    lp = log_density(model.target, z)
    log_jac = np.zeros(n)
    states = [np.array(G.value_of(z))]
    log_alpha_a, log_nu_v = [], []
    v_all = np.ones((n, K), dtype=int)
    a_all = np.zeros((n, K), dtype=int)
    for k in range(K):
        v = model.nu.sample(rng, params, k, n)
        res = metflow_log_accept(
            model.target, model.stack, P, k, z, v, _u_step(u, k), model.nu, model.family, log_pi_z=lp
        )
        la = np.asarray(G.value_of(res["log_alpha"]))
        if np.any(np.isnan(la)):
            raise NumericalError("non-finite acceptance probability", step=k)
        a = rng.random(n) < np.exp(la)
        on, off = np.flatnonzero(a), np.flatnonzero(~a)
        idxs = [on, off]
        z = G.stitch([G.take(res["proposal"], on), G.take(z, off)], idxs, n)
        lp = G.stitch([G.take(res["log_pi_proposal"], on), G.take(lp, off)], idxs, n)
        log_jac = G.stitch([G.take(res["log_jac"], on), np.zeros(off.size)], idxs, n) + log_jac
        log_alpha_a.append(
            G.stitch(
                [G.take(res["log_alpha"], on), model.family.log_reject(G.take(res["log_t"], off))],
                idxs,
                n,
            )
        )
        if model.nu.trainable:
            log_nu_v.append(model.nu.log_prob(P, k, v))
        v_all[:, k] = v
        a_all[:, k] = a
        states.append(np.array(G.value_of(z)))
    log_alpha_vals = np.stack([np.asarray(G.value_of(x)) for x in log_alpha_a], axis=1) if K else np.zeros((n, 0))
    traj = Trajectory(
        y=y,
        u=None if u is None else np.asarray(u),
        v=v_all,
        a=a_all,
        states=states,
        log_alpha=log_alpha_vals,
        log_jac=np.asarray(G.value_of(log_jac), dtype=np.float64),
        log_q0=np.asarray(G.value_of(log_q0), dtype=np.float64),
        log_target=np.asarray(G.value_of(lp), dtype=np.float64),
        tape=tape,
    )
    if tape is not None:
        traj.graph = {
            "params": P,
            "log_q0": log_q0,
            "log_jac": log_jac,
            "log_target": lp,
            "log_alpha": log_alpha_a,
            "log_nu": log_nu_v,
            "z": z,
        }
    return traj


def elbo_value(traj, model, params):
    """Per-trajectory bound ``log π̃(z_K) + log r(a) - log m(z_K, a | v)``."""
    log_r = np.asarray(G.value_of(model.r.log_prob(params, traj.a)), dtype=np.float64)
    return traj.log_target + log_r - traj.log_q


def _total(terms, start):
    out = start
    for t in terms:
        out = out + t
    return out


def grad_estimate(traj, model, params):
    """Gradient of the batch-mean bound from a recorded trajectory.

    Returns:
        ``(grad, values)``: a ParamTree shaped like ``params`` and the
        per-trajectory bound values.
    """
    if traj.tape is None:
        raise ValueError("trajectory was not recorded; pass a tape to simulate_trajectory")
    g = traj.graph
    P = g["params"]
    log_alpha_sum = _total(g["log_alpha"], np.zeros(traj.n))
    log_q = g["log_q0"] - g["log_jac"] + log_alpha_sum
    f = g["log_target"] + model.r.log_prob(P, traj.a) - log_q
    values = np.asarray(G.value_of(f), dtype=np.float64)
    score = _total(g["log_nu"], log_alpha_sum)
    surrogate = (f + values * score) * (1.0 / traj.n)
    out = traj.tape.set_output(G.sum(surrogate) if isinstance(surrogate, G.Var) else surrogate)
    return G.backward(traj.tape, params, output=out), values


def elbo_and_grad(rng, model, params, n, u=None):
    traj = simulate_trajectory(rng, model, params, n=n, u=u, tape=G.Tape())
    grads, values = grad_estimate(traj, model, params)
    return values, grads, traj


# ---------------------------------------------------------------------------
# plain normalizing-flow baseline


def nf_baseline_elbo(rng, model, params, n=1, u=None, tape=None):
    """Reparameterized bound of the pushforward ``T_K ∘ ... ∘ T_1 ∘ (μ + σ·)``.

    Returns:
        ``(values, graph)`` where ``graph`` holds the recorded scalar output
        when a tape is given.
    """
    P = tape.watch(params) if tape is not None else params
    y = rng.standard_normal((n, model.dim))
    z = model.prior.reparam(P, y)
    log_q = model.prior.log_prob_from_noise(P, y)
    for k in range(model.n_steps):
        z, lj = model.stack.step_forward(P, k, z, _u_step(u, k))
        log_q = log_q - lj
    f = log_density(model.target, z) - log_q
    values = np.asarray(G.value_of(f), dtype=np.float64)
    graph = {"f": f, "z": z}
    if tape is not None:
        graph["output"] = tape.set_output(G.sum(f * (1.0 / n)))
    return values, graph


def nf_baseline_grad(rng, model, params, n, u=None):
    tape = G.Tape()
    values, graph = nf_baseline_elbo(rng, model, params, n=n, u=u, tape=tape)
    return values, G.backward(tape, params, output=graph["output"])
