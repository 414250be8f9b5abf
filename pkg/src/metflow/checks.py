"""Self-check suites run by ``metflow check``.

Each suite returns a dict with ``passed`` and a few numbers.  With
``inject_failure`` the balance suite swaps in the raw flow pushforward, which
is not π-invariant, so a working suite must report FAIL.
"""

import time

import numpy as np

from . import grad as G
from .density import PriorModel, marginal_logpdf
from .elbo import InferenceFn
from .errors import ConfigError
from .flows import FlowStack, RnvpBlock, block_forward, block_inverse
from .kernels import MH, DirectionDist, detailed_balance_check, hmc_proposal, metflow_kernel, unadjusted_flow_kernel
from .model import MetFlowModel
from .targets import eight_gaussians, gaussian

SUITES = ("balance", "density", "grad", "flows", "hmc")


def random_block(rng, max_dim=6, noisy=None, out_scale=0.5):
    dim = int(rng.integers(2, max_dim + 1))
    k = int(rng.integers(1, dim))
    mask = tuple(sorted(rng.choice(dim, size=k, replace=False)))
    noisy = bool(rng.integers(2)) if noisy is None else noisy
    block = RnvpBlock(dim, mask, int(rng.integers(1, 6)), dim if noisy else 0)
    params = block.init_params(rng, out_scale=out_scale)
    u = rng.standard_normal(dim) if noisy else None
    return block, params, u


def numerical_log_det(fn, z, h=1e-6):
    d = z.size
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[:, j] = (fn(z + e) - fn(z - e)) / (2 * h)
    sign, logdet = np.linalg.slogdet(jac)
    return logdet if sign > 0 else np.nan


def random_metflow(rng, target, n_steps=1, hidden=4, out_scale=0.5, noisy=True):
    """Flow stack with random weights plus fixed noise, for kernel tests."""
    stack = FlowStack(target.dim, n_steps, 2, hidden, shared=noisy, noisy=noisy)
    params = G.ParamTree(stack.init_params(rng, out_scale=out_scale))
    u = rng.standard_normal((n_steps, target.dim)) if noisy else None
    return stack, params, u


def suite_flows(rng, n_blocks=200):
    worst_rt, worst_det = 0.0, 0.0
    for _ in range(n_blocks):
        block, params, u = random_block(rng)
        z = rng.standard_normal(block.dim)
        fwd, lj = block_forward(block, params, z, u)
        back, lj_inv = block_inverse(block, params, fwd, u)
        worst_rt = max(worst_rt, float(np.max(np.abs(back - z))), abs(float(lj + lj_inv)))
        num = numerical_log_det(lambda x: block_forward(block, params, x, u)[0], z)
        worst_det = max(worst_det, abs(np.expm1(lj - num)))
    return {"passed": bool(worst_rt <= 1e-9 and worst_det <= 1e-5), "roundtrip": worst_rt, "det_rel": worst_det}


def suite_grad(rng, n_tapes=20):
    worst = 0.0
    for _ in range(n_tapes):
        block, params, u = random_block(rng, max_dim=4)
        params = G.ParamTree(params)
        tape = G.Tape()
        P = tape.watch(params)
        z = rng.standard_normal((3, block.dim))
        out, lj = block_forward(block, P, z, u)
        tape.set_output(G.sum(G.sum(G.tanh(out)) + lj))
        worst = max(worst, G.check_grad(tape, params))
    return {"passed": bool(worst <= 1e-5), "worst_rel": worst}


def suite_balance(rng, n=100_000, inject_failure=False):
    target = eight_gaussians(radius=3.0)
    stack, params, u = random_metflow(rng, target, out_scale=0.8)
    if inject_failure:
        kernel = unadjusted_flow_kernel(stack, params, 0, u[0])
    else:
        kernel = metflow_kernel(target, stack, params, 0, u[0], DirectionDist(1), MH)
    report = detailed_balance_check(kernel, target.sample, rng, n=n)
    report["injected_failure"] = inject_failure
    return report


def suite_density(rng):
    target = gaussian([0.5], [1.5])
    stack = FlowStack(1, 2, 2, 3)
    params = {}
    prior = PriorModel(1)
    params.update(prior.init_params())
    params.update(stack.init_params(rng, out_scale=0.5))
    model = MetFlowModel(target, prior, stack, DirectionDist(2), MH, InferenceFn(2))
    grid = np.linspace(-15, 15, 6001)[:, None]
    mass = float(np.sum(np.exp(marginal_logpdf(model, G.ParamTree(params), grid))) * (grid[1, 0] - grid[0, 0]))
    return {"passed": bool(abs(mass - 1) <= 1e-4), "mass": mass}


def suite_hmc(rng, n=1000):
    target = eight_gaussians(radius=3.0)
    q = 3 * rng.standard_normal((n, 2))
    p = rng.standard_normal((n, 2))
    q1, p1 = hmc_proposal(target, 0.1, 5, q, p)
    q2, p2 = hmc_proposal(target, 0.1, 5, q1, p1)
    residual = float(max(np.max(np.abs(q2 - q)), np.max(np.abs(p2 - p))))

    def flat(x):
        qq, pp = hmc_proposal(target, 0.1, 5, x[:2], x[2:])
        return np.concatenate([qq, pp])

    jac_err = 0.0
    for i in range(20):
        x = np.concatenate([q[i], p[i]])
        jac = np.empty((4, 4))
        for j in range(4):
            e = np.zeros(4)
            e[j] = 1e-6
            jac[:, j] = (flat(x + e) - flat(x - e)) / 2e-6
        jac_err = max(jac_err, abs(abs(np.linalg.det(jac)) - 1))
    return {"passed": bool(residual <= 1e-8 and jac_err <= 1e-6), "involution": residual, "jacobian": jac_err}


def run_suite(name, seed=0, inject_failure=False):
    """Run one suite (or ``"all"``); returns a JSON-ready report."""
    names = SUITES if name == "all" else (name,)
    if any(n not in SUITES for n in names):
        raise ConfigError(f"unknown suite {name!r}; expected one of {SUITES + ('all',)}")
    results = {}
    for n in names:
        rng = np.random.default_rng([seed, SUITES.index(n)])
        start = time.perf_counter()
        res = suite_balance(rng, inject_failure=inject_failure) if n == "balance" else globals()[f"suite_{n}"](rng)
        res["seconds"] = round(time.perf_counter() - start, 3)
        results[n] = res
    return {"suite": name, "passed": all(r["passed"] for r in results.values()), "results": results}
