import numpy as np
import pytest

from metflow import grad as G
from metflow.density import PriorModel
from metflow.elbo import InferenceFn
from metflow.flows import FlowStack
from metflow.kernels import MH, DirectionDist
from metflow.model import MetFlowModel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_model(target, n_steps=1, hidden=3, noisy=False, nu=None, family=MH, r="uniform", rng=None, out_scale=0.5):
    """Small MetFlow model with random flow weights and a standard prior."""
    rng = np.random.default_rng(0) if rng is None else rng
    stack = FlowStack(target.dim, n_steps, 2, hidden, shared=noisy, noisy=noisy) if n_steps else None
    nu = DirectionDist(n_steps) if nu is None else nu
    model = MetFlowModel(target, PriorModel(target.dim), stack, nu, family, InferenceFn(n_steps, r),
                         setting="pseudo" if noisy else "deterministic")
    params = {}
    params.update(model.prior.init_params())
    if stack is not None:
        params.update(stack.init_params(rng, out_scale=out_scale))
    params.update(nu.init_params())
    params.update(model.r.init_params())
    u = rng.standard_normal((n_steps, target.dim)) if noisy else None
    return model, G.ParamTree(params), u


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for the acceptance summary."""

    def _report(label, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return passed

    return _report
