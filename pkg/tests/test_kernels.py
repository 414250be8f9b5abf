import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metflow import grad as G
from metflow.checks import random_metflow
from metflow.errors import ConfigError, ConvergenceError, DomainError
from metflow.flows import FlowStack
from metflow.kernels import (
    BARKER,
    MH,
    DirectionDist,
    RatioFamily,
    accept_ratio,
    detailed_balance_check,
    hamiltonian,
    hmc_flip_step,
    hmc_kernel,
    hmc_proposal,
    identity_kernel,
    leapfrog,
    mala_forward,
    mala_inverse,
    mala_kernel,
    metflow_accept_prob,
    metflow_kernel,
    metflow_log_accept,
    metflow_step,
    momentum_refresh,
    rwm_kernel,
    rwm_step,
    unadjusted_flow_kernel,
)
from metflow.targets import TargetModel, eight_gaussians, gaussian, gaussian_mixture, MixtureSpec


def shift_stack(shift=1.0):
    """One-dimensional single-block stack with T(z) = z + shift."""
    stack = FlowStack(1, 1, n_blocks=1, hidden=2)
    params = stack.init_params(np.random.default_rng(0))
    params["flow/step0/block0/t/b2"] = np.array([shift])
    return stack, G.ParamTree(params)


class _FixedAccept:
    """Ratio family stub with a constant acceptance probability."""

    def __init__(self, log_alpha):
        self.value = log_alpha

    def log_accept(self, log_t):
        return np.full(np.shape(G.value_of(log_t)), self.value)

    def log_reject(self, log_t):
        return np.full(np.shape(G.value_of(log_t)), np.log1p(-np.exp(self.value)))


class TestRatioFamily:
    def test_values(self):
        assert accept_ratio(MH, 0.3) == pytest.approx(0.3)
        assert accept_ratio(MH, 2.0) == 1.0
        assert accept_ratio(BARKER, 1.0) == pytest.approx(0.5)
        assert accept_ratio(MH, np.inf) == 1.0
        assert accept_ratio(BARKER, np.inf) == 1.0
        assert accept_ratio(MH, 0.0) == 0.0

    def test_negative_argument(self):
        with pytest.raises(DomainError):
            accept_ratio(MH, -0.1)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            RatioFamily("glauber")

    @pytest.mark.parametrize("family", [MH, BARKER])
    def test_reciprocal_identity_at_four(self, family):
        assert 4 * accept_ratio(family, 0.25) == pytest.approx(accept_ratio(family, 4.0), rel=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-30, 30), st.sampled_from([MH, BARKER]))
    def test_reciprocal_identity(self, log_t, family):
        # t φ(1/t) = φ(t) in log form
        lhs = log_t + family.log_accept(-log_t)
        assert lhs == pytest.approx(family.log_accept(log_t), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-30, 30), st.sampled_from([MH, BARKER]))
    def test_accept_and_reject_sum_to_one(self, log_t, family):
        total = np.exp(family.log_accept(log_t)) + np.exp(family.log_reject(log_t))
        assert total == pytest.approx(1.0, abs=1e-12)


class TestMetFlowAcceptance:
    def test_identity_flow(self, rng):
        t = eight_gaussians()
        stack = FlowStack(2, 1, 2, 4)
        params = stack.init_params(rng)
        z = rng.normal(size=2)
        assert metflow_accept_prob(t, stack, params, 0, z, 1, None, DirectionDist(1), MH) == 1.0
        assert metflow_accept_prob(t, stack, params, 0, z, -1, None, DirectionDist(1), BARKER) == pytest.approx(0.5)

    def test_unit_shift(self):
        stack, params = shift_stack()
        t = gaussian([0.0])
        nu = DirectionDist(1)
        a = metflow_accept_prob(t, stack, params, 0, np.array([0.0]), 1, None, nu, MH)
        assert a == pytest.approx(np.exp(-0.5), rel=1e-12)
        b = metflow_accept_prob(t, stack, params, 0, np.array([1.0]), -1, None, nu, MH)
        assert b == 1.0

    def test_zero_direction_probability(self):
        stack, params = shift_stack()
        with pytest.raises(DomainError):
            metflow_accept_prob(gaussian([0.0]), stack, params, 0, np.array([0.0]), -1, None,
                                DirectionDist(1, probs=[1.0]), MH)

    @pytest.mark.parametrize("family", [MH, BARKER])
    @pytest.mark.parametrize("trainable", [False, True])
    def test_balance_identity(self, rng, family, trainable):
        t = eight_gaussians(radius=3.0)
        stack, params, _ = random_metflow(rng, t, n_steps=2, out_scale=0.8)
        nu = DirectionDist(2, trainable=trainable)
        if trainable:
            params = G.ParamTree({**params, "nu/logits": rng.normal(size=2)})
        worst = 0.0
        for _ in range(1000):
            k = int(rng.integers(2))
            z = rng.normal(scale=3.0, size=(1, 2))
            v = np.array([rng.choice([-1, 1])])
            u = rng.normal(size=2)
            fwd = metflow_log_accept(t, stack, params, k, z, v, u, nu, family)
            back = metflow_log_accept(t, stack, params, k, fwd["proposal"], -v, u, nu, family)
            lhs = fwd["log_alpha"] + t.log_density(z) + nu.log_prob(params, k, v)
            rhs = back["log_alpha"] + fwd["log_pi_proposal"] + nu.log_prob(params, k, -v) + fwd["log_jac"]
            worst = max(worst, float(np.abs(np.expm1(lhs - rhs))[0]))
        assert worst <= 1e-9


class TestMetFlowStep:
    def test_forced_reject(self, rng):
        stack, params = shift_stack()
        z = rng.normal(size=(50, 1))
        out = metflow_step(rng, gaussian([0.0]), stack, params, 0, z, None, DirectionDist(1), _FixedAccept(-np.inf))
        np.testing.assert_array_equal(out.z_next, z)
        assert np.all(out.a == 0) and np.all(out.log_jac == 0)

    def test_forced_accept_forward(self, rng):
        stack, params = shift_stack(0.7)
        z = rng.normal(size=(50, 1))
        out = metflow_step(rng, gaussian([0.0]), stack, params, 0, z, None, DirectionDist(1, probs=[1.0]),
                           _FixedAccept(0.0))
        np.testing.assert_allclose(out.z_next, z + 0.7)
        assert np.all(out.v == 1) and np.all(out.a == 1)

    def test_single_point(self, rng):
        stack, params = shift_stack()
        out = metflow_step(rng, gaussian([0.0]), stack, params, 0, np.array([0.2]), None, DirectionDist(1), MH)
        assert out.z_next.shape == (1,)
        assert out.log_alpha <= 0
        if out.a == 0:
            assert out.z_next[0] == 0.2

    def test_empirical_accept_frequency(self, rng):
        t = eight_gaussians(radius=3.0)
        stack, params, u = random_metflow(rng, t, out_scale=0.8)
        nu = DirectionDist(1, probs=[1.0])
        z0 = np.array([0.5, -1.0])
        alpha = metflow_accept_prob(t, stack, params, 0, z0, 1, u[0], nu, MH)
        n = 100_000
        out = metflow_step(rng, t, stack, params, 0, np.tile(z0, (n, 1)), u[0], nu, MH)
        se = np.sqrt(alpha * (1 - alpha) / n)
        assert abs(out.a.mean() - alpha) <= 3 * se + 1e-12


class TestRandomWalk:
    def test_zero_move_is_accepted(self, rng):
        out = rwm_step(rng, eight_gaussians(), np.eye(2), np.array([1.0, 2.0]), u=np.zeros(2))
        assert out.a == 1 and out.log_alpha == 0.0

    def test_uniform_box(self, rng):
        box = TargetModel(2, lambda z: np.where(np.all(np.abs(z) <= 1, axis=-1), 0.0, -np.inf),
                          lambda z: np.zeros_like(z))
        out = rwm_step(rng, box, 0.1 * np.eye(2), np.zeros(2), u=np.array([1.0, -2.0]))
        assert out.log_alpha == 0.0

    def test_standard_normal(self, rng):
        out = rwm_step(rng, gaussian([0.0]), np.eye(1), np.array([0.0]), u=np.array([1.0]))
        assert np.exp(out.log_alpha) == pytest.approx(np.exp(-0.5))

    def test_singular_cov_root(self, rng):
        with pytest.raises(ConfigError):
            rwm_step(rng, eight_gaussians(), np.array([[1.0, 1.0], [1.0, 1.0]]), np.zeros(2))


class TestLangevin:
    def test_forward_examples(self):
        t = gaussian([0.0])
        assert mala_forward(t, 0.5, np.array([4.0]), np.array([1.0]))[0] == pytest.approx(3.0)
        np.testing.assert_array_equal(mala_forward(t, 0.0, np.array([4.0]), np.array([0.0])), [4.0])
        flat = TargetModel(1, lambda z: np.zeros(np.shape(z)[:-1]), lambda z: np.zeros_like(z))
        assert mala_forward(flat, 0.5, np.array([2.0]), np.array([1.0]))[0] == pytest.approx(3.0)

    def test_inverse_closed_form(self):
        z = mala_inverse(gaussian([0.0]), 0.5, np.array([3.0]), np.array([1.0]))
        assert z[0] == pytest.approx(4.0, abs=1e-10)

    def test_zero_step(self):
        y, u = np.array([1.3, -0.2]), np.array([0.4, 0.9])
        np.testing.assert_array_equal(mala_inverse(eight_gaussians(), 0.0, y, u), y)

    @pytest.mark.parametrize("target, lipschitz", [
        (gaussian([0.5, -1.0], [1.0, 2.0]), 1.0),
        (gaussian_mixture(MixtureSpec([[-1.0, 0.0], [1.0, 0.5]], sigma=1.0)), 2.0),
        (eight_gaussians(radius=1.0, sigma=1.0), 2.0),
    ], ids=["gauss", "two-modes", "ring"])
    def test_roundtrip_with_monotone_residuals(self, rng, target, lipschitz):
        gamma = 0.4 / lipschitz
        for _ in range(20):
            z = rng.normal(size=2)
            u = rng.normal(size=2)
            y = mala_forward(target, gamma, z, u)
            back, info = mala_inverse(target, gamma, y, u, full_output=True)
            assert np.max(np.abs(mala_forward(target, gamma, back, u) - y)) <= 1e-10
            assert info["iterations"] <= 60
            res = info["residuals"]
            assert all(b <= a for a, b in zip(res, res[1:]))

    def test_no_convergence(self):
        with pytest.raises(ConvergenceError) as info:
            mala_inverse(eight_gaussians(radius=1.0), 0.2, np.array([3.0, 1.0]), np.array([0.3, 0.1]), max_iter=2)
        assert info.value.residual > 1e-10


class TestHamiltonian:
    def test_leapfrog_hand_values(self):
        q, p = leapfrog(gaussian([0.0]), 0.1, 1, np.array([1.0]), np.array([0.0]))
        assert q[0] == pytest.approx(0.995, abs=1e-12)
        assert p[0] == pytest.approx(-0.09975, abs=1e-12)

    def test_zero_step_is_identity(self, rng):
        q, p = rng.normal(size=2), rng.normal(size=2)
        q1, p1 = leapfrog(eight_gaussians(), 0.0, 3, q, p)
        np.testing.assert_array_equal(q1, q)
        np.testing.assert_array_equal(p1, p)

    def test_flip_with_zero_step_always_accepts(self, rng):
        out = hmc_flip_step(rng, eight_gaussians(), 0.0, 1, np.array([1.0, 2.0]), np.array([0.5, -0.5]))
        assert out.log_alpha == 0.0
        np.testing.assert_array_equal(out.z_next, [1.0, 2.0, -0.5, 0.5])

    def test_harmonic_energy_conservation(self, rng):
        t = gaussian([0.0])
        q, p = rng.normal(size=(1000, 1)), rng.normal(size=(1000, 1))
        qn, pn = hmc_proposal(t, 0.1, 5, q, p)
        dh = np.abs(hamiltonian(t, qn, pn) - hamiltonian(t, q, p))
        assert np.max(dh) <= 0.01
        out = hmc_flip_step(rng, t, 0.1, 5, q, p)
        assert np.all(out.log_alpha >= -0.01)

    def test_involution(self, rng):
        t = eight_gaussians(radius=3.0)
        q, p = 3 * rng.normal(size=(1000, 2)), rng.normal(size=(1000, 2))
        q2, p2 = hmc_proposal(t, 0.1, 5, *hmc_proposal(t, 0.1, 5, q, p))
        assert max(np.max(np.abs(q2 - q)), np.max(np.abs(p2 - p))) <= 1e-8

    def test_bad_step_count(self):
        with pytest.raises(ConfigError):
            leapfrog(eight_gaussians(), 0.1, 0, np.zeros(2), np.zeros(2))


class TestMomentumRefresh:
    def test_example(self, rng):
        np.testing.assert_allclose(momentum_refresh(rng, 0.6, np.array([1.0, 0.0]), u=np.array([0.0, 1.0])),
                                   [0.6, 0.8])

    def test_near_one(self, rng):
        p = rng.normal(size=3)
        np.testing.assert_allclose(momentum_refresh(rng, 1 - 1e-12, p), p, atol=1e-5)

    @pytest.mark.parametrize("a", [0.0, 1.0, -0.3, 1.5])
    def test_out_of_range(self, rng, a):
        with pytest.raises(ConfigError):
            momentum_refresh(rng, a, np.zeros(2))

    def test_preserves_standard_normal(self, rng):
        n = 100_000
        p = momentum_refresh(rng, 0.3, rng.normal(size=(n, 2)))
        assert np.all(np.abs(p.mean(axis=0)) <= 3 / np.sqrt(n))
        assert np.all(np.abs(p.var(axis=0) - 1) <= 3 * np.sqrt(2 / n))


class TestInvarianceAndBalance:
    def test_identity_kernel_is_symmetric(self, rng):
        rep = detailed_balance_check(identity_kernel, eight_gaussians().sample, rng, n=5000)
        assert rep["max_asymmetry"] == 0.0 and rep["passed"]

    def test_metflow_kernel_balanced(self, rng):
        t = eight_gaussians(radius=3.0)
        stack, params, u = random_metflow(rng, t, out_scale=0.8)
        rep = detailed_balance_check(metflow_kernel(t, stack, params, 0, u[0], DirectionDist(1)), t.sample, rng)
        assert rep["passed"], rep

    def test_raw_pushforward_fails(self, rng):
        t = eight_gaussians(radius=3.0)
        stack, params, u = random_metflow(rng, t, out_scale=0.8)
        rep = detailed_balance_check(unadjusted_flow_kernel(stack, params, 0, u[0]), t.sample, rng)
        assert not rep["passed"]
        assert rep["max_z"] > 3 * rep["threshold"]

    def test_moments_preserved_by_every_kernel(self, rng):
        t = eight_gaussians(radius=3.0)
        stack, params, u = random_metflow(rng, t, out_scale=0.8)
        kernels = {
            "metflow": metflow_kernel(t, stack, params, 0, u[0], DirectionDist(1)),
            "rwm": rwm_kernel(t, 1.5 * np.eye(2)),
            "mala": mala_kernel(t, 0.2),
            "hmc": hmc_kernel(t, 0.2, 5, 0.5),
        }
        n = 50_000
        for name, kernel in kernels.items():
            z = t.sample(rng, n)
            moved = kernel(rng, z)
            fresh = t.sample(rng, n)
            se_mean = np.sqrt(moved.var(0) / n + fresh.var(0) / n)
            assert np.all(np.abs(moved.mean(0) - fresh.mean(0)) <= 3 * se_mean), name
            # second moments: standard error from fourth moments
            for m2_a, m2_b in ((moved**2, fresh**2), (moved[:, :1] * moved[:, 1:], fresh[:, :1] * fresh[:, 1:])):
                se = np.sqrt(m2_a.var(0) / n + m2_b.var(0) / n)
                assert np.all(np.abs(m2_a.mean(0) - m2_b.mean(0)) <= 3 * se), name
