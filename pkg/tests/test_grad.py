import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metflow import grad as G
from metflow.errors import NumericalError, ShapeError
from metflow.flows import RnvpBlock, block_forward


def scalar_tape(fn, params):
    tape = G.Tape()
    P = tape.watch(params)
    tape.set_output(fn(P))
    return tape


class TestParamTree:
    def test_flatten_roundtrip(self, rng):
        tree = G.ParamTree({"a/W": rng.normal(size=(3, 2)), "a/b": rng.normal(size=3), "c": 1.5})
        assert tree.total_dim == 10
        back = tree.unflatten(tree.flatten())
        assert back.allclose(tree, rtol=0, atol=0)
        assert list(back) == list(tree)

    def test_nested_roundtrip(self):
        tree = G.ParamTree.from_nested({"flow": {"s": {"W1": np.ones((2, 2))}, "t": {"b": np.zeros(2)}}})
        assert list(tree) == ["flow/s/W1", "flow/t/b"]
        assert G.ParamTree.from_nested(tree.nested()).allclose(tree)

    def test_rejects_non_finite_and_high_rank(self):
        with pytest.raises(NumericalError):
            G.ParamTree({"x": [1.0, np.nan]})
        with pytest.raises(ShapeError):
            G.ParamTree({"x": np.zeros((2, 2, 2))})

    def test_unflatten_wrong_length(self):
        with pytest.raises(ShapeError):
            G.ParamTree({"x": np.zeros(3)}).unflatten(np.zeros(4))


class TestBackwardExamples:
    def test_square(self):
        params = G.ParamTree({"w": 3.0})
        tape = scalar_tape(lambda P: P["w"] * P["w"], params)
        assert G.backward(tape, params)["w"] == pytest.approx(6.0)

    @pytest.mark.parametrize("w, expected", [(2.0, 0.0), (0.5, 1.0)])
    def test_min_with_one(self, w, expected):
        params = G.ParamTree({"w": w})
        tape = scalar_tape(lambda P: G.minimum(P["w"], 1.0), params)
        assert G.backward(tape, params)["w"] == expected

    def test_kink_derivative_from_left(self):
        params = G.ParamTree({"w": 1.0})
        tape = scalar_tape(lambda P: G.minimum(P["w"], 1.0), params)
        assert G.backward(tape, params)["w"] == 1.0

    def test_unused_parameter_gets_zero(self):
        params = G.ParamTree({"w": 2.0, "unused": np.ones((2, 3))})
        tape = scalar_tape(lambda P: G.exp(P["w"]), params)
        g = G.backward(tape, params)
        assert g.shapes() == params.shapes()
        assert np.all(g["unused"] == 0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_node_reports_location(self):
        params = G.ParamTree({"w": -1.0})
        tape = scalar_tape(lambda P: G.log(P["w"]), params)
        with pytest.raises(NumericalError) as info:
            G.backward(tape, params)
        assert info.value.op == "log"
        assert info.value.node is not None

    def test_output_must_be_scalar(self):
        tape = G.Tape()
        w = tape.param("w", np.ones(3))
        with pytest.raises(ShapeError):
            tape.set_output(w * 2.0)

    def test_linearity(self, rng):
        params = G.ParamTree({"w": rng.normal(size=4), "W": rng.normal(size=(2, 4))})

        def f1(P):
            return G.sum(G.tanh(G.matvec(P["w"], P["W"])))

        def f2(P):
            return G.sum(G.exp(P["w"] * 0.3))

        g1 = G.backward(scalar_tape(f1, params), params)
        g2 = G.backward(scalar_tape(f2, params), params)
        g12 = G.backward(scalar_tape(lambda P: f1(P) + f2(P), params), params)
        np.testing.assert_allclose(g12.flatten(), g1.flatten() + g2.flatten(), rtol=1e-14, atol=1e-15)

    def test_batched_parameters_sum_over_batch(self, rng):
        x = rng.normal(size=(5, 3))
        params = G.ParamTree({"b": rng.normal(size=3)})
        tape = scalar_tape(lambda P: G.sum(G.sum((x + P["b"]) * (x + P["b"]))), params)
        np.testing.assert_allclose(G.backward(tape, params)["b"], 2 * np.sum(x + params["b"], axis=0))

    def test_plain_arrays_pass_through(self):
        assert G.exp(0.0) == 1.0
        np.testing.assert_allclose(G.matvec(np.ones(2), np.eye(2) * 3), [3.0, 3.0])


UNARY = {
    "exp": (G.exp, np.exp),
    "log": (G.log, np.log),
    "tanh": (G.tanh, np.tanh),
    "leaky_relu": (G.leaky_relu, lambda x: np.where(x > 0, x, 0.01 * x)),
    "softplus": (G.softplus, lambda x: np.logaddexp(0, x)),
    "log1mexp": (G.log1mexp, lambda x: np.log(-np.expm1(x))),
    "minimum": (lambda x: G.minimum(x, 0.3), lambda x: np.minimum(x, 0.3)),
    "neg": (lambda x: -x, np.negative),
}


def _domain(name, x):
    if name == "log":
        return np.abs(x) + 0.1
    if name == "log1mexp":
        return -np.abs(x) - 0.05
    if name in ("leaky_relu",):
        return np.where(np.abs(x) < 1e-3, x + 2e-3, x)
    if name == "minimum":
        return np.where(np.abs(x - 0.3) < 1e-3, x + 2e-3, x)
    return x


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_adjoint_matches_central_differences(name, rng):
    op, ref = UNARY[name]
    worst = 0.0
    for _ in range(100):
        x = _domain(name, rng.uniform(-2, 2, size=3))
        params = G.ParamTree({"x": x})
        tape = scalar_tape(lambda P: G.sum(op(P["x"])), params)
        np.testing.assert_allclose(tape.values[tape.output], np.sum(ref(x)), rtol=1e-13)
        worst = max(worst, G.check_grad(tape, params, h=1e-6))
    assert worst <= 1e-6


def test_binary_and_reduction_adjoints(rng):
    worst = 0.0
    for _ in range(100):
        params = G.ParamTree({"x": rng.normal(size=(4, 3)), "W": rng.normal(size=(2, 3)), "b": rng.normal(size=2)})

        def f(P):
            h = G.matvec(P["x"], P["W"]) + P["b"]
            y = G.logsumexp(h * h - P["b"]) - G.sum(h) * 0.1
            return G.sum(y)

        worst = max(worst, G.check_grad(scalar_tape(f, params), params, h=1e-5))
    assert worst <= 1e-6


def test_take_stitch_and_apply(rng):
    params = G.ParamTree({"x": rng.normal(size=(6, 2))})
    idx_a, idx_b = np.array([0, 3, 4]), np.array([1, 2, 5])

    def f(P):
        a = G.take(P["x"], idx_a) * 2.0
        b = G.exp(G.take(P["x"], idx_b))
        joined = G.stitch([a, b], [idx_a, idx_b], 6)
        s = G.apply(joined, lambda z: np.sum(z**3, axis=-1), lambda z: 3 * z**2)
        return G.sum(s)

    tape = scalar_tape(f, params)
    assert G.check_grad(tape, params) <= 1e-6


def test_check_grad_exact_on_linear_tape(rng):
    params = G.ParamTree({"w": rng.normal(size=5)})
    c = rng.normal(size=5)
    tape = scalar_tape(lambda P: G.sum(P["w"] * c) + 1.0, params)
    assert G.check_grad(tape, params) <= 1e-10


def test_check_grad_on_coupling_log_jacobian(rng):
    block = RnvpBlock(4, (0, 1), 5, noise_dim=4)
    params = G.ParamTree(block.init_params(rng, out_scale=0.5))
    u = rng.normal(size=4)
    tape = G.Tape()
    P = tape.watch(params)
    _, lj = block_forward(block, P, rng.normal(size=(3, 4)), u)
    tape.set_output(G.sum(lj))
    assert G.check_grad(tape, params) <= 1e-5


def test_check_grad_detects_corrupted_adjoint(rng):
    prim = G.PRIMITIVES["tanh"]
    G.register_primitive("tanh_bad", prim.forward, lambda g, out, x: (2.5 * g * (1 - out * out),))
    try:
        params = G.ParamTree({"w": rng.normal(size=3)})
        tape = scalar_tape(lambda P: G.sum(G._op("tanh_bad", P["w"])), params)
        assert G.check_grad(tape, params) > 1e-2
    finally:
        del G.PRIMITIVES["tanh_bad"]


def random_composite(rng, n_params=20):
    """Tape mixing every primitive over about ``n_params`` scalars."""
    params = G.ParamTree({"W": rng.normal(size=(3, 4)) * 0.5, "b": rng.normal(size=3), "c": rng.normal(size=5)})
    x = rng.normal(size=(2, 4))

    def f(P):
        h = G.leaky_relu(G.matvec(x, P["W"]) + P["b"])
        s = G.tanh(h) * G.exp(h * 0.2) + G.softplus(-h)
        t = G.log(G.softplus(P["c"]) + 0.5) + G.log1mexp(-G.softplus(P["c"]) - 0.1)
        m = G.minimum(G.sum(s), 5.0)
        return G.sum(m) - G.logsumexp(t) * 0.5 - G.sum(P["c"] * P["c"])

    return params, f


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_composites(seed):
    params, f = random_composite(np.random.default_rng(seed))
    # gradients below ~1e-4 are compared in absolute terms (rounding of the
    # central differences is ~1e-10 at h = 1e-5)
    assert G.check_grad(scalar_tape(f, params), params, floor=1e-4) <= 1e-5


def test_composite_with_tiny_gradient():
    params, f = random_composite(np.random.default_rng(4115))
    tape = scalar_tape(f, params)
    assert abs(G.backward(tape, params)["W"].ravel()[9]) < 1e-5
    assert G.check_grad(tape, params, floor=1e-4) <= 1e-5


def test_replay_recomputes_with_overrides():
    params = G.ParamTree({"w": 2.0})
    tape = scalar_tape(lambda P: P["w"] * P["w"] + 1.0, params)
    vals = tape.replay({"w": 3.0})
    assert vals[tape.output] == 10.0
    assert tape.values[tape.output] == 5.0
