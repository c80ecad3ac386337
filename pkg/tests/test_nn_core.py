import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mlp_forward
from surveydebias.nn_core import (
    ConfigurationError,
    DenseLayer,
    MlpStack,
    OptimizerState,
    activate,
    activation_grad,
    apply_update,
    forward,
    grad_check,
    load_params,
    save_params,
    stack_backward,
    weighted_bce_loss,
)


def test_identity_relu_layer():
    stack = MlpStack([DenseLayer(np.eye(2), np.zeros(2), "relu")])
    assert forward(stack, np.array([1.0, -1.0]))[-1].tolist() == [[1.0, 0.0]]


def test_zero_sigmoid_stack_outputs_half():
    rng = np.random.default_rng(0)
    stack = MlpStack.init(rng, 6, [4, 3, 2], ["relu", "relu", "sigmoid"], zero=True)
    out = forward(stack, rng.normal(size=(5, 6)))[-1]
    assert np.all(out == 0.5)


def test_seed42_stack_matches_straight_line_recomputation():
    stack = MlpStack.init(np.random.default_rng(42), 4, [5, 3, 2], ["relu", "two_sigmoid", "sigmoid"])
    x = [0.5, -1.0, 2.0, 0.25]
    layers = [(l.weight.tolist(), l.bias.tolist(), l.activation) for l in stack.layers]
    got = forward(stack, np.array(x))[-1][0]
    np.testing.assert_allclose(got, mlp_forward(layers, x), rtol=1e-14)
    # frozen from the loop oracle
    np.testing.assert_allclose(got, [0.12815654980778665, 0.30046622805023526], rtol=1e-14)


def test_mismatched_layers_rejected():
    with pytest.raises(ConfigurationError):
        MlpStack([DenseLayer(np.ones((3, 2)), np.zeros(3)), DenseLayer(np.ones((1, 4)), np.zeros(1))])
    with pytest.raises(ConfigurationError):
        DenseLayer(np.ones((2, 2)), np.zeros(2), "tanh")


@pytest.mark.parametrize(
    "p, y, w, expected",
    [([0.5], [1], [1], math.log(2)), ([0.5, 0.5], [1, 0], [2, 2], math.log(2)), ([0.9], [1], [1], -math.log(0.9))],
)
def test_weighted_bce_values(p, y, w, expected):
    assert weighted_bce_loss(p, y, w) == pytest.approx(expected, abs=1e-12)


def test_bce_clamps_extremes():
    assert math.isfinite(weighted_bce_loss([0.0, 1.0], [1, 0], [1, 1]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_bce_invariant_to_weight_scale(n, c, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 0.99, n)
    y = rng.integers(0, 2, n)
    w = rng.uniform(0.1, 5.0, n)
    assert weighted_bce_loss(p, y, c * w) == pytest.approx(weighted_bce_loss(p, y, w), rel=1e-12)


def test_identity_layer_squared_loss_gradient():
    stack = MlpStack([DenseLayer(np.array([[1.0]]), np.zeros(1), "identity")])
    x = np.array([[2.0]])
    outs = forward(stack, x)
    grads = {}
    stack_backward(stack, x, outs, [outs[-1] - 0.0], "l", grads)
    assert grads["l.0.weight"][0, 0] == 4.0


def test_zero_sigmoid_head_bias_gradient():
    stack = MlpStack([DenseLayer(np.zeros((1, 3)), np.zeros(1), "sigmoid")])
    x = np.array([[0.3, -1.0, 2.0]])
    outs = forward(stack, x)
    grads = {}
    stack_backward(stack, x, outs, [-1.0 / outs[-1]], "h", grads)  # dBCE/dp at y=1
    assert grads["h.0.bias"][0] == -0.5


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "two_sigmoid", "identity"])
def test_activation_grad_matches_finite_difference(kind):
    z = np.linspace(-3, 3, 13) + 0.05
    h = 1e-6
    numeric = (activate(z + h, kind) - activate(z - h, kind)) / (2 * h)
    np.testing.assert_allclose(activation_grad(activate(z, kind), kind), numeric, atol=1e-8)


def test_grad_check_exact_for_quadratic():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(20, 4)), rng.normal(size=20)
    params = {"w": rng.normal(size=4)}

    def loss():
        r = X @ params["w"] - y
        return 0.5 * float(r @ r)

    grads = {"w": X.T @ (X @ params["w"] - y)}
    assert grad_check(loss, params, grads, h=1e-4) < 1e-8


def test_grad_check_detects_wrong_gradient():
    params = {"w": np.array([1.0, 2.0])}
    err = grad_check(lambda: float(params["w"] @ params["w"]), params, {"w": np.array([0.0, 0.0])})
    assert err > 0.5


def test_grad_check_skips_kinks():
    params = {"b": np.array([0.00005])}
    loss = lambda: float(max(params["b"][0], 0.0))  # noqa: E731
    stats = {}
    err = grad_check(loss, params, {"b": np.array([1.0])}, h=1e-4, pattern_fn=lambda: params["b"] > 0, stats=stats)
    assert err == 0.0 and stats == {"checked": 0, "skipped": 1}


def test_sgd_step():
    params = {"t": np.array([1.0])}
    apply_update(params, {"t": np.array([2.0])}, OptimizerState("sgd", 0.1))
    assert params["t"][0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_gradient_is_noop():
    params = {"t": np.array([1.5, -2.0])}
    apply_update(params, {"t": np.zeros(2)}, OptimizerState("sgd", 0.1))
    assert params["t"].tolist() == [1.5, -2.0]


def test_adam_first_step():
    params = {"t": np.array([0.0])}
    apply_update(params, {"t": np.array([1.0])}, OptimizerState("adam", 1e-3))
    assert params["t"][0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_leaves_params_without_gradient():
    params = {"a": np.array([1.0]), "b": np.array([2.0])}
    apply_update(params, {"a": np.array([1.0])}, OptimizerState())
    assert params["b"][0] == 2.0


def test_optimizer_validation():
    with pytest.raises(ConfigurationError):
        OptimizerState("rmsprop")
    with pytest.raises(ConfigurationError):
        OptimizerState("sgd", 0.0)


@pytest.mark.parametrize("suffix", [".bin", ".json"])
def test_param_roundtrip_is_exact(tmp_path, suffix):
    rng = np.random.default_rng(3)
    params = {"b.w": rng.normal(size=(3, 4)), "a": rng.normal(size=5) * 1e-300, "s": np.array(np.pi)}
    path = tmp_path / f"p{suffix}"
    save_params(path, params, {"note": "x"})
    back, meta = load_params(path)
    assert meta == {"note": "x"}
    for k, v in params.items():
        assert back[k].shape == v.shape
        assert np.array_equal(back[k], v)


def test_binary_format_is_byte_deterministic(tmp_path):
    params = {"w": np.arange(6.0).reshape(2, 3), "b": np.ones(2)}
    save_params(tmp_path / "a.bin", params, {"k": 1})
    save_params(tmp_path / "b.bin", dict(reversed(list(params.items()))), {"k": 1})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_load_rejects_foreign_and_truncated_files(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(ConfigurationError):
        load_params(tmp_path / "x.bin")
    save_params(tmp_path / "y.bin", {"w": np.ones(3)})
    (tmp_path / "z.bin").write_bytes((tmp_path / "y.bin").read_bytes() + b"\0")
    with pytest.raises(ConfigurationError):
        load_params(tmp_path / "z.bin")
