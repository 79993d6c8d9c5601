import numpy as np
import pytest
from hypothesis import given, strategies as st

from oad.errors import CheckpointError, NumericError
from oad.nncore import (SGD, Adam, Checkpoint, Conv2d, EncoderConfig, GlobalAvgPool, Linear,
                        MaxPool2d, ReLU, Sequential, build_encoder, build_head, l2_normalize,
                        l2_normalize_backward, load_checkpoint, restore_rng, rng_state,
                        save_checkpoint)
from oracles import numeric_grad, rel_err


def separated(shape, rng, spacing=0.01):
    """Distinct values at least ``spacing`` apart and away from zero, so no
    finite-difference step crosses a ReLU kink or a max-pool tie."""
    n = int(np.prod(shape))
    return ((rng.permutation(n) - n / 2 + 0.37) * spacing).reshape(shape)


def layer_grad_check(make_layer, x_shape, dtype, seed, eps, sample=None):
    """Relative errors of input and parameter gradients against central differences."""
    rng = np.random.default_rng(seed)
    layer = make_layer(rng)
    net = Sequential([("l", layer)], dtype)
    x = (sample or (lambda s, r: r.standard_normal(s)))(x_shape, rng).astype(dtype)
    r = rng.standard_normal(net.forward(x).shape)

    def loss():
        return float(np.sum(net.forward(x).astype(np.float64) * r))

    loss()
    dx = net.backward(r)
    errs = [rel_err(dx, numeric_grad(loss, x, eps))]
    for k, p in layer.params.items():
        loss()
        net.backward(r)
        analytic = layer.grads[k].copy()
        errs.append(rel_err(analytic, numeric_grad(loss, p, eps)))
    return max(errs)


LAYERS = {
    "conv": (lambda rng: Conv2d(2, 3, rng, np.float64), (2, 2, 5, 4)),
    "relu": (lambda rng: ReLU(), (3, 7)),
    "pool": (lambda rng: MaxPool2d(), (2, 2, 5, 6)),
    "gap": (lambda rng: GlobalAvgPool(), (2, 3, 4, 5)),
    "linear": (lambda rng: Linear(6, 4, rng, np.float64), (5, 6)),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_gradients_float64(name):
    make, shape = LAYERS[name]
    assert layer_grad_check(make, shape, np.float64, 1, 1e-6) < 1e-6


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_gradients_float32(name):
    make, shape = LAYERS[name]

    def make32(rng):
        layer = make(rng)
        for k in layer.params:
            layer.params[k] = layer.params[k].astype(np.float32)
        return layer
    assert layer_grad_check(make32, shape, np.float32, 2, 1e-3) < 1e-3


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(0)
    conv = Conv2d(2, 3, rng, np.float64)
    conv.params["b"] = rng.standard_normal(3)
    x = rng.standard_normal((1, 2, 4, 5))
    out = conv.forward(x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    w = conv.params["w"]
    for o in range(3):
        for i in range(4):
            for j in range(5):
                ref = (xp[0, :, i : i + 3, j : j + 3] * w[o]).sum() + conv.params["b"][o]
                assert out[0, o, i, j] == pytest.approx(ref, abs=1e-12)


def test_zero_input_zero_params_give_zero_h():
    enc = build_encoder(EncoderConfig(), np.random.default_rng(0))
    enc.set_parameters({k: np.zeros_like(v) for k, v in enc.parameters().items()})
    assert not enc.forward(np.zeros((2, 1, 64, 44))).any()
    assert not enc.forward(np.random.default_rng(1).standard_normal((2, 1, 64, 44))).any()


def test_identical_samples_identical_rows_and_batch_independence():
    enc = build_encoder(EncoderConfig(), np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((3, 1, 64, 44))
    h = enc.forward(np.concatenate([x[:1], x[:1], x]))
    np.testing.assert_array_equal(h[0], h[1])
    np.testing.assert_array_equal(enc.forward(x[1:2])[0], h[3])


def test_positive_homogeneity_without_bias():
    rng = np.random.default_rng(3)
    net = Sequential([("c", Conv2d(1, 4, rng, np.float64)), ("r", ReLU()),
                      ("c2", Conv2d(4, 2, rng, np.float64)), ("r2", ReLU())], np.float64)
    x = rng.standard_normal((2, 1, 6, 6))
    np.testing.assert_allclose(net.forward(2 * x), 2 * net.forward(x), rtol=1e-12)


def test_maxpool_ties_route_to_first():
    pool = MaxPool2d()
    x = np.ones((1, 1, 2, 2))
    pool.forward(x)
    dx = pool.backward(np.array([[[[5.0]]]]))
    np.testing.assert_array_equal(dx[0, 0], [[5.0, 0.0], [0.0, 0.0]])


@given(st.integers(0, 2**31 - 1))
def test_maxpool_routes_each_gradient_once(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 3, (2, 2, 6, 4)).astype(float)
    pool = MaxPool2d()
    out = pool.forward(x)
    dx = pool.backward(np.ones_like(out))
    assert dx.sum() == out.size
    assert set(np.unique(dx)) <= {0.0, 1.0}


def test_gap_mean_and_uniform_gradient():
    g = GlobalAvgPool()
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(g.forward(x), x.mean(axis=(2, 3)))
    np.testing.assert_allclose(g.backward(np.ones((2, 3))), 1 / 20)


def test_zero_output_gradient_gives_zero_param_gradients():
    head = build_head(8, 4, dtype=np.float64)
    head.forward(np.random.default_rng(0).standard_normal((3, 8)))
    head.backward(np.zeros((3, 4)))
    assert all(not g.any() for g in head.gradients().values())


def test_linear_bias_gradient_is_batch_size():
    lin = Linear(3, 2, dtype=np.float64)
    net = Sequential([("fc", lin)], np.float64)
    net.forward(np.random.default_rng(0).standard_normal((7, 3)))
    net.backward(np.ones((7, 2)))
    np.testing.assert_array_equal(lin.grads["b"], [7.0, 7.0])


def test_non_finite_forward_raises():
    net = Sequential([("fc", Linear(2, 2, dtype=np.float64))], np.float64)
    with pytest.raises(NumericError):
        net.forward(np.array([[np.inf, 0.0]]))


def test_backward_without_forward():
    with pytest.raises(RuntimeError):
        Linear(2, 2).backward(np.ones((1, 2)))


def test_l2_normalize_backward_finite_difference():
    rng = np.random.default_rng(0)
    u = rng.standard_normal((4, 5))
    r = rng.standard_normal((4, 5))
    g = l2_normalize_backward(u, r)
    assert rel_err(g, numeric_grad(lambda: float(np.sum(l2_normalize(u) * r)), u, 1e-6)) < 1e-8
    with pytest.raises(NumericError):
        l2_normalize(np.zeros((1, 3)))


# -- optimizers ----------------------------------------------------------------

def test_sgd_one_step():
    p = {"w": np.zeros(1)}
    assert SGD(lr=0.1).step(p, {"w": np.ones(1)})["w"][0] == pytest.approx(-0.1)
    assert SGD(lr=0.1).step(p, {"w": np.zeros(1)})["w"][0] == 0.0


def test_adam_matches_scalar_oracle():
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    opt = Adam(lr, b1, b2, eps)
    p = {"w": np.array([0.5])}
    m = v = 0.0
    ref = 0.5
    for t, g in enumerate([0.3, -1.2, 0.7, 0.7], start=1):
        p = opt.step(p, {"w": np.array([g])})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert p["w"][0] == pytest.approx(ref, abs=1e-15)
    # first step with constant gradient moves by lr * sign(g)
    first = Adam(lr).step({"w": np.zeros(1)}, {"w": np.array([3.0])})["w"][0]
    assert first == pytest.approx(-lr, rel=1e-6)


def test_adam_state_roundtrip():
    opt = Adam(0.01)
    p = {"a": np.ones(3)}
    for _ in range(3):
        p = opt.step(p, {"a": np.array([1.0, -2.0, 0.5])})
    other = Adam(0.01)
    other.load_state(opt.state())
    g = {"a": np.array([0.2, 0.2, 0.2])}
    np.testing.assert_array_equal(opt.step(p, g)["a"], other.step(p, g)["a"])


# -- checkpoints --------------------------------------------------------------------

def make_ckpt():
    enc = build_encoder(EncoderConfig(blocks=[4, 8]), np.random.default_rng(1))
    opt = Adam()
    opt.step(enc.parameters(), {k: np.ones_like(v) for k, v in enc.parameters().items()})
    return enc, Checkpoint({"kind": "test", "n": 3}, enc.parameters(), opt.state(),
                           rng_state(np.random.default_rng(5)))


def test_checkpoint_roundtrip_and_forward(tmp_path):
    enc, ck = make_ckpt()
    save_checkpoint(tmp_path / "m.clpd", ck)
    back = load_checkpoint(tmp_path / "m.clpd")
    assert back.config == ck.config
    assert back.to_bytes() == ck.to_bytes()
    other = build_encoder(EncoderConfig(blocks=[4, 8]), np.random.default_rng(99))
    other.set_parameters(back.params)
    x = np.random.default_rng(2).standard_normal((2, 1, 16, 12))
    np.testing.assert_array_equal(other.forward(x), enc.forward(x))
    assert back.optimizer["adam.t"][0] == 1


def test_checkpoint_header_layout():
    _, ck = make_ckpt()
    raw = ck.to_bytes()
    assert raw[:4] == b"CLPD"
    assert int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_corruption_errors():
    _, ck = make_ckpt()
    raw = ck.to_bytes()
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(raw + b"\0")


def test_rng_state_roundtrip():
    rng = np.random.default_rng(123)
    rng.standard_normal(7)
    clone = restore_rng(rng_state(rng))
    np.testing.assert_array_equal(clone.standard_normal(5), rng.standard_normal(5))
