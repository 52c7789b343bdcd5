import numpy as np
import pytest

from pclast import nn


def leaky(x, s=0.01):
    return np.where(x > 0, x, s * x)


def test_identity_linear_layer_passes_input_through():
    spec = nn.MlpSpec((3, 3), ("identity",))
    net = nn.Mlp(spec, seed=0)
    net.params[0][...] = np.eye(3)
    net.params[1][...] = 0.0
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(net.forward(x), x)


def test_leaky_relu_definition():
    out, _ = nn.act_forward("leaky_relu", np.array([-1.0]), 0.01)
    assert out[0] == pytest.approx(-0.01)
    out, _ = nn.act_forward("leaky_relu", np.array([2.5]), 0.01)
    assert out[0] == 2.5


def test_two_layer_net_matches_hand_rolled_arithmetic():
    spec = nn.MlpSpec((3, 4, 2), ("leaky_relu", "identity"))
    net = nn.Mlp(spec, seed=42)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 3))
    got = net.forward(x)
    W0, b0, W1, b1 = net.params
    want = leaky(x @ W0 + b0) @ W1 + b1
    assert np.max(np.abs(got - want)) <= 1e-12


def test_forward_shape_mismatch():
    net = nn.Mlp(nn.MlpSpec((3, 2), ("identity",)), seed=0)
    with pytest.raises(nn.ShapeMismatch):
        net.forward(np.zeros((4, 5)))


def test_backward_simple_square():
    # f(x) = x^2 via a 1-1 linear net with weight w: f(w) = (w*1)^2 at input 1
    net = nn.Mlp(nn.MlpSpec((1, 1), ("identity",)), seed=0)
    net.params[0][...] = 3.0
    net.params[1][...] = 0.0
    tape = nn.Tape()
    y = net.forward(np.array([[1.0]]), tape)
    grads, _ = net.backward(tape, 2.0 * y)  # d(y^2)/dw = 2*y*x
    assert grads[0][0, 0] == pytest.approx(6.0)


def test_backward_zero_grad_gives_zero_param_grads():
    net = nn.Mlp(nn.MlpSpec((4, 8, 2), ("gelu", "identity")), seed=1)
    tape = nn.Tape()
    net.forward(np.ones((3, 4)), tape)
    grads, _ = net.backward(tape, np.zeros((3, 2)))
    assert all(np.all(g == 0) for g in grads)


def test_stale_tape_raises():
    net = nn.Mlp(nn.MlpSpec((2, 2), ("identity",)), seed=0)
    tape = nn.Tape()
    net.forward(np.zeros((1, 2)), tape)
    net.backward(tape, np.zeros((1, 2)))
    with pytest.raises(nn.StaleTape):
        net.backward(tape, np.zeros((1, 2)))


@pytest.mark.parametrize("acts,heads", [
    (("leaky_relu", "leaky_relu", "identity"), ()),
    (("gelu", "gelu", "identity"), ()),
    (("gelu", "identity"), (3, 5)),
])
def test_backward_matches_finite_differences(acts, heads):
    sizes = (4, 6, 5, 3)[: len(acts) + 1]
    spec = nn.MlpSpec(sizes, acts, heads=heads)
    net = nn.Mlp(spec, seed=3)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 4))
    targets = [rng.normal(size=(7, h)) for h in heads] if heads else rng.normal(size=(7, sizes[-1]))

    def loss():
        out = net.forward(x)
        if heads:
            return sum(float(np.sum((o - t) ** 2)) for o, t in zip(out, targets))
        return float(np.sum((out - targets) ** 2))

    tape = nn.Tape()
    out = net.forward(x, tape)
    if heads:
        gout = [2.0 * (o - t) for o, t in zip(out, targets)]
    else:
        gout = 2.0 * (out - targets)
    grads, _ = net.backward(tape, gout)
    worst = nn.fd_gradient_check(loss, net.params, grads, rng, samples_per_param=6)
    assert worst <= 1e-4


def test_index_input_equals_onehot_matmul():
    spec = nn.MlpSpec((10, 4, 2), ("leaky_relu", "identity"), input_mode="index")
    net = nn.Mlp(spec, seed=5)
    idx = np.array([3, 0, 9, 3])
    got = net.forward(idx)
    onehot = np.zeros((4, 10))
    onehot[np.arange(4), idx] = 1.0
    W0, b0, W1, b1 = net.params
    want = leaky(onehot @ W0 + b0) @ W1 + b1
    assert np.max(np.abs(got - want)) < 1e-12


def test_index_backward_accumulates_duplicate_rows():
    spec = nn.MlpSpec((6, 3), ("identity",), input_mode="index")
    net = nn.Mlp(spec, seed=2)
    idx = np.array([1, 1, 4])
    tape = nn.Tape()
    net.forward(idx, tape)
    g = np.ones((3, 3))
    grads, gin = net.backward(tape, g)
    assert gin is None
    assert np.allclose(grads[0][1], 2.0)
    assert np.allclose(grads[0][4], 1.0)
    assert np.allclose(grads[0][0], 0.0)
    assert np.allclose(grads[1], 3.0)


def test_scatter_add_rows_matches_add_at():
    rng = np.random.default_rng(0)
    target = np.zeros((20, 5))
    ref = np.zeros((20, 5))
    idx = rng.integers(0, 20, size=200)
    rows = rng.normal(size=(200, 5))
    nn.scatter_add_rows(target, idx, rows)
    np.add.at(ref, idx, rows)
    assert np.allclose(target, ref, atol=1e-12)


# -- Adam -------------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    p = np.array([1.0, -2.0, 3.0])
    opt = nn.Adam([p], lr=1e-3)
    g = np.array([0.5, -0.25, 10.0])
    before = p.copy()
    opt.step([g])
    assert opt.t == 1
    assert np.allclose(before - p, 1e-3 * np.sign(g), atol=1e-6)


def test_adam_zero_grad_keeps_params_increments_t():
    p = np.array([1.0, 2.0])
    opt = nn.Adam([p])
    opt.step([np.zeros(2)])
    assert opt.t == 1
    assert np.array_equal(p, [1.0, 2.0])


def reference_scalar_adam(grad_fn, x0, lr, steps):
    """Independent textbook Adam, used as the oracle."""
    x, m, v = x0, 0.0, 0.0
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x -= lr * mhat / (np.sqrt(vhat) + eps)
    return x


def test_adam_quadratic_matches_reference_and_converges():
    # minimize (x - 2)^2 from x = 0
    grad = lambda x: 2.0 * (x - 2.0)
    expected = reference_scalar_adam(grad, 0.0, lr=0.1, steps=200)
    p = np.array([0.0])
    opt = nn.Adam([p], lr=0.1)
    for _ in range(200):
        opt.step([grad(p.copy())])
    assert p[0] == pytest.approx(expected, abs=1e-12)
    assert abs(p[0] - 2.0) < 0.05


def test_adam_shape_mismatch():
    opt = nn.Adam([np.zeros(3)])
    with pytest.raises(nn.ShapeMismatch):
        opt.step([np.zeros(4)])


# -- checkpoint io ------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    arrays = [np.arange(6, dtype=np.float64).reshape(2, 3),
              np.array(3.5), np.zeros(4)]
    path = tmp_path / "w.pclw"
    nn.save_arrays(path, "model-v1", arrays)
    loaded = nn.load_arrays(path, "model-v1")
    assert len(loaded) == 3
    for a, b in zip(arrays, loaded):
        assert np.array_equal(a, b)
        assert a.shape == b.shape


def test_checkpoint_rejects_other_layout(tmp_path):
    path = tmp_path / "w.pclw"
    nn.save_arrays(path, "model-v1", [np.zeros(2)])
    with pytest.raises(ValueError, match="layout"):
        nn.load_arrays(path, "model-v2")


def test_mlpspec_validation():
    with pytest.raises(ValueError):
        nn.MlpSpec((3,), ())
    with pytest.raises(ValueError):
        nn.MlpSpec((3, 2), ("identity", "identity"))
    with pytest.raises(ValueError):
        nn.MlpSpec((3, 2), ("swish",))
