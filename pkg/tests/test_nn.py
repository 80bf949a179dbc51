import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from graphfetch import nn
from gradcheck_cases import input_grad_error, layer_cases, layer_loss

finite = st.floats(-5, 5, allow_nan=False)


@pytest.mark.parametrize("name", list(layer_cases(np.random.default_rng(0))))
def test_layer_parameter_gradients(name):
    rng = np.random.default_rng(7)
    module, x, tol = layer_cases(rng)[name]
    up = rng.normal(size=module.forward(x).shape)
    assert nn.grad_check(module, layer_loss(module, x, up), max_entries=25) < tol


@pytest.mark.parametrize("name", list(layer_cases(np.random.default_rng(0))))
def test_layer_input_gradients(name):
    rng = np.random.default_rng(8)
    module, x, tol = layer_cases(rng)[name]
    up = rng.normal(size=module.forward(x).shape)
    assert input_grad_error(module.forward, module.backward, x.copy(), up) < tol


def _loss_cases(rng):
    """name -> (loss_fn returning (value, grad), input)."""
    z = rng.normal(size=(4, 5))
    t = rng.integers(0, 5, 4)
    y = (rng.random((4, 5)) < 0.4).astype(float)
    q = nn.softmax(rng.normal(size=(4, 5)))
    return {
        "bce": (lambda v: nn.bce_loss(v, y), nn.sigmoid(z) * 0.98 + 0.01),
        "bce_logits": (lambda v: nn.bce_with_logits(v, y), z),
        "cce": (lambda v: nn.cce_loss(v, t), nn.softmax(z)),
        "softmax_cce": (lambda v: nn.softmax_cce(v, t), z),
        "soft_target": (lambda v: nn.soft_target_cce(v, q), z),
    }


@pytest.mark.parametrize("name", ["bce", "bce_logits", "cce", "softmax_cce", "soft_target"])
def test_loss_gradients(name):
    f, x = _loss_cases(np.random.default_rng(3))[name]
    g = f(x)[1]
    eps = 1e-6
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        num[i] = (f(xp)[0] - f(xm)[0]) / (2 * eps)
    assert np.allclose(num, g, rtol=1e-4, atol=1e-8)


def test_attention_dk_mismatch():
    q = np.ones((3, 4))
    with pytest.raises(ValueError):
        nn.attention(q, q, q, d_k=5)


def test_attention_uniform_when_keys_equal():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(3, 4))
    k = np.ones((5, 4))
    v = rng.normal(size=(5, 2))
    out = nn.attention(q, k, v)
    assert np.allclose(out, v.mean(axis=0))


@given(arrays(np.float64, (3, 6), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = nn.softmax(x)
    assert np.allclose(s.sum(axis=-1), 1.0) and np.all(s >= 0)


@given(arrays(np.float64, 8, elements=st.floats(-800, 800, allow_nan=False)))
def test_sigmoid_finite_and_bounded(x):
    s = nn.sigmoid(x)
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))


def test_softmax_shift_invariant():
    x = np.array([[1.0, 2.0, 3.0]])
    assert np.allclose(nn.softmax(x), nn.softmax(x + 1000))


def test_cce_bad_target():
    with pytest.raises(IndexError):
        nn.softmax_cce(np.zeros((2, 3)), np.array([0, 3]))


def test_mha_head_divisibility():
    with pytest.raises(ValueError):
        nn.MultiHeadAttention(10, 3, np.random.default_rng(0))


def test_adam_decreases_quadratic():
    rng = np.random.default_rng(0)
    lin = nn.Linear(3, 1, rng)
    x = rng.normal(size=(32, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]])
    opt = nn.Adam(lin, lr=0.05)
    losses = []
    for _ in range(200):
        lin.zero_grad()
        err = lin.forward(x) - y
        losses.append(float(np.mean(err**2)))
        lin.backward(2 * err / err.size)
        opt.step()
    assert losses[-1] < 1e-3 * losses[0]


def test_adam_rejects_nonfinite_gradient():
    lin = nn.Linear(2, 1, np.random.default_rng(0))
    opt = nn.Adam(lin)
    lin.grads["W"][0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        opt.step()


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    t = {"a": rng.normal(size=(2, 3)), "b": np.arange(4.0)}
    nn.save_tensors(tmp_path / "m.gfck", t, {"k": "v"})
    back, meta = nn.load_tensors(tmp_path / "m.gfck")
    assert meta == {"k": "v"}
    for k in t:
        assert np.array_equal(back[k], t[k])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.gfck"
    p.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(nn.CheckpointError):
        nn.load_tensors(p)


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "m.gfck"
    nn.save_tensors(p, {"a": np.ones(10)})
    p.write_bytes(p.read_bytes()[:-9])
    with pytest.raises(nn.CheckpointError):
        nn.load_tensors(p)


def test_load_state_dict_shape_mismatch():
    lin = nn.Linear(2, 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        lin.load_state_dict({"W": np.zeros((3, 2)), "b": np.zeros(3)})
