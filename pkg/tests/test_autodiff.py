import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emgup.autodiff import (
    AdamState,
    DimensionError,
    RankError,
    Tensor,
    adam_step,
    concat,
    conv1d,
    cosine_similarity,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    no_grad,
    softmax,
    softmax_cross_entropy,
    stack,
)

from .helpers import check_gradients, numeric_grad


# -- matmul -----------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, Tensor(np.eye(2))).values, [[1, 2], [3, 4]])


def test_matmul_orthogonal():
    assert matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [1.0]])).values.tolist() == [[0.0]]


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).values, ref, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- conv1d -----------------------------------------------------------------


def _conv_oracle(x, w, stride):
    C, L = x.shape
    O, _, W = w.shape
    n = (L - W) // stride + 1
    out = np.zeros((O, n))
    for o in range(O):
        for t in range(n):
            for c in range(C):
                for k in range(W):
                    out[o, t] += w[o, c, k] * x[c, t * stride + k]
    return out


def test_conv1d_moving_sum():
    out = conv1d(Tensor([[1.0, 2, 3, 4]]), Tensor([[[1.0, 1.0]]]), 1)
    assert out.values.tolist() == [[3.0, 5.0, 7.0]]


def test_conv1d_delta_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 9))
    np.testing.assert_array_equal(conv1d(Tensor(x), Tensor([[[1.0]]]), 1).values, x)


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv1d_nested_loop_oracle(stride):
    rng = np.random.default_rng(stride)
    x, w = rng.normal(size=(3, 17)), rng.normal(size=(4, 3, 5))
    np.testing.assert_allclose(conv1d(Tensor(x), Tensor(w), stride).values, _conv_oracle(x, w, stride), atol=1e-12)


def test_conv1d_batched_matches_unbatched():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(4, 3, 20)), rng.normal(size=(2, 3, 4))
    batched = conv1d(Tensor(x), Tensor(w), 2).values
    for i in range(4):
        np.testing.assert_allclose(batched[i], _conv_oracle(x[i], w, 2), atol=1e-12)


def test_conv1d_kernel_wider_than_signal():
    with pytest.raises(DimensionError, match="empty"):
        conv1d(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 1, 4))), 1)


# -- softmax cross entropy --------------------------------------------------


def test_cross_entropy_uniform():
    assert softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_large_logits_stable():
    loss = softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0]).item()
    assert math.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-300)


def test_cross_entropy_extended_precision_oracle():
    import mpmath

    mpmath.mp.dps = 50
    rng = np.random.default_rng(7)
    logits = rng.normal(scale=3, size=(4, 3))
    targets = np.array([0, 2, 1, 2])
    ref = mpmath.mpf(0)
    for row, t in zip(logits, targets):
        z = sum(mpmath.exp(mpmath.mpf(float(v))) for v in row)
        ref += -mpmath.log(mpmath.exp(mpmath.mpf(float(row[t]))) / z)
    ref = float(ref / 4)
    assert softmax_cross_entropy(Tensor(logits), targets).item() == pytest.approx(ref, abs=1e-10)


def test_cross_entropy_bad_target():
    with pytest.raises(IndexError):
        softmax_cross_entropy(Tensor([[0.0, 1.0]]), [2])


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(scale=10, size=(20, 7))
    np.testing.assert_allclose(softmax(Tensor(x)).values.sum(-1), 1.0, atol=1e-12)


def test_masked_softmax_zero_on_mask():
    p = softmax(Tensor(np.zeros((3, 3))), mask=np.tril(np.ones((3, 3), dtype=bool))).values
    np.testing.assert_allclose(p, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]], atol=1e-15)
    assert np.all(np.isfinite(p))


# -- cosine similarity ------------------------------------------------------


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ([3.0, 4.0], [3.0, 4.0], 1.0),
        ([1.0, 0.0], [0.0, 1.0], 0.0),
        ([1.0, 1.0], [1.0, 0.0], 1 / math.sqrt(2)),
    ],
)
def test_cosine_examples(a, b, expected):
    assert cosine_similarity(Tensor(a), Tensor(b)).item() == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_vector_is_zero_with_zero_grad():
    a = Tensor([0.0, 0.0], requires_grad=True)
    b = Tensor([1.0, 2.0], requires_grad=True)
    s = cosine_similarity(a, b)
    assert s.item() == 0.0
    s.backward()
    assert np.all(a.grad == 0) and np.all(b.grad == 0)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_cosine_bounded(a, b):
    s = cosine_similarity(Tensor(a), Tensor(b)).item()
    assert -1 - 1e-12 <= s <= 1 + 1e-12


def test_l2_normalize_matches_cosine():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    via_norm = (l2_normalize(Tensor(a)).values * l2_normalize(Tensor(b)).values).sum(-1)
    np.testing.assert_allclose(via_norm, cosine_similarity(Tensor(a), Tensor(b)).values, atol=1e-14)


# -- backward ---------------------------------------------------------------


def test_backward_sum_gives_ones():
    t = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    t.sum().backward()
    np.testing.assert_array_equal(t.grad, [1, 1, 1])


def test_backward_squared_norm():
    t = Tensor([1.0, 2.0], requires_grad=True)
    (t * t).sum().backward()
    np.testing.assert_array_equal(t.grad, [2.0, 4.0])


def test_backward_accumulates():
    t = Tensor([1.0, 2.0], requires_grad=True)
    (t * t).sum().backward()
    (t * t).sum().backward()
    np.testing.assert_array_equal(t.grad, [4.0, 8.0])


def test_backward_non_scalar():
    with pytest.raises(RankError):
        Tensor([1.0, 2.0], requires_grad=True).relu().backward()


def test_no_grad_records_nothing():
    t = Tensor([1.0], requires_grad=True)
    with no_grad():
        out = t * 2.0
    assert not out.requires_grad and out._backward is None


def _rand(rng, *shape):
    return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)


# every differentiable primitive, composed into a scalar so backward applies
GRADIENT_CASES = {
    "add": lambda r: ([_rand(r, 3, 4), _rand(r, 4)], lambda a, b: ((a + b) * (a + b)).sum()),
    "mul": lambda r: ([_rand(r, 3, 4), _rand(r, 3, 1)], lambda a, b: (a * b).sum()),
    "pow": lambda r: ([Tensor(r.uniform(0.5, 2, size=5), requires_grad=True)], lambda a: a.pow(-0.5).sum()),
    "div": lambda r: ([_rand(r, 4), Tensor(r.uniform(0.5, 2, size=4), requires_grad=True)], lambda a, b: (a / b).sum()),
    "matmul": lambda r: ([_rand(r, 2, 3, 4), _rand(r, 4, 5)], lambda a, b: (matmul(a, b) ** 2).sum()),
    "conv1d": lambda r: ([_rand(r, 2, 3, 12), _rand(r, 4, 3, 3)], lambda x, w: (conv1d(x, w, 2) ** 2).sum()),
    "relu": lambda r: ([_rand(r, 10)], lambda a: (a.relu() * a).sum()),
    "exp_log": lambda r: ([_rand(r, 6)], lambda a: (a.exp() + 1.0).log().sum()),
    "softmax": lambda r: ([_rand(r, 3, 5), _rand(r, 3, 5)], lambda a, b: (softmax(a) * b).sum()),
    "masked_softmax": lambda r: (
        [_rand(r, 4, 4), _rand(r, 4, 4)],
        lambda a, b: (softmax(a, mask=np.tril(np.ones((4, 4), dtype=bool))) * b).sum(),
    ),
    "log_softmax": lambda r: ([_rand(r, 3, 5), _rand(r, 3, 5)], lambda a, b: (log_softmax(a) * b).sum()),
    "cross_entropy": lambda r: ([_rand(r, 4, 3)], lambda a: softmax_cross_entropy(a, [0, 2, 1, 1])),
    "cosine": lambda r: ([_rand(r, 3, 1, 4), _rand(r, 1, 5, 4)], lambda a, b: (cosine_similarity(a, b) * 1.7).sum()),
    "l2_normalize": lambda r: ([_rand(r, 3, 4), _rand(r, 3, 4)], lambda a, b: (l2_normalize(a) * b).sum()),
    "layer_norm": lambda r: (
        [_rand(r, 3, 6), _rand(r, 6), _rand(r, 6), _rand(r, 3, 6)],
        lambda x, g, b, w: (layer_norm(x, g, b) * w).sum(),
    ),
    "getitem": lambda r: ([_rand(r, 5, 4)], lambda a: (a[1:4, ::2] ** 2).sum() + (a[[0, 0, 2]] ** 3).sum()),
    "shape": lambda r: ([_rand(r, 2, 3, 4)], lambda a: (a.transpose(2, 0, 1).reshape(4, 6).swapaxes(0, 1).flip(0) * Tensor(np.arange(24.0).reshape(6, 4))).sum()),
    "mean": lambda r: ([_rand(r, 3, 4)], lambda a: (a.mean(axis=1) ** 2).sum() + a.mean()),
    "concat_stack": lambda r: ([_rand(r, 2, 3), _rand(r, 1, 3)], lambda a, b: (stack([concat([a, b]), concat([b, a])], axis=1) ** 2).sum()),
}


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_finite_difference_agreement(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs, fn = GRADIENT_CASES[name](rng)
    check_gradients(lambda: fn(*inputs), inputs)


def test_linearity_of_backward():
    rng = np.random.default_rng(5)
    x = _rand(rng, 4, 3)
    f = lambda: (x.relu() * x).sum()
    g = lambda: softmax_cross_entropy(x, [0, 1, 2, 0])
    grads = []
    for fn in (f, g):
        x.zero_grad()
        fn().backward()
        grads.append(x.grad.copy())
    x.zero_grad()
    (f() * 2.5 + g() * -0.75).backward()
    np.testing.assert_allclose(x.grad, 2.5 * grads[0] - 0.75 * grads[1], atol=1e-10)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x, w = _rand(rng, 2, 3, 10), _rand(rng, 2, 3, 3)
        out = (conv1d(x, w, 1).relu() ** 2).sum()
        out.backward()
        return out.values.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_numeric_grad_helper_on_known_function():
    t = Tensor([1.0, -3.0], requires_grad=True)
    np.testing.assert_allclose(numeric_grad(lambda: (t * t * t).sum(), t), [3.0, 27.0], rtol=1e-9)


# -- adam -------------------------------------------------------------------


def test_adam_first_step():
    p = {"w": Tensor([0.0], requires_grad=True)}
    st_ = AdamState(weight_decay=0.0)
    adam_step(p, {"w": np.array([1.0])}, st_, 1e-4)
    # bias-corrected m_hat = v_hat = 1
    assert p["w"].values[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
    assert st_.step_count == 1


def test_adam_zero_gradient_fixed_point():
    p = {"w": Tensor([0.3, -2.0], requires_grad=True)}
    st_ = AdamState(weight_decay=0.0)
    for _ in range(3):
        adam_step(p, {"w": np.zeros(2)}, st_, 1e-2)
    np.testing.assert_array_equal(p["w"].values, [0.3, -2.0])
    assert st_.step_count == 3


def _scalar_adam(theta, steps, lr, b1=0.5, b2=0.99, wd=3e-4, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta * (1 - lr * wd)
        theta = theta - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        out.append(theta)
    return out


def test_adam_three_steps_on_quadratic():
    p = {"w": Tensor([1.0], requires_grad=True)}
    st_ = AdamState()
    traj = []
    for _ in range(3):
        w = p["w"]
        w.zero_grad()
        (w * w).sum().backward()
        adam_step(p, {"w": w.grad}, st_, 0.1)
        traj.append(p["w"].values[0])
    ref = _scalar_adam(1.0, 3, 0.1)
    np.testing.assert_allclose(traj, [float(r) for r in ref], rtol=1e-12)
    f = [1.0] + [t * t for t in traj]
    assert all(b < a for a, b in zip(f, f[1:]))


def test_adam_decoupled_weight_decay():
    p = {"w": Tensor([2.0], requires_grad=True)}
    adam_step(p, {"w": np.zeros(1)}, AdamState(weight_decay=0.5), 0.1)
    assert p["w"].values[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": Tensor([1.0, 2.0])}, {"w": np.zeros(3)}, AdamState(), 0.1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_tensor_shape_invariant(a, b, c):
    t = Tensor(np.zeros((a, b, c)))
    assert t.values.size == a * b * c
    t2 = t.reshape(a * b, c)
    assert t2.values.size == t.values.size
