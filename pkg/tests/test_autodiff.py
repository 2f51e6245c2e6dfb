import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcemu import autodiff as ad
from dcemu.autodiff import Adam, ConcreteDropoutLayer, Parameter, Tensor, grad_check
from dcemu.errors import DimensionError, DomainError, TrainingError


def finite_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        g.reshape(-1)[k] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


# dense -----------------------------------------------------------------------

def test_dense_identity():
    out = ad.dense(Tensor([[1.0, 2.0]]), Parameter(np.eye(2)), Parameter(np.zeros(2), "bias"))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_dense_forced_arithmetic():
    out = ad.dense(Tensor([[1.0, 1.0]]), Parameter([[1.0], [1.0]]), Parameter([-2.0], "bias"))
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_dense_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(3, 4)))
    w = Parameter(rng.normal(size=(4, 2)))
    b = Parameter(rng.normal(size=2), "bias")
    ad.dense(x, w, b).sum().backward()
    num = finite_diff(lambda: ad.dense(x, w, b).data.sum(), w.data)
    assert rel_err(w.grad, num) < 1e-6


def test_dense_shape_mismatch_names_operand():
    with pytest.raises(DimensionError, match="input"):
        ad.dense(Tensor(np.ones((2, 3))), Parameter(np.ones((4, 2))), Parameter(np.ones(2), "bias"))
    with pytest.raises(DimensionError, match="bias"):
        ad.dense(Tensor(np.ones((2, 4))), Parameter(np.ones((4, 2))), Parameter(np.ones(3), "bias"))


def test_dense_runs_pixelwise_over_leading_axes():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 5, 3))
    w, b = rng.normal(size=(3, 4)), rng.normal(size=4)
    out = ad.dense(Tensor(x), Parameter(w), Parameter(b, "bias"))
    np.testing.assert_allclose(out.data, x @ w + b, rtol=1e-14)


# conv ------------------------------------------------------------------------

def brute_conv(x, k, b):
    bsz, h, w, _ = x.shape
    out = np.zeros((bsz, h, w, k.shape[3]))
    for n in range(bsz):
        for r in range(h):
            for c in range(w):
                for i in range(3):
                    for j in range(3):
                        rr, cc = r + i - 1, c + j - 1
                        if 0 <= rr < h and 0 <= cc < w:
                            out[n, r, c] += x[n, rr, cc] @ k[i, j]
                out[n, r, c] += b
    return out


def test_conv_delta_kernel_is_identity():
    x = np.ones((1, 3, 3, 1))
    k = np.zeros((3, 3, 1, 1))
    k[1, 1, 0, 0] = 1.0
    out = ad.conv2d_same(Tensor(x), Parameter(k), Parameter(np.zeros(1), "bias"))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_counts_neighbours():
    x = np.ones((1, 3, 3, 1))
    out = ad.conv2d_same(Tensor(x), Parameter(np.ones((3, 3, 1, 1))), Parameter(np.zeros(1), "bias"))
    grid = out.data[0, :, :, 0]
    np.testing.assert_array_equal(grid, brute_conv(x, np.ones((3, 3, 1, 1)), np.zeros(1))[0, :, :, 0])
    assert grid[1, 1] == 9
    assert grid[0, 0] == grid[0, 2] == grid[2, 0] == grid[2, 2] == 4
    assert grid[0, 1] == grid[1, 0] == grid[1, 2] == grid[2, 1] == 6


def test_conv_matches_brute_force_on_random_input():
    rng = np.random.default_rng(3)
    x, k, b = rng.normal(size=(2, 4, 5, 3)), rng.normal(size=(3, 3, 3, 2)), rng.normal(size=2)
    out = ad.conv2d_same(Tensor(x), Parameter(k), Parameter(b, "bias"))
    np.testing.assert_allclose(out.data, brute_conv(x, k, b), rtol=1e-12, atol=1e-12)


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    x = Parameter(rng.normal(size=(1, 5, 5, 2)))
    k = Parameter(rng.normal(size=(3, 3, 2, 3)))
    b = Parameter(rng.normal(size=3), "bias")
    weights = rng.normal(size=(1, 5, 5, 3))

    def f():
        return ad.tsum(ad.conv2d_same(x, k, b) * weights)

    f().backward()
    for p in (x, k, b):
        num = finite_diff(lambda: f().item(), p.data)
        assert rel_err(p.grad, num) < 1e-6


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError, match="channels"):
        ad.conv2d_same(Tensor(np.ones((1, 4, 4, 2))), Parameter(np.ones((3, 3, 3, 1))),
                       Parameter(np.ones(1), "bias"))


# elementwise -----------------------------------------------------------------

def test_sigmoid_of_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_relu_values_and_kink_subgradient():
    x = Parameter([-1.0, 0.0, 2.0])
    y = ad.relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_add_zero_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(ad.add_same(Tensor(x), Tensor(np.zeros((2, 3)))).data, x)


def test_add_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.add_same(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_elementwise_chain_gradients(n, m, seed):
    rng = np.random.default_rng(seed)
    a = Parameter(rng.normal(size=(n, m)))
    b = Parameter(rng.uniform(0.5, 2.0, size=(1, m)))

    def f():
        z = ad.sigmoid(a) * b + ad.softplus(a - b) / b + ad.exp(ad.clip(a, -3, 3)) * ad.log(b)
        return ad.tsum(z * z).item() if False else ad.tsum(z * z)

    f().backward()
    for p in (a, b):
        num = finite_diff(lambda: f().item(), p.data)
        assert rel_err(p.grad, num, floor=1e-6) < 1e-5


# concrete dropout -------------------------------------------------------------

def layer_with_rate(p, temperature=0.1, k=1):
    return ConcreteDropoutLayer.create(k, init_rate=p, temperature=temperature)


def test_gate_symmetric_point():
    z = ad.drop_gate(layer_with_rate(0.5), np.array(0.5))
    assert z.item() == pytest.approx(0.5, abs=1e-15)


def test_gate_hardens_as_temperature_vanishes():
    zs = [ad.drop_gate(layer_with_rate(0.5, t), np.array(0.9)).item() for t in (1.0, 0.1, 0.01, 1e-4)]
    assert zs == sorted(zs)
    assert zs[-1] == pytest.approx(1.0, abs=1e-12)


def test_gate_rejects_noise_outside_open_interval():
    layer = layer_with_rate(0.3)
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(DomainError):
            ad.concrete_gate(layer, Tensor(np.ones(3)), np.full(3, bad))


def test_mean_gate_logit_derivative_matches_finite_differences():
    rng = np.random.default_rng(5)
    u = rng.uniform(0.01, 0.99, size=200)
    layer = layer_with_rate(0.3, temperature=0.5)

    def f():
        return ad.tmean(ad.drop_gate(layer, u))

    f().backward()
    num = finite_diff(lambda: f().item(), layer.logit.data)
    assert abs(layer.logit.grad - num) < 1e-5


def test_gate_output_gradient_wrt_logit_and_activations():
    rng = np.random.default_rng(6)
    layer = layer_with_rate(0.2, temperature=0.3, k=4)
    x = Parameter(rng.normal(size=(3, 4)))
    u = rng.uniform(0.05, 0.95, size=(3, 4))
    w = rng.normal(size=(3, 4))
    report = grad_check(lambda: ad.tsum(ad.concrete_gate(layer, x, u) * w), [x, layer.logit])
    assert report.max_rel_error < 1e-6


def test_mean_gate_equals_rate_over_many_draws():
    rng = np.random.default_rng(7)
    p = 0.23
    z = ad.drop_gate(layer_with_rate(p), rng.uniform(1e-12, 1 - 1e-12, size=200_000)).data
    se = z.std() / math.sqrt(z.size)
    assert abs(z.mean() - p) < 3 * se


# regularizer -----------------------------------------------------------------

def test_regularizer_zero_scales():
    layer = layer_with_rate(0.3)
    w = Parameter(np.ones((1, 2)))
    assert ad.kl_regularizer([(layer, w)]).item() == 0.0


def test_regularizer_entropy_term_at_half():
    layer = layer_with_rate(0.5)
    s = 0.37
    layer.dropout_scale = s
    w = Parameter(np.zeros((1, 1)))
    expected = -s * -(0.5 * math.log(0.5) + 0.5 * math.log(0.5)) * 1
    assert ad.kl_regularizer([(layer, w)]).item() == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(-s * math.log(2), rel=1e-14)


def test_regularizer_weight_term_is_linear_in_norm():
    layer = layer_with_rate(0.3)
    layer.weight_scale = 0.1
    w = Parameter(np.array([[1.0, 2.0], [0.5, -1.0]]))
    one = ad.kl_regularizer([(layer, w)]).item()
    w2 = Parameter(w.data * math.sqrt(2.0))
    assert ad.kl_regularizer([(layer, w2)]).item() == pytest.approx(2 * one, rel=1e-14)
    assert one == pytest.approx(0.1 * np.sum(w.data ** 2) / 0.7, rel=1e-12)


def test_regularizer_prefers_higher_entropy():
    w = Parameter(np.zeros((3, 2)))
    vals = []
    for p in (0.5, 0.9):
        layer = layer_with_rate(p, k=3)
        layer.dropout_scale = 0.2
        vals.append(ad.kl_regularizer([(layer, w)]).item())
    assert vals[0] <= vals[1]


def test_regularizer_gradient():
    rng = np.random.default_rng(9)
    layer = layer_with_rate(0.27, k=3)
    layer.weight_scale, layer.dropout_scale = 0.05, 0.3
    w = Parameter(rng.normal(size=(3, 2)))
    report = grad_check(lambda: ad.kl_regularizer([(layer, w)]), [w, layer.logit])
    assert report.max_rel_error < 1e-6


def test_regularizer_scales_from_prior():
    layer = layer_with_rate(0.1)
    layer.set_scales(1e-14, 1e-5, 1000)
    assert layer.weight_scale == pytest.approx(1e-17)
    assert layer.dropout_scale == pytest.approx(2.0 / (1e-5 * 1000))


# adam ------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p])
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_learning_rate():
    p = Parameter(np.array([0.0, 0.0, 0.0]))
    g = np.array([3.0, -0.02, 1e-3])
    p.grad = g.copy()
    opt = Adam([p], lr=1e-4)
    opt.step()
    # closed form after one step: -lr * |g| / (|g| + eps) * sign(g)
    np.testing.assert_allclose(p.data, -1e-4 * g / (np.abs(g) + 1e-7), rtol=1e-12)
    np.testing.assert_allclose(p.data, -1e-4 * np.sign(g), rtol=1e-3)
    np.testing.assert_array_equal(p.grad, 0.0)


def reference_adam(x, grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-7):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
    return x


def test_adam_two_steps_match_scalar_reference():
    p = Parameter(np.array(0.7))
    opt = Adam([p])
    for _ in range(2):
        p.grad = np.array(0.25)
        opt.step()
    assert abs(p.item() - reference_adam(0.7, [0.25, 0.25])) < 1e-12


def test_adam_nan_gradient_reports_role():
    p = Parameter(np.array([1.0]), role="dropout-logit", name="hidden0.dropout")
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingError) as info:
        Adam([p]).step()
    assert info.value.role == "dropout-logit"


# grad_check ------------------------------------------------------------------

def test_grad_check_linear_function():
    rng = np.random.default_rng(11)
    w = Parameter(rng.normal(size=(4, 3)))
    c = rng.normal(size=(4, 3))
    assert grad_check(lambda: ad.tsum(w * c), [w]).max_rel_error < 1e-8


def test_grad_check_dense_relu_dense():
    rng = np.random.default_rng(12)
    x = Tensor(rng.normal(size=(5, 3)))
    w1, b1 = Parameter(rng.normal(size=(3, 6))), Parameter(rng.normal(size=6) + 0.3, "bias")
    w2, b2 = Parameter(rng.normal(size=(6, 2))), Parameter(rng.normal(size=2), "bias")

    def f():
        h = ad.relu(ad.dense(x, w1, b1))
        return ad.tsum(ad.dense(h, w2, b2) ** 2)

    pre = x.data @ w1.data + b1.data
    assert np.min(np.abs(pre)) > 1e-3  # keep clear of ReLU kinks
    assert grad_check(f, [w1, b1, w2, b2]).max_rel_error < 1e-5


def test_backward_accumulates_through_shared_nodes():
    x = Parameter(np.array([2.0]))
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_builds_no_graph():
    x = Parameter(np.array([1.0]))
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_training_step_is_bit_deterministic():
    def run():
        rng = np.random.default_rng(42)
        w = Parameter(rng.normal(size=(4, 3)))
        b = Parameter(np.zeros(3), "bias")
        x = Tensor(rng.normal(size=(8, 4)))
        opt = Adam([w, b], lr=1e-2)
        for _ in range(3):
            ad.tsum(ad.relu(ad.dense(x, w, b)) ** 2).backward()
            opt.step()
        return w.data.copy(), b.data.copy()

    (w1, b1), (w2, b2) = run(), run()
    assert w1.tobytes() == w2.tobytes() and b1.tobytes() == b2.tobytes()
