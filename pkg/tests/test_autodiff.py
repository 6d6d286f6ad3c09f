import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trans_ehr import autodiff as ad
from trans_ehr.autodiff import Tensor
from trans_ehr.errors import DimensionError, GradCheckError
from trans_ehr.gradcheck import finite_difference_check
from trans_ehr.params import ParamStore

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def grad_of(fn, *arrays):
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    g = ad.backward(fn(*ts))
    return [g.get(t, np.zeros_like(t.data)) for t in ts]


def numeric_grad(fn, *arrays, h=1e-5):
    out = []
    for i, a in enumerate(arrays):
        a = np.array(a, dtype=np.float64)
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            args = [np.array(x, dtype=np.float64) for x in arrays]
            args[i][idx] += h
            up = float(fn(*[Tensor(x) for x in args]).data)
            args[i][idx] -= 2 * h
            down = float(fn(*[Tensor(x) for x in args]).data)
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b, floor=1e-3):
    # the floor keeps central-difference rounding noise (~1e-10) on near-zero
    # gradients from dominating; O(1) gradients are still held to 1e-6
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def test_sum_gradient_is_ones():
    (g,) = grad_of(lambda x: x.sum(), np.array([1.0, -2.0, 5.0]))
    np.testing.assert_array_equal(g, np.ones(3))


def test_sum_of_softmax_has_zero_gradient():
    (g,) = grad_of(lambda x: ad.softmax(x.reshape(1, -1)).sum(), np.array([0.3, -1.0, 2.0, 0.5]))
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


UNARY = {
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "gelu": ad.gelu,
    "sin": ad.sin,
    "cos": ad.cos,
    "identity": ad.identity,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=20, deadline=None)
@given(x=arrays(np.float64, (2, 3), elements=finite))
def test_unary_primitives_match_finite_differences(name, x):
    w = np.linspace(-1, 1, 6).reshape(2, 3)
    fn = lambda t: (UNARY[name](t) * Tensor(w)).sum()
    assert rel_err(grad_of(fn, x)[0], numeric_grad(fn, x)[0]) < 1e-6


@settings(max_examples=20, deadline=None)
@given(x=arrays(np.float64, (2, 3), elements=st.floats(0.1, 3)))
def test_relu_gradient_away_from_kink(x):
    fn = lambda t: (ad.relu(t) * Tensor(np.arange(6.0).reshape(2, 3))).sum()
    assert rel_err(grad_of(fn, x)[0], numeric_grad(fn, x)[0]) < 1e-6
    fn_neg = lambda t: ad.relu(-t).sum()
    np.testing.assert_array_equal(grad_of(fn_neg, x)[0], 0.0)


@settings(max_examples=25, deadline=None)
@given(
    a=arrays(np.float64, (3, 4), elements=finite),
    b=arrays(np.float64, (4, 2), elements=finite),
    c=arrays(np.float64, (2,), elements=finite),
)
def test_binary_and_structural_primitives_match_finite_differences(a, b, c):
    def fn(x, y, z):
        h = ad.matmul(x, y) + z  # row broadcast
        h = ad.concat([h, x[:, :2] * 0.5], axis=1)
        h = ad.take(h, np.array([2, 0, 2]))
        s = ad.softmax(h, mask=np.array([[1, 1, 0, 1]] * 3, dtype=bool))
        return (s * ad.tanh(h)).mean() + (h.transpose() @ h).sum() * 0.01 - (z * 2.0).sum()

    for got, want in zip(grad_of(fn, a, b, c), numeric_grad(fn, a, b, c)):
        assert rel_err(got, want) < 1e-6


def test_random_five_parameter_expression_gradients():
    rng = np.random.default_rng(0)
    store = ParamStore()
    for i in range(5):
        store.add(f"p{i}", rng.normal(size=(2, 2)))

    def fn(p):
        h = ad.gelu(p["p0"] @ p["p1"] + p["p2"])
        return ad.bce_with_logits(h * p["p3"] - p["p4"], np.array([[1.0, 0.0], [0.0, 1.0]]))

    assert finite_difference_check(fn, store, tolerance=1e-6).passed


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float64, (4, 5), elements=st.floats(-30, 30)), mask_bits=st.integers(1, 2**5 - 1))
def test_softmax_rows_nonnegative_and_sum_to_one(x, mask_bits):
    mask = np.array([(mask_bits >> i) & 1 for i in range(5)], dtype=bool)
    s = ad.softmax(Tensor(x), mask=np.broadcast_to(mask, x.shape)).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)
    assert (s[:, ~mask] == 0).all()


def test_take_accumulates_repeated_rows():
    (g,) = grad_of(lambda x: ad.take(x, np.array([0, 0, 2])).sum(), np.ones((3, 2)))
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])


def test_bce_with_logits_stable_for_large_logits():
    v = ad.bce_with_logits(Tensor(np.array([800.0, -800.0])), np.array([1.0, 0.0]))
    assert np.isfinite(v.data) and v.data < 1e-12


def test_shape_mismatch_raises_dimension_error():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_backward_requires_scalar():
    with pytest.raises(DimensionError):
        ad.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_dropout_inactive_without_rng_and_scaled_with_rng():
    x = Tensor(np.ones((200, 50)))
    assert ad.dropout(x, 0.5, None) is x
    y = ad.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


def test_gradcheck_quadratic_passes_tight_tolerance():
    store = ParamStore()
    store.add("w", np.array([1.5, -2.0, 0.25]))
    report = finite_difference_check(lambda p: (p["w"] * p["w"]).sum() * 3.0, store, tolerance=1e-8)
    assert report.passed


def test_gradcheck_names_corrupted_parameter():
    store = ParamStore()
    store.add("good", np.array([1.0, 2.0]))
    store.add("bad", np.array([0.5, -1.0]))

    def fn(p):
        # the detached copy hides "bad" from backprop, so its analytic gradient is zero
        hidden = Tensor(p["bad"].data)
        return (p["good"] * p["good"]).sum() + (hidden * hidden).sum()

    report = finite_difference_check(fn, store, tolerance=1e-6)
    assert not report.passed
    assert report.failures == ["bad"]


def test_gradcheck_rejects_nondeterministic_function():
    store = ParamStore()
    store.add("w", np.ones(2))
    rng = np.random.default_rng(0)
    with pytest.raises(GradCheckError):
        finite_difference_check(lambda p: (p["w"] * float(rng.random())).sum(), store)
