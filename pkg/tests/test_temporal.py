import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trans_ehr.autodiff import Tensor
from trans_ehr.gradcheck import finite_difference_check
from trans_ehr.params import ParamStore
from trans_ehr.temporal import (
    FunctionalTimeEncoderParams,
    Time2VecParams,
    functional_time_encode,
    normalize_visit_times,
    time2vec,
    time_factor,
)


def t2v(omega, phi, d_linear):
    return Time2VecParams(Tensor(np.array(omega, float)), Tensor(np.array(phi, float)), d_linear)


def fte(omega, w=None, b=0.0):
    omega = np.array(omega, float)
    w = np.zeros((2 * omega.size, 1)) if w is None else np.asarray(w, float).reshape(-1, 1)
    return FunctionalTimeEncoderParams(Tensor(omega), Tensor(w), Tensor(np.array([b])))


def test_time2vec_zero_case():
    out = time2vec(0.0, t2v([0.7, -1.2, 2.0], [0.0, 0.0, 0.0], 1)).data
    np.testing.assert_array_equal(out, np.zeros((1, 3)))


def test_time2vec_closed_form():
    out = time2vec(math.pi / 2, t2v([1.0, 1.0], [0.0, 0.0], 1)).data
    np.testing.assert_allclose(out, [[math.pi / 2, 1.0]], atol=1e-15)


def test_time2vec_omega_gradient_matches_finite_differences():
    store = ParamStore()
    rng = np.random.default_rng(0)
    p = Time2VecParams.create(store, "t", 6, rng)
    t = np.array([0.0, 0.3, 0.9])
    w = rng.normal(size=(3, 6))
    report = finite_difference_check(lambda s: (time2vec(t, p) * Tensor(w)).sum(), store, tolerance=1e-6, names=["t.omega"])
    assert report.passed, report.max_rel_error


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0, 1), b=st.floats(0, 1), lam=st.floats(0, 1), seed=st.integers(0, 1000))
def test_time2vec_linear_block_is_affine_in_t(a, b, lam, seed):
    rng = np.random.default_rng(seed)
    p = t2v(rng.normal(size=4), rng.normal(size=4), 2)
    mix = lam * a + (1 - lam) * b
    lin = lambda t: time2vec(t, p).data[0, :2]
    np.testing.assert_allclose(lin(mix), lam * lin(a) + (1 - lam) * lin(b), atol=1e-12)


def test_functional_encoding_examples():
    np.testing.assert_allclose(functional_time_encode(0.0, fte([0.3, 5.0])).data, [np.sqrt(0.5) * np.array([1, 0, 1, 0])])
    np.testing.assert_allclose(
        functional_time_encode(math.pi, fte([1.0, 2.0])).data, [np.sqrt(0.5) * np.array([-1, 0, 1, 0])], atol=1e-15
    )


@settings(max_examples=1000, deadline=None)
@given(
    t=st.floats(-1e4, 1e4, allow_nan=False),
    omega=st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=12),
)
def test_functional_encoding_has_unit_norm(t, omega):
    enc = functional_time_encode(t, fte(omega)).data[0]
    assert abs(np.linalg.norm(enc) - 1.0) < 1e-9


def test_time_factor_examples():
    p = fte([0.4, 1.3], w=np.zeros(4), b=0.7)
    np.testing.assert_allclose(time_factor(np.arange(6.0), p).data, 0.7)
    s = time_factor(0.0, fte([0.4, 1.3], w=np.ones(4))).data
    np.testing.assert_allclose(s, [math.sqrt(0.5) * 2], rtol=1e-12)
    assert s[0] == pytest.approx(1.41421, abs=1e-5)
    flat = fte([0.0, 0.0], w=[0.3, -1.0, 2.0, 0.5], b=0.1)
    a = time_factor(np.array([1.0, 17.0]), flat).data
    assert a[0] == a[1]


def test_encoders_are_deterministic():
    store = ParamStore()
    rng = np.random.default_rng(3)
    p = FunctionalTimeEncoderParams.create(store, "f", 4, rng)
    q = Time2VecParams.create(store, "t", 4, rng)
    t = np.array([1.0, 2.0, 7.0])
    assert np.array_equal(time_factor(t, p).data, time_factor(t, p).data)
    assert np.array_equal(time2vec(t / 7, q).data, time2vec(t / 7, q).data)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_visit_times([10, 20, 30]), [0, 0.5, 1])
    np.testing.assert_array_equal(normalize_visit_times([4, 4, 4]), [0, 0, 0])
    with pytest.raises(ValueError):
        normalize_visit_times([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_normalized_times_within_unit_interval(times):
    out = normalize_visit_times(times)
    assert ((out >= 0) & (out <= 1)).all()
