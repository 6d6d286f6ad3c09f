import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trans_ehr import autodiff as ad
from trans_ehr.autodiff import Tensor
from trans_ehr.gradcheck import finite_difference_check
from trans_ehr.layer import (
    LayerGraph,
    LayerParams,
    Neighborhood,
    aggregate,
    attention_score,
    layer_forward,
    update,
)
from trans_ehr.params import ParamStore


def neighborhood(lists):
    width = max(1, max((len(x) for x in lists), default=0))
    index = np.zeros((len(lists), width), dtype=np.intp)
    mask = np.zeros((len(lists), width), dtype=bool)
    time = np.full((len(lists), width), -1, dtype=np.intp)
    for i, row in enumerate(lists):
        for j, (node, t) in enumerate(row):
            index[i, j], mask[i, j], time[i, j] = node, True, t
    return Neighborhood(index, mask, time)


def chain_graph(n_visits, event_types, edges, shuffle_rng=None):
    """Visits first, then events (``event_types`` must be sorted); ``edges`` are (visit, event, t)."""
    nbrs = [[] for _ in range(n_visits)]
    for v, e, t in edges:
        nbrs[v].append((n_visits + e, t))
    for v in range(1, n_visits):
        nbrs[v].append((v - 1, -1))
    if shuffle_rng is not None:
        nbrs = [[row[i] for i in shuffle_rng.permutation(len(row))] for row in nbrs]
    blocks = [(3, 0, n_visits)]
    start = n_visits
    for tid in range(3):
        count = sum(1 for x in event_types if x == tid)
        blocks.append((tid, start, start + count))
        start += count
    return LayerGraph(n_visits, blocks, neighborhood(nbrs))


def make_params(d=4, h=2, seed=0, **kw):
    store = ParamStore()
    p = LayerParams.create(store, "l", d, h, np.random.default_rng(seed), **kw)
    return store, p


def test_attention_score_examples():
    assert attention_score([1, 0], [1, 0], np.eye(2), 0.5, 2) == pytest.approx(0.5 / math.sqrt(2))
    assert attention_score([1, 0], [1, 0], np.eye(2), 0.5, 2) == pytest.approx(0.35355, abs=1e-5)
    assert attention_score([3, -2], [1, 4], np.eye(2), 0.0, 2) == 0.0
    assert attention_score([3, -2], [1, 4], np.zeros((2, 2)), 0.9, 2) == 0.0


def test_aggregate_examples():
    v = np.array([[1.5, -2.0, 0.25]])
    np.testing.assert_array_equal(aggregate([0.7], v), v[0])
    two = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(aggregate([3.0, 3.0], two), [0.5, 0.5])
    np.testing.assert_array_equal(aggregate([], np.zeros((0, 3))), np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 5))
def test_aggregate_matches_brute_force_softmax(seed, n):
    rng = np.random.default_rng(seed)
    scores, values = rng.normal(size=n) * 3, rng.normal(size=(n, 4))
    w = np.array([math.exp(s) for s in scores])
    w /= w.sum()
    np.testing.assert_allclose(aggregate(scores, values), w @ values, rtol=1e-12, atol=1e-12)


def test_update_gate_limits():
    store, p = make_params(gamma=0.0)
    rng = np.random.default_rng(1)
    msg = Tensor(rng.normal(size=(3, 2, 2)))
    h = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(update(msg, h, p).data, h.data)

    _, p1 = make_params(gamma=1.0)
    a = update(msg, h, p1).data
    b = update(msg, Tensor(rng.normal(size=(3, 4))), p1).data
    np.testing.assert_array_equal(a, b)


def test_update_half_gate_with_identity_maps_is_mean():
    _, p = make_params(d=2, h=1, gamma=0.5, activation="identity")
    p.w_out.data = np.eye(2)[None]
    p.b_out.data = np.zeros((1, 1, 2))
    msg = Tensor(np.array([[[2.0, -4.0]]]))
    h = Tensor(np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(update(msg, h, p).data, [[1.5, -1.5]])


def test_single_visit_without_events_is_unchanged():
    _, p = make_params()
    g = chain_graph(1, [], [])
    hv = Tensor(np.array([[0.1, 0.2, 0.3, 0.4]]))
    out_v, out_e = layer_forward(g, hv, Tensor(np.zeros((0, 4))), p)
    np.testing.assert_array_equal(out_v.data, hv.data)


def random_patient(rng, n_visits=4, n_events=5):
    types = sorted(int(x) for x in rng.integers(0, 3, n_events))
    edges = set()
    for e in range(n_events):
        for v in rng.choice(n_visits, size=int(rng.integers(1, n_visits + 1)), replace=False):
            edges.add((int(v), e, int(v) + 1))
    return types, sorted(edges)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_neighbor_order_and_event_relabeling_invariance(seed):
    rng = np.random.default_rng(seed)
    _, p = make_params(d=4, h=2, seed=seed)
    types, edges = random_patient(rng)
    alpha = Tensor(rng.uniform(0.5, 1.5, 6))
    hv, he = Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(5, 4)))
    base, _ = layer_forward(chain_graph(4, types, edges), hv, he, p, alpha)
    shuffled, _ = layer_forward(chain_graph(4, types, edges, shuffle_rng=rng), hv, he, p, alpha)
    np.testing.assert_allclose(shuffled.data, base.data, rtol=1e-12, atol=1e-14)

    # relabel events within each type block
    perm = np.arange(5)
    for tid in range(3):
        idx = np.flatnonzero(np.array(types) == tid)
        perm[idx] = rng.permutation(idx)
    inv = np.argsort(perm)
    relabeled = [(v, int(inv[e]), t) for v, e, t in edges]
    out, _ = layer_forward(chain_graph(4, types, relabeled), hv, Tensor(he.data[perm]), p, alpha)
    np.testing.assert_allclose(out.data, base.data, rtol=1e-12, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_attention_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    _, p = make_params(d=6, h=3, seed=seed)
    types, edges = random_patient(rng)
    g = chain_graph(4, types, edges)
    _, _, w = layer_forward(g, Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(5, 6))), p, Tensor(rng.uniform(0, 2, 6)), return_weights=True)
    sums = w.data.sum(axis=-1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)


def plain_attention_reference(g, hv, he, p):
    """Ordinary multi-head attention of each visit over its neighbours, then the gated update."""
    x = np.concatenate([hv, he])
    q, k, v = hv @ p.wq.data, x @ p.wk.data, x @ p.wv.data
    h, dh = p.n_heads, p.d_head
    out = np.zeros((hv.shape[0], h, dh))
    for i in range(hv.shape[0]):
        nb = g.visit_nbr.index[i][g.visit_nbr.mask[i]]
        for head in range(h):
            sl = slice(head * dh, (head + 1) * dh)
            s = np.array([q[i, sl] @ k[j, sl] for j in nb]) / math.sqrt(dh)
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, head] = w @ v[nb, sl]
    return update(Tensor(out), Tensor(hv), p).data


def test_reduces_to_homogeneous_attention():
    rng = np.random.default_rng(7)
    _, p = make_params(d=4, h=2, seed=3)
    types, edges = random_patient(rng)
    g = chain_graph(4, types, edges)
    hv, he = rng.normal(size=(4, 4)), rng.normal(size=(5, 4))
    # all type maps equal (identity from init) and all time factors equal to one
    got, _ = layer_forward(g, Tensor(hv), Tensor(he), p, Tensor(np.ones(6)))
    np.testing.assert_allclose(got.data, plain_attention_reference(g, hv, he, p), rtol=1e-12, atol=1e-12)
    # a different but shared type map is still homogeneous once folded into wk
    m = rng.normal(size=(2, 2, 2))
    p.w_type.data = np.broadcast_to(m, p.w_type.data.shape).copy()
    wk = p.wk.data.copy()
    folded = wk.copy()
    for head in range(2):
        folded[:, head * 2 : head * 2 + 2] = wk[:, head * 2 : head * 2 + 2] @ m[head].T
    got2, _ = layer_forward(g, Tensor(hv), Tensor(he), p, Tensor(np.ones(6)))
    p.w_type.data = np.broadcast_to(np.eye(2), p.w_type.data.shape).copy()
    p.wk.data = folded
    np.testing.assert_allclose(got2.data, plain_attention_reference(g, hv, he, p), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("learn_gamma", [False, True])
def test_layer_gradients_match_finite_differences(learn_gamma):
    rng = np.random.default_rng(11)
    store, p = make_params(d=4, h=2, seed=5, learn_gamma=learn_gamma)
    types, edges = random_patient(rng)
    g = chain_graph(4, types, edges)
    store.add("hv", rng.normal(size=(4, 4)))
    store.add("he", rng.normal(size=(5, 4)))
    store.add("alpha", rng.uniform(0.5, 1.5, 6))
    w = rng.normal(size=(4, 4))

    def fn(s):
        out, _ = layer_forward(g, s["hv"], s["he"], p, s["alpha"])
        return (ad.tanh(out) * Tensor(w)).sum()

    report = finite_difference_check(fn, store, tolerance=1e-4)
    assert report.passed, report.max_rel_error


def test_visit_outputs_ignore_future_visits():
    rng = np.random.default_rng(2)
    _, p = make_params(d=4, h=2)
    types, edges = random_patient(rng, n_visits=5, n_events=6)
    g = chain_graph(5, types, edges)
    hv, he = rng.normal(size=(5, 4)), rng.normal(size=(6, 4))
    base, _ = layer_forward(g, Tensor(hv), Tensor(he), p)
    hv2 = hv.copy()
    hv2[3:] += 10.0
    out, _ = layer_forward(g, Tensor(hv2), Tensor(he), p)
    np.testing.assert_array_equal(out.data[:3], base.data[:3])


@pytest.mark.parametrize("n_layers", [1, 2, 3])
def test_receptive_field_of_stacked_layers(n_layers):
    rng = np.random.default_rng(n_layers)
    T = 6
    store = ParamStore()
    layers = [LayerParams.create(store, f"l{i}", 4, 2, rng) for i in range(n_layers)]
    # one private event per visit plus one event shared by the last two visits
    types = [0] * (T + 1)
    edges = [(v, v, v + 1) for v in range(T)] + [(T - 2, T, T - 1), (T - 1, T, T)]
    g = chain_graph(T, types, edges)
    hv, he = rng.normal(size=(T, 4)), rng.normal(size=(T + 1, 4))

    def run(hv, he):
        v, e = Tensor(hv), Tensor(he)
        for lp in layers:
            v, e = layer_forward(g, v, e, lp)
        return v.data[T - 1]

    base = run(hv, he)
    far = T - 1 - n_layers  # visits and events strictly before this are out of reach
    hv2, he2 = hv.copy(), he.copy()
    hv2[:far] = 0.0
    he2[:far] = 0.0
    np.testing.assert_array_equal(run(hv2, he2), base)
    hv3 = hv.copy()
    hv3[far] += 1.0
    assert not np.array_equal(run(hv3, he), base)
