import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsegan import tensor as T
from dsegan.dse import (
    DseParams,
    GranularitySchedule,
    TextFeatures,
    aggregate_features,
    build_masks,
    dse_forward,
    recompose_masked,
    recompose_naive,
    route_elements,
)
from dsegan.gradcheck import check_gradients
from dsegan.tensor import ShapeError, Tensor


def make(seed=0, L_t=5, D_t=8, H=(1, 2, 4), K_agg=4, D_img=6, L_img=7, **kw):
    rng = np.random.default_rng(seed)
    p = DseParams.init(rng, D_img, D_t, H, K_agg, L_t, **kw)
    text = TextFeatures(Tensor(rng.uniform(-1, 1, (L_t, D_t))), Tensor(rng.uniform(-1, 1, D_t)))
    img = Tensor(rng.uniform(-1, 1, (L_img, D_img)))
    return p, text, img


def np_softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def w(p, name):
    return getattr(p, name).data.astype(np.float64)


# ---------------------------------------------------------------- numpy oracles


def oracle_aggregate(img, p):
    A = img @ w(p, "W_a")  # [L_img, K]
    I1 = img @ w(p, "W_c")  # [L_img, D_t]
    weights = np_softmax(A, axis=0)
    out = np.zeros((A.shape[1], I1.shape[1]))
    for k in range(A.shape[1]):
        for l in range(A.shape[0]):
            out[k] += weights[l, k] * I1[l]
    return out


def oracle_route(words, agg, p):
    corr = words @ agg.T
    weights = np_softmax(corr.mean(axis=0))
    context = weights @ agg
    alpha = float(p.alpha.data[0])
    gate = np.array([max(0.0, alpha * np.tanh(w(p, "W_e")[0] @ np.concatenate([row, context]))) for row in words])
    return words * gate[:, None], gate


def oracle_recompose(gated, prev, agg, p):
    """Loop granularities; split each word into h subspaces, scale, and undo the split."""
    s = p.schedule
    D_t = s.D_t
    Wq, Wk, Wv, Wr = (w(p, n) for n in ("W_q", "W_k", "W_v", "W_r"))
    qo, ho = 0, 0
    deltas, scores = [], []
    for j, h in enumerate(s.H):
        d = D_t // h
        Q = gated @ Wq[:, qo : qo + d]
        K = agg @ Wk[:, qo : qo + d]
        V = agg @ Wv[:, ho : ho + h]
        A = np_softmax(Q @ K.T, axis=1)
        O = np.tanh(A @ V)  # [L_t, h]
        delta = np.zeros_like(gated)
        for l in range(gated.shape[0]):
            pieces = [gated[l, m * d : (m + 1) * d] * O[l, m] for m in range(h)]
            delta[l] = np.concatenate(pieces)
        deltas.append(delta)
        R = A @ (agg @ Wr[:, j : j + 1])
        scores.append(R.mean())
        qo += d
        ho += h
    probs = np_softmax(np.array(scores))
    return prev + sum(pj * dj for pj, dj in zip(probs, deltas)), probs


# ---------------------------------------------------------------- schedule & masks


def test_schedule_rejects_non_divisors_and_duplicates():
    with pytest.raises(ValueError):
        GranularitySchedule((3,), 8)
    with pytest.raises(ValueError):
        GranularitySchedule((2, 2), 8)


def test_masks_small_schedule_blocks():
    s = GranularitySchedule((1, 2), 4)
    assert s.D_sum == 6 and s.h_sum == 3
    m = build_masks(s, L_t=2, K_agg=3)
    assert m.M_Q.shape == (2, 2, 6) and m.M_V.shape == (2, 3, 3)
    np.testing.assert_array_equal(m.M_Q.data[0, 0], [1, 1, 1, 1, 0, 0])
    np.testing.assert_array_equal(m.M_Q.data[1, 0], [0, 0, 0, 0, 1, 1])
    np.testing.assert_array_equal(m.M_V.data[0, 0], [1, 0, 0])
    np.testing.assert_array_equal(m.M_V.data[1, 0], [0, 1, 1])


@settings(max_examples=40, deadline=None)
@given(
    st.sets(st.sampled_from([1, 2, 4, 8, 16]), min_size=1),
    st.integers(1, 8),
    st.integers(1, 5),
)
def test_masks_partition_columns(H, L_t, K_agg):
    s = GranularitySchedule(tuple(sorted(H)), 16)
    m = build_masks(s, L_t, K_agg)
    np.testing.assert_array_equal(m.M_Q.data.sum(0), np.ones((L_t, s.D_sum)))
    np.testing.assert_array_equal(m.M_V.data.sum(0), np.ones((K_agg, s.h_sum)))
    assert set(np.unique(m.M_Q.data)) <= {0.0, 1.0}


def test_default_schedule_sums():
    s = GranularitySchedule((256, 128, 64, 32, 16, 8, 4, 2), 256)
    # dims are 1, 2, ..., 128
    assert s.dims == (1, 2, 4, 8, 16, 32, 64, 128)
    assert s.D_sum == 255
    assert s.h_sum == 510


# ---------------------------------------------------------------- aggregation


def test_aggregate_zero_wa_gives_mean():
    p, _, img = make()
    p.W_a.data[:] = 0
    out = aggregate_features(img, p).data
    want = (img.data @ p.W_c.data).mean(0)
    np.testing.assert_allclose(out, np.tile(want, (p.K_agg, 1)), atol=1e-6)


def test_aggregate_single_position():
    p, _, _ = make()
    img = Tensor(np.random.default_rng(3).uniform(-1, 1, (1, 6)))
    out = aggregate_features(img, p).data
    np.testing.assert_allclose(out, np.tile(img.data @ p.W_c.data, (p.K_agg, 1)), atol=1e-6)


def test_aggregate_matches_oracle():
    p, _, _ = make(D_img=32, K_agg=4, D_t=8)
    img = Tensor(np.random.default_rng(4).uniform(-1, 1, (16, 32)))
    np.testing.assert_allclose(aggregate_features(img, p).data, oracle_aggregate(img.data.astype(float), p), atol=1e-6)


def test_aggregate_shape_mismatch():
    p, _, _ = make(D_img=6)
    with pytest.raises(ShapeError):
        aggregate_features(Tensor(np.ones((3, 5))), p)


# ---------------------------------------------------------------- element routing


def test_zero_we_zeroes_words():
    p, text, img = make()
    p.W_e.data[:] = 0
    gated, gate = route_elements(text, aggregate_features(img, p), p)
    assert np.all(gate.data == 0) and np.all(gated.data == 0)


def test_single_aggregate_context_is_that_vector():
    p, text, img = make(K_agg=1)
    agg = aggregate_features(img, p)
    corr = text.words.data @ agg.data.T
    weights = np_softmax(corr.mean(0))
    assert weights.shape == (1,) and weights[0] == 1.0
    _, gate = route_elements(text, agg, p)
    _, want = oracle_route(text.words.data.astype(float), agg.data.astype(float), p)
    np.testing.assert_allclose(gate.data, want, atol=1e-6)


def test_route_elements_matches_oracle():
    p, text, img = make(L_t=5, D_t=8, K_agg=4)
    agg = aggregate_features(img, p)
    gated, gate = route_elements(text, agg, p)
    g_want, gate_want = oracle_route(text.words.data.astype(float), agg.data.astype(float), p)
    np.testing.assert_allclose(gate.data, gate_want, atol=1e-6)
    np.testing.assert_allclose(gated.data, g_want, atol=1e-6)
    assert np.all(gate.data >= 0) and np.all(gate.data <= p.alpha.data[0])


def test_element_routing_off_gates_at_alpha():
    p, text, img = make(element_routing=False)
    p.alpha.data[:] = 0.6
    gated, gate = route_elements(text, aggregate_features(img, p), p)
    np.testing.assert_allclose(gate.data, 0.6)
    np.testing.assert_allclose(gated.data, 0.6 * text.words.data, rtol=1e-6)


def test_negative_alpha_cannot_push_gate_below_zero():
    p, text, img = make()
    p.alpha.data[:] = -2.0
    _, gate = route_elements(text, aggregate_features(img, p), p)
    assert np.all(gate.data == 0)


# ---------------------------------------------------------------- re-composition


def _parts(p, text, img):
    agg = aggregate_features(img, p)
    gated, _ = route_elements(text, agg, p)
    return gated, agg


def test_zero_wv_is_residual_identity_for_both_paths():
    p, text, img = make()
    p.W_v.data[:] = 0
    gated, agg = _parts(p, text, img)
    for fn in (recompose_naive, recompose_masked):
        out, _ = fn(gated, text.words, agg, p)
        np.testing.assert_array_equal(out.data, text.words.data)


def test_single_granularity_probs_is_one():
    p, text, img = make(H=(2,))
    gated, agg = _parts(p, text, img)
    for fn in (recompose_naive, recompose_masked):
        _, probs = fn(gated, text.words, agg, p)
        np.testing.assert_array_equal(probs.data, [1.0])


def test_naive_matches_loop_oracle():
    p, text, img = make(L_t=3, D_t=8, H=(1, 2, 4), K_agg=2)
    gated, agg = _parts(p, text, img)
    out, probs = recompose_naive(gated, text.words, agg, p)
    want, want_p = oracle_recompose(gated.data.astype(float), text.words.data.astype(float), agg.data.astype(float), p)
    np.testing.assert_allclose(out.data, want, atol=1e-5)
    np.testing.assert_allclose(probs.data, want_p, atol=1e-6)


def test_masked_single_entry_schedule_is_plain_attention():
    p, text, img = make(H=(1,))
    gated, agg = _parts(p, text, img)
    out, _ = recompose_masked(gated, text.words, agg, p)
    Q = gated.data @ p.W_q.data
    K = agg.data @ p.W_k.data
    O = np.tanh(np_softmax(Q @ K.T) @ (agg.data @ p.W_v.data))
    np.testing.assert_allclose(out.data, text.words.data + gated.data * O, atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_masked_matches_naive_random(seed):
    rng = np.random.default_rng(100 + seed)
    H = tuple(sorted(rng.choice([1, 2, 4, 8], size=int(rng.integers(1, 5)), replace=False).tolist()))
    p, text, img = make(seed, L_t=int(rng.integers(1, 7)), D_t=8, H=H, K_agg=int(rng.choice([1, 4])))
    gated, agg = _parts(p, text, img)
    a, pa = recompose_naive(gated, text.words, agg, p)
    b, pb = recompose_masked(gated, text.words, agg, p)
    assert np.abs(a.data - b.data).max() <= 1e-5
    assert np.abs(pa.data - pb.data).max() <= 1e-5


def test_zero_gated_input_returns_prev_words():
    p, text, img = make()
    agg = aggregate_features(img, p)
    zero = Tensor(np.zeros(text.words.shape))
    for fn in (recompose_naive, recompose_masked):
        out, _ = fn(zero, text.words, agg, p)
        np.testing.assert_array_equal(out.data, text.words.data)


def test_batched_inputs_match_per_sample():
    p, _, _ = make(L_t=4, D_t=8, K_agg=2)
    rng = np.random.default_rng(9)
    words = Tensor(rng.uniform(-1, 1, (3, 4, 8)))
    img = Tensor(rng.uniform(-1, 1, (3, 7, 6)))
    out, trace = dse_forward(TextFeatures(words, Tensor(np.zeros((3, 8)))), img, p)
    for b in range(3):
        ob, tb = dse_forward(TextFeatures(Tensor(words.data[b]), Tensor(np.zeros(8))), Tensor(img.data[b]), p)
        np.testing.assert_allclose(out.words.data[b], ob.words.data, atol=1e-6)
        np.testing.assert_allclose(trace.subspace_probs[b], tb.subspace_probs, atol=1e-6)


# ---------------------------------------------------------------- dse_forward


def test_zero_params_identity():
    p, text, img = make()
    for t in p.parameters():
        t.data[:] = 0
    out, trace = dse_forward(text, img, p)
    np.testing.assert_array_equal(out.words.data, text.words.data)
    assert out.sentence is text.sentence


def test_dse_forward_gradients_every_param():
    p, text, img = make(L_t=3, D_t=8, H=(1, 2, 4), K_agg=2)
    wts = Tensor(np.random.default_rng(5).uniform(-1, 1, (3, 8)))

    def f():
        return T.sum_(dse_forward(text, img, p)[0].words * wts)

    reports = check_gradients(f, dict(p.named_parameters()))
    assert {r.name for r in reports} == {"W_a", "W_c", "W_e", "alpha", "W_q", "W_k", "W_v", "W_r"}
    assert all(r.ok for r in reports), reports


def test_trace_wire_format():
    p, text, img = make()
    _, trace = dse_forward(text, img, p, stage_index=2)
    recs = [json.loads(line) for line in trace.to_json().splitlines()]
    assert len(recs) == 1 and recs[0]["stage"] == 2
    assert len(recs[0]["gate"]) == 5 and len(recs[0]["subspace_probs"]) == 3
    assert abs(sum(recs[0]["subspace_probs"]) - 1.0) <= 1e-6


def test_fixed_routing_is_one_hot_first():
    p, text, img = make(subspace_routing="fixed")
    _, trace = dse_forward(text, img, p)
    np.testing.assert_array_equal(trace.subspace_probs, [1.0, 0.0, 0.0])


def test_hard_routing_one_hot_and_differentiable():
    p, text, img = make(subspace_routing="hard")
    g = -np.log(-np.log(np.random.default_rng(1).uniform(size=3)))
    with T.tape_scope():
        out, trace = dse_forward(text, img, p, gumbel=g)
        T.sum_(out.words).backward()
    assert sorted(trace.subspace_probs.tolist()) == [0.0, 0.0, 1.0]
    assert np.any(p.W_r.grad.data != 0)
    with pytest.raises(ValueError):
        dse_forward(text, img, p)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.sampled_from([1, 4]), st.floats(0.05, 4.0))
def test_routing_bounds_property(seed, L_t, K_agg, alpha):
    p, text, img = make(seed, L_t=L_t, D_t=16, H=(1, 4, 16), K_agg=K_agg)
    p.alpha.data[:] = alpha
    out, trace = dse_forward(text, img, p)
    assert np.all(trace.element_gate >= 0) and np.all(trace.element_gate <= np.float32(alpha))
    assert np.all(trace.subspace_probs >= 0)
    assert abs(float(trace.subspace_probs.astype(np.float64).sum()) - 1.0) <= 1e-6
    # each subspace is rescaled by 1 + sum_j p_j O_j with |O_j| < 1, so |delta| <= |gated|
    gated = text.words.data * trace.element_gate[:, None]
    assert np.all(np.abs(out.words.data - text.words.data) <= np.abs(gated) + 1e-6)
