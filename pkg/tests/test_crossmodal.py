import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import INVARIANT_CASES
from nafs.crossmodal import (
    InvalidBatchError,
    ProjectionParams,
    Temperatures,
    attention_pool,
    attention_record_from_line,
    attention_record_to_line,
    batch_similarity,
    clamped_cosine_matrix,
    export_attention,
    focal_filter,
    normalize_over_queries,
    pair_similarity_i2t,
    pair_similarity_t2i,
    project,
    read_attention_report,
    record_to_state,
    score_matrix,
    stack_sets,
    write_attention_report,
)
from nafs.features import DimensionError, FeatureSet, make_tags


def fset(vectors, counts=None, owner=""):
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    counts = counts or (1, 0, len(vectors) - 1)
    return FeatureSet(make_tags(counts), vectors, owner)


def random_pair(rng, m, n, d):
    image = fset(rng.standard_normal((m, d)), (1, (m - 1) // 2, m - 1 - (m - 1) // 2))
    text = fset(rng.standard_normal((n, d)), (1, (n - 1) // 2, n - 1 - (n - 1) // 2))
    return image, text, ProjectionParams.init(d, int(rng.integers(1 << 30)))


# --- project / cosine / normalization ------------------------------------


def test_project_examples():
    x = np.array([[1.0, 2.0]])
    assert np.array_equal(project(x, np.eye(2)), x)
    assert np.array_equal(project(x, np.zeros((2, 2))), np.zeros((1, 2)))
    assert project(x, [[0.0, 1.0], [1.0, 0.0]]).tolist() == [[2.0, 1.0]]
    with pytest.raises(DimensionError):
        project(x, np.eye(3))


def test_clamped_cosine_examples():
    assert clamped_cosine_matrix([[1.0, 0.0]], [[0.0, 1.0]])[0, 0] == 0.0
    assert clamped_cosine_matrix([[1.0, 0.0]], [[-1.0, 0.0]])[0, 0] == 0.0
    assert abs(clamped_cosine_matrix([[1.0, 1.0]], [[1.0, 0.0]])[0, 0] - 1 / math.sqrt(2)) < 1e-12
    assert clamped_cosine_matrix([[0.0, 0.0]], [[1.0, 0.0]])[0, 0] == 0.0


@settings(max_examples=300)
@given(seed=st.integers(0, 2**32 - 1), factor=st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(seed, factor):
    rng = np.random.default_rng(seed)
    q, k = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    base = clamped_cosine_matrix(q, k)
    q2, k2 = q.copy(), k.copy()
    q2[rng.integers(3)] *= factor
    k2[rng.integers(5)] *= factor
    assert np.allclose(clamped_cosine_matrix(q2, k2), base, atol=1e-9)
    assert np.all((base >= 0) & (base <= 1))


def test_normalize_over_queries_examples():
    out = normalize_over_queries(np.array([[1.0, 2.0, 0.0], [1.0, 0.0, 0.0]]))
    assert np.allclose(out[:, 0], [0.5, 0.5], atol=1e-7)
    assert np.allclose(out[:, 1], [1.0, 0.0], atol=1e-7)
    assert out[:, 2].tolist() == [0.0, 0.0]


def test_normalize_key_axis_switch():
    out = normalize_over_queries(np.array([[1.0, 3.0]]), norm_axis="key")
    assert np.allclose(out, [[0.25, 0.75]], atol=1e-7)
    with pytest.raises(ValueError):
        normalize_over_queries(np.ones((2, 2)), norm_axis="both")


def test_focal_examples():
    assert np.allclose(focal_filter([[0.7, 0.3]]), [[0.28, 0.0]], atol=1e-15)
    assert np.array_equal(focal_filter([[0.25, 0.25, 0.25]]), np.zeros((1, 3)))
    assert focal_filter([[1.0, 0.0]]).tolist() == [[1.0, 0.0]]


@settings(max_examples=INVARIANT_CASES)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 6), n=st.integers(1, 8), ties=st.booleans())
def test_focal_zeroing_characterization(seed, m, n, ties):
    rng = np.random.default_rng(seed)
    s_hat = rng.random((m, n))
    if ties:
        s_hat = np.round(s_hat * 4) / 4  # exercise entries exactly at the row mean
        s_hat[0] = 0.5
    out = focal_filter(s_hat)
    for a in range(m):
        mean = s_hat[a].sum() / n
        for b in range(n):
            excess = n * s_hat[a, b] - s_hat[a].sum()
            if excess <= 0 or s_hat[a, b] == 0:
                assert out[a, b] == 0.0
            else:
                assert out[a, b] > 0.0 and s_hat[a, b] > mean


def test_attention_pool_examples(rng):
    values = rng.standard_normal((3, 4))
    assert np.allclose(attention_pool(np.full((1, 3), 0.4), values, 20.0)[0], values.mean(axis=0), atol=1e-15)
    # softmax of (20 * 0.28, 0) = (5.6, 0)
    alpha_1 = 1 / (1 + math.exp(-5.6))
    assert abs(alpha_1 - 0.99632) < 5e-6
    two = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(attention_pool([[0.28, 0.0]], two, 20.0)[0], [alpha_1, 1 - alpha_1], atol=1e-15)
    single = rng.standard_normal((1, 4))
    for tau in (0.1, 20.0, 1e4):
        assert np.allclose(attention_pool([[0.9]], single, tau), single, atol=1e-15)


# --- pair scores -----------------------------------------------------------


def test_pair_identical_singletons_score_one(rng):
    v = rng.standard_normal(5)
    score, _ = pair_similarity_i2t(fset(v), fset(v), ProjectionParams.identity(5))
    assert abs(score - 1.0) < 1e-12
    score, _ = pair_similarity_t2i(fset(v), fset(v), ProjectionParams.identity(5))
    assert abs(score - 1.0) < 1e-12


def test_pair_orthogonal_values_score_zero():
    score, _ = pair_similarity_i2t(fset([1.0, 0.0]), fset([0.0, 1.0]), ProjectionParams.identity(2))
    assert abs(score) < 1e-15


def test_pair_symmetric_inputs_agree(rng):
    vecs = rng.standard_normal((4, 6))
    a, b = fset(vecs), fset(vecs)
    s1, _ = pair_similarity_i2t(a, b, ProjectionParams.identity(6))
    s2, _ = pair_similarity_t2i(b, a, ProjectionParams.identity(6))
    assert abs(s1 - s2) < 1e-12


def test_pair_rejects_dim_mismatch(rng):
    with pytest.raises(DimensionError):
        pair_similarity_i2t(fset(rng.standard_normal((2, 3))), fset(rng.standard_normal((2, 4))),
                            ProjectionParams.identity(3))


@pytest.mark.parametrize("norm_axis", ["query", "key"])
def test_pair_scores_match_loop_oracle(norm_axis):
    rng = np.random.default_rng(2024)
    temps = Temperatures(20.0, 7.5)
    for _ in range(100):
        m, n, d = (int(v) for v in rng.integers(1, 7, size=3))
        image, text, params = random_pair(rng, m, n, d)
        w = [getattr(params, k).tolist() for k in ("w_iq", "w_iv", "w_tk", "w_tv")]
        img, txt = image.vectors.tolist(), text.vectors.tolist()
        got, state = pair_similarity_i2t(image, text, params, temps, norm_axis)
        want, parts = oracles.i2t(img, txt, *w, temps.tau_i2t, norm_axis)
        assert abs(got - want) <= 1e-9
        for name in ("s", "s_hat", "s_tilde", "alpha"):
            assert np.allclose(getattr(state, name), parts[name], rtol=0, atol=1e-9)
        got, state = pair_similarity_t2i(text, image, params, temps, norm_axis)
        want, parts = oracles.t2i(txt, img, *w, temps.tau_t2i, norm_axis)
        assert abs(got - want) <= 1e-9
        assert np.allclose(state.alpha, parts["alpha"], rtol=0, atol=1e-9)


@settings(max_examples=INVARIANT_CASES)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 6), n=st.integers(1, 8))
def test_pair_scores_are_set_invariant(seed, m, n):
    rng = np.random.default_rng(seed)
    image, text, params = random_pair(rng, m, n, 5)
    pi, pt = rng.permutation(m), rng.permutation(n)
    image_p = FeatureSet(tuple(image.tags[k] for k in pi), image.vectors[pi])
    text_p = FeatureSet(tuple(text.tags[k] for k in pt), text.vectors[pt])
    for fn, a, b, a_p, b_p in ((pair_similarity_i2t, image, text, image_p, text_p),
                               (pair_similarity_t2i, text, image, text_p, image_p)):
        s, state = fn(a, b, params)
        s_p, _ = fn(a_p, b_p, params)
        assert abs(s - s_p) <= 1e-6
        assert -1 - 1e-12 <= s <= 1 + 1e-12


@settings(max_examples=INVARIANT_CASES)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 6), n=st.integers(1, 8),
       tau=st.floats(0.01, 200.0))
def test_alpha_rows_sum_to_one(seed, m, n, tau):
    rng = np.random.default_rng(seed)
    image, text, params = random_pair(rng, m, n, 4)
    temps = Temperatures(tau, tau)
    for state in (pair_similarity_i2t(image, text, params, temps)[1],
                  pair_similarity_t2i(text, image, params, temps)[1]):
        assert np.allclose(state.alpha.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(state.s >= 0) and np.all(state.s <= 1 + 1e-12) and np.all(state.s_tilde >= 0)


# --- batches ----------------------------------------------------------------


def test_batch_of_one_matches_pair(rng):
    image, text, params = random_pair(rng, 6, 7, 8)
    i2t, t2i = batch_similarity([image], [text], params)
    assert i2t.shape == (1, 1)
    assert abs(i2t[0, 0] - pair_similarity_i2t(image, text, params)[0]) < 1e-12
    assert abs(t2i[0, 0] - pair_similarity_t2i(text, image, params)[0]) < 1e-12


def test_batch_matches_pairwise_calls(rng):
    params = ProjectionParams.init(8, 3)
    images = [fset(rng.standard_normal((6, 8)), (1, 2, 3)) for _ in range(3)]
    texts = [fset(rng.standard_normal((7, 8)), (1, 2, 4)) for _ in range(3)]
    i2t, t2i = batch_similarity(images, texts, params)
    for i in range(3):
        for j in range(3):
            assert abs(i2t[i, j] - pair_similarity_i2t(images[i], texts[j], params)[0]) < 1e-12
            assert abs(t2i[i, j] - pair_similarity_t2i(texts[j], images[i], params)[0]) < 1e-12


def test_batch_with_ragged_sets_falls_back_to_pairs(rng):
    params = ProjectionParams.init(4, 3)
    images = [fset(rng.standard_normal((k, 4))) for k in (2, 3)]
    texts = [fset(rng.standard_normal((k, 4))) for k in (4, 1)]
    i2t, _ = batch_similarity(images, texts, params)
    assert abs(i2t[1, 0] - pair_similarity_i2t(images[1], texts[0], params)[0]) < 1e-12


def test_batch_permutation_permutes_matrix(rng):
    params = ProjectionParams.init(5, 9)
    images = [fset(rng.standard_normal((3, 5))) for _ in range(4)]
    texts = [fset(rng.standard_normal((4, 5))) for _ in range(4)]
    i2t, t2i = batch_similarity(images, texts, params)
    pi, pt = [2, 0, 3, 1], [1, 3, 0, 2]
    i2t_p, t2i_p = batch_similarity([images[k] for k in pi], [texts[k] for k in pt], params)
    assert np.allclose(i2t_p, i2t[np.ix_(pi, pt)], atol=1e-12)
    assert np.allclose(t2i_p, t2i[np.ix_(pi, pt)], atol=1e-12)


def test_empty_batch_rejected():
    with pytest.raises(InvalidBatchError):
        batch_similarity([], [], ProjectionParams.identity(2))


def test_score_matrix_is_chunk_independent(rng):
    params = ProjectionParams.init(6, 1)
    images = rng.standard_normal((5, 4, 6))
    texts = rng.standard_normal((9, 3, 6))
    full = score_matrix(images, texts, params, chunk=9)
    assert np.allclose(score_matrix(images, texts, params, chunk=2), full, atol=1e-12)
    t2i = score_matrix(images, texts, params, direction="t2i")
    ref = batch_similarity([fset(x) for x in images[:3]], [fset(y) for y in texts[:3]], params)[1]
    assert np.allclose(t2i[:3, :3], ref, atol=1e-12)


# --- attention report ------------------------------------------------------


def test_attention_record_round_trip(tmp_path, rng):
    image, text, params = random_pair(rng, 6, 7, 8)
    _, state = pair_similarity_i2t(image, text, params)
    record = export_attention(state, "img7", "cap3")
    assert record["shape"] == [6, 7]
    assert np.allclose(record["alpha"].sum(axis=1), 1.0, atol=1e-6)
    back = attention_record_from_line(attention_record_to_line(record))
    for name in ("s", "s_hat", "s_tilde", "alpha"):
        assert back[name].dtype == np.float32
        assert back[name].tobytes() == record[name].tobytes()
    assert back["row_tags"] == record["row_tags"] and back["direction"] == "i2t"
    write_attention_report(tmp_path / "a.jsonl", [record, record])
    again = read_attention_report(tmp_path / "a.jsonl")
    assert len(again) == 2 and again[1]["alpha"].tobytes() == record["alpha"].tobytes()
    assert record_to_state(again[0]).row_tags == image.tags


def test_stack_sets_rejects_mixed_shapes(rng):
    with pytest.raises(DimensionError):
        stack_sets([fset(rng.standard_normal((2, 3))), fset(rng.standard_normal((3, 3)))])


def test_projection_init_is_seeded_and_bounded():
    a, b = ProjectionParams.init(16, 5), ProjectionParams.init(16, 5)
    for k in ("w_iq", "w_iv", "w_tk", "w_tv"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
        assert np.all(np.abs(getattr(a, k)) <= 0.25)
    with pytest.raises(ValueError):
        Temperatures(0.0, 1.0)
