import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import INVARIANT_CASES
from nafs.locality import (
    EmptyContextError,
    InvalidSpanError,
    Span,
    attention_weights,
    build_locality_mask,
    encode_subsentences,
    masked_attention,
    split_subsentences,
)


def spans_of(tokens):
    return [(s.start, s.end) for s in split_subsentences(tokens)]


def test_split_examples():
    assert spans_of(["a", "b", ",", "c"]) == [(0, 2), (3, 4)]
    assert spans_of(["a", "b", "c"]) == [(0, 3)]
    assert spans_of([",", ","]) == []


def test_split_drops_empty_spans():
    assert spans_of(["a", ",", ",", "b", ","]) == [(0, 1), (3, 4)]


def test_split_rejects_empty_input():
    with pytest.raises(ValueError):
        split_subsentences([])


def test_mask_examples():
    assert build_locality_mask([Span(0, 4)], 4).tolist() == [[True] * 4]
    assert build_locality_mask([Span(0, 2), Span(2, 4)], 4).tolist() == [
        [True, True, False, False],
        [False, False, True, True],
    ]
    assert build_locality_mask([Span(1, 2)], 3).sum() == 1


def test_mask_rejects_out_of_range():
    with pytest.raises(InvalidSpanError):
        build_locality_mask([Span(2, 5)], 4)
    with pytest.raises(InvalidSpanError):
        Span(3, 3)


def test_singleton_context_returns_value(rng):
    keys, values = rng.standard_normal((4, 3)), rng.standard_normal((4, 5))
    allowed = np.array([False, False, True, False])
    assert np.array_equal(masked_attention(rng.standard_normal(3), keys, values, allowed), values[2])


def test_equal_logits_average_values(rng):
    keys = np.zeros((3, 2))
    values = rng.standard_normal((3, 4))
    out = masked_attention(np.ones(2), keys, values, np.ones(3, bool))
    assert np.allclose(out, values.mean(axis=0), atol=1e-15)


def test_two_keys_log3_logit():
    # Logits (ln 3, 0) give weights (0.75, 0.25).
    q = np.array([1.0])
    keys = np.array([[np.log(3.0)], [0.0]])
    values = np.array([[4.0, 0.0], [0.0, 8.0]])
    w = attention_weights(q, keys, np.ones(2, bool))
    assert np.allclose(w, [0.75, 0.25], atol=1e-15)
    assert np.allclose(masked_attention(q, keys, values, np.ones(2, bool)), [3.0, 2.0], atol=1e-14)


def test_empty_context_rejected(rng):
    with pytest.raises(EmptyContextError):
        masked_attention(np.ones(2), np.ones((3, 2)), np.ones((3, 2)), np.zeros(3, bool))


def test_scaling_flag_divides_logits():
    q = np.array([2.0, 0.0, 0.0, 0.0])
    keys = np.array([[1.0, 0, 0, 0], [0.0, 0, 0, 0]])
    w = attention_weights(q, keys, np.ones(2, bool), scale=True)
    # logits 2/sqrt(4) = 1 and 0
    assert np.allclose(w, [np.e / (np.e + 1), 1 / (np.e + 1)], atol=1e-15)


def _plain_attention(q, keys, values):
    logits = keys @ q
    w = np.exp(logits - logits.max())
    return (w / w.sum()) @ values


@settings(max_examples=INVARIANT_CASES)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12), d=st.integers(1, 8))
def test_full_mask_reduces_to_plain_attention(seed, n, d):
    rng = np.random.default_rng(seed)
    q, keys, values = rng.standard_normal(d), rng.standard_normal((n, d)), rng.standard_normal((n, 3))
    full = build_locality_mask([Span(0, n)], n)[0]
    assert np.allclose(masked_attention(q, keys, values, full), _plain_attention(q, keys, values), atol=1e-9)


@settings(max_examples=300)
@given(seed=st.integers(0, 2**32 - 1))
def test_values_outside_span_do_not_matter(seed):
    rng = np.random.default_rng(seed)
    keys, values = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    allowed = np.zeros(6, bool)
    allowed[1:4] = True
    q = rng.standard_normal(4)
    before = masked_attention(q, keys, values, allowed)
    poisoned = values.copy()
    poisoned[~allowed] = rng.standard_normal((3, 3)) * 1e6
    poisoned[0, 0] = np.nan
    assert masked_attention(q, keys, poisoned, allowed).tobytes() == before.tobytes()


@settings(max_examples=300)
@given(seed=st.integers(0, 2**32 - 1))
def test_output_is_convex_combination(seed):
    rng = np.random.default_rng(seed)
    keys, values = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    allowed = rng.random(5) < 0.6
    allowed[rng.integers(5)] = True
    w = attention_weights(rng.standard_normal(3), keys, allowed)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12 and np.all(w[~allowed] == 0)
    out = w @ values
    assert np.all(out <= values[allowed].max(axis=0) + 1e-12)
    assert np.all(out >= values[allowed].min(axis=0) - 1e-12)


@settings(max_examples=300)
@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-50, 50))
def test_shift_invariance(seed, shift):
    # Adding c to every logit q.k_i is the same as appending a coordinate with q=c, k=1.
    rng = np.random.default_rng(seed)
    q, keys, values = rng.standard_normal(3), rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    allowed = np.array([True, False, True, True, False])
    base = masked_attention(q, keys, values, allowed)
    shifted = masked_attention(np.append(q, shift), np.hstack([keys, np.ones((5, 1))]), values, allowed)
    assert np.allclose(base, shifted, atol=1e-9)


def test_encode_subsentences_uses_one_span_per_row(rng):
    tokens = ["a", "b", ",", "c", "d", "e"]
    spans = split_subsentences(tokens)
    keys, values = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    q = rng.standard_normal(4)
    out = encode_subsentences(q, keys, values, spans)
    mask = build_locality_mask(spans, 6)
    assert out.shape == (2, 4)
    for r in range(2):
        assert np.array_equal(out[r], masked_attention(q, keys, values, mask[r]))
