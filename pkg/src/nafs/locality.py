"""Sub-sentence spans and locality-constrained attention.

A caption is cut at comma tokens into sub-sentences. Each sub-sentence gets
its own [CLS]-style query which may only attend to tokens inside its span;
the softmax runs over the allowed tokens alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

COMMA = ","


class InvalidSpanError(ValueError):
    pass


class EmptyContextError(ValueError):
    pass


@dataclass(frozen=True)
class Span:
    start: int
    end: int  # exclusive

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise InvalidSpanError(f"bad span [{self.start}, {self.end})")

    def __len__(self):
        return self.end - self.start


def split_subsentences(tokens: Sequence[str], delimiter: str = COMMA) -> list[Span]:
    """Spans between delimiter tokens. Delimiters are excluded and empty
    spans (repeated commas) are dropped."""
    if len(tokens) == 0:
        raise ValueError("token list is empty")
    spans, start = [], 0
    for i, tok in enumerate(list(tokens) + [delimiter]):
        if tok == delimiter:
            if i > start:
                spans.append(Span(start, i))
            start = i + 1
    return spans


def build_locality_mask(spans: Sequence[Span], token_count: int) -> np.ndarray:
    """Boolean ``(len(spans), token_count)`` mask; row r allows span r."""
    mask = np.zeros((len(spans), token_count), dtype=bool)
    for r, span in enumerate(spans):
        if span.end > token_count:
            raise InvalidSpanError(f"span [{span.start}, {span.end}) exceeds {token_count} tokens")
        mask[r, span.start : span.end] = True
    return mask


def attention_weights(q, keys, allowed, scale: bool = False) -> np.ndarray:
    """Softmax of ``q . k_i`` restricted to ``allowed``; zero elsewhere."""
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    allowed = np.asarray(allowed, dtype=bool)
    if keys.ndim != 2 or keys.shape[1] != q.shape[-1]:
        raise ValueError(f"query dim {q.shape} does not match keys {keys.shape}")
    if allowed.shape != (keys.shape[0],):
        raise ValueError(f"mask row of shape {allowed.shape} for {keys.shape[0]} keys")
    if not allowed.any():
        raise EmptyContextError("locality mask row allows no tokens")
    logits = keys @ q
    if scale:
        logits = logits / np.sqrt(q.shape[-1])
    logits = np.where(allowed, logits, -np.inf)
    w = np.exp(logits - logits[allowed].max())
    return w / w.sum()


def masked_attention(q, keys, values, allowed, scale: bool = False) -> np.ndarray:
    """Attend from one query to the allowed subset of ``keys``/``values``.

    Raw dot products by default; ``scale=True`` divides logits by sqrt(d).
    """
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(keys):
        raise ValueError(f"{len(keys)} keys but {len(values)} values")
    w = attention_weights(q, keys, allowed, scale=scale)
    # Disallowed rows are dropped rather than multiplied by zero so that
    # non-finite values outside the span cannot leak in.
    return w[allowed] @ values[np.asarray(allowed, dtype=bool)]


def encode_subsentences(queries, keys, values, spans: Sequence[Span], scale: bool = False) -> np.ndarray:
    """One attended vector per span, using ``queries[r]`` for span r."""
    keys = np.asarray(keys, dtype=np.float64)
    mask = build_locality_mask(spans, len(keys))
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim == 1:
        queries = np.broadcast_to(queries, (len(spans), queries.shape[0]))
    return np.stack([masked_attention(queries[r], keys, values, mask[r], scale) for r in range(len(spans))])
