"""
Sub-sentences through a locality mask
=====================================

Commas split a caption into sub-sentences. Each sub-sentence attends only to
its own tokens, which is all the mask encodes.
"""

import numpy as np

from nafs import build_locality_mask, masked_attention, split_subsentences

tokens = "a woman in a red coat , , black trousers , carrying a bag".split()
spans = split_subsentences(tokens)
for s in spans:
    print(s.start, s.end, " ".join(tokens[s.start:s.end]))  # the empty span between commas is gone

mask = build_locality_mask(spans, len(tokens))
print(mask.astype(int))

rng = np.random.default_rng(0)
d = 8
keys = rng.standard_normal((len(tokens), d))
values = rng.standard_normal((len(tokens), d))
query = keys[spans[1].start:spans[1].end].mean(axis=0)

# Masked attention for the second sub-sentence only sees "black trousers".
out = masked_attention(query, keys, values, mask[1])
inside = values[mask[1]]
print("result lies in the span of its own tokens:",
      np.linalg.matrix_rank(np.vstack([inside, out])) == np.linalg.matrix_rank(inside))
