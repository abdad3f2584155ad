"""
Inspecting contextual non-local attention
=========================================

Scoring one image against one caption keeps every intermediate matrix.
Looking at them shows what the focal step throws away.
"""

import numpy as np

from nafs import FeatureSet, ProjectionParams, ScaleTag, pair_similarity_i2t, pair_similarity_t2i

rng = np.random.default_rng(4)
d = 6
image = FeatureSet([ScaleTag("global", 0), ScaleTag("region", 0), ScaleTag("region", 1)],
                   rng.standard_normal((3, d)), "img")
# The caption shares one direction with the image's upper region.
text_vecs = rng.standard_normal((4, d))
text_vecs[2] = image.vectors[1] + 0.05 * rng.standard_normal(d)
text = FeatureSet([ScaleTag("global", 0)] + [ScaleTag("patch", i) for i in range(3)], text_vecs, "cap")

params = ProjectionParams.identity(d)
score, state = pair_similarity_i2t(image, text, params)
np.set_printoptions(precision=3, suppress=True)
print("clamped cosine s:\n", state.s)
print("focal weights s~ (zeros mark filtered keys):\n", state.s_tilde)
# Normalising over queries rewards keys that few queries like. Key 2 is
# shared by two image entries, so region0 ends up leaning on key 0.
print("alpha rows:\n", state.alpha)
print("image-to-text score", round(score, 4))

# The mirror direction lets text entries look for image entries.
score_t, _ = pair_similarity_t2i(text, image, params)
print("text-to-image score", round(score_t, 4))

# Re-ordering the entries of either set leaves both scores alone.
perm = FeatureSet(tuple(reversed(text.tags)), text.vectors[::-1], "cap")
print("permutation invariant:", abs(pair_similarity_i2t(image, perm, params)[0] - score) < 1e-12)
