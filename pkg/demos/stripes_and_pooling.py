"""
From feature maps to scale-tagged sets
======================================

A visual branch hands over a spatial grid. Cutting it into horizontal
stripes and pooling each one gives the part-level vectors that the
attention module later matches against text.
"""

import numpy as np

from nafs import FeatureMap, build_visual_feature_set, partition_stripes, split_and_shuffle

# A 7-row map does not divide evenly into 3 stripes. The top stripe takes the
# spare row.
fmap = FeatureMap(np.arange(7 * 2 * 1, dtype=float).reshape(7, 2, 1))
for stripe in partition_stripes(fmap, 3):
    print("rows", stripe.row_start, "to", stripe.row_end)

# Split&shuffle reorders whole stripes, so every row survives with its
# neighbours intact.
shuffled = split_and_shuffle(fmap, 3, np.random.default_rng(0))
print("shuffled first column:", shuffled.data[:, 0, 0])

# One image: a global map plus region (2 stripes) and patch (3 stripes) maps.
rng = np.random.default_rng(1)
maps = [FeatureMap(rng.standard_normal((6, 2, 4))) for _ in range(3)]
fs = build_visual_feature_set(*maps, owner_id="img0")
print([f"{t.branch}{t.stripe_index}" for t in fs.tags])
print("vectors:", fs.vectors.shape)

# At training time the same call with a seed shuffles region and patch stripes
# first. The global vector does not move.
aug = build_visual_feature_set(*maps, shuffle_seed=3)
print("global unchanged:", np.allclose(aug.vectors[0], fs.vectors[0]))
