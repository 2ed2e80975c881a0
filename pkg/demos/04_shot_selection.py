"""
Picking few-shot samples by clustering
======================================

Within each class, k-means on class-token features splits the samples into
k groups and the medoid of each group becomes a shot.  A class made of three
tight sub-modes should yield one shot per mode.
"""

import numpy as np

from mgvit import ModelConfig, ViT
from mgvit.data import SampleRecord
from mgvit.selection import select_shots, random_shots

rng = np.random.default_rng(0)
records, mode_of = [], {}
for mode in range(3):
    centre = rng.random((3, 8, 8))
    for _ in range(8):
        rid = len(records)
        records.append(SampleRecord(rid, np.clip(centre + rng.normal(0, 0.01, centre.shape), 0, 1), 0))
        mode_of[rid] = mode

model = ViT(ModelConfig(image_height=8, image_width=8, patch_size=4, embed_dim=16,
                        num_heads=2, num_layers=2, num_classes=1), seed=0)
active = select_shots(records, model, 3, seed=0)[0]
rand = random_shots(records, 3, seed=0)[0]
print("clustered shots:", active, "modes", sorted(mode_of[i] for i in active))
print("random shots:   ", rand, "modes", sorted(mode_of[i] for i in rand))
