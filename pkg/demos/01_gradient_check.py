"""
Checking the autodiff tape against finite differences
======================================================

Every gradient in the package comes from a small reverse-mode tape.  Here we
build a two-layer ViT, take one loss, and compare a few tape gradients with
central differences.
"""

import numpy as np

from mgvit import ModelConfig, ViT
from mgvit.tensor import cross_entropy, no_grad

cfg = ModelConfig(image_height=16, image_width=16, patch_size=4, embed_dim=32,
                  num_heads=2, num_layers=2, num_classes=4)
model = ViT(cfg, seed=0)
rng = np.random.default_rng(0)
images, labels = rng.random((2, 3, 16, 16)), [1, 3]

# one backward pass fills .grad on every parameter
model.zero_grad()
cross_entropy(model.logits(images), labels).backward()

def loss():
    with no_grad():
        return cross_entropy(model.logits(images), labels).item()

for name in ("patch.w", "layer0.attn.wq", "layer1.mlp.w2", "head.w"):
    p = model.params[name].data.reshape(-1)
    i = int(rng.integers(p.size))
    old = p[i]
    p[i] = old + 1e-5; up = loss()
    p[i] = old - 1e-5; down = loss()
    p[i] = old
    fd = (up - down) / 2e-5
    tape = model.params[name].grad.reshape(-1)[i]
    print(f"{name:16s} tape {tape:+.8f}  finite diff {fd:+.8f}")
