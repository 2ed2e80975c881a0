"""Patch salience from embedding gradients, and top-k / rectangular masks built from it."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, ShapeError
from .tensor import Tensor, cross_entropy

DISCRETE = "discrete"
CONTINUED = "continued"


@dataclass
class SalienceMap:
    values: np.ndarray
    sample_id: int | None = None
    label: int | None = None

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class MaskSpec:
    bits: np.ndarray
    kind: str
    k: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int8)

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float64)


def classification_loss(smoothing: float = 0.0) -> Callable:
    """Loss callback for :func:`compute_salience`: summed cross-entropy of the class head."""
    def loss_fn(model, seq, labels):
        return cross_entropy(model.classify_head(seq), labels, smoothing, reduction="sum")
    return loss_fn


def salience_batch(model, images, labels, loss_fn: Callable | None = None) -> np.ndarray:
    """``(B, N)`` salience: per patch, the summed |dL/dx| over the embedding coordinates.

    The gradient is taken at the patch-embedding output (before position
    embeddings are added) along the model's unmasked forward flow.  The loss
    must be a sum over samples so each row only sees its own sample.
    """
    loss_fn = loss_fn or classification_loss()
    saved = {k: p.requires_grad for k, p in model.params.items()}
    model.set_trainable(())
    try:
        leaf = Tensor(model.patch_embed(images).data, requires_grad=True)
        seq = model.encode(leaf, inject=model.mg_flow)
        loss_fn(model, seq, labels).backward()
    finally:
        for k, flag in saved.items():
            model.params[k].requires_grad = flag
    return np.abs(leaf.grad).sum(axis=-1)


def compute_salience(model, image, label, loss_fn: Callable | None = None,
                     sample_id: int | None = None) -> SalienceMap:
    g = salience_batch(model, np.asarray(image)[None], [label], loss_fn)
    scalar = isinstance(label, (int, np.integer))
    return SalienceMap(g[0], sample_id, int(label) if scalar else None)


def discrete_mask(salience, k: int) -> MaskSpec:
    """Ones at the ``k`` largest salience values; ties go to the lower patch index."""
    g = np.asarray(getattr(salience, "values", salience), dtype=np.float64)
    n = g.shape[0]
    if not 1 <= k <= n:
        raise InputError(f"top-k budget must lie in [1, {n}], got {k}")
    order = np.lexsort((np.arange(n), -g))
    bits = np.zeros(n, dtype=np.int8)
    bits[order[:k]] = 1
    return MaskSpec(bits, DISCRETE, k)


def rectangle_shape(k: int, grid: tuple[int, int]) -> tuple[int, int]:
    """Smallest (rows, cols) with rows*cols >= k whose aspect follows the grid's."""
    gh, gw = grid
    if k >= gh * gw:
        return gh, gw
    for rows in range(1, gh + 1):
        cols = min(max(1, int(math.floor(rows * gw / gh + 0.5))), gw)
        if rows * cols >= k:
            return rows, cols
    return gh, min(gw, -(-k // gh))


def continued_mask(discrete: MaskSpec, grid: tuple[int, int]) -> MaskSpec:
    """One axis-aligned rectangle centred on the mean position of the discrete mask's ones."""
    gh, gw = grid
    bits = np.asarray(discrete.bits).reshape(-1)
    if bits.size != gh * gw:
        raise ShapeError(f"mask of length {bits.size} does not fit grid {grid}")
    if discrete.kind != DISCRETE:
        raise InputError("continued_mask expects a discrete mask")
    on = np.flatnonzero(bits)
    if on.size == 0:
        raise InputError("cannot build a continued mask from an empty discrete mask")
    rows, cols = np.divmod(on, gw)
    # half-up rounding of the centroid
    cr = int(math.floor(rows.mean() + 0.5))
    cc = int(math.floor(cols.mean() + 0.5))
    h, w = rectangle_shape(discrete.k, grid)
    top = min(max(cr - h // 2, 0), gh - h)
    left = min(max(cc - w // 2, 0), gw - w)
    out = np.zeros((gh, gw), dtype=np.int8)
    out[top:top + h, left:left + w] = 1
    return MaskSpec(out.reshape(-1), CONTINUED, discrete.k)


def make_mask(salience, k: int, kind: str, grid: tuple[int, int]) -> MaskSpec:
    m = discrete_mask(salience, k)
    if kind == DISCRETE:
        return m
    if kind == CONTINUED:
        return continued_mask(m, grid)
    raise InputError(f"unknown mask kind {kind!r}")


def salience_for_set(model, images, labels, k: int, kind: str = DISCRETE,
                     ids: Sequence[int] | None = None, loss_fn: Callable | None = None,
                     batch_size: int = 64) -> list[tuple[int, MaskSpec]]:
    """One mask per sample (not averaged), in input order."""
    images = np.asarray(images)
    if len(images) == 0:
        raise InputError("salience_for_set needs at least one sample")
    ids = list(range(len(images))) if ids is None else list(ids)
    grid = model.config.grid
    out = []
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        g = salience_batch(model, images[sl], _slice_labels(labels, sl), loss_fn)
        out.extend((i, make_mask(row, k, kind, grid)) for i, row in zip(ids[sl], g))
    return out


def _slice_labels(labels, sl: slice):
    return labels[sl] if isinstance(labels, np.ndarray) else list(labels)[sl]


def mask_iou(bits: np.ndarray, truth: Sequence[int]) -> float:
    pred = set(np.flatnonzero(np.asarray(bits)).tolist())
    gt = set(int(i) for i in truth)
    union = pred | gt
    return len(pred & gt) / len(union) if union else 1.0


def random_mask_iou(n: int, k: int, t: int) -> float:
    """Expected IoU between a uniform random k-subset of n patches and a fixed t-subset."""
    from scipy.stats import hypergeom

    dist = hypergeom(n, t, k)
    return float(sum(dist.pmf(i) * i / (k + t - i) for i in range(0, min(k, t) + 1)))


# ----------------------------------------------------------------------
# export


def write_salience_pgm(path, salience: SalienceMap, grid: tuple[int, int],
                       comment: str | None = None) -> None:
    """Plain-text (P2) PGM of the salience grid, min-max scaled to 0..255."""
    g = np.asarray(salience.values, dtype=np.float64).reshape(grid)
    lo, hi = g.min(), g.max()
    scaled = np.zeros_like(g) if hi <= lo else (g - lo) / (hi - lo) * 255.0
    pix = np.floor(scaled + 0.5).astype(int)
    lines = ["P2"]
    if comment:
        lines.extend(f"# {c}" for c in comment.splitlines())
    lines += [f"{grid[1]} {grid[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    Path(path).write_text("\n".join(lines) + "\n")


def write_mask_csv(path, mask: MaskSpec, grid: tuple[int, int],
                   comment: str | None = None) -> None:
    rows = np.asarray(mask.bits).reshape(grid)
    lines = [f"# {c}" for c in comment.splitlines()] if comment else []
    lines += [",".join(str(int(v)) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mask_csv(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    return np.array([[int(v) for v in r.split(",")] for r in rows], dtype=np.int8)
