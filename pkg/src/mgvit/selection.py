"""Cluster-based few-shot sample selection and loss-based neighborhood mining."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, MGViTError
from .tensor import cross_entropy, no_grad

MAX_KMEANS_ITER = 100


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    ids: list[int]

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if np.isnan(self.rows).any():
            raise InputError("feature matrix contains NaN")
        if len(set(self.ids)) != len(self.ids):
            raise InputError("feature ids must be unique")
        if len(self.ids) != len(self.rows):
            raise InputError(f"{len(self.ids)} ids for {len(self.rows)} feature rows")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class FewShotTask:
    n_way: int
    k_shot: int
    seed: int
    shot_ids: dict[int, list[int]]
    neighborhood_ids: list[int] = field(default_factory=list)
    test_ids: list[int] = field(default_factory=list)
    selection: str = "active"
    config: dict = field(default_factory=dict)

    @property
    def all_shot_ids(self) -> list[int]:
        return [i for c in sorted(self.shot_ids) for i in self.shot_ids[c]]

    def validate(self) -> None:
        for c, ids in self.shot_ids.items():
            if len(ids) != self.k_shot:
                raise InputError(f"class {c} has {len(ids)} shots, expected {self.k_shot}")
        if set(self.all_shot_ids) & set(self.test_ids):
            raise InputError("shot ids overlap the test split")

    def to_json(self) -> str:
        d = asdict(self)
        d["shot_ids"] = {str(k): v for k, v in sorted(self.shot_ids.items())}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FewShotTask":
        d = json.loads(text)
        d["shot_ids"] = {int(k): [int(i) for i in v] for k, v in d["shot_ids"].items()}
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "FewShotTask":
        p = Path(path)
        if not p.exists():
            raise InputError(f"task file not found: {p}")
        return cls.from_json(p.read_text())


# ----------------------------------------------------------------------
# features and clustering


def extract_features(model, images, ids: Sequence[int] | None = None,
                     batch_size: int = 64) -> FeatureMatrix:
    """Final-layer class-token embeddings from the vanilla forward pass."""
    images = np.asarray(images)
    rows = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            seq = model.forward_vanilla(images[start:start + batch_size])
            rows.append(seq.cls.data)
    ids = list(range(len(images))) if ids is None else list(ids)
    feats = np.concatenate(rows) if rows else np.zeros((0, model.config.embed_dim))
    return FeatureMatrix(feats, ids)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


@dataclass
class KMeansResult:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    inertia_trace: list[float]


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[centers]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a center; take the first unused index
            nxt = next(i for i in range(n) if i not in centers)
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[centers].copy()


def _repair_empty(x: np.ndarray, assign: np.ndarray, centroids: np.ndarray, k: int) -> None:
    for j in range(k):
        if (assign == j).any():
            continue
        counts = np.bincount(assign, minlength=k)
        big = int(np.argmax(counts))
        members = np.flatnonzero(assign == big)
        far = members[int(np.argmax(((x[members] - centroids[big]) ** 2).sum(axis=1)))]
        assign[far] = j
        centroids[j] = x[far]
        centroids[big] = x[assign == big].mean(axis=0)


def kmeans(features, k: int, seed: int = 0, max_iter: int = MAX_KMEANS_ITER) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding (Euclidean).

    Stops when assignments no longer change or after ``max_iter`` rounds.  A
    cluster that goes empty takes the point of the largest cluster farthest
    from that cluster's centroid.
    """
    x = np.asarray(getattr(features, "rows", features), dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise InputError(f"k-means with k={k} needs 1 <= k <= {n} points")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, k, rng)
    assign = np.argmin(_sq_dists(x, centroids), axis=1)
    _repair_empty(x, assign, centroids, k)
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        centroids = np.stack([x[assign == j].mean(axis=0) for j in range(k)])
        trace.append(float(_sq_dists(x, centroids)[np.arange(n), assign].sum()))
        d = _sq_dists(x, centroids)
        new = np.argmin(d, axis=1)
        # keep the current cluster on exact ties so the loop cannot cycle
        keep = d[np.arange(n), assign] <= d[np.arange(n), new]
        new[keep] = assign[keep]
        _repair_empty(x, new, centroids, k)
        if np.array_equal(new, assign):
            break
        assign = new
    inertia = float(_sq_dists(x, centroids)[np.arange(n), assign].sum())
    return KMeansResult(assign, centroids, inertia, it, trace)


def medoid(points: np.ndarray, ids: Sequence[int]) -> int:
    """Member minimizing summed Euclidean distance to the others; ties -> lower id."""
    points = np.asarray(points, dtype=np.float64)
    diff = points[:, None, :] - points[None, :, :]
    totals = np.sqrt((diff ** 2).sum(axis=-1)).sum(axis=1)
    ids = np.asarray(ids)
    order = np.lexsort((ids, totals))
    return int(ids[order[0]])


def select_representatives(features, assignment, k: int) -> list[int]:
    """One medoid id per cluster ``0..k-1``."""
    assignment = np.asarray(assignment)
    out = []
    for j in range(k):
        members = np.flatnonzero(assignment == j)
        if members.size == 0:
            raise MGViTError(f"cluster {j} is empty")
        out.append(medoid(features.rows[members], [features.ids[i] for i in members]))
    return out


def select_shots(records, model, k_shot: int, seed: int, labels=None) -> dict[int, list[int]]:
    """Per class: k-means (k = k_shot) on class-token features, then one medoid per cluster."""
    by_class = _group(records, labels)
    out = {}
    for c, recs in by_class.items():
        if len(recs) < k_shot:
            raise InputError(f"class {c} has {len(recs)} samples, fewer than k_shot={k_shot}")
        feats = extract_features(model, np.stack([r.image for r in recs]), [r.id for r in recs])
        km = kmeans(feats, k_shot, seed=seed)
        out[c] = sorted(select_representatives(feats, km.assignment, k_shot))
    return out


def random_shots(records, k_shot: int, seed: int, labels=None) -> dict[int, list[int]]:
    """Uniform random baseline: k_shot ids per class drawn with ``seed``."""
    rng = np.random.default_rng(seed)
    out = {}
    for c, recs in _group(records, labels).items():
        if len(recs) < k_shot:
            raise InputError(f"class {c} has {len(recs)} samples, fewer than k_shot={k_shot}")
        pick = rng.choice(len(recs), size=k_shot, replace=False)
        out[c] = sorted(recs[i].id for i in pick)
    return out


def _group(records, labels=None) -> dict[int, list]:
    groups: dict[int, list] = {}
    for r in records:
        if labels is None or r.label in labels:
            groups.setdefault(int(r.label), []).append(r)
    return dict(sorted(groups.items()))


# ----------------------------------------------------------------------
# neighborhood mining


def per_sample_loss(model, images, labels, smoothing: float = 0.0,
                    batch_size: int = 128) -> np.ndarray:
    """Cross-entropy of each sample under the model's current flow (unmasked)."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            logits = model.logits(images[sl])
            out.append(cross_entropy(logits, labels[sl], smoothing, reduction="none").data)
    return np.concatenate(out) if out else np.zeros(0)


def neighborhood_similarity(model, image, label, smoothing: float = 0.0) -> float:
    """Negative loss of one base sample under the current model (higher = closer)."""
    return -float(per_sample_loss(model, np.asarray(image)[None], [label], smoothing)[0])


def top_similar(similarity: np.ndarray, ids: Sequence[int], size: int) -> list[int]:
    """Ids of the ``size`` highest similarities; ties -> lower id."""
    ids = np.asarray(ids)
    if not 1 <= size <= len(ids):
        raise InputError(f"neighborhood size must lie in [1, {len(ids)}], got {size}")
    order = np.lexsort((ids, -np.asarray(similarity)))
    return [int(i) for i in ids[order[:size]]]


def select_neighborhood(model, base_records, size: int, smoothing: float = 0.0,
                        loss_fn=None) -> tuple[list[int], np.ndarray]:
    """Base ids with the highest similarity (lowest loss), plus the similarity of every base sample.

    ``loss_fn(model, records) -> per-sample losses`` overrides the
    classification loss (used for detection).
    """
    if loss_fn is None:
        losses = per_sample_loss(model, np.stack([r.image for r in base_records]),
                                 [r.label for r in base_records], smoothing)
    else:
        losses = loss_fn(model, base_records)
    sim = -np.asarray(losses)
    return top_similar(sim, [r.id for r in base_records], size), sim
