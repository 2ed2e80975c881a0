"""Synthetic few-shot benchmarks with known signal regions, and their on-disk format.

Classification images are a noisy gray background, a few class-agnostic
distractor blobs, and one class motif drawn at a random patch-aligned
location.  The motif's patch set is the ground-truth signal region.

Detection images contain 1-4 instances of a single motif ("object") at
arbitrary pixel positions; the novel split shifts the motif color and
scale to imitate a change of season.

On disk a dataset is a directory holding ``manifest.jsonl`` (one JSON record
per sample) and one ``.mgim`` raster per sample: magic ``b"MGIM"``, then C, H,
W as little-endian u16, then C*H*W little-endian f32 values in row-major order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InputError

RASTER_MAGIC = b"MGIM"
RASTER_HEADER = struct.Struct("<4sHHH")
NOVEL_ID_OFFSET = 100_000

SHAPES = ("square", "ring", "plus", "cross", "hstripes", "vstripes", "checker", "disc",
          "triangle", "corner")

PALETTE = np.array([
    [0.95, 0.20, 0.20],
    [0.20, 0.85, 0.25],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.15, 0.85, 0.85],
])


@dataclass
class SampleRecord:
    id: int
    image: np.ndarray
    label: int
    patches: list[int] = field(default_factory=list)
    boxes: list[list[float]] | None = None
    box_labels: list[int] | None = None

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and self.patches == other.patches and self.boxes == other.boxes
                and self.box_labels == other.box_labels
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image))


@dataclass(frozen=True)
class SyntheticSpec:
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    patch_size: int = 4
    num_base_classes: int = 4
    num_novel_classes: int = 4
    region_patches: int = 2
    noise_sigma: float = 0.1
    distractors: int = 2
    base_samples_per_class: int = 200
    novel_samples_per_class: int = 40
    seed: int = 0
    # detection only
    max_instances: int = 4
    min_instances: int = 1
    base_object_size: tuple[int, int] = (6, 10)
    novel_object_size: tuple[int, int] = (5, 9)

    def __post_init__(self):
        gh, gw = self.grid
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise InputError("image size must be a multiple of the patch size")
        if not 1 <= self.region_patches <= min(gh, gw):
            raise InputError(f"signal region of {self.region_patches} patches "
                             f"does not fit a {gh}x{gw} grid")
        if self.num_base_classes + self.num_novel_classes > len(SHAPES):
            raise InputError(f"at most {len(SHAPES)} classes are available")
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be >= 0")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def base_labels(self) -> list[int]:
        return list(range(self.num_base_classes))

    @property
    def novel_labels(self) -> list[int]:
        nb = self.num_base_classes
        return list(range(nb, nb + self.num_novel_classes))


def motif(shape: str, size: int) -> np.ndarray:
    """Binary ``size x size`` pattern for a named shape."""
    r = (np.arange(size) + 0.5) / size
    y, x = np.meshgrid(r, r, indexing="ij")
    if shape == "square":
        m = (np.abs(x - 0.5) < 0.35) & (np.abs(y - 0.5) < 0.35)
    elif shape == "ring":
        d = np.maximum(np.abs(x - 0.5), np.abs(y - 0.5))
        m = (d < 0.45) & (d > 0.25)
    elif shape == "plus":
        m = (np.abs(x - 0.5) < 0.15) | (np.abs(y - 0.5) < 0.15)
    elif shape == "cross":
        m = (np.abs(x - y) < 0.15) | (np.abs(x + y - 1) < 0.15)
    elif shape == "hstripes":
        m = (np.floor(y * 4) % 2) == 0
    elif shape == "vstripes":
        m = (np.floor(x * 4) % 2) == 0
    elif shape == "checker":
        m = ((np.floor(x * 2) + np.floor(y * 2)) % 2) == 0
    elif shape == "disc":
        m = (x - 0.5) ** 2 + (y - 0.5) ** 2 < 0.42 ** 2
    elif shape == "triangle":
        m = y > np.abs(x - 0.5) * 2 - 0.05
    elif shape == "corner":
        m = (x < 0.35) | (y > 0.65)
    else:
        raise InputError(f"unknown motif shape {shape!r}")
    return m.astype(bool)


def sample_rng(seed: int, split: int, index: int) -> np.random.Generator:
    """Per-sample generator derived from (global seed, split, sample index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, split, index]))


def _background(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    shape = (spec.channels, spec.image_height, spec.image_width)
    img = np.full(shape, 0.5)
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, shape)
    return img


def _paint(img: np.ndarray, pattern: np.ndarray, top: int, left: int, color) -> None:
    h, w = pattern.shape
    region = img[:, top:top + h, left:left + w]
    col = np.asarray(color, dtype=np.float64)[: img.shape[0], None]
    region[:, pattern] = col


def _finish(img: np.ndarray) -> np.ndarray:
    # f32-representable values so the on-disk round trip is exact
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)


def _region_patches(spec: SyntheticSpec, prow: int, pcol: int, size: int) -> list[int]:
    gw = spec.grid[1]
    return sorted((prow + i) * gw + pcol + j for i in range(size) for j in range(size))


def render_classification(spec: SyntheticSpec, label: int, rng: np.random.Generator):
    """One image of class ``label``; returns (image, ground-truth patch list)."""
    gh, gw = spec.grid
    p, rp = spec.patch_size, spec.region_patches
    img = _background(spec, rng)
    prow = int(rng.integers(0, gh - rp + 1))
    pcol = int(rng.integers(0, gw - rp + 1))
    taken = set(_region_patches(spec, prow, pcol, rp))
    # distractors: random-noise blobs of one patch, never touching the motif
    free = [i for i in range(gh * gw) if i not in taken]
    for cell in rng.choice(free, size=min(spec.distractors, len(free)), replace=False):
        r, c = divmod(int(cell), gw)
        blob = rng.random((p, p)) < 0.5
        _paint(img, blob, r * p, c * p, PALETTE[rng.integers(len(PALETTE))])
    pattern = motif(SHAPES[label], rp * p)
    _paint(img, pattern, prow * p, pcol * p, PALETTE[rng.integers(len(PALETTE))])
    return _finish(img), sorted(taken)


def generate_classification(spec: SyntheticSpec) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Base and novel splits.  Labels are global: base ``0..nb-1``, novel ``nb..nb+nn-1``."""
    base, novel = [], []
    idx = 0
    for label in spec.base_labels:
        for _ in range(spec.base_samples_per_class):
            img, patches = render_classification(spec, label, sample_rng(spec.seed, 0, idx))
            base.append(SampleRecord(idx, img, label, patches))
            idx += 1
    idx = 0
    for label in spec.novel_labels:
        for _ in range(spec.novel_samples_per_class):
            img, patches = render_classification(spec, label, sample_rng(spec.seed, 1, idx))
            novel.append(SampleRecord(NOVEL_ID_OFFSET + idx, img, label, patches))
            idx += 1
    return base, novel


def _covered_patches(spec: SyntheticSpec, boxes) -> list[int]:
    p, gw = spec.patch_size, spec.grid[1]
    cells = set()
    for x0, y0, x1, y1 in boxes:
        for r in range(int(y0) // p, (int(np.ceil(y1)) - 1) // p + 1):
            for c in range(int(x0) // p, (int(np.ceil(x1)) - 1) // p + 1):
                cells.add(r * gw + c)
    return sorted(cells)


def render_detection(spec: SyntheticSpec, rng: np.random.Generator, novel: bool,
                     count: int | None = None):
    """Image with ``count`` non-overlapping object instances; boxes are pixel (x0, y0, x1, y1)."""
    lo, hi = spec.novel_object_size if novel else spec.base_object_size
    color = np.array([0.85, 0.5, 0.1]) if novel else np.array([0.9, 0.15, 0.15])
    img = _background(spec, rng)
    if count is None:
        count = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    # distractor blobs first so objects paint over them
    p = spec.patch_size
    for _ in range(spec.distractors):
        r = int(rng.integers(0, spec.image_height - p + 1))
        c = int(rng.integers(0, spec.image_width - p + 1))
        _paint(img, rng.random((p, p)) < 0.5, r, c, PALETTE[2 + rng.integers(len(PALETTE) - 2)])
    boxes = []
    for _ in range(count):
        for _attempt in range(100):
            s = int(rng.integers(lo, hi + 1))
            top = int(rng.integers(0, spec.image_height - s + 1))
            left = int(rng.integers(0, spec.image_width - s + 1))
            box = [float(left), float(top), float(left + s), float(top + s)]
            if all(box[2] <= b[0] or b[2] <= box[0] or box[3] <= b[1] or b[3] <= box[1]
                   for b in boxes):
                break
        else:
            continue
        tint = color + rng.normal(0.0, 0.05, 3)
        _paint(img, _tight_disc(s), top, left, tint)
        boxes.append(box)
    return _finish(img), boxes


def _tight_disc(size: int) -> np.ndarray:
    """Disc whose pixel bounding box is exactly ``size x size``."""
    m = motif("disc", size)
    m[0, size // 2] = m[-1, size // 2] = m[size // 2, 0] = m[size // 2, -1] = True
    return m


def generate_detection(spec: SyntheticSpec) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Base and novel detection splits.  All objects share label 0."""
    out = []
    for split, (n, offset) in enumerate(((spec.base_samples_per_class, 0),
                                         (spec.novel_samples_per_class, NOVEL_ID_OFFSET))):
        records = []
        for i in range(n):
            img, boxes = render_detection(spec, sample_rng(spec.seed, 2 + split, i), novel=bool(split))
            records.append(SampleRecord(offset + i, img, 0, _covered_patches(spec, boxes),
                                        boxes, [0] * len(boxes)))
        out.append(records)
    return out[0], out[1]


def split_base_novel(records: Sequence[SampleRecord], fractions: Sequence[float], seed: int,
                     exclude_ids=()) -> list[list[SampleRecord]]:
    """Seeded shuffle then partition by ``fractions`` (the last part takes the remainder).

    Records whose id is in ``exclude_ids`` (e.g. selected few-shot samples) are
    dropped before splitting.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise InputError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    excluded = set(exclude_ids)
    pool = [r for r in records if r.id not in excluded]
    order = np.random.default_rng(seed).permutation(len(pool))
    parts, start = [], 0
    for i, f in enumerate(fractions):
        stop = len(pool) if i == len(fractions) - 1 else start + int(round(f * len(pool)))
        parts.append([pool[j] for j in order[start:stop]])
        start = stop
    return parts


def stack_images(records: Sequence[SampleRecord]) -> np.ndarray:
    return np.stack([r.image for r in records])


def stack_labels(records: Sequence[SampleRecord]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


# ----------------------------------------------------------------------
# on-disk format


def write_raster(path, image: np.ndarray) -> None:
    c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_HEADER.pack(RASTER_MAGIC, c, h, w))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_raster(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != RASTER_MAGIC:
        raise FormatError("bad raster magic", 0, path)
    if len(raw) < RASTER_HEADER.size:
        raise FormatError("truncated raster header", len(raw), path)
    _, c, h, w = RASTER_HEADER.unpack_from(raw)
    expected = RASTER_HEADER.size + 4 * c * h * w
    if len(raw) != expected:
        raise FormatError(f"raster payload should end at byte {expected}",
                          min(len(raw), expected), path)
    data = np.frombuffer(raw, dtype="<f4", offset=RASTER_HEADER.size)
    return data.reshape(c, h, w).astype(np.float64)


def save_dataset(path, records: Sequence[SampleRecord], meta: dict | None = None) -> None:
    """Write ``manifest.jsonl`` plus ``rasters/<id>.mgim`` under ``path``."""
    root = Path(path)
    (root / "rasters").mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        rel = f"rasters/{r.id}.mgim"
        write_raster(root / rel, r.image)
        rec = {"id": r.id, "label": r.label, "patches": list(r.patches), "raster": rel}
        if r.boxes is not None:
            rec["boxes"] = r.boxes
            rec["box_labels"] = r.box_labels
        lines.append(json.dumps(rec))
    (root / "manifest.jsonl").write_text("".join(line + "\n" for line in lines))
    if meta is not None:
        (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_dataset(path) -> list[SampleRecord]:
    root = Path(path)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise InputError(f"no dataset manifest at {manifest}")
    records = []
    offset = 0
    for line in manifest.read_bytes().splitlines(keepends=True):
        if line.strip():
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"bad manifest line: {exc.msg}", offset + exc.pos, manifest)
            records.append(SampleRecord(
                id=int(rec["id"]), image=read_raster(root / rec["raster"]),
                label=int(rec["label"]), patches=[int(i) for i in rec.get("patches", [])],
                boxes=rec.get("boxes"), box_labels=rec.get("box_labels")))
        offset += len(line)
    return records


def load_meta(path) -> dict:
    p = Path(path) / "meta.json"
    return json.loads(p.read_text()) if p.exists() else {}


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)


def spec_from_pairs(pairs: dict[str, str], seed: int | None = None) -> SyntheticSpec:
    """Build a :class:`SyntheticSpec` from string values (tuples as ``"lo,hi"``)."""
    import typing

    hints = typing.get_type_hints(SyntheticSpec)
    values = {}
    for k, raw in pairs.items():
        if k not in hints:
            raise InputError(f"unknown data key {k!r}")
        try:
            if k.endswith("_size") and k.startswith(("base_object", "novel_object")):
                lo, hi = (int(v) for v in str(raw).split(","))
                values[k] = (lo, hi)
            elif hints[k] is float:
                values[k] = float(raw)
            else:
                values[k] = int(raw)
        except ValueError:
            raise InputError(f"cannot parse data.{k} = {raw!r}")
    if seed is not None:
        values["seed"] = seed
    return SyntheticSpec(**values)
