import struct

import numpy as np
import pytest

from mgvit.data import (NOVEL_ID_OFFSET, RASTER_MAGIC, SampleRecord, SyntheticSpec,
                        generate_classification, generate_detection, load_dataset, load_meta,
                        motif, read_raster, render_detection, sample_rng, SHAPES, save_dataset,
                        spec_from_pairs, split_base_novel, write_raster)
from mgvit.errors import FormatError, InputError

SMALL = SyntheticSpec(base_samples_per_class=6, novel_samples_per_class=3, seed=3)


def test_spec_validation():
    with pytest.raises(InputError):
        SyntheticSpec(image_height=30)
    with pytest.raises(InputError):
        SyntheticSpec(region_patches=9)
    with pytest.raises(InputError):
        SyntheticSpec(num_base_classes=6, num_novel_classes=5)
    with pytest.raises(InputError):
        SyntheticSpec(noise_sigma=-1)
    with pytest.raises(InputError):
        motif("hexagon", 4)


def test_spec_from_pairs():
    s = spec_from_pairs({"noise_sigma": "0.2", "novel_object_size": "3,5", "distractors": "0"}, seed=9)
    assert (s.noise_sigma, s.novel_object_size, s.distractors, s.seed) == (0.2, (3, 5), 0, 9)
    with pytest.raises(InputError):
        spec_from_pairs({"colour": "red"})
    with pytest.raises(InputError):
        spec_from_pairs({"distractors": "two"})


def test_generation_deterministic_and_labelled():
    a, b = generate_classification(SMALL), generate_classification(SMALL)
    assert a == b
    base, novel = a
    assert len(base) == 24 and len(novel) == 12
    assert {r.label for r in base}.isdisjoint({r.label for r in novel})
    assert [r.id for r in novel][:2] == [NOVEL_ID_OFFSET, NOVEL_ID_OFFSET + 1]
    assert all(r.image.min() >= 0 and r.image.max() <= 1 for r in base + novel)
    assert all(np.array_equal(r.image, r.image.astype(np.float32)) for r in base)
    other = generate_classification(SyntheticSpec(base_samples_per_class=6, novel_samples_per_class=3, seed=4))
    assert not np.array_equal(other[0][0].image, base[0].image)


def test_noise_free_motif_is_only_content():
    spec = SyntheticSpec(base_samples_per_class=3, novel_samples_per_class=1, noise_sigma=0.0,
                         distractors=0)
    base, _ = generate_classification(spec)
    p, gw = spec.patch_size, spec.grid[1]
    for r in base:
        changed = np.abs(r.image - 0.5).max(axis=0) > 0
        cells = {(y // p) * gw + x // p for y, x in zip(*np.nonzero(changed))}
        assert cells and cells <= set(r.patches)
        assert len(r.patches) == spec.region_patches ** 2


def test_motif_pixels_inside_ground_truth():
    spec = SyntheticSpec(base_samples_per_class=5, novel_samples_per_class=5, seed=1)
    base, novel = generate_classification(spec)
    p, gw = spec.patch_size, spec.grid[1]
    for r in base + novel:
        r0, c0 = divmod(min(r.patches), gw)
        pat = motif(SHAPES[r.label], spec.region_patches * p)
        ys, xs = np.nonzero(pat)
        assert all(((r0 * p + y) // p) * gw + (c0 * p + x) // p in r.patches for y, x in zip(ys, xs))


def test_probe_on_ground_truth_patches():
    spec = SyntheticSpec(base_samples_per_class=150, novel_samples_per_class=1, seed=0)
    base, _ = generate_classification(spec)
    p, gw, s = spec.patch_size, spec.grid[1], spec.region_patches * spec.patch_size

    def feat(r):
        r0, c0 = divmod(min(r.patches), gw)
        crop = r.image[:, r0 * p:r0 * p + s, c0 * p:c0 * p + s]
        # motif colours are drawn per sample, so the probe reads the foreground map
        return np.concatenate([np.abs(crop - 0.5).sum(axis=0).ravel(), [1.0]])

    x = np.array([feat(r) for r in base])
    y = np.array([r.label for r in base])
    order = np.random.default_rng(0).permutation(len(x))
    tr, te = order[:450], order[450:]
    w = np.linalg.solve(x[tr].T @ x[tr] + np.eye(x.shape[1]), x[tr].T @ np.eye(4)[y[tr]])
    assert (np.argmax(x[te] @ w, axis=1) == y[te]).mean() > 0.95


def test_detection_boxes_match_pixels():
    spec = SyntheticSpec(base_samples_per_class=20, novel_samples_per_class=20, noise_sigma=0.0,
                         distractors=0, seed=2)
    base, novel = generate_detection(spec)
    for r in base + novel:
        assert 1 <= len(r.boxes) <= 4 and r.box_labels == [0] * len(r.boxes)
        fg = np.abs(r.image - 0.5).max(axis=0) > 0
        seen = np.zeros_like(fg)
        for x0, y0, x1, y1 in r.boxes:
            assert 0 <= x0 < x1 <= 32 and 0 <= y0 < y1 <= 32
            sub = fg[int(y0):int(y1), int(x0):int(x1)]
            ys, xs = np.nonzero(sub)
            assert (ys.min(), xs.min(), ys.max() + 1, xs.max() + 1) == (0, 0, y1 - y0, x1 - x0)
            seen[int(y0):int(y1), int(x0):int(x1)] = True
        assert not (fg & ~seen).any()


def test_detection_single_and_zero_instances():
    spec = SyntheticSpec(noise_sigma=0.0, distractors=0)
    img, boxes = render_detection(spec, sample_rng(0, 9, 0), novel=False, count=1)
    (x0, y0, x1, y1), = boxes
    ys, xs = np.nonzero(np.abs(img - 0.5).max(axis=0) > 0)
    assert [xs.min(), ys.min(), xs.max() + 1, ys.max() + 1] == [x0, y0, x1, y1]
    img, boxes = render_detection(spec, sample_rng(0, 9, 1), novel=False, count=0)
    assert boxes == [] and np.all(img == 0.5)
    base, _ = generate_detection(SyntheticSpec(min_instances=0, max_instances=0,
                                               base_samples_per_class=2, novel_samples_per_class=1))
    assert all(r.boxes == [] and r.patches == [] for r in base)


def test_splits():
    recs = [SampleRecord(i, np.zeros((1, 1, 1)), 0) for i in range(100)]
    tr, te = split_base_novel(recs, (0.75, 0.25), seed=0)
    assert (len(tr), len(te)) == (75, 25)
    assert {r.id for r in tr} | {r.id for r in te} == set(range(100))
    assert split_base_novel(recs, (0.75, 0.25), seed=0) == [tr, te]
    assert [len(p) for p in split_base_novel(recs, (0.64, 0.16, 0.2), seed=1)] == [64, 16, 20]
    assert split_base_novel(recs, (1.0,), seed=0)[0] == [recs[i] for i in np.random.default_rng(0).permutation(100)]
    rest, = split_base_novel(recs, (1.0,), seed=0, exclude_ids=[3, 4])
    assert len(rest) == 98 and {3, 4}.isdisjoint(r.id for r in rest)
    with pytest.raises(InputError):
        split_base_novel(recs, (0.5, 0.4), seed=0)


def test_dataset_round_trip(tmp_path):
    base, _ = generate_detection(SyntheticSpec(base_samples_per_class=4, novel_samples_per_class=1))
    cls, _ = generate_classification(SMALL)
    for name, recs in (("det", base), ("cls", cls)):
        save_dataset(tmp_path / name, recs, {"seed": 3})
        assert load_dataset(tmp_path / name) == recs
        assert load_meta(tmp_path / name) == {"seed": 3}


def test_empty_dataset(tmp_path):
    save_dataset(tmp_path / "e", [])
    assert (tmp_path / "e" / "manifest.jsonl").read_text() == ""
    assert load_dataset(tmp_path / "e") == []
    with pytest.raises(InputError):
        load_dataset(tmp_path / "missing")


def test_raster_format(tmp_path):
    img = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 24
    write_raster(tmp_path / "a.mgim", img)
    raw = (tmp_path / "a.mgim").read_bytes()
    assert raw[:4] == RASTER_MAGIC and struct.unpack("<HHH", raw[4:10]) == (2, 3, 4)
    assert len(raw) == 10 + 4 * 24
    np.testing.assert_array_equal(read_raster(tmp_path / "a.mgim"), img.astype(np.float32))
    (tmp_path / "b.mgim").write_bytes(b"MGIX" + raw[4:])
    with pytest.raises(FormatError) as info:
        read_raster(tmp_path / "b.mgim")
    assert info.value.offset == 0
    (tmp_path / "c.mgim").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_raster(tmp_path / "c.mgim")


def test_bad_manifest_offset(tmp_path):
    save_dataset(tmp_path / "d", generate_classification(SMALL)[1][:2])
    m = tmp_path / "d" / "manifest.jsonl"
    first = m.read_text().splitlines()[0]
    m.write_text(first + "\n{oops\n")
    with pytest.raises(FormatError) as info:
        load_dataset(tmp_path / "d")
    assert info.value.offset == len(first) + 2
