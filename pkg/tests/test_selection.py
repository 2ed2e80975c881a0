import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgvit.data import SampleRecord
from mgvit.errors import InputError
from mgvit.selection import (FeatureMatrix, FewShotTask, extract_features, kmeans, medoid,
                             neighborhood_similarity, per_sample_loss, random_shots,
                             select_neighborhood, select_representatives, select_shots, top_similar)
from mgvit.vit import ViT


def brute_medoid(points, ids):
    best = None
    for i in range(len(points)):
        total = sum(float(np.sqrt(((points[i] - q) ** 2).sum())) for q in points)
        key = (total, ids[i])
        if best is None or key < best[0]:
            best = (key, ids[i])
    return best[1]


def test_feature_matrix_guards():
    with pytest.raises(InputError):
        FeatureMatrix(np.array([[np.nan]]), [0])
    with pytest.raises(InputError):
        FeatureMatrix(np.zeros((2, 1)), [1, 1])
    with pytest.raises(InputError):
        FeatureMatrix(np.zeros((2, 1)), [1])


def test_extract_features(tiny_model):
    img = np.random.default_rng(0).random((3, 8, 8))
    f = extract_features(tiny_model, np.stack([img, img]), [4, 9])
    assert f.dim == 8 and f.ids == [4, 9]
    np.testing.assert_array_equal(f.rows[0], f.rows[1])
    np.testing.assert_array_equal(f.rows[0], tiny_model.forward_vanilla(img).cls.data[0])


def test_kmeans_k_equals_n():
    x = np.random.default_rng(0).standard_normal((6, 3))
    km = kmeans(x, 6, seed=1)
    assert sorted(km.assignment.tolist()) == list(range(6)) and km.inertia == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_separates_blobs(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(0, 0.3, (20, 2)), rng.normal(10, 0.3, (25, 2))])
    a = kmeans(x, 2, seed=seed).assignment
    assert len(set(a[:20])) == 1 and len(set(a[20:])) == 1 and a[0] != a[20]


@pytest.mark.parametrize("seed", range(10))
def test_kmeans_inertia_monotone_and_fixed_point(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((60, 3))
    km = kmeans(x, 5, seed=seed)
    assert all(b <= a + 1e-9 for a, b in zip(km.inertia_trace, km.inertia_trace[1:]))
    d = ((x[:, None] - km.centroids[None]) ** 2).sum(-1)
    assert np.allclose(d[np.arange(60), km.assignment], d.min(axis=1))
    assert np.bincount(km.assignment, minlength=5).min() > 0


def test_kmeans_duplicates_and_errors():
    x = np.zeros((5, 2))
    km = kmeans(x, 3, seed=0)
    assert np.bincount(km.assignment, minlength=3).min() > 0
    with pytest.raises(InputError):
        kmeans(x, 6)
    with pytest.raises(InputError):
        kmeans(x, 0)


def test_kmeans_deterministic():
    x = np.random.default_rng(2).standard_normal((40, 4))
    a, b = kmeans(x, 4, seed=7), kmeans(x, 4, seed=7)
    assert np.array_equal(a.assignment, b.assignment) and np.array_equal(a.centroids, b.centroids)


def test_medoid_examples():
    assert medoid(np.array([[0.0], [1.0], [10.0]]), [0, 1, 2]) == 1
    assert medoid(np.array([[3.0, 1.0]]), [42]) == 42
    assert medoid(np.array([[0.0], [2.0]]), [5, 3]) == 3


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_representatives_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 31))
    k = int(rng.integers(1, min(n, 4) + 1))
    rows = rng.integers(-3, 4, size=(n, 2)).astype(float)  # small grid: plenty of exact ties
    ids = rng.permutation(1000)[:n].tolist()
    assign = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    reps = select_representatives(FeatureMatrix(rows, ids), assign, k)
    for j in range(k):
        members = np.flatnonzero(assign == j)
        assert reps[j] == brute_medoid(rows[members], [ids[i] for i in members])


def test_top_similar():
    assert top_similar(np.array([0.5, 0.9, 0.9, -1.0]), [10, 7, 3, 1], 2) == [3, 7]
    assert top_similar(np.array([1.0, 2.0]), [0, 1], 2) == [1, 0]
    with pytest.raises(InputError):
        top_similar(np.array([1.0]), [0], 2)


def records(n, seed, labels=(0, 1, 2)):
    rng = np.random.default_rng(seed)
    return [SampleRecord(100 + i, rng.random((3, 8, 8)), int(labels[i % len(labels)])) for i in range(n)]


def hand_ce(logits, y):
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[y])


@pytest.mark.parametrize("seed", range(5))
def test_neighborhood_matches_full_sort(seed, tiny_config):
    m = ViT(tiny_config, seed=seed)
    base = records(20, seed)
    losses = [hand_ce(m.logits(r.image).data[0], r.label) for r in base]
    want = [r.id for _, r in sorted(zip(losses, base), key=lambda t: (t[0], t[1].id))][:6]
    ids, sim = select_neighborhood(m, base, 6)
    assert ids == want
    np.testing.assert_allclose(sim, -np.array(losses), atol=1e-12)
    assert select_neighborhood(m, base, 20)[0] == [r.id for r in sorted(base, key=lambda r: -sim[base.index(r)])]
    assert select_neighborhood(m, base, 1)[0] == [base[int(np.argmin(losses))].id]
    with pytest.raises(InputError):
        select_neighborhood(m, base, 21)


def test_similarity_properties(tiny_model):
    r = records(2, 0)[0]
    a = neighborhood_similarity(tiny_model, r.image, r.label)
    assert a == neighborhood_similarity(tiny_model, r.image.copy(), r.label) and a <= 0
    base = records(10, 1)
    before = per_sample_loss(tiny_model, np.stack([x.image for x in base]), [x.label for x in base])
    tiny_model.params["head.b"].data += 3.75
    after = per_sample_loss(tiny_model, np.stack([x.image for x in base]), [x.label for x in base])
    np.testing.assert_allclose(after, before, atol=1e-12)


def test_zero_loss_is_max_similarity(tiny_model):
    tiny_model.params["head.w"].data[:] = 0.0
    tiny_model.params["head.b"].data[:] = [800.0, 0.0, 0.0]
    assert neighborhood_similarity(tiny_model, np.zeros((3, 8, 8)), 0) == 0.0


def planted_class(seed, modes, per_mode, label=5):
    rng = np.random.default_rng(seed)
    out, truth = [], []
    for j in range(modes):
        centre = rng.random((3, 8, 8))
        for _ in range(per_mode):
            out.append(SampleRecord(len(out), np.clip(centre + rng.normal(0, 0.01, centre.shape), 0, 1), label))
            truth.append(j)
    return out, truth


def test_select_shots_trivial_cases(tiny_model):
    recs, _ = planted_class(0, 2, 3)
    assert select_shots(recs, tiny_model, 6, seed=0) == {5: list(range(6))}
    one = select_shots(recs, tiny_model, 1, seed=0)[5][0]
    feats = extract_features(tiny_model, np.stack([r.image for r in recs]))
    assert one == brute_medoid(feats.rows, list(range(6)))
    with pytest.raises(InputError, match="class 5"):
        select_shots(recs, tiny_model, 7, seed=0)


def test_select_shots_one_per_planted_mode(tiny_config):
    hits = 0
    for seed in range(10):
        recs, truth = planted_class(seed, 3, 6)
        shots = select_shots(recs, ViT(tiny_config, seed=seed), 3, seed=seed)[5]
        hits += sorted(truth[i] for i in shots) == [0, 1, 2]
    assert hits >= 9


def test_select_shots_deterministic_and_in_class(tiny_model):
    recs = records(30, 3)
    a = select_shots(recs, tiny_model, 3, seed=4)
    assert a == select_shots(recs, tiny_model, 3, seed=4)
    by_id = {r.id: r.label for r in recs}
    assert all(by_id[i] == c for c, ids in a.items() for i in ids)
    assert select_shots(recs, tiny_model, 3, seed=4, labels=[1]).keys() == {1}


def test_random_shots():
    recs = records(30, 3)
    a = random_shots(recs, 4, seed=1)
    assert a == random_shots(recs, 4, seed=1)
    assert all(len(v) == 4 for v in a.values())


def test_task_json_round_trip(tmp_path):
    t = FewShotTask(2, 2, 7, {3: [1, 2], 1: [5, 6]}, [9, 10], [11, 12], config={"seed": 7})
    t.validate()
    t.save(tmp_path / "task.json")
    back = FewShotTask.load(tmp_path / "task.json")
    assert back == t and back.all_shot_ids == [5, 6, 1, 2]
    with pytest.raises(InputError):
        FewShotTask(1, 2, 0, {0: [1]}).validate()
    with pytest.raises(InputError):
        FewShotTask(1, 1, 0, {0: [1]}, test_ids=[1]).validate()
    with pytest.raises(InputError):
        FewShotTask.load(tmp_path / "missing.json")
