import math

import numpy as np
import pytest

from xvpr.events import DataError, GeoTag, SampleRecord
from xvpr.model import CrossModalNet, ModelConfig
from xvpr.retrieval import (Candidate, FingerprintError, PlaceDatabase, build_db, order_by_score,
                            query, rerank, results_csv, search)

SMALL = ModelConfig(input_width=64, input_height=48, backbone_channels=(4, 8, 8), K=4, D=8,
                    cls_dim=8, cbp_dim=32, hidden=(16, 8))


def random_db(n, dim=6, seed=0, cls_dim=8):
    rng = np.random.default_rng(seed)
    retr = rng.normal(size=(n, dim))
    retr /= np.linalg.norm(retr, axis=1, keepdims=True)
    tags = [GeoTag(-27 + i * 1e-3, 153.0) for i in range(n)]
    return PlaceDatabase([f"img{i:04d}" for i in range(n)], tags, retr, rng.normal(size=(n, cls_dim)),
                         bytes(range(32)))


@pytest.fixture(scope="module")
def model():
    return CrossModalNet(SMALL)


def test_database_round_trip(tmp_path):
    db = random_db(10)
    db.save(tmp_path / "db.xvdb")
    back = PlaceDatabase.load(tmp_path / "db.xvdb")
    assert back.ids == db.ids and back.geotags == [GeoTag(g.latitude, g.longitude) for g in db.geotags]
    assert back.retr.tobytes() == db.retr.tobytes() and back.cls.tobytes() == db.cls.tobytes()
    assert back.fingerprint == db.fingerprint
    assert back.to_bytes() == db.to_bytes()


def test_empty_database_is_valid(tmp_path):
    db = PlaceDatabase([], [], np.zeros((0, 4)), np.zeros((0, 3)))
    db.save(tmp_path / "e.xvdb")
    assert len(PlaceDatabase.load(tmp_path / "e.xvdb")) == 0
    assert search(db, np.zeros(4), 5) == []


def test_corrupt_database(tmp_path):
    blob = random_db(3).to_bytes()
    with pytest.raises(DataError):
        PlaceDatabase.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DataError):
        PlaceDatabase.from_bytes(blob[:-5])


def test_search_self_is_rank_one():
    db = random_db(50)
    (c, *_) = search(db, db.retr[17], 5)
    assert c.sample_id == "img0017" and c.distance == 0.0 and c.rank == 1


def test_search_topn_larger_than_db():
    db = random_db(7)
    res = search(db, db.retr[0], 30)
    assert sorted(c.sample_id for c in res) == sorted(db.ids)
    assert all(a.distance <= b.distance for a, b in zip(res, res[1:]))


def test_search_matches_sort_oracle():
    db = random_db(1000, seed=1)
    q = np.random.default_rng(2).normal(size=6)
    d = [math.sqrt(sum((db.retr[i, j] - q[j]) ** 2 for j in range(6))) for i in range(1000)]
    oracle = sorted(range(1000), key=lambda i: (d[i], i))[:30]
    assert [db.position(c.sample_id) for c in search(db, q, 30)] == oracle


def test_search_is_permutation_prefix():
    db = random_db(100, seed=3)
    res = search(db, np.random.default_rng(4).normal(size=6), 25)
    ids = [c.sample_id for c in res]
    assert len(set(ids)) == 25 and set(ids) <= set(db.ids)


def test_search_rejects_bad_input():
    db = random_db(5)
    with pytest.raises(ValueError):
        search(db, np.zeros(6), 0)
    with pytest.raises(ValueError):
        search(db, np.zeros(5), 3)


def test_single_candidate_rank_one(model):
    db = random_db(5, dim=model.config.K * model.config.D, cls_dim=model.config.cls_dim)
    res = rerank(db, db.cls[0], search(db, db.retr[3], 1), model)
    assert [c.rank for c in res.candidates] == [1]


def test_zero_classifier_falls_back_to_distance_order(model):
    m = model.copy()
    for name, p in m.params.items():
        if name.startswith("mlp."):
            p.data[...] = 0.0
    db = random_db(40, dim=m.config.K * m.config.D, seed=5, cls_dim=m.config.cls_dim)
    cands = search(db, db.retr[2] + 0.1, 20)
    res = rerank(db, db.cls[0], cands, m)
    assert all(c.score == 0.5 for c in res.candidates)
    assert [c.sample_id for c in res.candidates] == [c.sample_id for c in cands]


def test_rerank_order_equals_score_sort(model):
    db = random_db(60, dim=model.config.K * model.config.D, seed=6, cls_dim=model.config.cls_dim)
    cands = search(db, db.retr[9], 20)
    res = rerank(db, db.cls[9], cands, model)
    scores = {c.sample_id: c.score for c in res.candidates}
    dist = {c.sample_id: c.distance for c in cands}
    oracle = sorted(scores, key=lambda i: (-scores[i], dist[i], i))
    assert [c.sample_id for c in res.candidates] == oracle
    assert sorted(scores) == sorted(c.sample_id for c in cands)
    assert [c.rank for c in res.candidates] == list(range(1, 21))


def test_tie_rule_score_then_distance_then_id():
    cands = [Candidate("b", 0.5), Candidate("a", 0.5), Candidate("c", 0.1), Candidate("d", 0.9)]
    res = order_by_score("q", cands, [0.7, 0.7, 0.7, 0.8])
    assert [c.sample_id for c in res.candidates] == ["d", "c", "a", "b"]


def test_fingerprint_mismatch_rejected(model):
    db = random_db(5, dim=model.config.K * model.config.D, cls_dim=model.config.cls_dim)
    with pytest.raises(FingerprintError):
        rerank(db, db.cls[0], search(db, db.retr[0], 3), model, fingerprint=b"\1" * 32)
    with pytest.raises(FingerprintError):
        query(db, np.zeros((1, 48, 64)), model)


def test_build_db_and_query_end_to_end(small_dataset, model, tmp_path):
    path, recs = small_dataset
    images = [r for r in recs if r.modality == "image"][:10]
    db = build_db(images, path, model)
    assert len(db) == 10 and db.fingerprint == model.fingerprint()
    assert np.allclose(np.linalg.norm(db.retr, axis=1), 1.0, atol=1e-6)
    again = build_db(images, path, model)
    assert again.to_bytes() == db.to_bytes()
    from xvpr.imageio import load_sample
    frame = load_sample(path.parent / images[4].path, 3, 64, 48)
    res = query(db, frame, model, top_n=5, query_id="q", modality="image")
    assert images[4].id in [c.sample_id for c in res.candidates]
    assert query(db, frame, model, top_n=5, query_id="q", modality="image") == res
    csv = results_csv([res])
    assert csv.splitlines()[0] == "query_id,rank,candidate_id,distance,score"
    assert len(csv.splitlines()) == 6


def test_build_db_empty_and_unreadable(small_dataset, model):
    path, _ = small_dataset
    assert len(build_db([], path, model)) == 0
    bad = SampleRecord("x", "image", "nope/missing.ppm", GeoTag(0, 0))
    with pytest.raises(DataError, match="missing.ppm"):
        build_db([bad], path, model)
