"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[ACCEPT n] PASS|FAIL ...`` line (visible with or without ``-s``)
and then asserts, so the summary and the pytest verdict always agree.
"""
import math
import time

import numpy as np
import pytest

from xvpr.cli import main
from xvpr.events import GeoTag, SampleRecord, haversine, make_splits, read_manifest
from xvpr.evaluation import RECALL_NS, RecallTable, evaluate, recall_at_n
from xvpr.fusion import cbp_raw, count_sketch, make_sketch
from xvpr.frames import distance_surface
from xvpr.gradcheck import GRADCHECK_TOLERANCE, layer_checks
from xvpr.model import CrossModalNet, ModelConfig
from xvpr.retrieval import Candidate, QueryResult, build_db
from xvpr.synth import synth_generate
from xvpr.training import TrainConfig, cls_loss, train, triplet_loss

from conftest import brute_force_distance, direct_circular_conv

TABLES = []  # every RecallTable produced by this module, re-checked by criterion 8


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[ACCEPT {n:2d}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def test_c01_gradient_integrity(capsys):
    t0 = time.perf_counter()
    checks = layer_checks(seed=0, epsilon=1e-5)
    dt = time.perf_counter() - t0
    worst = max(checks, key=lambda c: c[1])
    names = {n for n, _ in checks}
    ok = (worst[1] < GRADCHECK_TOLERANCE and dt < 120 and
          names == {"conv2d", "linear", "netvlad", "count_sketch_fft_fusion", "classifier",
                    "triplet_loss", "cls_loss", "total_loss"})
    verdict(capsys, 1, ok, f"gradcheck worst {worst[0]}={worst[1]:.2e} (< 1e-4) in {dt:.1f}s (< 120s)")


def test_c02_distance_surface_exact(capsys):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    exact = 0
    for k in range(100):
        mask = rng.random((48, 64)) < rng.choice([0.002, 0.01, 0.05, 0.2])
        mask[rng.integers(48), rng.integers(64)] = True
        d_max = float(np.hypot(48, 64))  # no clipping, compare raw distances
        exact += np.array_equal(distance_surface(mask, d_max), brute_force_distance(mask))
    dt = time.perf_counter() - t0
    verdict(capsys, 2, exact == 100 and dt < 30, f"{exact}/100 masks exactly equal in {dt:.1f}s (< 30s)")


def test_c03_sketch_kernel_property(capsys):
    t0 = time.perf_counter()
    n, pairs = 64, 200
    rng = np.random.default_rng(0)
    x, xp = rng.normal(size=n), rng.normal(size=n)
    y, yp = x + 0.5 * rng.normal(size=n), xp + 0.5 * rng.normal(size=n)
    exact = (x @ y) * (xp @ yp)

    def estimates(m):
        out = []
        for s in range(pairs):
            pu, pv = make_sketch(n, m, 10_000 + 2 * s), make_sketch(n, m, 10_001 + 2 * s)
            out.append(cbp_raw(x, xp, pu, pv).data @ cbp_raw(y, yp, pu, pv).data)
        return np.array(out)

    big, small = estimates(1024), estimates(64)
    rel = abs(big.mean() - exact) / abs(exact)
    dt = time.perf_counter() - t0
    ok = rel < 0.05 and big.var() < small.var() and dt < 60
    verdict(capsys, 3, ok, f"rel err of mean {rel:.4f} (< 0.05); var m=1024 {big.var():.3g} "
                           f"< m=64 {small.var():.3g}; {dt:.1f}s (< 60s)")


def test_c04_fft_fusion_matches_direct(capsys):
    rng = np.random.default_rng(4)
    worst, cases = 0.0, 0
    for m in (1, 2, 4, 8, 16, 32, 64):
        for trial in range(20):
            n = int(rng.integers(1, 40))
            pu, pv = make_sketch(n, m, 2 * trial), make_sketch(n, m, 2 * trial + 1)
            u, v = rng.normal(size=n), rng.normal(size=n)
            direct = direct_circular_conv(count_sketch(u, pu).data, count_sketch(v, pv).data)
            worst = max(worst, float(np.abs(cbp_raw(u, v, pu, pv).data - direct).max()))
            cases += 1
    verdict(capsys, 4, worst <= 1e-9, f"{cases} cases, m in 1..64, max abs diff {worst:.2e} (<= 1e-9)")


def test_c05_loss_anchors(capsys):
    f = np.array([[0.3, -0.2, 0.9]])
    tie = triplet_loss(f, f + 0.1, f + 0.1).data.item()
    cls = cls_loss(np.array([0.5]), np.array([0.5])).data.item()
    ok = float(tie) == 0.1 and abs(float(cls) - 2 * math.log(2)) <= 1e-9
    verdict(capsys, 5, ok, f"triplet tie = {float(tie)!r} (== 0.1); cls(0.5,0.5) = {float(cls)!r} "
                           f"(2 ln 2 +- 1e-9)")


def test_c06_self_retrieval(capsys, tmp_path):
    recs = synth_generate(tmp_path, seed=6, places=250, scenarios=("daytime", "night"))
    images = [r for r in recs if r.modality == "image"]
    model = CrossModalNet(ModelConfig())
    t0 = time.perf_counter()
    db = build_db(images, tmp_path / "manifest.csv", model)
    table = evaluate(db, images, tmp_path / "manifest.csv", model, "retrieval")
    dt = time.perf_counter() - t0
    TABLES.append(table)
    r1 = [table[(s, 1)] for s in table.scenarios]
    ok = len(db) == 500 and all(v == 1.0 for v in r1) and dt < 60
    verdict(capsys, 6, ok, f"{len(db)} entries, R@1 per scenario {r1} (== 1.00) in {dt:.1f}s (< 60s)")


def test_c07_synthetic_cross_modal_learning(capsys, tmp_path):
    """A 900-place route under two lightings, split along the route into 600/100/200 places.

    The 200 test places are the benchmark: their daytime images form the database and their
    event frames are the queries. Training and validation places are geographically disjoint.
    """
    recs = synth_generate(tmp_path, seed=42, places=900, scenarios=("daytime", "sunset"))
    recs = make_splits(recs, (6 / 9, 1 / 9, 2 / 9))
    manifest = tmp_path / "manifest.csv"
    tc = TrainConfig(epochs=20, lr=0.05, batch=8, seed=42)
    t0 = time.perf_counter()
    model, _ = train(recs, manifest, tc, ModelConfig(seed=42))
    dt = time.perf_counter() - t0
    test = [r for r in recs if r.split == "test"]
    db = build_db([r for r in test if r.modality == "image" and r.scenario == "daytime"], manifest, model)
    queries = [r for r in test if r.modality == "event"]
    retr = evaluate(db, queries, manifest, model, "retrieval")
    hyb = evaluate(db, queries, manifest, model, "hybrid")
    TABLES.extend([retr, hyb])
    r, h = retr[("daytime", 1)], hyb[("daytime", 1)]
    ok = len(db) == 200 and tc.epochs <= 20 and r >= 0.5 and h >= r and dt < 900
    verdict(capsys, 7, ok, f"200 daytime event queries vs {len(db)} images: retrieval R@1 {r:.3f} "
                           f"(>= 0.5, random {1 / len(db):.3f}), hybrid R@1 {h:.3f} (>= retrieval); "
                           f"sunset queries {retr[('sunset', 1)]:.3f} -> {hyb[('sunset', 1)]:.3f}; "
                           f"train {dt:.0f}s (< 900s)")


def test_c09_determinism(capsys, tmp_path):
    tiny = ["--seed", "3", "--set", "backbone_channels=4,8,8", "--set", "K=4", "--set", "D=8",
            "--set", "cls_dim=8", "--set", "cbp_dim=32", "--set", "hidden=16,8", "--set", "epochs=2"]
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        m = str(d / "manifest.csv")
        steps = [
            ["synth", "--out", str(d), "--places", "30", "--scenarios", "daytime,night"],
            ["split", "--manifest", m, "--fractions", "0.6,0.2,0.2"],
            ["train", "--manifest", m, "--out", str(d / "model.xvpr")],
            ["build-db", "--manifest", m, "--checkpoint", str(d / "model.xvpr"), "--out", str(d / "db.xvdb")],
            ["eval", "--db", str(d / "db.xvdb"), "--manifest", m, "--checkpoint", str(d / "model.xvpr"),
             "--split", "test", "--out", str(d / "table.csv")],
        ]
        codes = [main(tiny + s) for s in steps]
        assert codes == [0] * 5, codes
        outputs.append({n: (d / n).read_bytes()
                        for n in ("manifest.csv", "model.xvpr", "model.loss.csv", "db.xvdb", "table.csv")})
    from xvpr.evaluation import parse_report_csv
    TABLES.append(parse_report_csv(outputs[0]["table.csv"].decode()))
    same = [n for n in outputs[0] if outputs[0][n] == outputs[1][n]]
    verdict(capsys, 9, len(same) == 5, f"byte-identical across two runs: {', '.join(same)}")


def test_c10_split_hygiene(capsys):
    rng = np.random.default_rng(10)
    failures, checked, dropped = 0, 0, 0
    for trial in range(20):
        # out-and-back route: the return leg weaves 30-60 m beside the outbound one, so part of
        # it sits inside the buffer and a plain index cut would leak places across splits
        x = np.concatenate([np.arange(450) * 10.0, 4490.0 - np.arange(150) * 10.0])
        y = rng.normal(scale=3.0, size=600)
        y[450:] += 45.0 + 15.0 * np.sin(np.arange(150) / 7.0 + rng.uniform(0, 2 * np.pi))
        xy = np.stack([x, y], axis=1)
        lat = -27.47 + xy[:, 1] / 111_195.0
        lon = 153.02 + xy[:, 0] / (111_195.0 * math.cos(math.radians(27.47)))
        recs = [SampleRecord(f"s{i:04d}", "image", "x", GeoTag(float(a), float(b)))
                for i, (a, b) in enumerate(zip(lat, lon))]
        tagged = make_splits(recs, (0.7, 0.15, 0.15), buffer_m=35.0)
        dropped += len(recs) - len(tagged)
        by = {s: [r.geotag for r in tagged if r.split == s] for s in ("train", "val", "test")}
        for s, t in (("train", "val"), ("train", "test"), ("val", "test")):
            for g in by[s]:
                d = haversine(g.latitude, g.longitude, np.array([h.latitude for h in by[t]]),
                              np.array([h.longitude for h in by[t]]))
                failures += int(np.any(d < 35.0))
                checked += len(by[t])
    verdict(capsys, 10, failures == 0 and dropped > 0,
            f"{checked} cross-split pairs over 20 tracks, {failures} within 35 m "
            f"({dropped} records dropped by the buffer)")


def test_c08_recall_monotonicity(capsys):
    rng = np.random.default_rng(8)
    tags = {f"p{i}": GeoTag(-27 + i * 2e-4, 153.0) for i in range(400)}
    for k in range(50):
        qtags = {f"q{i}": tags[f"p{rng.integers(400)}"] for i in range(60)}
        res = [QueryResult(q, tuple(Candidate(f"p{j}", 0.0) for j in rng.permutation(400)[:30]))
               for q in qtags]
        TABLES.append(recall_at_n(res, tags, qtags))
    bad = [t for t in TABLES if not t.is_monotone() or tuple(t.ns) != tuple(RECALL_NS)]
    verdict(capsys, 8, not bad, f"{len(TABLES)} tables non-decreasing over N={list(RECALL_NS)}; "
                                f"{len(bad)} violations")
