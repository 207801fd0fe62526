"""Acceptance gate: the six headline guarantees, each timed and reported.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one pass/fail line
per criterion. Every criterion enforces its own runtime budget.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from protodetect import (
    BoundingBox,
    PipelineConfig,
    SimilarityRow,
    SupportSet,
    build_prototype,
    build_store,
    detect,
    evaluate_runs,
    filter_score,
    final_score,
    load_store,
    mean_corrected,
    nms,
    box_iou,
    save_store,
    softmax_max,
    evaluate,
)
from oracles import coco_ap_reference, nms_reference, score_reference
from synth import make_benchmark
from test_evaluation import random_fixture


@contextmanager
def criterion(name: str, limit_s: float):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        elapsed = time.perf_counter() - start
        print(f"\n[FAIL] {name} ({elapsed:.2f}s, limit {limit_s:.0f}s)")
        raise
    elapsed = time.perf_counter() - start
    if elapsed >= limit_s:
        print(f"\n[FAIL] {name} ({elapsed:.2f}s, limit {limit_s:.0f}s): over budget")
        pytest.fail(f"{name} exceeded its {limit_s:.0f}s budget: {elapsed:.2f}s")
    print(f"\n[PASS] {name} ({elapsed:.2f}s, limit {limit_s:.0f}s)")


def test_criterion_1_score_math_oracle():
    with criterion("score math vs high-precision oracle (1000 rows, 1e-9)", 5.0):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            n = int(rng.integers(2, 13))
            scores = rng.uniform(-1.0, 1.0, size=n)
            row = SimilarityRow(class_ids=tuple(range(1, n + 1)), scores=scores)
            s_max = row.s_max
            p_max = softmax_max(row.scores)
            s_mc = mean_corrected(row)
            s_filter = filter_score(s_max, p_max)
            s_final = final_score(s_max, p_max, s_mc)

            ref = score_reference(scores.tolist())
            assert abs(s_max - ref["s_max"]) <= 1e-9
            assert abs(p_max - ref["p_max"]) <= 1e-9
            assert abs(s_filter - ref["s_filter"]) <= 1e-9
            assert abs(s_mc - ref["s_mc"]) <= 1e-9
            assert abs(s_final - ref["s_final"]) <= 1e-9

            assert 1.0 / n <= p_max < 1.0
            assert s_mc >= 0.0
            assert s_final >= s_filter


def test_criterion_2_prototype_invariants(tmp_path):
    with criterion("prototype invariants and store roundtrip", 5.0):
        rng = np.random.default_rng(22)

        for _ in range(200):
            k = int(rng.integers(1, 9))
            embeddings = tuple(rng.normal(size=16) for _ in range(k))
            proto = build_prototype(SupportSet(class_id=1, embeddings=embeddings))
            assert proto.norm <= 1.0 + 1e-12

        for trial in range(50):
            embeddings = [rng.normal(size=12) for _ in range(6)]
            order = rng.permutation(6)
            forward = build_prototype(SupportSet(class_id=1, embeddings=tuple(embeddings)))
            shuffled = build_prototype(
                SupportSet(class_id=1, embeddings=tuple(embeddings[i] for i in order))
            )
            assert np.abs(forward.vector - shuffled.vector).max() <= 1e-12

        supports = [
            SupportSet(class_id=c, embeddings=tuple(rng.normal(size=16) for _ in range(4)))
            for c in range(1, 6)
        ]
        store = build_store(supports, provenance="acceptance")
        before = {c: store[c].vector.tobytes() for c in store.class_ids}
        for c in range(6, 9):
            store.add_support_set(
                SupportSet(class_id=c, embeddings=tuple(rng.normal(size=16) for _ in range(4)))
            )
        after = {c: store[c].vector.tobytes() for c in before}
        assert before == after

        path = tmp_path / "acceptance.dpmp"
        save_store(store, path)
        loaded = load_store(path)
        assert loaded.class_ids == store.class_ids
        for c in store.class_ids:
            assert loaded[c].vector.tobytes() == store[c].vector.tobytes()
            assert loaded[c].k_support == store[c].k_support
        save_store(loaded, path)
        second = load_store(path)
        for c in store.class_ids:
            assert second[c].vector.tobytes() == store[c].vector.tobytes()


def test_criterion_3_nms_oracle_equivalence():
    with criterion("NMS vs brute-force oracle (10,000 instances)", 30.0):
        rng = np.random.default_rng(33)
        for _ in range(10_000):
            n = int(rng.integers(0, 9))
            boxes = [
                BoundingBox(
                    x=int(rng.integers(0, 25)),
                    y=int(rng.integers(0, 25)),
                    w=int(rng.integers(1, 15)),
                    h=int(rng.integers(1, 15)),
                )
                for _ in range(n)
            ]
            scores = rng.uniform(0.0, 1.0, size=n).tolist()
            threshold = float(rng.uniform(0.0, 1.0))
            items = list(zip(boxes, scores))

            kept = nms(items, threshold)
            expected = nms_reference([tuple(b.as_list()) for b in boxes], scores, threshold)
            assert kept == expected

            again = nms([items[i] for i in kept], threshold)
            assert [kept[i] for i in again] == kept

            for a_pos, a in enumerate(kept):
                for b in kept[a_pos + 1 :]:
                    assert box_iou(boxes[a], boxes[b]) <= threshold


def test_criterion_4_ap_cross_check():
    with criterion("AP evaluator vs COCO-protocol oracle (20 fixtures, 1e-6)", 60.0):
        box = BoundingBox(10, 10, 20, 20)
        from protodetect import DetectionRecord, GroundTruthAnnotation, GroundTruthSet

        perfect_gts = GroundTruthSet([GroundTruthAnnotation(1, 0, 1, box)])
        perfect = evaluate([DetectionRecord(1, 0, 1, box, 0.9)], perfect_gts)
        assert perfect.mean_ap == 1.0

        missed = evaluate(
            [DetectionRecord(1, 0, 1, BoundingBox(400, 400, 20, 20), 0.9)], perfect_gts
        )
        assert missed.mean_ap == 0.0

        for seed in range(1000, 1020):
            detections, gts, oracle_dets, oracle_gts = random_fixture(seed)
            report = evaluate(detections, gts)
            reference = coco_ap_reference(
                oracle_dets, oracle_gts, tuple(report.per_threshold_ap)
            )
            assert abs(report.mean_ap - reference["mean"]) <= 1e-6
            for class_id, value in report.per_class_ap.items():
                assert abs(value - reference["per_class"][class_id]) <= 1e-6


def test_criterion_5_synthetic_end_to_end():
    with criterion("synthetic end-to-end mean AP >= 0.95 at defaults", 60.0):
        bench = make_benchmark()
        cfg = PipelineConfig()
        runs = [detect(image.batch, bench.store, cfg) for image in bench.images]
        report = evaluate_runs(runs, bench.gt)
        print(f"\n  synthetic mean AP at defaults: {report.mean_ap:.4f}")
        assert report.mean_ap >= 0.95


def test_criterion_6_ablation_shape():
    with criterion("ablation trends: tau sweep and class-NMS stability", 120.0):
        bench = make_benchmark()

        counts = []
        for tau in (0.3, 0.4, 0.5, 0.6):
            cfg = PipelineConfig(tau=tau)
            runs = [detect(image.batch, bench.store, cfg) for image in bench.images]
            counts.append(sum(len(run.detections) for run in runs))
        print(f"\n  detection counts over tau 0.3/0.4/0.5/0.6: {counts}")
        assert all(a >= b for a, b in zip(counts, counts[1:])), counts

        aps = []
        for class_nms in (0.4, 0.5, 0.6):
            cfg = PipelineConfig(classwise_nms_iou=class_nms)
            runs = [detect(image.batch, bench.store, cfg) for image in bench.images]
            aps.append(evaluate_runs(runs, bench.gt).mean_ap)
        print(f"  mean AP over class-NMS 0.4/0.5/0.6: {[f'{v:.4f}' for v in aps]}")
        assert max(aps) - min(aps) < 0.02, aps
