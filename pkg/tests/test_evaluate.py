import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from forgeloc import data as D
from forgeloc import oracles
from forgeloc.evaluate import (
    CurvePoint,
    DatasetRow,
    EvalReport,
    axis_specs,
    binarize,
    embedding_separation,
    evaluate,
    f1_iou,
    plot_curve,
    robustness_sweep,
    weighted_average,
)
from forgeloc.model import BackboneConfig, HeadUninitializedError, build_model, save_checkpoint

TINY = BackboneConfig(channels=(8, 8, 16, 16), contrast_dim=8, head_hidden=16)


def test_f1_iou_examples():
    gt = np.zeros((4, 4), np.uint8)
    gt[:2, :2] = 1
    assert f1_iou(gt, gt) == (1.0, 1.0)
    pred = np.zeros_like(gt)
    pred[:2, :] = 1
    f1, iou = f1_iou(pred, gt)
    assert iou == 0.5 and f1 == pytest.approx(2 / 3, abs=0)
    assert f1_iou(np.zeros_like(gt), np.zeros_like(gt)) == (1.0, 1.0)
    assert f1_iou(np.zeros_like(gt), np.zeros_like(gt), empty_score=0.0) == (0.0, 0.0)
    assert f1_iou(np.zeros_like(gt), gt) == (0.0, 0.0)
    with pytest.raises(ValueError):
        f1_iou(gt, gt[:3])


def test_binarize_is_strict():
    assert binarize(np.array([0.5, 0.5000001, 0.2])).tolist() == [0, 1, 0]
    assert binarize(np.array([0.3]), 0.2).tolist() == [1]


@settings(max_examples=200, deadline=None)
@given(arrays(np.uint8, (6, 7), elements=st.integers(0, 1)), arrays(np.uint8, (6, 7), elements=st.integers(0, 1)))
def test_metric_properties(pred, gt):
    f1, iou = f1_iou(pred, gt)
    assert 0 <= iou <= f1 <= 1
    assert abs(f1 - 2 * iou / (1 + iou)) <= 1e-12
    assert (f1, iou) == oracles.f1_iou(pred.tolist(), gt.tolist())
    assert f1_iou(pred, gt) == f1_iou(gt, pred)


def test_weighted_average():
    assert weighted_average([(0.5, 2), (1.0, 3)]) == 0.8
    assert weighted_average([(0.3, 1)]) == 0.3
    with pytest.raises(ValueError):
        weighted_average([])
    with pytest.raises(ValueError):
        weighted_average([(0.5, 0)])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(1, 50)), min_size=1, max_size=6))
def test_weighted_average_bounds(rows):
    avg = weighted_average(rows)
    lo, hi = min(m for m, _ in rows), max(m for m, _ in rows)
    assert lo - 1e-12 <= avg <= hi + 1e-12


def test_report_round_trip(tmp_path):
    rep = EvalReport.from_rows([DatasetRow("a", 2, 0.5, 0.4), DatasetRow("b", 3, 1.0, 1.0)])
    rep.curves["jpeg"] = [CurvePoint("none", None, 0.8, 0.7), CurvePoint("jpeg(60)", 60.0, 0.6, 0.5)]
    assert rep.avg_f1 == 0.8 and rep.consistent()
    again = EvalReport.from_json(rep.to_json())
    assert again == rep
    paths = rep.write(tmp_path)
    assert [p.name for p in paths] == ["report.json", "report.csv", "report_curve_jpeg.csv"]
    assert "weighted_average,5,0.8" in paths[1].read_text()


def test_axis_specs():
    specs = axis_specs("jpeg", [90, 60], seed=3)
    assert [s.label() for s in specs] == ["jpeg(90)", "jpeg(60)"]
    with pytest.raises(ValueError):
        axis_specs("rotate", [1])


@pytest.fixture(scope="module")
def stage2_ckpt(tmp_path_factory, synth_dir):
    model = build_model(TINY, 0)
    path = tmp_path_factory.mktemp("ck") / "s2.ckpt"
    return save_checkpoint(path, model, 2, {"input_size": 64})


def test_evaluate_rows_and_weighting(stage2_ckpt, synth_dir, tmp_path):
    manifest = D.load_manifest(synth_dir / "manifest.jsonl")
    entries = list(manifest)
    split = [D.Manifest([e for e in entries[:3]]), D.Manifest([D.ManifestEntry(e.image_path, e.mask_path, "other") for e in entries[3:]])]
    rep = evaluate(stage2_ckpt, split)
    assert [(r.dataset_id, r.count) for r in rep.rows] == [("synth", 3), ("other", 5)]
    assert rep.consistent()
    assert all(0 <= r.f1 <= 1 for r in rep.rows)
    assert evaluate(stage2_ckpt, split).to_json() == rep.to_json()


def test_identity_chain_matches_plain(stage2_ckpt, synth_dir):
    m = synth_dir / "manifest.jsonl"
    plain = evaluate(stage2_ckpt, m)
    ident = evaluate(stage2_ckpt, m, degradation=D.DegradationSpec((), 5))
    assert plain.to_json() == ident.to_json()


def test_sweep_and_plot(stage2_ckpt, synth_dir, tmp_path):
    m = synth_dir / "manifest.jsonl"
    points = robustness_sweep(stage2_ckpt, m, axis_specs("blur", [3, 5]))
    assert [p.label for p in points] == ["none", "blur(3)", "blur(5)"]
    assert points[0].f1 == evaluate(stage2_ckpt, m).avg_f1
    png = plot_curve(points, tmp_path / "c.png", "blur")
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(ValueError):
        robustness_sweep(stage2_ckpt, m, [])


def test_evaluate_needs_head(tmp_path, synth_dir):
    path = save_checkpoint(tmp_path / "s1.ckpt", build_model(TINY, 0), 1, {"input_size": 64})
    with pytest.raises(HeadUninitializedError):
        evaluate(path, synth_dir / "manifest.jsonl")


def test_embedding_separation_untrained_is_small(synth_dir):
    samples = [D.load_sample(e, 64) for e in D.load_manifest(synth_dir / "manifest.jsonl")]
    margin = embedding_separation(build_model(BackboneConfig(channels=(16, 16, 32, 32), contrast_dim=16), 0), samples)
    assert abs(margin) < 0.2
    flat = D.ImageSample(samples[0].image, np.zeros_like(samples[0].mask), "x", "y")
    with pytest.raises(ValueError):
        embedding_separation(build_model(TINY, 0), [flat])
