"""Pixel F1 / IoU, sample-weighted dataset averaging, reports and robustness sweeps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import data as D
from .model import LocalizationNet
from .sampling import downsample_mask
from .train import _ready_model, predict_with

AXES = ("jpeg", "blur", "noise", "resize")


def binarize(scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where score > threshold (strict)."""
    return (np.asarray(scores) > threshold).astype(np.uint8)


def f1_iou(pred: np.ndarray, gt: np.ndarray, empty_score: float = 1.0) -> tuple[float, float]:
    """Tampered-class F1 and IoU; both ``empty_score`` when pred and gt are empty."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    if tp + fp + fn == 0:
        return float(empty_score), float(empty_score)
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


def weighted_average(rows: Sequence[tuple[float, int]]) -> float:
    """Sum(metric * count) / sum(count): a per-image average across datasets."""
    rows = list(rows)
    if not rows:
        raise ValueError("weighted_average needs at least one row")
    if any(n < 1 for _, n in rows):
        raise ValueError("dataset counts must be >= 1")
    return sum(m * n for m, n in rows) / sum(n for _, n in rows)


@dataclass
class DatasetRow:
    dataset_id: str
    count: int
    f1: float
    iou: float


@dataclass
class CurvePoint:
    label: str
    param: float | None
    f1: float
    iou: float


@dataclass
class EvalReport:
    rows: list[DatasetRow]
    avg_f1: float
    avg_iou: float
    threshold: float = 0.5
    curves: dict[str, list[CurvePoint]] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[DatasetRow], threshold: float = 0.5) -> "EvalReport":
        return cls(
            rows,
            weighted_average([(r.f1, r.count) for r in rows]),
            weighted_average([(r.iou, r.count) for r in rows]),
            threshold,
        )

    def consistent(self) -> bool:
        return (
            self.avg_f1 == weighted_average([(r.f1, r.count) for r in self.rows])
            and self.avg_iou == weighted_average([(r.iou, r.count) for r in self.rows])
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            [DatasetRow(**r) for r in raw["rows"]],
            raw["avg_f1"],
            raw["avg_iou"],
            raw["threshold"],
            {k: [CurvePoint(**p) for p in v] for k, v in raw.get("curves", {}).items()},
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "count", "f1", "iou"])
        for r in self.rows:
            w.writerow([r.dataset_id, r.count, repr(r.f1), repr(r.iou)])
        w.writerow(["weighted_average", sum(r.count for r in self.rows), repr(self.avg_f1), repr(self.avg_iou)])
        return buf.getvalue()

    def write(self, out_dir: str | Path, stem: str = "report") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / f"{stem}.json", out_dir / f"{stem}.csv"]
        paths[0].write_text(self.to_json(), encoding="utf-8")
        paths[1].write_text(self.to_csv(), encoding="utf-8")
        for name, points in self.curves.items():
            p = out_dir / f"{stem}_curve_{name}.csv"
            p.write_text(curve_csv(points), encoding="utf-8")
            paths.append(p)
        return paths


def curve_csv(points: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "param", "f1", "iou"])
    for p in points:
        w.writerow([p.label, "" if p.param is None else repr(p.param), repr(p.f1), repr(p.iou)])
    return buf.getvalue()


def _manifests(manifests) -> list[D.Manifest]:
    if isinstance(manifests, (str, Path, D.Manifest)):
        manifests = [manifests]
    out = [m if isinstance(m, D.Manifest) else D.load_manifest(m) for m in manifests]
    if not out or any(len(m) == 0 for m in out):
        raise ValueError("evaluation needs non-empty manifests")
    return out


def _score_entries(
    model: LocalizationNet,
    size: int,
    entries: Sequence[D.ManifestEntry],
    threshold: float,
    empty_score: float,
    degradation: D.DegradationSpec | None,
) -> dict[str, list[tuple[str, float, float]]]:
    per_dataset: dict[str, list[tuple[str, float, float]]] = {}
    for i, entry in enumerate(entries):
        sample = D.read_pair(entry)
        image = sample.image
        if degradation is not None and degradation.chain:
            image = D.degrade(image, D.DegradationSpec(degradation.chain, D.derive_seed(degradation.seed, i)))
        scores = predict_with(model, image, size)
        f1, iou = f1_iou(binarize(scores, threshold), sample.mask, empty_score)
        per_dataset.setdefault(entry.dataset_id, []).append((entry.sample_id, f1, iou))
    return per_dataset


def _rows(per_dataset) -> list[DatasetRow]:
    rows = []
    for ds, items in per_dataset.items():
        items = sorted(items)  # ordered reduction by sample_id
        rows.append(DatasetRow(ds, len(items), float(np.mean([f for _, f, _ in items])),
                               float(np.mean([u for _, _, u in items]))))
    return rows


def evaluate(
    checkpoint,
    manifests,
    threshold: float = 0.5,
    empty_score: float = 1.0,
    degradation: D.DegradationSpec | None = None,
) -> EvalReport:
    """Per-dataset mean F1/IoU over images and sample-weighted averages."""
    model, size = _ready_model(checkpoint)
    entries = [e for m in _manifests(manifests) for e in m]
    per_dataset = _score_entries(model, size, entries, threshold, empty_score, degradation)
    return EvalReport.from_rows(_rows(per_dataset), threshold)


def axis_specs(axis: str, values: Sequence[float], seed: int = 0) -> list[D.DegradationSpec]:
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; expected one of {AXES}")
    return [D.DegradationSpec((D.DegradationOp(axis, float(v)),), seed) for v in values]


def robustness_sweep(
    checkpoint,
    manifest,
    specs: Sequence[D.DegradationSpec],
    threshold: float = 0.5,
    empty_score: float = 1.0,
) -> list[CurvePoint]:
    """Undegraded baseline followed by one point per degradation spec."""
    if not specs:
        raise ValueError("robustness sweep needs at least one degradation")
    model, size = _ready_model(checkpoint)
    entries = [e for m in _manifests(manifest) for e in m]
    points = []
    for spec in [None, *specs]:
        report = EvalReport.from_rows(
            _rows(_score_entries(model, size, entries, threshold, empty_score, spec)), threshold
        )
        param = spec.chain[0].value if spec is not None and len(spec.chain) == 1 else None
        points.append(CurvePoint("none" if spec is None else spec.label(), param, report.avg_f1, report.avg_iou))
    return points


def plot_curve(points: Sequence[CurvePoint], path: str | Path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    numeric = [p for p in points[1:] if p.param is not None]
    if numeric and len(numeric) == len(points) - 1:
        ax.plot([p.param for p in numeric], [p.f1 for p in numeric], marker="o", label="degraded")
        ax.axhline(points[0].f1, color="gray", linestyle="--", linewidth=1, label="no degradation")
        ax.set_xlabel(title or "parameter")
        ax.legend(fontsize=8)
    else:
        ax.bar(range(len(points)), [p.f1 for p in points])
        ax.set_xticks(range(len(points)), [p.label for p in points], rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("mean F1")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def embedding_separation(model: LocalizationNet, samples: Sequence[D.ImageSample]) -> float:
    """Mean over images of (intra-class - inter-class) cosine similarity of projected stride-4 embeddings.

    Self-pairs are excluded from the intra-class mean; single-class images are skipped.
    """
    margins = []
    with torch.no_grad():
        for s in samples:
            labels = torch.from_numpy(downsample_mask(s.mask, 4).reshape(-1)).bool()
            if labels.all() or not labels.any():
                continue
            z = model.project_for_contrast(model.forward_backbone(s.image, "eval"))[0][0]
            e = F.normalize(z.reshape(z.shape[0], -1).t().double(), dim=1)
            sim = e @ e.t()
            same = labels[:, None] == labels[None, :]
            off_diag = ~torch.eye(len(labels), dtype=torch.bool)
            margins.append(float(sim[same & off_diag].mean() - sim[~same].mean()))
    if not margins:
        raise ValueError("no two-class image to measure")
    return float(np.mean(margins))
