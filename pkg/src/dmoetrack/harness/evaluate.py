"""Per-frame tracking inference and tracking metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..errors import ValidationError
from ..synth import SyntheticSequence, corrupt_missing, crop
from ..tracker import TrackerModel, hanning_window, maybe_update_template, predict_box
from .config import EvalConfig

IOU_THRESHOLDS = np.linspace(0.0, 1.0, 21)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of (cx, cy, w, h) boxes."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    ca = np.concatenate([a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2], axis=1)
    cb = np.concatenate([b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2], axis=1)
    # areas from the same corners as the overlap, so identical boxes give exactly 1
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    iw = np.clip(np.minimum(ca[:, 2], cb[:, 2]) - np.maximum(ca[:, 0], cb[:, 0]), 0, None)
    ih = np.clip(np.minimum(ca[:, 3], cb[:, 3]) - np.maximum(ca[:, 1], cb[:, 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def success_auc(ious: np.ndarray) -> float:
    """Mean over t in {0, 0.05, ..., 1} of the fraction of frames with IoU >= t."""
    ious = np.asarray(ious, dtype=float).reshape(-1)
    if ious.size == 0:
        raise ValidationError("no frames to score")
    return float(np.mean([(ious >= t).mean() for t in IOU_THRESHOLDS]))


@dataclass
class Scores:
    mean_iou: float
    auc: float
    precision: float
    frames: int


def score(ious: np.ndarray, center_err: np.ndarray, precision_px: float = 2.0) -> Scores:
    ious = np.asarray(ious, dtype=float).reshape(-1)
    err = np.asarray(center_err, dtype=float).reshape(-1)
    return Scores(float(ious.mean()), success_auc(ious), float((err <= precision_px).mean()), int(ious.size))


@dataclass
class MetricsReport:
    overall: Scores
    by_modality: dict[str, Scores] = field(default_factory=dict)
    by_speed: dict[str, Scores] = field(default_factory=dict)
    ious: np.ndarray | None = None  # sequences x scored frames

    @property
    def mean_iou(self) -> float:
        return self.overall.mean_iou

    @property
    def auc(self) -> float:
        return self.overall.auc

    @property
    def precision(self) -> float:
        return self.overall.precision

    def rows(self):
        yield ("all", "all", self.overall)
        for name, s in self.by_modality.items():
            yield ("modality", name, s)
        for name, s in self.by_speed.items():
            yield ("speed", name, s)


def build_report(ious: np.ndarray, center_err: np.ndarray, modalities, speeds,
                 precision_px: float = 2.0) -> MetricsReport:
    """Aggregate per-sequence frame scores (sequences x frames) into a report."""
    ious, center_err = np.atleast_2d(ious), np.atleast_2d(center_err)
    modalities, speeds = np.asarray(modalities), np.asarray(speeds)
    report = MetricsReport(score(ious, center_err, precision_px), ious=ious)
    for name in dict.fromkeys(modalities.tolist()):
        m = modalities == name
        report.by_modality[name] = score(ious[m], center_err[m], precision_px)
    for name in dict.fromkeys(speeds.tolist()):
        m = speeds == name
        report.by_speed[name] = score(ious[m], center_err[m], precision_px)
    return report


def write_metrics(report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "name", "frames", "mean_iou", "auc", "precision"])
        for group, name, s in report.rows():
            w.writerow([group, name, s.frames, f"{s.mean_iou:.9g}", f"{s.auc:.9g}", f"{s.precision:.9g}"])
    return path


def _clamp_box(box_px: np.ndarray, size: int) -> np.ndarray:
    """Keep a (cx, cy, w, h) pixel box inside the frame with positive extent."""
    w = np.clip(box_px[2], 1.0, size)
    h = np.clip(box_px[3], 1.0, size)
    cx = np.clip(box_px[0], w / 2, size - w / 2)
    cy = np.clip(box_px[1], h / 2, size - h / 2)
    return np.array([cx, cy, w, h])


def track(model: TrackerModel, seqs: list[SyntheticSequence], cfg: EvalConfig | None = None,
          return_boxes: bool = False, stats: dict | None = None):
    """Run the tracker over ``seqs`` in lockstep (all sequences must share length and size).

    Frame 0 is initialized from ground truth and not scored. Returns per-sequence
    IoU and center error (px) arrays of shape (num_seqs, num_frames - 1).
    When ``stats`` is given it receives the count of non-finite network outputs.
    """
    cfg = cfg or EvalConfig()
    if not seqs:
        raise ValidationError("no sequences to evaluate")
    mc = model.cfg
    n_frames, size = seqs[0].num_frames, seqs[0].image_size
    if any(s.num_frames != n_frames or s.image_size != size for s in seqs):
        raise ValidationError("lockstep tracking needs sequences of equal length and size")
    b = len(seqs)
    window = hanning_window(mc.search_grid, influence=cfg.window_influence)
    state = np.stack([s.boxes[0] * size for s in seqs])  # cx, cy, w, h in px
    tmpl_rgb = np.stack([crop(s.rgb[0], state[i, :2], mc.template_size)[0] for i, s in enumerate(seqs)])
    tmpl_x = np.stack([crop(s.x[0], state[i, :2], mc.template_size)[0] for i, s in enumerate(seqs)])
    ious = np.zeros((b, n_frames - 1))
    errs = np.zeros((b, n_frames - 1))
    boxes = np.zeros((b, n_frames, 4))
    boxes[:, 0] = state
    for t in range(1, n_frames):
        s_rgb = np.empty((b, mc.channels, mc.search_size, mc.search_size))
        s_x = np.empty_like(s_rgb)
        corners = np.empty((b, 2))
        for i, s in enumerate(seqs):
            s_rgb[i], corners[i] = crop(s.rgb[t], state[i, :2], mc.search_size)
            s_x[i], _ = crop(s.x[t], state[i, :2], mc.search_size)
        with ad.no_grad():
            out = model((tmpl_rgb, tmpl_x), (s_rgb, s_x))
        scores, box_maps = out.score_map, out.box_map()
        if stats is not None:
            bad = sum(int(np.sum(~np.isfinite(a))) for a in (scores, box_maps, out.task_logits.data))
            stats["nonfinite"] = stats.get("nonfinite", 0) + bad
        for i, s in enumerate(seqs):
            box, conf, _ = predict_box(scores[i], box_maps[i], window)
            px = np.array([corners[i, 0] + box[0] * mc.search_size, corners[i, 1] + box[1] * mc.search_size,
                           box[2] * mc.search_size, box[3] * mc.search_size])
            if not np.all(np.isfinite(px)):
                px = state[i].copy()  # keep the last estimate rather than propagate garbage
            state[i] = _clamp_box(px, size)
            if maybe_update_template(t, conf, cfg.update_threshold, cfg.update_period):
                tmpl_rgb[i] = crop(s.rgb[t], state[i, :2], mc.template_size)[0]
                tmpl_x[i] = crop(s.x[t], state[i, :2], mc.template_size)[0]
            gt = s.boxes[t] * size
            ious[i, t - 1] = box_iou(state[i], gt)[0]
            errs[i, t - 1] = float(np.hypot(*(state[i, :2] - gt[:2])))
        boxes[:, t] = state
    if return_boxes:
        return ious, errs, boxes
    return ious, errs


def evaluate(model: TrackerModel, seqs: list[SyntheticSequence], cfg: EvalConfig | None = None,
             missing: str | None = None) -> MetricsReport:
    """Track every sequence, optionally with one modality zeroed, and aggregate metrics."""
    cfg = cfg or EvalConfig()
    if missing not in (None, "none"):
        seqs = [corrupt_missing(s, missing) for s in seqs]
    ious, errs = track(model, seqs, cfg)
    return build_report(ious, errs, [s.modality for s in seqs], [s.speed for s in seqs], cfg.precision_px)
