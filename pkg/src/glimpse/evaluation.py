"""Temporal detection scoring: IoU, cross-chunk union merge, NMS, AP and mAP."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synthdata import FrameSequence, stream_of

log = logging.getLogger(__name__)

__all__ = [
    "Prediction",
    "Segment",
    "EvalConfig",
    "canonicalize",
    "iou",
    "merge_union",
    "nms",
    "nms_normalized",
    "average_precision",
    "mean_ap",
    "evaluate",
    "write_detections",
    "read_detections",
    "write_results",
]


@dataclass(frozen=True)
class Prediction:
    start: float
    end: float
    confidence: float
    sequence_id: str

    @property
    def sources(self) -> frozenset[str]:
        return frozenset(self.sequence_id.split("+"))

    @property
    def video(self) -> str:
        return stream_of(self.sequence_id.split("+", 1)[0])


@dataclass(frozen=True)
class Segment:
    """A ground-truth interval in absolute frames, keyed by video (stream)."""

    start: float
    end: float
    video: str


@dataclass
class EvalConfig:
    alphas: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    nms_threshold: float = 0.4
    merge: bool = True

    def validate(self) -> None:
        if not self.alphas or not all(0.0 < a < 1.0 for a in self.alphas):
            raise ValueError(f"IoU thresholds must lie in (0, 1), got {self.alphas}")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise ValueError(f"nms_threshold must lie in [0, 1], got {self.nms_threshold}")


def canonicalize(d: tuple[float, float, float], seq: FrameSequence) -> Prediction:
    """Reorder (s, e) and map to absolute frames of the source stream."""
    s, e, c = d
    lo, hi = min(s, e), max(s, e)
    scale = seq.T - 1
    return Prediction(seq.origin_offset + lo * scale, seq.origin_offset + hi * scale, float(c), seq.sequence_id)


def iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0.0:
        return 0.0
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0.0 else 0.0


def merge_union(predictions: list[Prediction], gap: float = 1.0) -> list[Prediction]:
    """Union predictions from different chunks of a stream that overlap or touch.

    Intervals touch when the later one starts at most ``gap`` frames after the
    earlier one ends (adjacent frames of consecutive chunks). Predictions of
    the same chunk are never merged with each other; a merged prediction keeps
    the id of every chunk it came from, joined with '+'.
    """
    by_video: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(predictions):
        by_video[p.video].append(i)

    parent = list(range(len(predictions)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for members in by_video.values():
        for x, i in enumerate(members):
            a = predictions[i]
            for j in members[x + 1:]:
                b = predictions[j]
                if a.sources & b.sources:
                    continue
                if max(a.start, b.start) - min(a.end, b.end) <= gap:
                    parent[find(i)] = find(j)

    groups: dict[int, list[Prediction]] = defaultdict(list)
    for i, p in enumerate(predictions):
        groups[find(i)].append(p)
    merged = []
    for members in groups.values():  # first-member order
        if len(members) == 1:
            merged.append(members[0])
            continue
        ids = sorted(set().union(*(m.sources for m in members)))
        merged.append(Prediction(min(m.start for m in members), max(m.end for m in members),
                                 max(m.confidence for m in members), "+".join(ids)))
    return merged


def _ranking(predictions):
    return sorted(range(len(predictions)),
                  key=lambda i: (-predictions[i].confidence, predictions[i].start, predictions[i].sequence_id))


def nms(predictions: list[Prediction], threshold: float) -> list[Prediction]:
    """Greedy suppression in descending confidence; IoU > threshold is suppressed."""
    kept: list[Prediction] = []
    for i in _ranking(predictions):
        p = predictions[i]
        if all(k.video != p.video or iou((k.start, k.end), (p.start, p.end)) <= threshold for k in kept):
            kept.append(p)
    return kept


def nms_normalized(detections: list[tuple[float, float, float]], threshold: float) -> list[tuple[float, float, float]]:
    """NMS over (s, e, c) tuples of a single sequence."""
    preds = [Prediction(s, e, c, "") for s, e, c in detections]
    return [(p.start, p.end, p.confidence) for p in nms(preds, threshold)]


def _match(predictions: list[Prediction], ground_truths: list[Segment], alpha: float) -> list[bool]:
    """TP flags in ranking order; each prediction claims its best unclaimed ground truth."""
    gts_by_video: dict[str, list[int]] = defaultdict(list)
    for j, g in enumerate(ground_truths):
        gts_by_video[g.video].append(j)
    claimed = [False] * len(ground_truths)
    flags = []
    for i in _ranking(predictions):
        p = predictions[i]
        best, best_iou = -1, alpha
        for j in gts_by_video.get(p.video, ()):
            if claimed[j]:
                continue
            o = iou((p.start, p.end), (ground_truths[j].start, ground_truths[j].end))
            if o > best_iou:
                best, best_iou = j, o
        if best >= 0:
            claimed[best] = True
        flags.append(best >= 0)
    return flags


def average_precision(predictions: list[Prediction], ground_truths: list[Segment], alpha: float) -> float:
    """All-point interpolated AP of one class pooled over all videos."""
    if not ground_truths:
        log.warning("average_precision: no ground truths; AP defined as 0")
        return 0.0
    if not predictions:
        return 0.0
    tp = np.array(_match(predictions, ground_truths, alpha), dtype=np.float64)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / len(ground_truths)
    precision = tp_cum / (tp_cum + fp_cum)

    mrec = np.concatenate([[0.0], recall])
    mprec = np.concatenate([[0.0], precision])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def mean_ap(aps) -> float:
    aps = list(aps)
    if not aps:
        raise ValueError("mean_ap needs at least one class")
    return float(sum(aps) / len(aps))


def evaluate(predictions: dict[str, list[Prediction]], ground_truths: dict[str, list[Segment]],
             cfg: EvalConfig) -> dict[str, dict[float, float]]:
    """AP per class and alpha, plus the mean under key ``'ALL'``."""
    cfg.validate()
    classes = sorted(set(predictions) | set(ground_truths))
    results: dict[str, dict[float, float]] = {}
    for cls in classes:
        preds = predictions.get(cls, [])
        gts = ground_truths.get(cls, [])
        if cfg.merge:
            preds = merge_union(preds)
        results[cls] = {a: average_precision(preds, gts, a) for a in cfg.alphas}
    results["ALL"] = {a: mean_ap(results[c][a] for c in classes) for a in cfg.alphas}
    return results


def write_detections(path: str | Path, predictions: dict[str, list[Prediction]]) -> None:
    lines = []
    for cls in sorted(predictions):
        for p in predictions[cls]:
            lines.append(f"{p.sequence_id} {p.start:.17g} {p.end:.17g} {p.confidence:.17g} {cls}")
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_detections(path: str | Path) -> dict[str, list[Prediction]]:
    out: dict[str, list[Prediction]] = defaultdict(list)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'sequence_id start end confidence class_id'")
        seq_id, s, e, c, cls = tok
        s, e = float(s), float(e)
        out[cls].append(Prediction(min(s, e), max(s, e), float(c), seq_id))
    return dict(out)


def write_results(path: str | Path, results: dict[str, dict[float, float]]) -> None:
    lines = []
    for cls in sorted(k for k in results if k != "ALL"):
        for a, ap in sorted(results[cls].items()):
            lines.append(f"{cls} {a:g} {ap:.6f}")
    for a, m in sorted(results["ALL"].items()):
        lines.append(f"ALL {a:g} {m:.6f}")
    Path(path).write_text("".join(line + "\n" for line in lines))
