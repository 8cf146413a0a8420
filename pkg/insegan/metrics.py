"""Segmentation scoring and evaluation reports."""

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

logger = logging.getLogger(__name__)


def masks_from_labels(labels: np.ndarray, n_instances: int) -> List[np.ndarray]:
    """Binary masks for labels 1..n of a label raster."""
    labels = np.asarray(labels)
    return [labels == k for k in range(1, n_instances + 1)]


def _prepare(pred: np.ndarray, gt_masks: Sequence[np.ndarray]) -> List[np.ndarray]:
    pred = np.asarray(pred)
    masks = [np.asarray(m, dtype=bool) for m in gt_masks]
    for mask in masks:
        if mask.shape != pred.shape:
            raise ValueError(f"mask size {mask.shape} does not match prediction {pred.shape}")
    masks = [m for m in masks if m.any()]
    if not masks:
        raise ValueError("miou needs at least one non-empty ground-truth segment")
    return masks


def _iou_table(pred: np.ndarray, masks: List[np.ndarray]) -> np.ndarray:
    """IoU between every GT mask (rows) and predicted label 1..K (columns)."""
    pred = np.asarray(pred).astype(np.int64)
    n_labels = int(pred.max()) if pred.size else 0
    pred_area = np.bincount(pred.ravel(), minlength=n_labels + 1)
    table = np.zeros((len(masks), n_labels + 1))
    for row, mask in enumerate(masks):
        inter = np.bincount(pred[mask], minlength=n_labels + 1).astype(np.float64)
        union = mask.sum() + pred_area - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            table[row] = np.where(union > 0, inter / union, 0.0)
        table[row, inter == 0] = 0.0
    table[:, 0] = 0.0
    return table


def miou(pred: np.ndarray, gt_masks: Sequence[np.ndarray], bijective: bool = False) -> float:
    """Mean over GT segments of the IoU with their most overlapping prediction.

    Background (label 0) is never a candidate and a predicted segment may
    serve several GT segments. Overlap ties go to the larger IoU. Empty GT
    masks (fully occluded instances) are skipped. With ``bijective`` the
    pairing is a one-to-one Hungarian match instead.

    Raises:
        ValueError: On size mismatch or when no GT segment is non-empty.
    """
    masks = _prepare(pred, gt_masks)
    pred = np.asarray(pred).astype(np.int64)
    if bijective:
        table = _iou_table(pred, masks)[:, 1:]
        if table.shape[1] == 0:
            return 0.0
        rows, cols = linear_sum_assignment(-table)
        scores = np.zeros(len(masks))
        scores[rows] = table[rows, cols]
        return float(scores.mean())

    n_labels = int(pred.max()) if pred.size else 0
    table = _iou_table(pred, masks)
    scores = []
    for row, mask in enumerate(masks):
        inter = np.bincount(pred[mask], minlength=n_labels + 1)
        inter[0] = 0
        if inter.max() == 0:
            scores.append(0.0)
            continue
        best = inter == inter.max()
        scores.append(float(table[row, best].max()))
    return float(np.mean(scores))


@dataclass
class EvalReport:
    """Per-scene mIoU of one method on one split."""

    scene_ids: List[int]
    per_scene: List[float]
    class_name: str
    method: str
    config: Dict[str, Any] = field(default_factory=dict)
    checkpoint_id: Optional[str] = None

    @property
    def mean(self) -> float:
        return float(statistics.fmean(self.per_scene)) if self.per_scene else 0.0

    @property
    def per_class(self) -> Dict[str, float]:
        return {self.class_name: self.mean}

    def records(self) -> List[Dict[str, Any]]:
        return [
            {"scene": sid, "miou": value, "method": self.method, "class": self.class_name}
            for sid, value in zip(self.scene_ids, self.per_scene)
        ]

    def write_jsonl(self, path: Path) -> None:
        """One JSON record per scene, then a summary record."""
        lines = [json.dumps(r, sort_keys=True) for r in self.records()]
        summary = {
            "summary": True,
            "mean": self.mean,
            "per_class": self.per_class,
            "count": len(self.per_scene),
            "method": self.method,
            "checkpoint_id": self.checkpoint_id,
            "config": self.config,
        }
        lines.append(json.dumps(summary, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n")

    def summary_table(self) -> str:
        rows = [
            f"{'method':<12} {'class':<12} {'scenes':>6} {'mIoU':>7}",
            "-" * 40,
            f"{self.method:<12} {self.class_name:<12} {len(self.per_scene):>6} {self.mean:>7.3f}",
        ]
        return "\n".join(rows)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mean"] = self.mean
        return data
