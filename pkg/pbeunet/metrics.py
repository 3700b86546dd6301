"""Overlap ratios and the 95th-percentile Hausdorff distance of binarized predictions."""
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import distance_transform_edt

from pbeunet.data_io import ArrayLike, as_array, extract_boundary
from pbeunet.errors import ShapeError
from pbeunet.models import AggregateReport, ConfusionCounts, MetricReport

THRESHOLD = 0.5
PERCENTILE = 95


def binarize(x: ArrayLike) -> np.ndarray:
    return as_array(x) > THRESHOLD


def _check_shapes(op: str, pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(op, "shape", gt.shape, pred.shape)


def confusion(pred: ArrayLike, gt: ArrayLike) -> ConfusionCounts:
    p, g = binarize(pred), binarize(gt)
    _check_shapes("confusion", p, g)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=int(p.size) - tp - fp - fn)


def ratios(c: ConfusionCounts) -> Tuple[float, float, float, float]:
    """(dice, iou, recall, accuracy); two empty maps agree perfectly."""
    accuracy = (c.tp + c.tn) / c.total if c.total else 1.0
    if c.tp + c.fp + c.fn == 0:
        return 1.0, 1.0, 1.0, accuracy
    dice = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    iou = c.tp / (c.tp + c.fp + c.fn)
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return dice, iou, recall, accuracy


def nearest_rank(values: np.ndarray, percent: int = PERCENTILE) -> float:
    """Value at index ceil(percent/100 * n) - 1 of the sorted values."""
    ordered = np.sort(values)
    index = -(-percent * len(ordered) // 100) - 1
    return float(ordered[max(index, 0)])


def directed_distances(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Distance from every `source` pixel to its nearest `target` pixel."""
    _, nearest = distance_transform_edt(~target, return_indices=True)
    ys, xs = np.nonzero(source)
    dy = ys - nearest[0][ys, xs]
    dx = xs - nearest[1][ys, xs]
    return np.sqrt((dy * dy + dx * dx).astype(np.float64))


def _boundary_sets(pred: ArrayLike, gt: ArrayLike, op: str) -> Tuple[np.ndarray, np.ndarray]:
    p, g = binarize(pred), binarize(gt)
    _check_shapes(op, p, g)
    if p.ndim == 4:
        if p.shape[:2] != (1, 1):
            raise ShapeError(op, "N", 1, p.shape[0], "one map at a time")
        p, g = p[0, 0], g[0, 0]
    return extract_boundary(p), extract_boundary(g)


def hd95(pred: ArrayLike, gt: ArrayLike) -> float:
    """Max of the two directed 95th-percentile boundary distances, in pixels.

    Both boundaries empty gives 0; exactly one empty gives +inf.
    """
    x, y = _boundary_sets(pred, gt, "hd95")
    x_empty, y_empty = not x.any(), not y.any()
    if x_empty and y_empty:
        return 0.0
    if x_empty or y_empty:
        return math.inf
    return max(nearest_rank(directed_distances(x, y)), nearest_rank(directed_distances(y, x)))


def hd95_bruteforce(pred: ArrayLike, gt: ArrayLike) -> float:
    """All-pairs reference implementation of `hd95`."""
    x, y = _boundary_sets(pred, gt, "hd95_bruteforce")
    px, py = np.argwhere(x), np.argwhere(y)
    if len(px) == 0 and len(py) == 0:
        return 0.0
    if len(px) == 0 or len(py) == 0:
        return math.inf
    diff = px[:, None, :] - py[None, :, :]
    squared = (diff * diff).sum(axis=-1)
    forward = np.sqrt(squared.min(axis=1).astype(np.float64))
    backward = np.sqrt(squared.min(axis=0).astype(np.float64))
    return max(nearest_rank(forward), nearest_rank(backward))


def evaluate(prob: ArrayLike, gt: ArrayLike, sample_id: Optional[str] = None) -> MetricReport:
    counts = confusion(prob, gt)
    dice, iou, recall, accuracy = ratios(counts)
    return MetricReport(
        sample_id=sample_id,
        dice=dice,
        iou=iou,
        hd95=hd95(prob, gt),
        recall=recall,
        accuracy=accuracy,
        counts=counts,
    )


def aggregate(reports: Sequence[MetricReport]) -> AggregateReport:
    """Per-image means; HD95 is averaged over the samples where it is defined."""
    if not reports:
        return AggregateReport(count=0, dice=0.0, iou=0.0, hd95=None, recall=0.0, accuracy=0.0)
    defined = [r.hd95 for r in reports if r.hd95_defined]
    return AggregateReport(
        count=len(reports),
        dice=float(np.mean([r.dice for r in reports])),
        iou=float(np.mean([r.iou for r in reports])),
        hd95=float(np.mean(defined)) if defined else None,
        recall=float(np.mean([r.recall for r in reports])),
        accuracy=float(np.mean([r.accuracy for r in reports])),
        hd95_undefined=len(reports) - len(defined),
    )
