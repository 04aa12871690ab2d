"""Detection metrics and feature analysis."""
import logging
from dataclasses import dataclass, field

import numpy as np

from .proposals import iou_matrix

log = logging.getLogger(__name__)


@dataclass
class Detection:
    image_id: str
    cls: str
    cx: float
    cy: float
    w: float
    h: float
    score: float

    @property
    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class EvalReport:
    ap: dict
    map: float
    num_images: int
    detections: list = field(default_factory=list)
    images_per_sec: float | None = None
    excluded: list = field(default_factory=list)


def average_precision(recall, precision):
    """All-points interpolated AP: area under the monotone precision envelope."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def pr_points(detections, gt_by_image, iou_threshold=0.5):
    """Recall and precision after each detection, in descending score order.

    ``detections`` is a list of Detection; ``gt_by_image`` maps image id to a
    (N, 4) corner array. Detections are matched greedily in descending score
    order to the ground truth box of highest IoU, which must be unmatched.
    Returns None when there is no ground truth.
    """
    npos = sum(len(g) for g in gt_by_image.values())
    if npos == 0:
        return None
    dets = sorted(detections, key=lambda d: -d.score)
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_by_image.items()}
    tp = np.zeros(len(dets))
    for i, d in enumerate(dets):
        gt = gt_by_image.get(d.image_id)
        if gt is None or len(gt) == 0:
            continue
        ov = iou_matrix(np.array([d.corners]), gt)[0]
        j = int(np.argmax(ov))
        if ov[j] >= iou_threshold and not used[d.image_id][j]:
            used[d.image_id][j] = True
            tp[i] = 1
    ctp = np.cumsum(tp)
    return ctp / npos, ctp / np.arange(1, len(dets) + 1)


def class_ap(detections, gt_by_image, iou_threshold=0.5):
    """All-points AP for one class, or None without ground truth."""
    pr = pr_points(detections, gt_by_image, iou_threshold)
    return None if pr is None else average_precision(*pr)


def _ground_truth(records):
    gt = {}
    for rec in records:
        if len(rec.gt_boxes) and len(rec.classes) != 1:
            raise ValueError(f"{rec.id}: boxes can only be attributed when a scene has one class")
        for c in rec.classes:
            gt.setdefault(c, {})[rec.id] = np.array([b.corners for b in rec.gt_boxes]).reshape(-1, 4)
    return gt


def precision_recall_curve(detections, records, cls, iou_threshold=0.5):
    pr = pr_points([d for d in detections if d.cls == cls], _ground_truth(records).get(cls, {}), iou_threshold)
    return pr if pr is not None else (np.zeros(0), np.zeros(0))


def evaluate(detections, records, iou_threshold=0.5):
    """Per-class AP and their mean over classes with ground truth.

    ``records`` are SceneRecord-like objects with ``id``, ``classes`` and
    ``gt_boxes``. Single-class scenes assign every ground truth box to the
    scene's only class.
    """
    gt = _ground_truth(records)
    classes = sorted(gt)
    det_classes = sorted({d.cls for d in detections})
    excluded = [c for c in det_classes if c not in gt]
    for c in excluded:
        log.warning("class %r appears in detections but not in the manifest; AP undefined, excluded", c)
    ap = {}
    for c in classes:
        value = class_ap([d for d in detections if d.cls == c], gt[c], iou_threshold)
        if value is not None:
            ap[c] = value
    mean = float(np.mean(list(ap.values()))) if ap else 0.0
    return EvalReport(ap, mean, len(records), list(detections), excluded=excluded)


def pca(features, k=2):
    """Top-``k`` principal directions of the rows of ``features``.

    Returns (projections, components, explained variances) from an
    eigendecomposition of the sample covariance.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("PCA needs at least two samples")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = vecs[:, order].T
    return xc @ comps.T, comps, np.maximum(vals[order], 0.0)


def power_iteration_pca(features, k=2, iters=2000, seed=0):
    """PCA by power iteration with deflation; an independent check on :func:`pca`."""
    x = np.asarray(features, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    rng = np.random.default_rng(seed)
    comps, vals = [], []
    for _ in range(k):
        v = rng.normal(size=cov.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            v = w / norm
        lam = float(v @ cov @ v)
        comps.append(v)
        vals.append(lam)
        cov = cov - lam * np.outer(v, v)
    comps = np.array(comps)
    return xc @ comps.T, comps, np.array(vals)


def cosine_similarity_matrix(vectors):
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    u = v / np.where(norms > 0, norms, 1.0)
    return u @ u.T
