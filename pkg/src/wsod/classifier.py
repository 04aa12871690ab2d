"""Two-stream proposal classification, coupled initial selection and
multi-stage refinement with pseudo ground truth.

Score matrices are laid out classes x proposals, (C, R). The refinement
matrices have an extra last row for background, (C + 1, R).
"""
import logging

import numpy as np

from .nn.layers import softmax, softmax_backward
from .proposals import iou_matrix

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def midn_forward(det_logits, cls_logits):
    """Return (p, det_probs, cls_probs).

    det_probs is a softmax over proposals for every class; cls_probs is a
    softmax over classes for every proposal; p is their elementwise product.
    """
    det_logits = np.asarray(det_logits, dtype=np.float64)
    cls_logits = np.asarray(cls_logits, dtype=np.float64)
    if det_logits.shape != cls_logits.shape or det_logits.ndim != 2:
        raise ValueError(f"stream shapes differ: {det_logits.shape} vs {cls_logits.shape}")
    det = softmax(det_logits, axis=1)
    cls = softmax(cls_logits, axis=0)
    return det * cls, det, cls


def midn_combine(det_logits, cls_logits):
    return midn_forward(det_logits, cls_logits)[0]


def image_scores(p):
    """Per-class image score: the sum of the combined scores over proposals."""
    return np.asarray(p).sum(axis=1)


def classification_loss(phi, y):
    """Binary cross entropy summed over classes.

    Scores are clamped to [1e-12, 1 - 1e-12] so that the single-class case,
    where the image score is 1 up to rounding, stays finite.
    """
    phi = np.asarray(phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(phi < -1e-9) or np.any(phi > 1 + 1e-9) or not np.all(np.isfinite(phi)):
        raise ValueError("image scores must lie in [0, 1]")
    q = np.clip(phi, PROB_FLOOR, 1 - PROB_FLOOR)
    return float(-np.sum(y * np.log(q) + (1 - y) * np.log(1 - q)))


def classification_loss_grad(phi, y):
    phi = np.asarray(phi, dtype=np.float64)
    q = np.clip(phi, PROB_FLOOR, 1 - PROB_FLOOR)
    g = -(y / q) + (1 - y) / (1 - q)
    # clamped coordinates have no gradient
    return np.where((phi > PROB_FLOOR) & (phi < 1 - PROB_FLOOR), g, 0.0)


def midn_backward(d_phi, det, cls):
    """Gradients with respect to (det_logits, cls_logits) from d loss / d phi."""
    dp = np.broadcast_to(np.asarray(d_phi)[:, None], det.shape)
    d_det = softmax_backward(dp * cls, det, axis=1)
    d_cls = softmax_backward(dp * det, cls, axis=0)
    return d_det, d_cls


def _cells_in_box(shape, box):
    h, w = shape
    x1, y1, x2, y2 = box
    cx = np.arange(w) + 0.5
    cy = np.arange(h) + 0.5
    return ((cy >= y1) & (cy <= y2))[:, None] & ((cx >= x1) & (cx <= x2))[None, :]


def seg_overlap(mask, box):
    """Fraction of the mask's cells that fall inside ``box`` (corner tuple or BBox).

    A cell belongs to the box when its centre does. An empty mask gives 0.
    """
    mask = np.asarray(mask, dtype=bool)
    corners = box.corners if hasattr(box, "corners") else tuple(box)
    total = int(mask.sum())
    if total == 0:
        log.warning("empty segmentation mask; overlap defined as 0")
        return 0.0
    return float(np.sum(mask & _cells_in_box(mask.shape, corners))) / total


def couple_filter(top_boxes, masks, proposals, r_threshold=0.5, iou_threshold=0.5):
    """Proposal indices passed on to the second classifier.

    ``top_boxes`` maps class -> index of the first classifier's top proposal;
    ``masks`` maps class -> segmentation mask on the proposals' grid. When the
    top box covers less than ``r_threshold`` of the mask, it and every
    proposal with IoU above ``iou_threshold`` against it are dropped.
    Returns (kept indices, removed indices).
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    removed = set()
    for c, j in top_boxes.items():
        r_c = seg_overlap(masks[c], proposals[j])
        if r_c < r_threshold:
            ov = iou_matrix(proposals[j:j + 1], proposals)[0]
            removed.add(int(j))
            removed.update(int(i) for i in np.flatnonzero(ov > iou_threshold))
    kept = [i for i in range(len(proposals)) if i not in removed]
    return kept, sorted(removed)


def select_final(top1, top2, iou_threshold=0.5):
    """Pick among the two classifiers' top (box, score) pairs.

    Boxes are corner tuples. Overlap strictly above ``iou_threshold`` keeps
    the second classifier's box only; otherwise both are kept.
    """
    ov = iou_matrix(np.asarray(top1[0])[None], np.asarray(top2[0])[None])[0, 0]
    if ov > iou_threshold:
        return [top2]
    return [top1, top2]


def labels_from_seeds(seeds, proposals, num_classes, iou_threshold=0.5):
    """Label proposals from (class, proposal index) pseudo ground-truth seeds.

    Seeds are applied in order, so a later seed overwrites an earlier one
    where their neighbourhoods overlap. Unlabelled proposals get the
    background label ``num_classes``.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0:
        raise ValueError("no proposals to label")
    labels = np.full(len(proposals), num_classes, dtype=np.int64)
    for c, j in seeds:
        ov = iou_matrix(proposals[j:j + 1], proposals)[0]
        labels[ov >= iou_threshold] = c
        labels[j] = c
    return labels


def assign_refinement_labels(stage_scores, image_classes, proposals, iou_threshold=0.5):
    """Pseudo labels for the next refinement stage.

    For each class present in the image (in ascending order) the proposal with
    the highest score in that class row becomes the pseudo ground truth; it
    and all proposals with IoU >= ``iou_threshold`` against it take the class
    label. Everything else is background (index C, the last row).
    """
    scores = np.asarray(stage_scores, dtype=np.float64)
    num_classes = scores.shape[0] - 1
    if scores.shape[1] == 0:
        raise ValueError("no proposals to label")
    seeds = [(int(c), int(np.argmax(scores[c]))) for c in sorted(image_classes)]
    return labels_from_seeds(seeds, proposals, num_classes, iou_threshold)


def refinement_loss(stage_probs, labels):
    """Mean cross entropy of each proposal's probability at its label."""
    probs = np.asarray(stage_probs, dtype=np.float64)
    labels = np.asarray(labels)
    picked = probs[labels, np.arange(probs.shape[1])]
    if np.any(picked < PROB_FLOOR):
        log.warning("zero probability at a labelled cell; clamping at %g", PROB_FLOOR)
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def refinement_loss_grad(stage_probs, labels):
    """Gradient of :func:`refinement_loss` with respect to the pre-softmax
    logits (softmax over the class axis)."""
    probs = np.asarray(stage_probs, dtype=np.float64)
    onehot = np.zeros_like(probs)
    onehot[labels, np.arange(probs.shape[1])] = 1.0
    return (probs - onehot) / probs.shape[1]


def total_loss(rpn, classifier, refinements):
    return float(rpn + classifier + sum(refinements))
