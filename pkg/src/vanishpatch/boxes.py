"""Bounding-box utilities: format conversion, IoU, and greedy NMS.

Boxes are numpy arrays. Center form is ``(cx, cy, w, h)``, corner form is
``(x0, y0, x1, y1)`` with ``x1 > x0`` and ``y1 > y0``; all values are pixels.
"""

import numpy as np


def cxcywh_to_corners(boxes):
    """Convert center-form boxes to corner form. Works on (..., 4) arrays."""
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def corners_to_cxcywh(boxes):
    """Convert corner-form boxes to center form. Works on (..., 4) arrays."""
    boxes = np.asarray(boxes, dtype=np.float64)
    x0, y0, x1, y1 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def box_iou(box_a, box_b):
    """Intersection over union of two corner-form boxes.

    Returns a value in [0, 1]; 0 when the union has zero area.
    """
    box_a = np.asarray(box_a, dtype=np.float64)
    box_b = np.asarray(box_b, dtype=np.float64)
    ix0 = max(box_a[0], box_b[0])
    iy0 = max(box_a[1], box_b[1])
    ix1 = min(box_a[2], box_b[2])
    iy1 = min(box_a[3], box_b[3])
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    area_a = max(0.0, box_a[2] - box_a[0]) * max(0.0, box_a[3] - box_a[1])
    area_b = max(0.0, box_b[2] - box_b[0]) * max(0.0, box_b[3] - box_b[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def pairwise_iou(boxes_a, boxes_b):
    """IoU matrix between two sets of corner-form boxes, shape (N, M)."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes, scores, iou_threshold):
    """Greedy non-maximum suppression over corner-form boxes.

    Candidates are visited in order of descending score, ties broken by the
    lower input index; a candidate is dropped when its IoU with an already
    kept box exceeds ``iou_threshold`` (strictly). Returns the kept indices
    in visiting order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores length mismatch")
    # lexsort is stable: equal scores keep ascending index order
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept: list[int] = []
    kept_boxes: list[np.ndarray] = []
    for idx in order:
        candidate = boxes[idx]
        suppressed = False
        if kept_boxes:
            ious = pairwise_iou(candidate[None, :], np.stack(kept_boxes))[0]
            suppressed = bool(np.any(ious > iou_threshold))
        if not suppressed:
            kept.append(int(idx))
            kept_boxes.append(candidate)
    return kept
