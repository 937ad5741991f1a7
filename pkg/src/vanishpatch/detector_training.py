"""Training and validation for the bundled toy detector."""

import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .boxes import cxcywh_to_corners, pairwise_iou
from .detector import DetectorConfig, TinyDetector, images_to_batch, postprocess, RawDetections, save_detector
from .errors import ConfigError, DivergenceError


@dataclass
class DetectorTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1.5e-3
    seed: int = 0
    obj_pos_weight: float = 2.0
    # soft positive target keeps objectness logits calibrated instead of
    # saturating; detections stay comfortably above a 0.5 threshold
    obj_positive_target: float = 0.9
    box_weight: float = 5.0
    cls_weight: float = 1.0
    val_match_iou: float = 0.5
    negative_slope: float = 0.1  # activation leak of the bundled model


def _wh_iou(w: float, h: float, anchors: np.ndarray) -> np.ndarray:
    inter = np.minimum(w, anchors[:, 0]) * np.minimum(h, anchors[:, 1])
    union = w * h + anchors[:, 0] * anchors[:, 1] - inter
    return inter / union


def build_targets(batch_gt, config: DetectorConfig, positive_target: float = 1.0):
    """Assignment targets per layer for a batch of ground-truth lists.

    Each ground-truth box is assigned to the single (layer, anchor) with the
    best width/height IoU, at the grid cell containing the box center.
    Returns, per layer: obj (B, D), box raw-space targets (B, D, 4),
    class ids (B, D), and the positive mask (B, D).
    """
    b = len(batch_gt)
    res = config.input_resolution
    all_anchors = []
    for li, layer in enumerate(config.layers):
        for ai, (aw, ah) in enumerate(layer.anchors):
            all_anchors.append((li, ai, aw, ah))
    anchor_arr = np.array([(aw, ah) for _, _, aw, ah in all_anchors])

    targets = []
    for layer in config.layers:
        d = layer.num_candidates(res)
        targets.append(
            {
                "obj": torch.zeros(b, d),
                "box": torch.zeros(b, d, 4),
                "cls": torch.zeros(b, d, dtype=torch.long),
                "pos": torch.zeros(b, d, dtype=torch.bool),
            }
        )

    for bi, gt in enumerate(batch_gt):
        for class_id, (x0, y0, x1, y1) in gt:
            w = x1 - x0
            h = y1 - y0
            cx = (x0 + x1) / 2
            cy = (y0 + y1) / 2
            best = int(np.argmax(_wh_iou(w, h, anchor_arr)))
            li, ai, aw, ah = all_anchors[best]
            layer = config.layers[li]
            g = layer.grid(res)
            col = min(int(cx // layer.stride), g - 1)
            row = min(int(cy // layer.stride), g - 1)
            idx = (ai * g + row) * g + col
            t = targets[li]
            t["obj"][bi, idx] = positive_target
            t["box"][bi, idx, 0] = cx / layer.stride - col
            t["box"][bi, idx, 1] = cy / layer.stride - row
            t["box"][bi, idx, 2] = float(np.log(max(w, 1e-6) / aw))
            t["box"][bi, idx, 3] = float(np.log(max(h, 1e-6) / ah))
            t["cls"][bi, idx] = class_id
            t["pos"][bi, idx] = True
    return targets


def detection_loss(decoded, targets, cfg: DetectorTrainConfig) -> torch.Tensor:
    obj_logits = torch.cat([out[0] for out in decoded], dim=1)
    obj_target = torch.cat([t["obj"] for t in targets], dim=1)
    bce = nn.functional.binary_cross_entropy_with_logits(
        obj_logits, obj_target, pos_weight=torch.tensor(cfg.obj_pos_weight)
    )

    box_loss = obj_logits.new_zeros(())
    cls_loss = obj_logits.new_zeros(())
    n_pos = 0
    for (_, _, _cls, raw), t in zip(decoded, targets):
        pos = t["pos"]
        if not bool(pos.any()):
            continue
        raw_pos = raw[pos]
        pred_xy = torch.sigmoid(raw_pos[:, 0:2])
        pred_wh = raw_pos[:, 2:4]
        tgt = t["box"][pos]
        box_loss = box_loss + ((pred_xy - tgt[:, 0:2]) ** 2).sum() + ((pred_wh - tgt[:, 2:4]) ** 2).sum()
        cls_loss = cls_loss + nn.functional.cross_entropy(
            raw_pos[:, 5:], t["cls"][pos], reduction="sum"
        )
        n_pos += int(pos.sum())
    if n_pos > 0:
        box_loss = box_loss / n_pos
        cls_loss = cls_loss / n_pos
    return bce + cfg.box_weight * box_loss + cfg.cls_weight * cls_loss


def validate_detector(detector: TinyDetector, dataset, match_iou: float = 0.5, batch_size: int = 16):
    """Greedy class-aware precision/recall at the detector's own thresholds."""
    tp = fp = fn = 0
    cfg = detector.config
    detector.eval()
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idxs = range(start, min(start + batch_size, len(dataset)))
            images = [dataset[i][0] for i in idxs]
            gts = [dataset[i][1] for i in idxs]
            x = images_to_batch(images, cfg.input_resolution)
            decoded = detector.decode(x)
            for b, gt in enumerate(gts):
                layers = [RawDetections(o[b], bx[b], c[b]) for o, bx, c, _ in decoded]
                final = postprocess(layers, cfg)
                matched = [False] * len(gt)
                for det in final:  # already sorted by confidence
                    det_corner = cxcywh_to_corners(det.box)
                    best_iou, best_j = 0.0, -1
                    for j, (class_id, box) in enumerate(gt):
                        if matched[j] or class_id != det.class_id:
                            continue
                        iou = pairwise_iou(det_corner[None, :], np.asarray(box)[None, :])[0, 0]
                        if iou > best_iou:
                            best_iou, best_j = iou, j
                    if best_j >= 0 and best_iou >= match_iou:
                        matched[best_j] = True
                        tp += 1
                    else:
                        fp += 1
                fn += matched.count(False)
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0
    recall = tp / (tp + fn) if tp + fn > 0 else 1.0
    return {"precision": precision, "recall": recall, "tp": tp, "fp": fp, "fn": fn}


def train_toy_detector(
    train_dataset,
    val_dataset,
    detector_config: DetectorConfig,
    train_config: DetectorTrainConfig | None = None,
    save_path=None,
):
    """Train :class:`TinyDetector` on synthetic scenes.

    Fully reproducible for a fixed seed: weight init, batch order and the
    optimizer are all deterministic. Returns ``(detector, metrics)`` where
    metrics carries per-epoch losses and final validation precision/recall.
    Raises DivergenceError if the loss turns non-finite.
    """
    if len(train_dataset) == 0:
        raise ConfigError("training dataset is empty")
    cfg = train_config or DetectorTrainConfig()
    detector = TinyDetector(detector_config, seed=cfg.seed, negative_slope=cfg.negative_slope)
    detector.train()
    optimizer = torch.optim.Adam(detector.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD377]))

    t0 = time.perf_counter()
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_dataset))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            images = [train_dataset[int(i)][0] for i in batch_idx]
            gts = [train_dataset[int(i)][1] for i in batch_idx]
            x = images_to_batch(images, detector_config.input_resolution)
            decoded = detector.decode(x)
            targets = build_targets(gts, detector_config, cfg.obj_positive_target)
            loss = detection_loss(decoded, targets, cfg)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"detector training diverged at epoch {epoch} (seed={cfg.seed}, "
                    f"lr={cfg.learning_rate})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(losses)))

    detector.eval()
    detector.requires_grad_(False)
    metrics = validate_detector(detector, val_dataset, cfg.val_match_iou)
    metrics["epoch_losses"] = epoch_losses
    metrics["wall_clock_s"] = time.perf_counter() - t0
    metrics["seed"] = cfg.seed
    if save_path is not None:
        save_detector(detector, save_path, metrics=metrics)
    return detector, metrics
