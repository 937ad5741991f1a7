"""Differentiable single-shot toy detector with anchor-grid heads.

The detector follows the familiar one-stage parameterization: each head
predicts, per grid cell and anchor, box offsets (tx, ty, tw, th), an
objectness logit, and per-class scores. Candidate detections of layer ``l``
are flattened in (anchor, row, col) order, so ``D_l = grid_l**2 * anchors_l``.

Any detector exposing the :class:`DifferentiableDetector` interface can be
attacked and evaluated; :class:`TinyDetector` is the bundled implementation,
small enough to train on synthetic scenes in minutes on a CPU.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .boxes import cxcywh_to_corners, nms
from .errors import ConfigError

WEIGHTS_FORMAT_VERSION = 1

# raw head channel layout per anchor: tx, ty, tw, th, obj, class scores...
_OBJ_SLOT = 4


@dataclass(frozen=True)
class LayerSpec:
    """One detection head: output stride and anchor (width, height) pairs."""

    stride: int
    anchors: tuple[tuple[float, float], ...]

    def grid(self, resolution: int) -> int:
        return resolution // self.stride

    def num_candidates(self, resolution: int) -> int:
        return self.grid(resolution) ** 2 * len(self.anchors)


def _default_layers() -> tuple[LayerSpec, ...]:
    return (
        LayerSpec(8, ((24.0, 24.0), (56.0, 56.0))),
        LayerSpec(16, ((96.0, 96.0), (160.0, 160.0))),
        LayerSpec(32, ((240.0, 240.0), (340.0, 340.0))),
    )


@dataclass(frozen=True)
class DetectorConfig:
    input_resolution: int = 416
    confidence_threshold: float = 0.5
    iou_threshold: float = 0.4
    num_classes: int = 3
    layers: tuple[LayerSpec, ...] = dataclasses.field(default_factory=_default_layers)

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ConfigError(f"confidence_threshold {self.confidence_threshold} not in (0,1)")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError(f"iou_threshold {self.iou_threshold} not in (0,1)")
        if not self.layers:
            raise ConfigError("at least one detection layer is required")
        for layer in self.layers:
            if self.input_resolution % layer.stride != 0:
                raise ConfigError(
                    f"input_resolution {self.input_resolution} not divisible by stride {layer.stride}"
                )
            if not layer.anchors:
                raise ConfigError("layer has no anchors")

    @classmethod
    def tiny(cls, resolution: int = 96, **overrides) -> "DetectorConfig":
        """Desk-scale two-head configuration matched to the synthetic scenes."""
        layers = (
            LayerSpec(4, ((14.0, 14.0), (20.0, 20.0))),
            LayerSpec(8, ((26.0, 26.0), (36.0, 36.0))),
        )
        return cls(input_resolution=resolution, layers=layers, **overrides)

    def replace(self, **changes) -> "DetectorConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RawDetections:
    """Raw outputs of one detection layer for one image.

    ``objectness_logits`` are pre-sigmoid and may carry gradients; ``boxes``
    are center-form pixels; ``class_scores`` are unnormalized logits.
    """

    objectness_logits: torch.Tensor  # (D,)
    boxes: torch.Tensor  # (D, 4) cxcywh
    class_scores: torch.Tensor  # (D, C)


@dataclass
class FinalDetection:
    box: np.ndarray  # (4,) cxcywh pixels
    confidence: float
    class_id: int
    index: int  # global candidate index, used for deterministic tie-breaks


@dataclass
class DetectionSet:
    """Per-layer raw outputs plus the thresholded, NMS-filtered detections."""

    layers: list
    final: list


class DifferentiableDetector:
    """Contract for pluggable detectors.

    Implementations must provide:

    - ``config``: a :class:`DetectorConfig` describing resolution, thresholds
      and the per-layer candidate layout.
    - ``raw_objectness(x)``: objectness logits per layer, each ``(B, D_l)``,
      differentiable with respect to the input batch ``x`` of shape
      ``(B, 3, H, W)`` in [0, 1].
    - ``decode(x)``: full per-layer outputs, a list of
      ``(objectness (B, D_l), boxes (B, D_l, 4), class_scores (B, D_l, C))``.

    Everything else (postprocessing, attack loss, ASR evaluation) is built on
    these three members, so adapting an external detector only requires
    mapping its head tensors into this layout.
    """

    config: DetectorConfig

    def raw_objectness(self, x: torch.Tensor):
        raise NotImplementedError

    def decode(self, x: torch.Tensor):
        raise NotImplementedError


def _channels(stride: int, base: int) -> int:
    return base * {1: 1, 2: 2, 4: 3, 8: 5, 16: 5, 32: 6}[stride]


def _trunk_dilations(grid: int) -> tuple[int, ...]:
    # reach scales with the map so every cell mixes with most of the image
    if grid >= 20:
        return (1, 3, 6)
    if grid >= 10:
        return (2, 4)
    return (1, 2)


class TinyDetector(nn.Module, DifferentiableDetector):
    """Small convolutional detector with dilated heads and a top-down path.

    Heads at finer strides receive the deeper head's features upsampled and
    concatenated (the usual single-shot design), and every head block uses
    dilated convolutions. Between them each output cell sees (nearly) the
    whole input at desk-scale resolutions; without that reach a localized
    patch could never influence detections far away from it.
    """

    def __init__(self, config: DetectorConfig, seed: int = 0, base_width: int = 12,
                 negative_slope: float = 0.1, context_levels: int = 1):
        super().__init__()
        self.config = config
        self.base_width = base_width
        self.negative_slope = negative_slope
        strides = sorted({layer.stride for layer in config.layers})
        if len(strides) != len(config.layers):
            raise ConfigError("duplicate strides in layer spec")
        for s in strides:
            if s & (s - 1) != 0:
                raise ConfigError(f"stride {s} is not a power of two")
        # context stages continue past the deepest head while the grid allows;
        # their coarse, heavily dilated features flow back down into every
        # head, so each output cell sees essentially the whole image
        ctx = strides[-1]
        for _ in range(context_levels):
            if config.input_resolution % (ctx * 2) == 0 and config.input_resolution // (ctx * 2) >= 4:
                ctx *= 2
        self.context_stride = ctx if ctx != strides[-1] else None
        self.context_levels = context_levels
        max_stride = ctx

        def act():
            return nn.LeakyReLU(negative_slope, inplace=True)

        self.stem = nn.Sequential(nn.Conv2d(3, _channels(1, base_width), 3, 1, 1), act())
        stages = {}
        in_ch = _channels(1, base_width)
        s = 2
        while s <= max_stride:
            out_ch = _channels(s, base_width)
            stages[str(s)] = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 3, 2, 1), act(),
                nn.Conv2d(out_ch, out_ch, 3, 1, 1), act(),
            )
            in_ch = out_ch
            s *= 2
        self.stages = nn.ModuleDict(stages)

        # trunks, deepest first; finer levels take concat(stage, upsampled deeper)
        trunk_strides = ([self.context_stride] if self.context_stride else []) + sorted(
            (layer.stride for layer in config.layers), reverse=True)
        head_trunks = {}
        head_outputs = {}
        deeper_ch = 0
        for stride in trunk_strides:
            ch = _channels(stride, base_width)
            grid = config.input_resolution // stride
            blocks = []
            in_ch = ch + deeper_ch
            for d in _trunk_dilations(grid):
                blocks += [nn.Conv2d(in_ch, ch, 3, 1, d, dilation=d), act()]
                in_ch = ch
            head_trunks[str(stride)] = nn.Sequential(*blocks)
            deeper_ch = ch
        for layer in config.layers:
            out = len(layer.anchors) * (5 + config.num_classes)
            ch = _channels(layer.stride, base_width)
            head_outputs[str(layer.stride)] = nn.Conv2d(ch, out, 1)
        self.head_trunks = nn.ModuleDict(head_trunks)
        self.head_outputs = nn.ModuleDict(head_outputs)
        self._init_weights(seed)

    def _init_weights(self, seed: int):
        """He-style init drawn from a dedicated numpy stream.

        Avoids the global torch RNG so two detectors built with the same seed
        have bit-identical weights regardless of surrounding code.
        """
        rng = np.random.default_rng(np.random.SeedSequence([0x7E7EC, seed]))
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
                w = rng.standard_normal(size=tuple(module.weight.shape)) * std
                with torch.no_grad():
                    module.weight.copy_(torch.from_numpy(w.astype(np.float32)))
                    module.bias.zero_()
        # bias objectness low so the untrained net predicts "no object"
        with torch.no_grad():
            for layer in self.config.layers:
                final = self.head_outputs[str(layer.stride)]
                block = 5 + self.config.num_classes
                for a in range(len(layer.anchors)):
                    final.bias[a * block + _OBJ_SLOT] = -3.0

    @classmethod
    def zero_weights(cls, config: DetectorConfig) -> "TinyDetector":
        det = cls(config, seed=0)
        with torch.no_grad():
            for p in det.parameters():
                p.zero_()
        return det

    def _features(self, x: torch.Tensor):
        feats = {}
        f = self.stem(x)
        stride = 1
        feats[stride] = f
        for s_key in sorted(self.stages.keys(), key=int):
            f = self.stages[s_key](f)
            feats[int(s_key)] = f
        return feats

    def _head_maps(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ConfigError(f"expected (B,3,H,W) input, got {tuple(x.shape)}")
        if x.shape[2] != self.config.input_resolution or x.shape[3] != self.config.input_resolution:
            raise ConfigError(
                f"input resolution {tuple(x.shape[2:])} does not match detector "
                f"resolution {self.config.input_resolution}"
            )
        feats = self._features(x)
        head_strides = {layer.stride for layer in self.config.layers}
        trunk_strides = ([self.context_stride] if self.context_stride else []) + sorted(
            head_strides, reverse=True)
        maps = {}
        deeper = None
        for stride in trunk_strides:
            f = feats[stride]
            if deeper is not None:
                up = nn.functional.interpolate(deeper, size=f.shape[2:], mode="nearest")
                f = torch.cat([f, up], dim=1)
            trunk = self.head_trunks[str(stride)](f)
            if stride in head_strides:
                maps[stride] = self.head_outputs[str(stride)](trunk)
            deeper = trunk
        return [maps[layer.stride] for layer in self.config.layers]

    @staticmethod
    def _flatten_map(head_map: torch.Tensor, n_anchors: int, block: int) -> torch.Tensor:
        # (B, A*block, g, g) -> (B, A*g*g, block), candidates in (a, row, col) order
        b, _, g, _ = head_map.shape
        m = head_map.view(b, n_anchors, block, g, g)
        return m.permute(0, 1, 3, 4, 2).reshape(b, n_anchors * g * g, block)

    def raw_objectness(self, x: torch.Tensor):
        """Objectness logits per layer, each (B, D_l); gradients flow to x."""
        out = []
        for head_map, layer in zip(self._head_maps(x), self.config.layers):
            block = 5 + self.config.num_classes
            flat = self._flatten_map(head_map, len(layer.anchors), block)
            out.append(flat[:, :, _OBJ_SLOT])
        return out

    def decode(self, x: torch.Tensor):
        """Full decoded outputs: list of (obj (B,D), boxes (B,D,4), cls (B,D,C), raw (B,D,block))."""
        outputs = []
        for head_map, layer in zip(self._head_maps(x), self.config.layers):
            block = 5 + self.config.num_classes
            a = len(layer.anchors)
            g = layer.grid(self.config.input_resolution)
            flat = self._flatten_map(head_map, a, block)
            device = flat.device
            rows = torch.arange(g, device=device).repeat_interleave(g).repeat(a)
            cols = torch.arange(g, device=device).repeat(g * a)
            anchor_wh = torch.tensor(layer.anchors, dtype=flat.dtype, device=device)
            anchor_idx = torch.arange(a, device=device).repeat_interleave(g * g)
            aw = anchor_wh[anchor_idx, 0]
            ah = anchor_wh[anchor_idx, 1]
            cx = (torch.sigmoid(flat[:, :, 0]) + cols) * layer.stride
            cy = (torch.sigmoid(flat[:, :, 1]) + rows) * layer.stride
            w = aw * torch.exp(flat[:, :, 2].clamp(-12.0, 8.0))
            h = ah * torch.exp(flat[:, :, 3].clamp(-12.0, 8.0))
            boxes = torch.stack([cx, cy, w, h], dim=-1)
            obj = flat[:, :, _OBJ_SLOT]
            cls = flat[:, :, 5:]
            outputs.append((obj, boxes, cls, flat))
        return outputs

    def forward(self, images) -> list:
        """Run the detector on a batch of H x W x 3 images in [0, 1].

        Accepts a list of numpy arrays / torch tensors or a stacked
        (B, H, W, 3) array. Returns one :class:`DetectionSet` per image with
        differentiable raw layers (when the input is a torch tensor that
        requires grad) and postprocessed final detections.
        """
        x = images_to_batch(images, self.config.input_resolution)
        decoded = self.decode(x)
        batch = x.shape[0]
        results = []
        for b in range(batch):
            layers = [
                RawDetections(obj[b], boxes[b], cls[b]) for obj, boxes, cls, _ in decoded
            ]
            results.append(DetectionSet(layers=layers, final=postprocess(layers, self.config)))
        return results


def images_to_batch(images, resolution: int) -> torch.Tensor:
    """Stack HWC images into a (B, 3, H, W) float tensor, validating range."""
    if isinstance(images, torch.Tensor):
        x = images
        if x.dim() == 3:
            x = x.unsqueeze(0)
    elif isinstance(images, np.ndarray) and images.ndim == 3:
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).unsqueeze(0)
    else:
        tensors = []
        for img in images:
            if isinstance(img, torch.Tensor):
                tensors.append(img.to(torch.float32))
            else:
                tensors.append(torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)))
        x = torch.stack(tensors)
    if x.dim() != 4 or x.shape[-1] != 3:
        raise ConfigError(f"expected (B,H,W,3) images, got {tuple(x.shape)}")
    if x.shape[1] != resolution or x.shape[2] != resolution:
        raise ConfigError(
            f"image size {tuple(x.shape[1:3])} does not match detector resolution {resolution}"
        )
    with torch.no_grad():
        lo, hi = float(x.min()), float(x.max())
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise ConfigError(f"image values outside [0,1]: min={lo:.4f} max={hi:.4f}")
    return x.permute(0, 3, 1, 2).to(torch.float32)


def postprocess(layers, config: DetectorConfig) -> list:
    """Threshold + class-wise greedy NMS over the raw layers of one image.

    Confidence is sigmoid(objectness) times the softmax class probability of
    the argmax class. Candidates below ``confidence_threshold`` are dropped,
    then per class greedy NMS suppresses any box with IoU strictly above
    ``iou_threshold`` against a kept higher-confidence box. The result is
    ordered by descending confidence, ties broken by lower candidate index.
    """
    confs = []
    boxes = []
    classes = []
    for raw in layers:
        obj = _to_numpy(raw.objectness_logits).astype(np.float64)
        cls = _to_numpy(raw.class_scores).astype(np.float64)
        lbox = _to_numpy(raw.boxes).astype(np.float64)
        # stable softmax over class scores
        shifted = cls - cls.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        best_class = probs.argmax(axis=1)
        conf = _sigmoid(obj) * probs[np.arange(len(obj)), best_class]
        confs.append(conf)
        boxes.append(lbox)
        classes.append(best_class)
    conf = np.concatenate(confs)
    box = np.concatenate(boxes, axis=0)
    cls_id = np.concatenate(classes)

    keep = conf >= config.confidence_threshold
    idx = np.nonzero(keep)[0]
    final: list[FinalDetection] = []
    corners = cxcywh_to_corners(box[idx]) if len(idx) else np.zeros((0, 4))
    for class_id in np.unique(cls_id[idx]):
        sel = idx[cls_id[idx] == class_id]
        sel_corners = corners[cls_id[idx] == class_id]
        kept = nms(sel_corners, conf[sel], config.iou_threshold)
        for k in kept:
            gi = int(sel[k])
            final.append(
                FinalDetection(
                    box=box[gi].copy(),
                    confidence=float(conf[gi]),
                    class_id=int(class_id),
                    index=gi,
                )
            )
    final.sort(key=lambda d: (-d.confidence, d.index))
    return final


def count_objects(image, detector: DifferentiableDetector, config: DetectorConfig | None = None) -> int:
    """Number of final detections in one image (forward + postprocess)."""
    cfg = config or detector.config
    x = images_to_batch([image], cfg.input_resolution)
    with torch.no_grad():
        decoded = detector.decode(x)
    layers = [RawDetections(obj[0], boxes[0], cls[0]) for obj, boxes, cls, _ in decoded]
    return len(postprocess(layers, cfg))


def count_objects_batch(images, detector: DifferentiableDetector, config: DetectorConfig | None = None):
    """Detection counts for a batch of images; one forward pass."""
    cfg = config or detector.config
    x = images_to_batch(images, cfg.input_resolution)
    with torch.no_grad():
        decoded = detector.decode(x)
    counts = []
    for b in range(x.shape[0]):
        layers = [RawDetections(obj[b], boxes[b], cls[b]) for obj, boxes, cls, _ in decoded]
        counts.append(len(postprocess(layers, cfg)))
    return counts


def save_detector(detector: TinyDetector, path, metrics: dict | None = None) -> None:
    """Persist weights with the embedded config and a format version."""
    payload = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "config": _config_to_dict(detector.config),
        "base_width": detector.base_width,
        "negative_slope": detector.negative_slope,
        "context_levels": detector.context_levels,
        "state_dict": {k: v.cpu() for k, v in detector.state_dict().items()},
        "metrics": metrics or {},
    }
    torch.save(payload, path)


def load_detector(path) -> TinyDetector:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != WEIGHTS_FORMAT_VERSION:
        raise ConfigError(f"unsupported weights format version {version!r} in {path}")
    config = _config_from_dict(payload["config"])
    detector = TinyDetector(config, seed=0, base_width=payload.get("base_width", 12),
                            negative_slope=payload.get("negative_slope", 0.1),
                            context_levels=payload.get("context_levels", 1))
    detector.load_state_dict(payload["state_dict"])
    detector.eval()
    detector.requires_grad_(False)
    detector.loaded_metrics = payload.get("metrics", {})
    return detector


def _config_to_dict(config: DetectorConfig) -> dict:
    d = dataclasses.asdict(config)
    d["layers"] = [
        {"stride": layer.stride, "anchors": [list(a) for a in layer.anchors]}
        for layer in config.layers
    ]
    return d


def _config_from_dict(d: dict) -> DetectorConfig:
    layers = tuple(
        LayerSpec(int(layer["stride"]), tuple(tuple(a) for a in layer["anchors"]))
        for layer in d["layers"]
    )
    return DetectorConfig(
        input_resolution=int(d["input_resolution"]),
        confidence_threshold=float(d["confidence_threshold"]),
        iou_threshold=float(d["iou_threshold"]),
        num_classes=int(d["num_classes"]),
        layers=layers,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy()
    return np.asarray(t)
