"""Universal patch optimization: init methods, suppression loss, PGD loop.

The training objective is built purely from the detector's objectness
logits: per layer, ReLU of every candidate logit is summed and divided by
that layer's candidate count, the per-layer terms are summed, and the batch
loss is the mean over images. No ground-truth labels are consumed. Working
in logit space matters: a candidate stops contributing exactly when it
falls below the confidence threshold's logit (0 for threshold 0.5), which
is what makes ReLU meaningful here.

Optimization is projected gradient descent with Adam: after every Adam step
the patch is clamped back into [0, 1].
"""

import dataclasses
import enum
import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .detector import DetectionSet, DifferentiableDetector
from .errors import ConfigError, DivergenceError
from .placement import (
    MidpointHeatmap,
    PlacementStrategy,
    WindowSchedule,
    apply_patch,
    sample_placement,
)
from .transforms import EoTConfig, sample_eot, apply_eot

PATCH_FORMAT_VERSION = 1


class InitMethod(str, enum.Enum):
    BLACK = "black"
    WHITE = "white"
    GRAY = "gray"
    UNIFORM_NOISE = "uniform_noise"
    NORMAL_NOISE = "normal_noise"


@dataclass
class Patch:
    """An S x S x 3 pixel grid in [0, 1] plus provenance metadata."""

    pixels: np.ndarray
    init_method: str = InitMethod.NORMAL_NOISE.value
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != self.pixels.shape[1] or self.pixels.shape[2] != 3:
            raise ConfigError(f"patch pixels must be (S,S,3), got {self.pixels.shape}")
        if self.pixels.shape[0] < 1:
            raise ConfigError("patch size must be >= 1")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ConfigError("patch pixels outside [0,1]")

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])


def init_patch(method, size: int, rng=0) -> Patch:
    """Build the initial patch. ``rng`` is a numpy Generator or a seed."""
    if size < 1:
        raise ConfigError("patch size must be >= 1")
    method = InitMethod(method)
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = rng if isinstance(rng, (int, np.integer)) else None
        rng = np.random.default_rng(rng)
    shape = (size, size, 3)
    if method == InitMethod.BLACK:
        pixels = np.zeros(shape, dtype=np.float32)
    elif method == InitMethod.WHITE:
        pixels = np.ones(shape, dtype=np.float32)
    elif method == InitMethod.GRAY:
        pixels = np.full(shape, 0.5, dtype=np.float32)
    elif method == InitMethod.UNIFORM_NOISE:
        pixels = rng.random(shape, dtype=np.float32)
    else:  # normal noise, mean 0.5 / std 0.5, clamped into range
        pixels = np.clip(rng.normal(0.5, 0.5, shape), 0.0, 1.0).astype(np.float32)
    return Patch(pixels=pixels, init_method=method.value, seed=seed)


def save_patch(patch: Patch, path) -> None:
    """Lossless persistence: float pixels plus JSON metadata, in one .npz."""
    meta = {
        "format_version": PATCH_FORMAT_VERSION,
        "init_method": patch.init_method,
        "seed": patch.seed,
        "metadata": patch.metadata,
    }
    np.savez(path, pixels=patch.pixels, meta=np.bytes_(json.dumps(meta).encode()))


def load_patch(path) -> Patch:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(bytes(data["meta"]).decode())
    if meta.get("format_version") != PATCH_FORMAT_VERSION:
        raise ConfigError(f"unsupported patch format version {meta.get('format_version')!r}")
    return Patch(
        pixels=data["pixels"],
        init_method=meta["init_method"],
        seed=meta["seed"],
        metadata=meta.get("metadata", {}),
    )


def patch_to_png(patch: Patch, path) -> None:
    """8-bit PNG export for display/printing; quantization makes this lossy."""
    arr = np.clip(np.round(patch.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def objectness_loss(detections) -> torch.Tensor:
    """Suppression loss of one image: sum_l sum_d ReLU(logit_{l,d}) / D_l."""
    layers = detections.layers if isinstance(detections, DetectionSet) else list(detections)
    if not layers:
        raise ConfigError("empty layer list")
    total = None
    for raw in layers:
        logits = raw.objectness_logits
        if not isinstance(logits, torch.Tensor):
            logits = torch.as_tensor(np.asarray(logits), dtype=torch.float32)
        term = torch.relu(logits).sum() / logits.numel()
        total = term if total is None else total + term
    return total


def batch_objectness_loss(objectness_per_layer) -> torch.Tensor:
    """Mean over images of the per-image suppression loss.

    ``objectness_per_layer`` holds one (B, D_l) logit tensor per layer.
    """
    if not objectness_per_layer:
        raise ConfigError("empty layer list")
    total = None
    for logits in objectness_per_layer:
        term = torch.relu(logits).sum(dim=1) / logits.shape[1]
        total = term if total is None else total + term
    return total.mean()


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(m=torch.zeros(shape), v=torch.zeros(shape))


def pgd_step(pixels: torch.Tensor, grad: torch.Tensor, state: AdamState, lr: float):
    """One Adam step against ``grad`` followed by projection onto [0, 1].

    Functional: returns the updated pixels and the advanced state.
    """
    if grad.shape != pixels.shape:
        raise ConfigError(f"gradient shape {tuple(grad.shape)} != patch shape {tuple(pixels.shape)}")
    if not bool(torch.isfinite(grad).all()):
        raise DivergenceError("non-finite gradient in pgd_step")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    updated = pixels - lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    updated = updated.clamp(0.0, 1.0)
    new_state = AdamState(m=m, v=v, step=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return updated, new_state


@dataclass
class AttackConfig:
    patch_size: int = 100
    learning_rate: float = 0.1
    epochs: int = 50
    batch_size: int = 15
    init_method: str = InitMethod.NORMAL_NOISE.value
    strategy: PlacementStrategy = field(
        default_factory=lambda: PlacementStrategy.uniform_random(intra_batch_variation=True)
    )
    eot: EoTConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        InitMethod(self.init_method)


@dataclass
class TrainingLog:
    epoch_losses: list = field(default_factory=list)
    eval_asr: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    heatmap: MidpointHeatmap | None = None


def resolve_strategy(config: AttackConfig) -> PlacementStrategy:
    """Fill in the default window schedule (full coverage by the final epoch)."""
    strategy = config.strategy
    if strategy.kind == "dynamic_window" and strategy.window_schedule is None:
        schedule = WindowSchedule(start_extent=0.0, full_epoch=max(config.epochs - 1, 0))
        strategy = dataclasses.replace(strategy, window_schedule=schedule)
    return strategy


def train_patch(
    dataset,
    detector: DifferentiableDetector,
    config: AttackConfig,
    eval_dataset=None,
    eval_policy=None,
    eval_every: int | None = None,
    eval_last: int = 0,
    eval_seed: int = 97531,
):
    """Optimize a universal patch against a frozen detector.

    Per batch: sample placements per the strategy (one draw for the whole
    batch unless intra-batch variation is on), optionally sample and apply
    EoT per image, insert the patch by pixel replacement, run the detector,
    and take one projected Adam step on the patch pixels only.

    ``eval_every``/``eval_last`` trigger ASR evaluations on ``eval_dataset``
    (required when either is set); results land in ``TrainingLog.eval_asr``
    keyed by epoch. Reproducible bit-for-bit from ``config.seed``.
    """
    if len(dataset) == 0:
        raise ConfigError("attack dataset is empty")
    if (eval_every or eval_last) and eval_dataset is None:
        raise ConfigError("eval_dataset is required when eval_every/eval_last is set")
    resolution = detector.config.input_resolution
    if config.patch_size > resolution:
        raise ConfigError(f"patch size {config.patch_size} exceeds image size {resolution}")
    if config.eot is not None and config.eot.scale_range is not None:
        if config.eot.scale_range[1] > resolution:
            raise ConfigError("EoT scale range exceeds the image size")

    strategy = resolve_strategy(config)
    module = detector if isinstance(detector, torch.nn.Module) else None
    grad_flags = None
    if module is not None:
        grad_flags = [p.requires_grad for p in module.parameters()]
        module.requires_grad_(False)

    images = [torch.from_numpy(np.ascontiguousarray(dataset[i][0], dtype=np.float32))
              for i in range(len(dataset))]

    patch0 = init_patch(config.init_method, config.patch_size, np.random.default_rng(
        np.random.SeedSequence([config.seed, 0x1417])))
    pixels = torch.from_numpy(patch0.pixels.copy())
    state = AdamState.zeros(pixels.shape)
    heatmap = MidpointHeatmap(resolution)
    log = TrainingLog(heatmap=heatmap)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x03D3]))

    t0 = time.perf_counter()
    try:
        for epoch in range(config.epochs):
            order = order_rng.permutation(len(images))
            epoch_losses = []
            for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
                batch_idx = order[start : start + config.batch_size]
                pixels.requires_grad_(True)
                composited = []
                for slot, img_i in enumerate(batch_idx):
                    if config.eot is not None:
                        eot_rng = np.random.default_rng(
                            [config.seed, epoch, batch_index, slot, 0xE07])
                        params = sample_eot(config.eot, eot_rng)
                        transformed, mask = apply_eot(pixels, params)
                        if params.rotation_degrees == 0.0:
                            mask = None
                    else:
                        transformed, mask = pixels, None
                    placement = sample_placement(
                        strategy,
                        epoch=epoch,
                        batch_index=batch_index,
                        image_index=slot,
                        patch_size=int(transformed.shape[0]),
                        image_size=resolution,
                        seed=config.seed,
                    )
                    heatmap.record(placement, int(transformed.shape[0]))
                    composited.append(
                        apply_patch(images[int(img_i)], transformed, placement, mask))
                x = torch.stack(composited).permute(0, 3, 1, 2)
                objectness = detector.raw_objectness(x)
                loss = batch_objectness_loss(objectness)
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"attack loss diverged at epoch {epoch} (seed={config.seed})")
                loss.backward()
                grad = pixels.grad
                pixels, state = pgd_step(pixels.detach(), grad, state, config.learning_rate)
                epoch_losses.append(float(loss.detach()))
            log.epoch_losses.append(float(np.mean(epoch_losses)))

            due_every = eval_every is not None and (epoch + 1) % eval_every == 0
            due_last = eval_last > 0 and epoch >= config.epochs - eval_last
            if due_every or due_last:
                from .evaluation import evaluate_asr

                report = evaluate_asr(
                    eval_dataset,
                    pixels.detach().numpy(),
                    detector,
                    policy=eval_policy,
                    seed=eval_seed,
                )
                log.eval_asr[epoch] = report.asr
    finally:
        if module is not None and grad_flags is not None:
            for p, flag in zip(module.parameters(), grad_flags):
                p.requires_grad_(flag)

    log.wall_clock_s = time.perf_counter() - t0
    final = Patch(
        pixels=pixels.detach().numpy().copy(),
        init_method=config.init_method,
        seed=config.seed,
        metadata={
            "epochs": config.epochs,
            "strategy": strategy.kind,
            "intra_batch_variation": strategy.intra_batch_variation,
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
        },
    )
    return final, log
