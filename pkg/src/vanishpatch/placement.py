"""Patch placement: strategies, pixel replacement, and midpoint heatmaps.

A placement is the integer (row, col) of the patch's top-left pixel; the
patch rectangle must lie fully inside the image. Sampling is keyed on
(seed, epoch, batch, image) so any placement can be re-drawn independently
of worker count or call order.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, PlacementError

STRATEGY_KINDS = ("fixed_center", "dynamic_window", "random")


@dataclass(frozen=True)
class Placement:
    row: int
    col: int

    def midpoint(self, patch_size: int) -> tuple[int, int]:
        return self.row + patch_size // 2, self.col + patch_size // 2

    def validate(self, patch_size: int, image_size: int) -> "Placement":
        if patch_size > image_size:
            raise PlacementError(f"patch size {patch_size} exceeds image size {image_size}")
        if not (0 <= self.row <= image_size - patch_size and 0 <= self.col <= image_size - patch_size):
            raise PlacementError(
                f"placement ({self.row},{self.col}) out of bounds for patch {patch_size} "
                f"in image {image_size}"
            )
        return self


@dataclass(frozen=True)
class WindowSchedule:
    """Linear growth of the dynamic window's half-extent over epochs.

    The half-extent starts at ``start_extent`` pixels and reaches the full
    valid range either at ``full_epoch`` (linear interpolation) or by adding
    ``growth_per_epoch`` pixels each epoch; exactly one of the two must be
    given. The extent never shrinks and is capped at the valid range.
    """

    start_extent: float = 0.0
    full_epoch: int | None = None
    growth_per_epoch: float | None = None

    def __post_init__(self):
        if self.start_extent < 0:
            raise ConfigError("start_extent must be >= 0")
        if (self.full_epoch is None) == (self.growth_per_epoch is None):
            raise ConfigError("specify exactly one of full_epoch / growth_per_epoch")
        if self.full_epoch is not None and self.full_epoch < 0:
            raise ConfigError("full_epoch must be >= 0")
        if self.growth_per_epoch is not None and self.growth_per_epoch < 0:
            raise ConfigError("growth_per_epoch must be >= 0")


def window_extent(schedule: WindowSchedule, epoch: int, max_extent: float) -> float:
    """Half-extent in pixels of the dynamic window at ``epoch``."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    start = min(schedule.start_extent, max_extent)
    if schedule.growth_per_epoch is not None:
        return min(start + schedule.growth_per_epoch * epoch, max_extent)
    if schedule.full_epoch == 0:
        return float(max_extent)
    frac = min(epoch / schedule.full_epoch, 1.0)
    return start + (max_extent - start) * frac


@dataclass(frozen=True)
class PlacementStrategy:
    """Where the patch goes during training.

    ``intra_batch_variation`` controls whether every image in a batch gets
    its own placement (on) or the whole batch shares one draw (off).
    """

    kind: str = "random"
    intra_batch_variation: bool = False
    window_schedule: WindowSchedule | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown placement strategy {self.kind!r}")
        if self.kind == "dynamic_window" and self.window_schedule is None:
            raise ConfigError("dynamic_window strategy requires a window_schedule")

    @classmethod
    def fixed_center(cls) -> "PlacementStrategy":
        return cls(kind="fixed_center")

    @classmethod
    def dynamic_window(cls, schedule: WindowSchedule, intra_batch_variation: bool = False):
        return cls(kind="dynamic_window", intra_batch_variation=intra_batch_variation,
                   window_schedule=schedule)

    @classmethod
    def uniform_random(cls, intra_batch_variation: bool = False) -> "PlacementStrategy":
        return cls(kind="random", intra_batch_variation=intra_batch_variation)


def center_placement(patch_size: int, image_size: int) -> Placement:
    c = (image_size - patch_size) // 2
    return Placement(c, c)


def _draw(strategy: PlacementStrategy, epoch: int, patch_size: int, image_size: int,
          rng: np.random.Generator) -> Placement:
    max_top_left = image_size - patch_size
    if strategy.kind == "fixed_center":
        return center_placement(patch_size, image_size)
    if strategy.kind == "random":
        row = int(rng.integers(0, max_top_left + 1))
        col = int(rng.integers(0, max_top_left + 1))
        return Placement(row, col)
    # dynamic window, centered on the fixed-center placement
    center = max_top_left // 2
    max_extent = max_top_left - center  # reaches both ends of the valid range
    extent = int(round(window_extent(strategy.window_schedule, epoch, max_extent)))
    lo = max(0, center - extent)
    hi = min(max_top_left, center + extent)
    row = int(rng.integers(lo, hi + 1))
    col = int(rng.integers(lo, hi + 1))
    return Placement(row, col)


def sample_placement(
    strategy: PlacementStrategy,
    *,
    epoch: int,
    batch_index: int,
    image_index: int,
    patch_size: int,
    image_size: int,
    seed: int,
) -> Placement:
    """Draw the placement for one image of one batch.

    Deterministic in all arguments. With intra-batch variation off, the
    image index is ignored, so every image of the batch receives the batch's
    single draw.
    """
    if patch_size > image_size:
        raise PlacementError(f"patch size {patch_size} exceeds image size {image_size}")
    img_key = image_index if strategy.intra_batch_variation else 0
    rng = np.random.default_rng([seed, epoch, batch_index, img_key, 0x9A7C])
    return _draw(strategy, epoch, patch_size, image_size, rng)


def coverage(patch_size: int, image_size: int) -> float:
    """Fraction of image pixels occupied by the patch."""
    if patch_size > image_size:
        raise PlacementError(f"patch size {patch_size} exceeds image size {image_size}")
    return (patch_size / image_size) ** 2


def apply_patch(image, patch, placement: Placement, mask=None):
    """Insert the patch by replacing pixels at ``placement``.

    ``image`` is (H, W, 3) and ``patch`` (S, S, 3); with torch inputs the
    output is a torch tensor through which gradients flow to the patch (and
    not to the replaced image pixels). ``mask`` is an optional (S, S) or
    (S, S, 1) array of {0, 1}: where 0, the original image pixel survives
    (used for rotated patches whose footprint misses the corners).
    """
    torch_mode = isinstance(image, torch.Tensor) or isinstance(patch, torch.Tensor)
    if torch_mode:
        img = image if isinstance(image, torch.Tensor) else torch.from_numpy(
            np.ascontiguousarray(image, dtype=np.float32))
        pat = patch if isinstance(patch, torch.Tensor) else torch.from_numpy(
            np.ascontiguousarray(patch, dtype=np.float32))
    else:
        img = np.asarray(image)
        pat = np.asarray(patch)
    s = int(pat.shape[0])
    h = int(img.shape[0])
    if pat.ndim != 3 or pat.shape[1] != s:
        raise PlacementError(f"patch must be square SxSx3, got {tuple(pat.shape)}")
    placement.validate(s, h)
    r, c = placement.row, placement.col
    if torch_mode:
        out = img.clone()
        if mask is None:
            out[r : r + s, c : c + s, :] = pat
        else:
            m = mask if isinstance(mask, torch.Tensor) else torch.from_numpy(
                np.ascontiguousarray(mask, dtype=np.float32))
            if m.dim() == 2:
                m = m.unsqueeze(-1)
            region = img[r : r + s, c : c + s, :]
            out[r : r + s, c : c + s, :] = m * pat + (1.0 - m) * region
        return out
    out = img.copy()
    if mask is None:
        out[r : r + s, c : c + s, :] = pat
    else:
        m = np.asarray(mask)
        if m.ndim == 2:
            m = m[:, :, None]
        region = img[r : r + s, c : c + s, :]
        out[r : r + s, c : c + s, :] = m * pat + (1.0 - m) * region
    return out


class MidpointHeatmap:
    """Count grid of patch midpoints at image resolution."""

    def __init__(self, image_size: int):
        self.image_size = image_size
        self.counts = np.zeros((image_size, image_size), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def record(self, placement: Placement, patch_size: int) -> None:
        row, col = placement.midpoint(patch_size)
        if not (0 <= row < self.image_size and 0 <= col < self.image_size):
            raise PlacementError(f"midpoint ({row},{col}) outside image")
        self.counts[row, col] += 1

    def binned(self, bins: int) -> np.ndarray:
        """Coarse bin counts; bin edges split the image as evenly as possible."""
        edges = np.linspace(0, self.image_size, bins + 1).astype(int)
        out = np.zeros((bins, bins), dtype=np.int64)
        for i in range(bins):
            for j in range(bins):
                out[i, j] = self.counts[edges[i] : edges[i + 1], edges[j] : edges[j + 1]].sum()
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "count"])
            for row, col in zip(*np.nonzero(self.counts)):
                writer.writerow([int(row), int(col), int(self.counts[row, col])])

    def to_png(self, path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(self.counts, cmap="hot", interpolation="nearest")
        ax.set_title(f"patch midpoints (n={self.total})")
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)

    @classmethod
    def from_csv(cls, path, image_size: int) -> "MidpointHeatmap":
        hm = cls(image_size)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for rec in reader:
                hm.counts[int(rec["row"]), int(rec["col"])] += int(rec["count"])
        return hm
