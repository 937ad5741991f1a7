"""Attack success rate with a uni-color dummy-patch baseline.

For every image one placement is drawn and used for BOTH the adversarial
patch and a plain baseline patch of the same size at the same position; the
per-image score is max(0, 1 - N_adv / N_dummy). Comparing against the dummy
rather than the clean image discounts detections lost to mere occlusion.
Images whose dummy-patched version yields zero detections are excluded from
the mean and tallied separately (the ratio is undefined there).
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .attack import Patch
from .detector import DifferentiableDetector, count_objects_batch
from .errors import ConfigError, EvaluationError, PlacementError
from .placement import Placement, apply_patch, center_placement


@dataclass(frozen=True)
class EvalPolicy:
    """Placement policy at evaluation time.

    ``random`` draws one uniform placement per image from the evaluation
    seed; ``fixed_center`` centers the patch; ``fixed`` uses ``position``
    (top-left row, col) for every image.
    """

    kind: str = "random"
    position: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("random", "fixed_center", "fixed"):
            raise ConfigError(f"unknown evaluation policy {self.kind!r}")
        if self.kind == "fixed" and self.position is None:
            raise ConfigError("fixed evaluation policy requires a position")

    def placement_for(self, image_index: int, patch_size: int, image_size: int, seed: int) -> Placement:
        if self.kind == "fixed_center":
            return center_placement(patch_size, image_size)
        if self.kind == "fixed":
            return Placement(*self.position).validate(patch_size, image_size)
        rng = np.random.default_rng([seed, image_index, 0x51E])
        hi = image_size - patch_size
        return Placement(int(rng.integers(0, hi + 1)), int(rng.integers(0, hi + 1)))


@dataclass
class ImageEval:
    image_id: int
    row: int
    col: int
    n_dummy: int
    n_adv: int
    term: float | None  # None when the image was excluded (n_dummy == 0)


@dataclass
class ASRReport:
    records: list
    asr: float
    n_evaluated: int
    n_excluded: int
    baseline_color: tuple
    policy: EvalPolicy
    patch_size: int
    seed: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "row", "col", "n_dummy", "n_adv", "term"])
            for rec in self.records:
                term = "" if rec.term is None else f"{rec.term:.6f}"
                writer.writerow([rec.image_id, rec.row, rec.col, rec.n_dummy, rec.n_adv, term])

    def summary(self) -> dict:
        return {
            "asr": self.asr,
            "n_evaluated": self.n_evaluated,
            "n_excluded": self.n_excluded,
            "baseline_color": list(self.baseline_color),
            "policy": self.policy.kind,
            "patch_size": self.patch_size,
            "seed": self.seed,
        }


def per_image_term(n_adv: int, n_dummy: int) -> float:
    """max(0, 1 - n_adv/n_dummy); n_dummy must be >= 1."""
    if n_dummy < 1:
        raise EvaluationError("per_image_term requires n_dummy >= 1")
    if n_adv < 0:
        raise EvaluationError("n_adv must be >= 0")
    return max(0.0, 1.0 - n_adv / n_dummy)


def evaluate_asr(
    dataset,
    patch,
    detector: DifferentiableDetector,
    policy: EvalPolicy | None = None,
    baseline_color=(1.0, 1.0, 1.0),
    seed: int = 0,
    batch_size: int = 16,
) -> ASRReport:
    """Score a patch over a dataset against the uni-color baseline.

    Deterministic for fixed (patch, dataset, seed, policy). Raises
    EvaluationError when every image is excluded.
    """
    policy = policy or EvalPolicy()
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float32)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ConfigError(f"patch must be (S,S,3), got {pixels.shape}")
    size = int(pixels.shape[0])
    resolution = detector.config.input_resolution
    if size > resolution:
        raise PlacementError(f"patch size {size} exceeds image size {resolution}")
    color = np.asarray(baseline_color, dtype=np.float32).reshape(3)
    if color.min() < 0 or color.max() > 1:
        raise ConfigError("baseline color channels must lie in [0,1]")
    dummy = np.broadcast_to(color, (size, size, 3)).astype(np.float32)

    records = []
    terms = []
    for start in range(0, len(dataset), batch_size):
        idxs = list(range(start, min(start + batch_size, len(dataset))))
        adv_images = []
        dummy_images = []
        placements = []
        for i in idxs:
            image = dataset[i][0]
            placement = policy.placement_for(i, size, resolution, seed)
            placements.append(placement)
            adv_images.append(apply_patch(image, pixels, placement))
            dummy_images.append(apply_patch(image, dummy, placement))
        n_adv = count_objects_batch(adv_images, detector)
        n_dummy = count_objects_batch(dummy_images, detector)
        for i, placement, na, nd in zip(idxs, placements, n_adv, n_dummy):
            term = per_image_term(na, nd) if nd >= 1 else None
            if term is not None:
                terms.append(term)
            records.append(ImageEval(i, placement.row, placement.col, nd, na, term))
    if not terms:
        raise EvaluationError(
            "every image was excluded (zero detections under the baseline patch)")
    return ASRReport(
        records=records,
        asr=float(np.mean(terms)),
        n_evaluated=len(terms),
        n_excluded=len(records) - len(terms),
        baseline_color=tuple(float(c) for c in color),
        policy=policy,
        patch_size=size,
        seed=seed,
    )


@dataclass
class VarianceStats:
    """Spread of ASR trajectories across epochs and runs."""

    tails: list
    intra_run_spreads: list
    tail_means: list
    inter_run_spread: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "tail_mean", "intra_run_spread", "tail"])
            for i, (mean, spread, tail) in enumerate(
                zip(self.tail_means, self.intra_run_spreads, self.tails)
            ):
                writer.writerow([i, f"{mean:.6f}", f"{spread:.6f}",
                                 " ".join(f"{v:.6f}" for v in tail)])
            writer.writerow(["inter_run_spread", f"{self.inter_run_spread:.6f}", "", ""])


def seed_variance(trajectories, tail: int = 5) -> VarianceStats:
    """Intra-run spread over the last ``tail`` epochs and spread of tail means."""
    if not trajectories:
        raise EvaluationError("no trajectories given")
    tails = []
    for i, traj in enumerate(trajectories):
        values = [float(v) for v in traj]
        if len(values) < tail:
            raise EvaluationError(f"trajectory {i} has {len(values)} epochs, needs >= {tail}")
        tails.append(values[-tail:])
    spreads = [max(t) - min(t) for t in tails]
    means = [float(np.mean(t)) for t in tails]
    return VarianceStats(
        tails=tails,
        intra_run_spreads=spreads,
        tail_means=means,
        inter_run_spread=max(means) - min(means),
    )
