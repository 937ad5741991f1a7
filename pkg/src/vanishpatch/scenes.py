"""Synthetic detection scenes: random geometric shapes with tight boxes.

Images are float32 arrays of shape (H, W, 3) with values in [0, 1]. Ground
truth is a list of ``(class_id, (x0, y0, x1, y1))`` with corner-form pixel
boxes. The on-disk layout is ``images/NNNNNN.png`` + ``labels/NNNNNN.txt``
(one ``class cx cy w h`` record per object, normalized to [0, 1]) plus a
``dataset.meta`` JSON file.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError

CLASS_NAMES = ("circle", "square", "triangle")

# saturated foreground colors, picked to stand out from the muted backgrounds
DEFAULT_PALETTE = (
    (0.85, 0.10, 0.10),
    (0.10, 0.10, 0.85),
    (0.05, 0.55, 0.10),
    (0.85, 0.65, 0.05),
    (0.60, 0.10, 0.60),
    (0.05, 0.60, 0.60),
)

META_FILENAME = "dataset.meta"
META_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    """Parameters for one family of random scenes."""

    image_size: int = 96
    min_shapes: int = 1
    max_shapes: int = 3
    size_range: tuple[int, int] = (14, 30)
    classes: tuple[str, ...] = CLASS_NAMES
    palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    background: str = "noise"  # solid | gradient | noise
    noise_amplitude: float = 0.12
    min_center_distance: float | None = None  # None: require disjoint boxes instead
    box_gap: int = 3
    margin: int = 2
    max_retries: int = 200

    def __post_init__(self):
        if self.min_shapes < 0 or self.max_shapes < self.min_shapes:
            raise ConfigError("shape-count range is empty")
        lo, hi = self.size_range
        if lo < 4 or hi < lo:
            raise ConfigError(f"bad size_range {self.size_range}")
        if hi + 2 * self.margin > self.image_size:
            raise ConfigError("largest shape does not fit inside the image")
        if self.background not in ("solid", "gradient", "noise"):
            raise ConfigError(f"unknown background mode {self.background!r}")
        for name in self.classes:
            if name not in CLASS_NAMES:
                raise ConfigError(f"unknown shape class {name!r}")

    def accepts(self, cx: float, cy: float, shape_size: float, placed) -> bool:
        """Placement rule for a new shape center against already placed ones.

        With ``min_center_distance`` set, that distance is enforced; by
        default the shape's bounding square (padded by ``box_gap``) must not
        intersect any placed one, which keeps tight boxes disjoint.
        """
        if self.min_center_distance is not None:
            return all(
                (cx - ox) ** 2 + (cy - oy) ** 2 >= self.min_center_distance**2
                for ox, oy, _ in placed
            )
        half = shape_size / 2 + self.box_gap
        for ox, oy, osize in placed:
            ohalf = osize / 2
            if abs(cx - ox) < half + ohalf and abs(cy - oy) < half + ohalf:
                return False
        return True


def _render_background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    base = rng.uniform(0.35, 0.75, size=3)
    img = np.broadcast_to(base, (size, size, 3)).astype(np.float64).copy()
    if spec.background == "gradient":
        other = rng.uniform(0.25, 0.85, size=3)
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:size, 0:size]
        t = (np.cos(angle) * xx + np.sin(angle) * yy) / size
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = base[None, None, :] * (1 - t[..., None]) + other[None, None, :] * t[..., None]
    elif spec.background == "noise":
        img += rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, size=(size, size, 3))
    return np.clip(img, 0.0, 1.0)


def _shape_mask(kind: str, size: int, shape_size: int, cx: float, cy: float) -> np.ndarray:
    """Boolean foreground mask for one shape, tested at pixel centers."""
    yy, xx = np.mgrid[0:size, 0:size]
    px = xx + 0.5
    py = yy + 0.5
    s = float(shape_size)
    if kind == "circle":
        r = s / 2
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == "square":
        half = s / 2
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    if kind == "triangle":
        # upward triangle spanning the s x s box centered at (cx, cy)
        apex = np.array([cx, cy - s / 2])
        left = np.array([cx - s / 2, cy + s / 2])
        right = np.array([cx + s / 2, cy + s / 2])
        mask = np.ones((size, size), dtype=bool)
        for a, b in ((apex, right), (right, left), (left, apex)):
            cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
            mask &= cross >= 0
        return mask
    raise ConfigError(f"unknown shape class {kind!r}")


def generate_scene(spec: SceneSpec, seed) -> tuple[np.ndarray, list]:
    """Render one random scene.

    Deterministic for a given ``seed``. Returns ``(image, ground_truth)``
    where every ground-truth box is the tight pixel bound of its shape mask.
    Raises ConfigError when the requested shapes cannot be placed within
    ``spec.max_retries`` attempts.
    """
    rng = np.random.default_rng(seed)
    img = _render_background(spec, rng)
    size = spec.image_size
    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))

    placed: list[tuple[float, float, float]] = []
    ground_truth = []
    for _ in range(n_shapes):
        ok = False
        for _attempt in range(spec.max_retries):
            shape_size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            half = shape_size / 2
            lo = half + spec.margin
            hi = size - half - spec.margin
            cx = float(rng.uniform(lo, hi))
            cy = float(rng.uniform(lo, hi))
            if spec.accepts(cx, cy, shape_size, placed):
                ok = True
                break
        if not ok:
            raise ConfigError(
                f"could not place {n_shapes} shapes within {spec.max_retries} retries "
                f"(seed={seed})"
            )
        kind = str(rng.choice(spec.classes))
        color = np.array(spec.palette[int(rng.integers(len(spec.palette)))])
        mask = _shape_mask(kind, size, shape_size, cx, cy)
        img[mask] = color
        ys, xs = np.nonzero(mask)
        box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        ground_truth.append((CLASS_NAMES.index(kind), box))
        placed.append((cx, cy, float(shape_size)))
    return img.astype(np.float32), ground_truth


class SceneDataset:
    """Sequence of (image, ground_truth) pairs, in memory or lazily from disk.

    ``dataset[i]`` returns ``(float32 HxWx3 image in [0,1], ground_truth)``.
    """

    def __init__(self, items=None, *, image_paths=None, labels=None, image_size=None, meta=None):
        self._items = items
        self._image_paths = image_paths
        self._labels = labels
        self.image_size = image_size
        self.meta = meta or {}

    def __len__(self):
        if self._items is not None:
            return len(self._items)
        return len(self._image_paths)

    def __getitem__(self, index: int):
        if self._items is not None:
            return self._items[index]
        img = np.asarray(Image.open(self._image_paths[index]).convert("RGB"), dtype=np.float32)
        return img / 255.0, self._labels[index]

    def subset(self, indices) -> "SceneDataset":
        if self._items is not None:
            return SceneDataset(
                items=[self._items[i] for i in indices],
                image_size=self.image_size,
                meta=self.meta,
            )
        return SceneDataset(
            image_paths=[self._image_paths[i] for i in indices],
            labels=[self._labels[i] for i in indices],
            image_size=self.image_size,
            meta=self.meta,
        )


def make_dataset(spec: SceneSpec, count: int, master_seed: int) -> SceneDataset:
    """Generate ``count`` scenes in memory; scene i uses seed (master_seed, i)."""
    items = [generate_scene(spec, np.random.SeedSequence([master_seed, i])) for i in range(count)]
    return SceneDataset(items=items, image_size=spec.image_size, meta={"master_seed": master_seed})


def split_dataset(dataset: SceneDataset, val_fraction: float, seed: int):
    """Deterministic shuffled train/val split."""
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    val_idx = order[:n_val].tolist()
    train_idx = order[n_val:].tolist()
    return dataset.subset(train_idx), dataset.subset(val_idx)


def write_dataset(spec: SceneSpec, count: int, directory, master_seed: int = 0) -> str:
    """Generate scenes and persist them under ``directory``.

    Images are 8-bit RGB PNGs; labels are normalized ``class cx cy w h``
    records, one line per object.
    """
    directory = os.fspath(directory)
    images_dir = os.path.join(directory, "images")
    labels_dir = os.path.join(directory, "labels")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(labels_dir, exist_ok=True)
    size = float(spec.image_size)
    for i in range(count):
        img, gt = generate_scene(spec, np.random.SeedSequence([master_seed, i]))
        arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(images_dir, f"{i:06d}.png"))
        lines = []
        for class_id, (x0, y0, x1, y1) in gt:
            cx = (x0 + x1) / 2 / size
            cy = (y0 + y1) / 2 / size
            w = (x1 - x0) / size
            h = (y1 - y0) / size
            lines.append(f"{class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
        with open(os.path.join(labels_dir, f"{i:06d}.txt"), "w") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
    meta = {
        "format_version": META_FORMAT_VERSION,
        "count": count,
        "image_size": spec.image_size,
        "master_seed": master_seed,
        "spec": dataclasses.asdict(spec),
    }
    with open(os.path.join(directory, META_FILENAME), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return directory


def _parse_label_file(path: str, image_size: float) -> list:
    gt = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DatasetError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            try:
                class_id = int(parts[0])
                cx, cy, w, h = (float(p) for p in parts[1:])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if class_id < 0 or class_id >= len(CLASS_NAMES):
                raise DatasetError(f"{path}:{lineno}: class id {class_id} out of range")
            box = (
                (cx - w / 2) * image_size,
                (cy - h / 2) * image_size,
                (cx + w / 2) * image_size,
                (cy + h / 2) * image_size,
            )
            gt.append((class_id, box))
    return gt


def load_dataset(directory) -> SceneDataset:
    """Load a dataset written by :func:`write_dataset`."""
    directory = os.fspath(directory)
    meta_path = os.path.join(directory, META_FILENAME)
    if not os.path.exists(meta_path):
        raise DatasetError(f"missing {META_FILENAME} in {directory}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != META_FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {meta.get('format_version')}")
    image_size = float(meta["image_size"])
    image_paths = []
    labels = []
    for i in range(int(meta["count"])):
        img_path = os.path.join(directory, "images", f"{i:06d}.png")
        lbl_path = os.path.join(directory, "labels", f"{i:06d}.txt")
        if not os.path.exists(img_path):
            raise DatasetError(f"missing image file {img_path}")
        if not os.path.exists(lbl_path):
            raise DatasetError(f"missing annotation file {lbl_path}")
        image_paths.append(img_path)
        labels.append(_parse_label_file(lbl_path, image_size))
    return SceneDataset(
        image_paths=image_paths, labels=labels, image_size=int(meta["image_size"]), meta=meta
    )
