"""Differentiable patch augmentations for expectation-over-transformations.

The transform chain is fixed: color (hue, saturation, contrast, brightness),
then bilinear rescale to the sampled target size, then rotation with
bilinear resampling. Identity parameters reproduce the input bit-exactly
because every sub-transform is skipped at its identity value. Positive
rotation angles turn the patch counter-clockwise.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

# Rec. 601 luma; hue rotates the chroma plane around this axis so it is
# luminance-preserving by construction.
_RGB_TO_YIQ = torch.tensor(
    [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ]
)
_YIQ_TO_RGB = torch.linalg.inv(_RGB_TO_YIQ)
_LUMA = torch.tensor([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class EoTConfig:
    """Sampling ranges; a ``None`` range disables that transform.

    Hue shifts are fractions of the full color wheel, brightness is an
    additive offset, saturation/contrast are multiplicative scales (1 is
    identity), rotation is symmetric in degrees, and the scale range is the
    inclusive integer interval of target patch sizes in pixels.
    """

    hue_range: tuple[float, float] | None = (-0.05, 0.05)
    brightness_range: tuple[float, float] | None = (-0.15, 0.15)
    saturation_range: tuple[float, float] | None = (0.7, 1.0)
    contrast_range: tuple[float, float] | None = (0.7, 1.0)
    rotation_degrees: float | None = 15.0
    scale_range: tuple[int, int] | None = (60, 120)

    def __post_init__(self):
        for name in ("hue_range", "brightness_range", "saturation_range", "contrast_range"):
            rng = getattr(self, name)
            if rng is not None and rng[0] > rng[1]:
                raise ConfigError(f"{name} {rng} is not well-ordered")
        if self.saturation_range is not None and self.saturation_range[0] < 0:
            raise ConfigError("saturation scale must be >= 0")
        if self.contrast_range is not None and self.contrast_range[0] < 0:
            raise ConfigError("contrast scale must be >= 0")
        if self.rotation_degrees is not None and not 0 <= self.rotation_degrees <= 45:
            raise ConfigError("rotation range must lie within +-45 degrees")
        if self.scale_range is not None:
            lo, hi = self.scale_range
            if lo < 1 or hi < lo:
                raise ConfigError(f"scale_range {self.scale_range} is invalid")

    @classmethod
    def disabled(cls) -> "EoTConfig":
        return cls(
            hue_range=None,
            brightness_range=None,
            saturation_range=None,
            contrast_range=None,
            rotation_degrees=None,
            scale_range=None,
        )


@dataclass(frozen=True)
class EoTParams:
    hue_shift: float = 0.0
    brightness: float = 0.0
    saturation: float = 1.0
    contrast: float = 1.0
    rotation_degrees: float = 0.0
    target_size: int | None = None

    @classmethod
    def identity(cls) -> "EoTParams":
        return cls()

    def is_identity(self) -> bool:
        return (
            self.hue_shift == 0.0
            and self.brightness == 0.0
            and self.saturation == 1.0
            and self.contrast == 1.0
            and self.rotation_degrees == 0.0
            and self.target_size is None
        )


def sample_eot(config: EoTConfig, rng) -> EoTParams:
    """Draw independent uniform parameters for every enabled transform."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    hue = float(rng.uniform(*config.hue_range)) if config.hue_range else 0.0
    brightness = float(rng.uniform(*config.brightness_range)) if config.brightness_range else 0.0
    saturation = float(rng.uniform(*config.saturation_range)) if config.saturation_range else 1.0
    contrast = float(rng.uniform(*config.contrast_range)) if config.contrast_range else 1.0
    rotation = (
        float(rng.uniform(-config.rotation_degrees, config.rotation_degrees))
        if config.rotation_degrees
        else 0.0
    )
    target = (
        int(rng.integers(config.scale_range[0], config.scale_range[1] + 1))
        if config.scale_range
        else None
    )
    return EoTParams(hue, brightness, saturation, contrast, rotation, target)


def _hue_matrix(hue_shift: float, dtype, device) -> torch.Tensor:
    theta = 2.0 * math.pi * hue_shift
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rot = torch.tensor(
        [[1.0, 0.0, 0.0], [0.0, cos_t, -sin_t], [0.0, sin_t, cos_t]],
        dtype=torch.float64,
    )
    m = _YIQ_TO_RGB.to(torch.float64) @ rot @ _RGB_TO_YIQ.to(torch.float64)
    return m.to(dtype=dtype, device=device)


def _color_transform(patch: torch.Tensor, params: EoTParams) -> torch.Tensor:
    changed = False
    out = patch
    if params.hue_shift != 0.0:
        m = _hue_matrix(params.hue_shift, out.dtype, out.device)
        out = out @ m.T
        changed = True
    if params.saturation != 1.0:
        luma = (out * _LUMA.to(out.dtype)).sum(dim=-1, keepdim=True)
        out = luma + params.saturation * (out - luma)
        changed = True
    if params.contrast != 1.0:
        mean = (out * _LUMA.to(out.dtype)).sum(dim=-1).mean()
        out = mean + params.contrast * (out - mean)
        changed = True
    if params.brightness != 0.0:
        out = out + params.brightness
        changed = True
    if changed:
        out = out.clamp(0.0, 1.0)
    return out


def _rotate(patch: torch.Tensor, degrees: float) -> tuple[torch.Tensor, torch.Tensor]:
    # affine_grid maps output coords to input coords, hence the inverse angle
    alpha = math.radians(degrees)
    cos_a, sin_a = math.cos(alpha), math.sin(alpha)
    theta = torch.tensor(
        [[cos_a, sin_a, 0.0], [-sin_a, cos_a, 0.0]], dtype=patch.dtype
    ).unsqueeze(0)
    chw = patch.permute(2, 0, 1).unsqueeze(0)
    grid = F.affine_grid(theta, list(chw.shape), align_corners=False)
    rotated = F.grid_sample(chw, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    ones = torch.ones(1, 1, patch.shape[0], patch.shape[1], dtype=patch.dtype)
    footprint = F.grid_sample(ones, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    mask = (footprint > 0.5).to(patch.dtype)
    return rotated.squeeze(0).permute(1, 2, 0), mask.squeeze(0).squeeze(0)


def apply_eot(patch, params: EoTParams):
    """Apply the color/scale/rotation chain to an (S, S, 3) patch.

    Returns ``(transformed, mask)`` where the mask is 1 on pixels covered by
    the (possibly rotated) patch footprint. Torch inputs keep their autograd
    graph; numpy inputs return numpy arrays.
    """
    was_numpy = not isinstance(patch, torch.Tensor)
    t = (
        torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32))
        if was_numpy
        else patch
    )
    if t.dim() != 3 or t.shape[2] != 3:
        raise ConfigError(f"patch must be (S,S,3), got {tuple(t.shape)}")

    out = _color_transform(t, params)
    if params.target_size is not None and params.target_size != out.shape[0]:
        chw = out.permute(2, 0, 1).unsqueeze(0)
        chw = F.interpolate(
            chw, size=(params.target_size, params.target_size), mode="bilinear", align_corners=False
        )
        out = chw.squeeze(0).permute(1, 2, 0)
    if params.rotation_degrees != 0.0:
        out, mask = _rotate(out, params.rotation_degrees)
    else:
        mask = torch.ones(out.shape[0], out.shape[1], dtype=out.dtype)
    if out is t:  # full identity: hand back an equal-valued copy
        out = t.clone()
    if was_numpy:
        return out.detach().numpy(), mask.detach().numpy()
    return out, mask
