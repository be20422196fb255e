from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

import torch
from torch import Tensor
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF
from torchvision.transforms import InterpolationMode

from einops import rearrange, reduce

from metastasis_ewc_pytorch.errors import AugmentError

# functions

def exists(v):
    return v is not None

def within(inner, outer):
    return outer[0] <= inner[0] <= inner[1] <= outer[1]

# widest ranges allowed, one per augmentation step, applied in this order

MIRRORS = (True, False)
ROTATIONS = (0, 1, 2, 3)
SCALE_RANGE = (0.9, 1.1)
HUE_RANGE = (-0.1, 0.1)
SATURATION_RANGE = (-0.25, 0.25)
BRIGHTNESS_RANGE = (-0.25, 0.25)
CONTRAST_RANGE = (-0.25, 0.25)
NOISE_RANGE = (0., 0.05)
BLUR_RANGE = (0., 1.)

RANGE_LIMITS = dict(
    scale = SCALE_RANGE,
    hue = HUE_RANGE,
    saturation = SATURATION_RANGE,
    brightness = BRIGHTNESS_RANGE,
    contrast = CONTRAST_RANGE,
    noise = NOISE_RANGE,
    blur = BLUR_RANGE
)

@dataclass(frozen = True)
class AugConfig:
    # a step set to None is disabled

    mirror: tuple[bool, ...] | None = MIRRORS
    rotation: tuple[int, ...] | None = ROTATIONS
    scale: tuple[float, float] | None = SCALE_RANGE
    hue: tuple[float, float] | None = HUE_RANGE
    saturation: tuple[float, float] | None = SATURATION_RANGE
    brightness: tuple[float, float] | None = BRIGHTNESS_RANGE
    contrast: tuple[float, float] | None = CONTRAST_RANGE
    noise: tuple[float, float] | None = NOISE_RANGE
    blur: tuple[float, float] | None = BLUR_RANGE

    def __post_init__(self):
        assert not exists(self.mirror) or set(self.mirror) <= set(MIRRORS)
        assert not exists(self.rotation) or set(self.rotation) <= set(ROTATIONS), 'rotations are quarter turns 0 - 3'

        for name, widest in RANGE_LIMITS.items():
            value = getattr(self, name)
            assert not exists(value) or within(value, widest), f'{name} range {value} exceeds {widest}'

    @classmethod
    def identity(cls, **overrides):
        fields = dict(mirror = None, rotation = None, scale = None, hue = None, saturation = None, brightness = None, contrast = None, noise = None, blur = None)
        fields.update(overrides)
        return cls(**fields)

# hsv colorspace, hue as a fraction of the full circle

def rgb_to_hsv(rgb: Tensor):
    r, g, b = rgb.unbind(dim = -3)

    maxc, _ = rgb.max(dim = -3)
    minc, _ = rgb.min(dim = -3)
    delta = maxc - minc

    value = maxc
    saturation = torch.where(maxc > 0, delta / maxc.clamp(min = 1e-12), torch.zeros_like(maxc))

    safe_delta = delta.clamp(min = 1e-12)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta

    hue = torch.where(
        maxc == r,
        bc - gc,
        torch.where(maxc == g, 2. + rc - bc, 4. + gc - rc)
    )

    hue = torch.where(delta > 0, (hue / 6.) % 1., torch.zeros_like(hue))
    return torch.stack((hue, saturation, value), dim = -3)

def hsv_to_rgb(hsv: Tensor):
    hue, saturation, value = hsv.unbind(dim = -3)

    sector = torch.floor(hue * 6.)
    fraction = hue * 6. - sector
    sector = sector.long() % 6

    p = value * (1. - saturation)
    q = value * (1. - saturation * fraction)
    t = value * (1. - saturation * (1. - fraction))

    choices = (
        (value, t, p),
        (q, value, p),
        (p, value, t),
        (p, q, value),
        (t, p, value),
        (value, p, q)
    )

    channels = []

    for channel in range(3):
        out = torch.zeros_like(value)

        for index, choice in enumerate(choices):
            out = torch.where(sector == index, choice[channel], out)

        channels.append(out)

    return torch.stack(channels, dim = -3)

# individual steps

def rescale(patch: Tensor, zoom: float):
    size = patch.shape[-1]
    resized_size = round(size * zoom)

    if resized_size == size:
        return patch

    resized = TF.resize(patch, [resized_size, resized_size], interpolation = InterpolationMode.BILINEAR, antialias = False)

    if resized_size > size:
        offset = (resized_size - size) // 2
        return resized[..., offset:(offset + size), offset:(offset + size)]

    pad = size - resized_size
    before, after = pad // 2, pad - pad // 2

    resized = rearrange(resized, 'c h w -> 1 c h w')
    padded = F.pad(resized, (before, after, before, after), mode = 'reflect')
    return rearrange(padded, '1 c h w -> c h w')

def adjust_hsv(patch: Tensor, hue: float, saturation: float, brightness: float):
    if hue == 0. and saturation == 0. and brightness == 0.:
        return patch

    h, s, v = rgb_to_hsv(patch).unbind(dim = -3)

    h = (h + hue) % 1.
    s = (s + saturation).clamp(0., 1.)
    v = (v + brightness).clamp(0., 1.)

    return hsv_to_rgb(torch.stack((h, s, v), dim = -3))

def adjust_contrast(patch: Tensor, contrast: float):
    mean = reduce(patch, 'c h w -> c 1 1', 'mean')
    return (patch - mean) * (1. + contrast) + mean

def gaussian_blur(patch: Tensor, sigma: float):
    if sigma <= 0.:
        return patch

    # kernel truncated at three sigma

    radius = max(1, math.ceil(3. * sigma))
    kernel_size = 2 * radius + 1

    return TF.gaussian_blur(patch, [kernel_size, kernel_size], [sigma, sigma])

# main function

def uniform(rng: np.random.Generator, bounds):
    low, high = bounds
    return float(rng.uniform(low, high)) if high > low else float(low)

def augment_patch(
    patch: Tensor,
    cfg: AugConfig,
    rng: np.random.Generator
) -> Tensor:

    if patch.ndim != 3 or patch.shape[-1] != patch.shape[-2]:
        raise AugmentError(f'expected a square (3, H, W) patch, got {tuple(patch.shape)}')

    if patch.min() < 0. or patch.max() > 1.:
        raise AugmentError('patch values must lie in [0, 1]')

    out = patch

    # 1. mirroring

    if exists(cfg.mirror) and cfg.mirror[rng.integers(len(cfg.mirror))]:
        out = torch.flip(out, dims = (-1,))

    # 2. rotation

    if exists(cfg.rotation):
        turns = int(cfg.rotation[rng.integers(len(cfg.rotation))])
        out = torch.rot90(out, turns, dims = (-2, -1))

    # 3. scaling

    if exists(cfg.scale):
        out = rescale(out, uniform(rng, cfg.scale))

    # 4 - 6. hue, saturation, brightness

    hue = uniform(rng, cfg.hue) if exists(cfg.hue) else 0.
    saturation = uniform(rng, cfg.saturation) if exists(cfg.saturation) else 0.
    brightness = uniform(rng, cfg.brightness) if exists(cfg.brightness) else 0.

    out = adjust_hsv(out, hue, saturation, brightness)

    # 7. contrast

    if exists(cfg.contrast):
        out = adjust_contrast(out, uniform(rng, cfg.contrast))

    # 8. additive gaussian noise

    if exists(cfg.noise):
        sigma = uniform(rng, cfg.noise)

        if sigma > 0.:
            noise = torch.from_numpy(rng.standard_normal(tuple(out.shape))).to(out)
            out = out + noise * sigma

    # 9. gaussian blur

    if exists(cfg.blur):
        out = gaussian_blur(out, uniform(rng, cfg.blur))

    return out.clamp(0., 1.)

# dihedral group, k = rotation + 4 * vertical mirror

def dihedral8(t: Tensor, k: int):
    if not 0 <= k < 8:
        raise AugmentError(f'dihedral index must lie in 0 - 7, got {k}')

    turns, mirrored = k % 4, k >= 4

    if mirrored:
        t = torch.flip(t, dims = (-2,))

    return torch.rot90(t, turns, dims = (-2, -1))

def inverse_dihedral8(t: Tensor, k: int):
    if not 0 <= k < 8:
        raise AugmentError(f'dihedral index must lie in 0 - 7, got {k}')

    turns, mirrored = k % 4, k >= 4

    t = torch.rot90(t, -turns, dims = (-2, -1))

    if mirrored:
        t = torch.flip(t, dims = (-2,))

    return t
