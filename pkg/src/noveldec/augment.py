"""Negative data augmentation: turn an in-class image into a hard negative.

Every transformation is driven by a ``numpy.random.Generator`` seeded with
PCG64, so outputs are reproducible across platforms for a given seed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .dataset import ImageSample
from .exceptions import ConfigError


@dataclass(frozen=True)
class AugmentationPolicy:
    """Parameters of the random transformation chain.

    Hue jitter is ``0.25 * jitter_strength`` so a strength of 0 disables
    all colour jitter.
    """

    crop_scale_range: tuple = (0.2, 1.0)
    crop_ratio_range: tuple = (3.0 / 4.0, 4.0 / 3.0)
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    flip_prob: float = 0.5
    rotation_angles: tuple = (90, 180, 270)
    rotation_prob: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "crop_scale_range", tuple(float(v) for v in self.crop_scale_range))
        object.__setattr__(self, "crop_ratio_range", tuple(float(v) for v in self.crop_ratio_range))
        object.__setattr__(self, "rotation_angles", tuple(int(a) for a in self.rotation_angles))
        low, high = self.crop_scale_range
        if not 0.0 < low <= high <= 1.0:
            raise ConfigError(f"crop_scale_range must satisfy 0 < low <= high <= 1, got {self.crop_scale_range}")
        rlow, rhigh = self.crop_ratio_range
        if not 0.0 < rlow <= rhigh:
            raise ConfigError("crop_ratio_range must be positive and ordered")
        for name in ("grayscale_prob", "flip_prob", "rotation_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.jitter_strength < 0:
            raise ConfigError("jitter_strength must be >= 0")
        if self.rotation_prob > 0 and not self.rotation_angles:
            raise ConfigError("rotation_prob > 0 needs at least one rotation angle")

    @property
    def hue(self):
        return min(0.5, 0.25 * self.jitter_strength)

    @classmethod
    def identity(cls):
        return cls(
            crop_scale_range=(1.0, 1.0),
            jitter_strength=0.0,
            grayscale_prob=0.0,
            flip_prob=0.0,
            rotation_prob=0.0,
        )

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class AugmentedPair:
    positive: ImageSample
    negative: ImageSample


def _crop_box(rng, height, width, scale_range, ratio_range):
    area = height * width
    scale = rng.uniform(*scale_range)
    log_ratio = rng.uniform(math.log(ratio_range[0]), math.log(ratio_range[1]))
    ratio = math.exp(log_ratio)
    target = scale * area
    w = math.sqrt(target * ratio)
    h = math.sqrt(target / ratio)
    # keep the requested area when one side overflows
    if w > width:
        w, h = width, target / width
    if h > height:
        h, w = height, target / height
    w = min(max(int(round(w)), 1), width)
    h = min(max(int(round(h)), 1), height)
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def augment_tensor(x: torch.Tensor, policy: AugmentationPolicy, seed: int) -> torch.Tensor:
    """Apply the negative-augmentation chain to one (C, H, W) tensor in [-1, 1].

    Order: resized crop, colour jitter, grayscale, horizontal flip, rotation.
    The same number of random draws is made for every policy so the stream
    layout does not depend on which steps end up being active.
    """
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got shape {tuple(x.shape)}")
    rng = np.random.default_rng(seed)
    channels, height, width = x.shape

    top, left, h, w = _crop_box(rng, height, width, policy.crop_scale_range, policy.crop_ratio_range)
    jitter = rng.uniform(-1.0, 1.0, size=4)
    u_gray, u_flip, u_rot = rng.uniform(size=3)
    angle_idx = int(rng.integers(0, max(len(policy.rotation_angles), 1)))

    out = x
    if (h, w) != (height, width):
        crop = out[:, top : top + h, left : left + w]
        out = F.interpolate(crop[None], size=(height, width), mode="bilinear", align_corners=False)[0]

    s = policy.jitter_strength
    if s > 0:
        img = (out + 1.0) * 0.5
        img = TF.adjust_brightness(img, max(0.0, 1.0 + s * jitter[0]))
        img = TF.adjust_contrast(img, max(0.0, 1.0 + s * jitter[1]))
        if channels == 3:
            img = TF.adjust_saturation(img, max(0.0, 1.0 + s * jitter[2]))
            img = TF.adjust_hue(img, float(policy.hue * jitter[3]))
        out = img * 2.0 - 1.0

    if channels == 3 and u_gray < policy.grayscale_prob:
        out = TF.rgb_to_grayscale((out + 1.0) * 0.5, num_output_channels=3) * 2.0 - 1.0

    if u_flip < policy.flip_prob:
        out = torch.flip(out, dims=(-1,))

    if u_rot < policy.rotation_prob:
        angle = policy.rotation_angles[angle_idx] % 360
        if angle % 90 == 0 and height == width:
            out = torch.rot90(out, k=angle // 90, dims=(-2, -1))
        elif angle:
            out = TF.rotate(out, angle, interpolation=InterpolationMode.NEAREST, fill=-1.0)

    return out.clamp(-1.0, 1.0)


def negative_augment(x: ImageSample, policy: AugmentationPolicy, seed: int) -> ImageSample:
    """Return the negative ("novelty-like") version of ``x``."""
    pixels = augment_tensor(torch.from_numpy(np.array(x.pixels)), policy, seed)
    return ImageSample(pixels.numpy(), x.label, f"{x.id}~neg{seed}")


def augment_batch(xs: torch.Tensor, policy: AugmentationPolicy, seed: int) -> torch.Tensor:
    """Batched form used by the trainer: image ``i`` is augmented with ``seed ^ i``."""
    return torch.stack([augment_tensor(x, policy, seed ^ i) for i, x in enumerate(xs)])


def make_pair_batch(xs, policy: AugmentationPolicy, seed: int):
    if not xs:
        raise ValueError("make_pair_batch needs at least one sample")
    return [AugmentedPair(x, negative_augment(x, policy, seed ^ i)) for i, x in enumerate(xs)]
