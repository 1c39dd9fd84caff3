"""Classic augmentation policies plus corruption/geometric shift synthesis.

A policy is an ordered list of named transform specs applied in sequence.
Every transform is a pure function of (pixels, seed): identical inputs and
seed give bit-identical outputs, shapes are preserved, and results are
clipped to [0, 1]. That makes policies safe to evaluate from parallel
workers and lets paired runs share augmentation randomness exactly.

The corruption and geometric synthesizers back the out-of-distribution
evaluation suites; severity ladders for the corruptions follow the published
common-corruptions parameterization for 32x32 images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import torch
import torch.nn.functional as F

from .data import ImageBatch
from .utils import derive_seed, torch_generator

__all__ = [
    "TransformSpec",
    "AugmentationPolicy",
    "apply_policy",
    "synthesize_corruption",
    "synthesize_geometric",
    "flip_crop_policy",
    "random_erasing_policy",
    "randaugment_style_policy",
    "augmix_lite_policy",
    "CORRUPTION_KINDS",
    "GAUSSIAN_NOISE_SIGMA",
    "GAUSSIAN_BLUR_SIGMA",
    "MOTION_BLUR_LENGTH",
]

# severity index 1..5 maps to position 0..4 of these ladders
GAUSSIAN_NOISE_SIGMA = (0.04, 0.06, 0.08, 0.09, 0.10)
GAUSSIAN_BLUR_SIGMA = (0.4, 0.6, 0.7, 0.8, 1.0)
MOTION_BLUR_LENGTH = (3, 5, 9, 13, 17)
MOTION_BLUR_ANGLE_DEG = 45.0

CORRUPTION_KINDS = ("gaussian_noise", "gaussian_blur", "motion_blur")


@dataclass(frozen=True)
class TransformSpec:
    name: str
    params: dict = field(default_factory=dict)

    def to_config(self) -> dict:
        return {"name": self.name, **self.params}

    @staticmethod
    def from_config(cfg: dict) -> "TransformSpec":
        cfg = dict(cfg)
        return TransformSpec(cfg.pop("name"), cfg)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ordered transform composition; empty policy is the identity."""

    transforms: tuple = ()
    name: str = ""

    def __len__(self) -> int:
        return len(self.transforms)

    def label(self) -> str:
        if self.name:
            return self.name
        if not self.transforms:
            return "none"
        return "+".join(t.name for t in self.transforms)

    def combine(self, other: "AugmentationPolicy") -> "AugmentationPolicy":
        return AugmentationPolicy(self.transforms + other.transforms,
                                  name=f"{self.label()}+{other.label()}")

    def to_config(self) -> list:
        return [t.to_config() for t in self.transforms]

    @staticmethod
    def from_config(cfg: Iterable[dict], name: str = "") -> "AugmentationPolicy":
        return AugmentationPolicy(tuple(TransformSpec.from_config(c) for c in cfg),
                                  name=name)


def flip_crop_policy(flip_p: float = 0.5, padding: int = 4) -> AugmentationPolicy:
    return AugmentationPolicy((
        TransformSpec("horizontal_flip", {"p": flip_p}),
        TransformSpec("pad_crop", {"padding": padding}),
    ), name="flip_crop")


def random_erasing_policy(p: float = 0.5, area: tuple = (0.02, 0.33),
                          aspect: tuple = (0.3, 3.3)) -> AugmentationPolicy:
    return AugmentationPolicy((
        TransformSpec("random_erasing",
                      {"p": p, "area": list(area), "aspect": list(aspect)}),
    ), name="random_erasing")


def randaugment_style_policy(num_ops: int = 2, magnitude: float = 0.5) -> AugmentationPolicy:
    return AugmentationPolicy((
        TransformSpec("randaugment", {"num_ops": num_ops, "magnitude": magnitude}),
    ), name="randaugment_style")


def augmix_lite_policy(width: int = 3, max_depth: int = 3,
                       alpha: float = 1.0, magnitude: float = 0.5) -> AugmentationPolicy:
    return AugmentationPolicy((
        TransformSpec("augmix", {"width": width, "max_depth": max_depth,
                                 "alpha": alpha, "magnitude": magnitude}),
    ), name="augmix_lite")


# ---------------------------------------------------------------------------
# elementary tensor transforms
# ---------------------------------------------------------------------------

def _affine_batch(pixels: torch.Tensor, thetas: torch.Tensor) -> torch.Tensor:
    """Sample each image under its own inverse affine map (bilinear, zero pad)."""
    grid = F.affine_grid(thetas, list(pixels.shape), align_corners=False)
    return F.grid_sample(pixels, grid, mode="bilinear", padding_mode="zeros",
                         align_corners=False)


def _rotation_thetas(angles_rad: torch.Tensor) -> torch.Tensor:
    cos, sin = torch.cos(angles_rad), torch.sin(angles_rad)
    zeros = torch.zeros_like(cos)
    row0 = torch.stack([cos, sin, zeros], dim=1)
    row1 = torch.stack([-sin, cos, zeros], dim=1)
    return torch.stack([row0, row1], dim=1)


def _horizontal_flip(pixels, gen, p=0.5):
    take = torch.rand(pixels.shape[0], generator=gen) < p
    out = pixels.clone()
    out[take] = pixels[take].flip(3)
    return out


def _pad_crop(pixels, gen, padding=4):
    n, _, h, w = pixels.shape
    padded = F.pad(pixels, [padding] * 4)
    offs = torch.randint(0, 2 * padding + 1, (n, 2), generator=gen)
    out = torch.empty_like(pixels)
    for i in range(n):
        dy, dx = int(offs[i, 0]), int(offs[i, 1])
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def _erase_dims(area_frac: float, aspect: float, h: int, w: int):
    target = area_frac * h * w
    eh = int(round(math.sqrt(target * aspect)))
    ew = int(round(math.sqrt(target / aspect)))
    return max(1, eh), max(1, ew)


def _random_erasing(pixels, gen, p=0.5, area=(0.02, 0.33), aspect=(0.3, 3.3),
                    fill="random"):
    n, c, h, w = pixels.shape
    if area[1] > 1.0:
        raise ValueError("erase area fraction cannot exceed 1.0")
    out = pixels.clone()
    for i in range(n):
        if torch.rand((), generator=gen).item() >= p:
            continue
        af = float(torch.empty(()).uniform_(area[0], area[1], generator=gen))
        log_aspect = float(torch.empty(()).uniform_(
            math.log(aspect[0]), math.log(aspect[1]), generator=gen))
        eh, ew = _erase_dims(af, math.exp(log_aspect), h, w)
        if eh > h or ew > w:
            raise ValueError(
                f"erase region {eh}x{ew} does not fit in a {h}x{w} image")
        top = int(torch.randint(0, h - eh + 1, (), generator=gen))
        left = int(torch.randint(0, w - ew + 1, (), generator=gen))
        if fill == "random":
            patch = torch.rand((c, eh, ew), generator=gen)
        else:
            patch = torch.full((c, eh, ew), float(fill))
        out[i, :, top:top + eh, left:left + ew] = patch
    return out


# per-image op pool used by randaugment/augmix; geometric ops are shared,
# color ops are only in the randaugment pool
def _op_rotate(img, gen, magnitude):
    max_rad = math.radians(30.0) * magnitude
    angle = torch.empty(1).uniform_(-max_rad, max_rad, generator=gen)
    return _affine_batch(img[None], _rotation_thetas(angle))[0]


def _shear_theta(sx: float, sy: float) -> torch.Tensor:
    return torch.tensor([[[1.0, sx, 0.0], [sy, 1.0, 0.0]]])


def _op_shear_x(img, gen, magnitude):
    s = float(torch.empty(()).uniform_(-0.3, 0.3, generator=gen)) * magnitude * 2
    return _affine_batch(img[None], _shear_theta(s, 0.0))[0]


def _op_shear_y(img, gen, magnitude):
    s = float(torch.empty(()).uniform_(-0.3, 0.3, generator=gen)) * magnitude * 2
    return _affine_batch(img[None], _shear_theta(0.0, s))[0]


def _op_translate_x(img, gen, magnitude):
    t = float(torch.empty(()).uniform_(-0.3, 0.3, generator=gen)) * magnitude * 2
    theta = torch.tensor([[[1.0, 0.0, t], [0.0, 1.0, 0.0]]])
    return _affine_batch(img[None], theta)[0]


def _op_translate_y(img, gen, magnitude):
    t = float(torch.empty(()).uniform_(-0.3, 0.3, generator=gen)) * magnitude * 2
    theta = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, t]]])
    return _affine_batch(img[None], theta)[0]


def _op_brightness(img, gen, magnitude):
    shift = float(torch.empty(()).uniform_(-0.3, 0.3, generator=gen)) * magnitude * 2
    return img + shift


def _op_contrast(img, gen, magnitude):
    factor = 1.0 + float(torch.empty(()).uniform_(-0.5, 0.5, generator=gen)) * magnitude * 2
    mean = img.mean()
    return (img - mean) * factor + mean


def _op_solarize(img, gen, magnitude):
    thresh = 1.0 - 0.5 * magnitude * float(torch.rand((), generator=gen))
    return torch.where(img >= thresh, 1.0 - img, img)


def _op_posterize(img, gen, magnitude):
    drop = int(torch.randint(0, max(1, int(4 * magnitude)) + 1, (), generator=gen))
    bits = 8 - drop
    levels = 2 ** bits - 1
    return torch.floor(img * levels) / levels


_GEOMETRIC_OPS = {
    "rotate": _op_rotate,
    "shear_x": _op_shear_x,
    "shear_y": _op_shear_y,
    "translate_x": _op_translate_x,
    "translate_y": _op_translate_y,
}

_COLOR_OPS = {
    "brightness": _op_brightness,
    "contrast": _op_contrast,
    "solarize": _op_solarize,
    "posterize": _op_posterize,
}

_RANDAUGMENT_POOL = {**_GEOMETRIC_OPS, **_COLOR_OPS, "identity": lambda img, gen, m: img}
# contrast-destructive ops are excluded from the mixing pool
_AUGMIX_POOL = dict(_GEOMETRIC_OPS)


def _randaugment(pixels, gen, num_ops=2, magnitude=0.5):
    names = sorted(_RANDAUGMENT_POOL)
    out = pixels.clone()
    for i in range(pixels.shape[0]):
        img = pixels[i]
        for _ in range(num_ops):
            pick = names[int(torch.randint(0, len(names), (), generator=gen))]
            img = _RANDAUGMENT_POOL[pick](img, gen, magnitude)
        out[i] = img
    return out


def _augmix(pixels, gen, width=3, max_depth=3, alpha=1.0, magnitude=0.5):
    import numpy as np

    names = sorted(_AUGMIX_POOL)
    out = torch.empty_like(pixels)
    for i in range(pixels.shape[0]):
        img = pixels[i]
        # Dirichlet(alpha,...) over chains via normalized Gamma draws;
        # numpy supplies a seedable gamma sampler
        sub = int(torch.randint(0, 2**31 - 1, (), generator=gen))
        draws = np.random.default_rng(sub).gamma(alpha, size=width)
        weights = torch.as_tensor(draws / draws.sum(), dtype=pixels.dtype)
        mixed = torch.zeros_like(img)
        for k in range(width):
            depth = 1 + int(torch.randint(0, max_depth, (), generator=gen))
            chain = img
            for _ in range(depth):
                pick = names[int(torch.randint(0, len(names), (), generator=gen))]
                chain = _AUGMIX_POOL[pick](chain, gen, magnitude)
            mixed = mixed + weights[k] * chain.clamp(0.0, 1.0)
        m = float(torch.rand((), generator=gen))  # Beta(1,1) skip connection
        out[i] = m * img + (1.0 - m) * mixed
    return out


_TRANSFORMS = {
    "horizontal_flip": _horizontal_flip,
    "pad_crop": _pad_crop,
    "random_erasing": _random_erasing,
    "randaugment": _randaugment,
    "augmix": _augmix,
}


def apply_policy(batch: ImageBatch, policy: AugmentationPolicy,
                 seed: int = 0) -> ImageBatch:
    """Apply a policy's transforms in order; deterministic under seed.

    Output shape equals input shape and values are clipped to [0, 1].
    """
    pixels = batch.pixels
    for i, spec in enumerate(policy.transforms):
        if spec.name not in _TRANSFORMS:
            raise ValueError(f"unknown transform {spec.name!r}")
        gen = torch_generator(derive_seed(seed, i, spec.name))
        params = {k: tuple(v) if isinstance(v, list) else v
                  for k, v in spec.params.items()}
        pixels = _TRANSFORMS[spec.name](pixels, gen, **params)
        pixels = pixels.clamp(0.0, 1.0)
    return ImageBatch(pixels, batch.labels)


# ---------------------------------------------------------------------------
# corruptions (distribution shift, not adversarial)
# ---------------------------------------------------------------------------

def _gaussian_kernel1d(sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _depthwise_blur(pixels: torch.Tensor, kernel2d: torch.Tensor) -> torch.Tensor:
    c = pixels.shape[1]
    kh, kw = kernel2d.shape
    weight = kernel2d.view(1, 1, kh, kw).repeat(c, 1, 1, 1).to(pixels.dtype)
    padded = F.pad(pixels, [kw // 2, kw // 2, kh // 2, kh // 2], mode="reflect")
    return F.conv2d(padded, weight, groups=c)


def _gaussian_blur(pixels: torch.Tensor, sigma: float) -> torch.Tensor:
    k1 = _gaussian_kernel1d(sigma)
    return _depthwise_blur(pixels, torch.outer(k1, k1))


def _motion_kernel(length: int, angle_deg: float) -> torch.Tensor:
    kernel = torch.zeros(length, length)
    theta = math.radians(angle_deg)
    cx = (length - 1) / 2.0
    for t in torch.linspace(-cx, cx, steps=4 * length):
        x = int(round(cx + float(t) * math.cos(theta)))
        y = int(round(cx + float(t) * math.sin(theta)))
        kernel[y, x] = 1.0
    return kernel / kernel.sum()


def synthesize_corruption(batch: ImageBatch, kind: str, severity: int,
                          seed: int = 0) -> ImageBatch:
    """Apply a common corruption at severity 1..5 (higher = farther from input)."""
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption {kind!r}; choose from {CORRUPTION_KINDS}")
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must be 1..5, got {severity}")
    x = batch.pixels
    if kind == "gaussian_noise":
        sigma = GAUSSIAN_NOISE_SIGMA[severity - 1]
        gen = torch_generator(derive_seed(seed, kind, severity))
        x = x + sigma * torch.randn(x.shape, generator=gen)
    elif kind == "gaussian_blur":
        x = _gaussian_blur(x, GAUSSIAN_BLUR_SIGMA[severity - 1])
    else:  # motion_blur
        kernel = _motion_kernel(MOTION_BLUR_LENGTH[severity - 1], MOTION_BLUR_ANGLE_DEG)
        x = _depthwise_blur(x, kernel)
    return ImageBatch(x.clamp(0.0, 1.0), batch.labels)


# ---------------------------------------------------------------------------
# geometric shifts
# ---------------------------------------------------------------------------

def _resized_crop(pixels: torch.Tensor, scale: float, seed: int) -> torch.Tensor:
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"crop scale must be in (0,1], got {scale}")
    n, c, h, w = pixels.shape
    ch = max(1, int(round(h * math.sqrt(scale))))
    cw = max(1, int(round(w * math.sqrt(scale))))
    if ch == h and cw == w:
        return pixels.clone()
    gen = torch_generator(derive_seed(seed, "resized_crop"))
    out = torch.empty_like(pixels)
    for i in range(n):
        top = int(torch.randint(0, h - ch + 1, (), generator=gen))
        left = int(torch.randint(0, w - cw + 1, (), generator=gen))
        crop = pixels[i:i + 1, :, top:top + ch, left:left + cw]
        out[i] = F.interpolate(crop, size=(h, w), mode="bilinear",
                               align_corners=False)[0]
    return out


def synthesize_geometric(batch: ImageBatch, kind: str, params: dict) -> ImageBatch:
    """Apply a geometric shift: rotation, resized_crop or flip.

    Rotation takes either a fixed ``angle`` or an ``angle_range`` sampled
    per image under ``seed``; angles are bounded by ``max_angle`` (30 deg
    unless overridden).
    """
    params = dict(params)
    x = batch.pixels
    if kind == "rotation":
        max_angle = float(params.get("max_angle", 30.0))
        if "angle" in params:
            angle = float(params["angle"])
            if abs(angle) > max_angle:
                raise ValueError(f"|angle| must be <= {max_angle}, got {angle}")
            angles = torch.full((x.shape[0],), math.radians(angle))
        else:
            lo, hi = params.get("angle_range", (-max_angle, max_angle))
            if max(abs(lo), abs(hi)) > max_angle:
                raise ValueError(f"angle_range {(lo, hi)} exceeds +/-{max_angle}")
            gen = torch_generator(derive_seed(params.get("seed", 0), "rotation"))
            angles = torch.empty(x.shape[0]).uniform_(
                math.radians(lo), math.radians(hi), generator=gen)
        x = _affine_batch(x, _rotation_thetas(angles))
    elif kind == "resized_crop":
        if "scale" in params:
            scale = float(params["scale"])
        else:
            lo, hi = params["scale_range"]
            gen = torch_generator(derive_seed(params.get("seed", 0), "crop_scale"))
            scale = float(torch.empty(()).uniform_(lo, hi, generator=gen))
        x = _resized_crop(x, scale, params.get("seed", 0))
    elif kind == "flip":
        direction = params.get("direction", "horizontal")
        if direction != "horizontal":
            raise ValueError(f"unsupported flip direction {direction!r}")
        x = x.flip(3)
    else:
        raise ValueError(f"unknown geometric kind {kind!r}")
    return ImageBatch(x.clamp(0.0, 1.0), batch.labels)
