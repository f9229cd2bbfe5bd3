"""Strong stochastic augmentation for instance patches (H x W x C floats in [0, 1])."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugmentPolicy:
    output_size: int = 32
    scale_min: float = 0.2
    scale_max: float = 1.0
    ratio_min: float = 3 / 4
    ratio_max: float = 4 / 3
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    sigma_min: float = 0.1
    sigma_max: float = 2.0
    hflip_p: float = 0.5

    def __post_init__(self):
        for name in ("jitter_p", "grayscale_p", "blur_p", "hflip_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must be a probability")
        if not 0.0 <= self.hue <= 0.5:
            raise ContractError("hue strength must lie in [0, 0.5]")
        if not 0 < self.scale_min <= self.scale_max <= 1.0:
            raise ContractError("crop scale range must satisfy 0 < min <= max <= 1")

    @classmethod
    def identity(cls, output_size: int = 32) -> "AugmentPolicy":
        return cls(output_size=output_size, scale_min=1.0, scale_max=1.0, ratio_min=1.0, ratio_max=1.0,
                   jitter_p=0.0, grayscale_p=0.0, blur_p=0.0, hflip_p=0.0)


def rng_stream(seed: int, instance_id: str, epoch: int, view: int = 0) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by (seed, instance, epoch, view)."""
    digest = hashlib.sha256(f"{seed}|{instance_id}|{epoch}|{view}".encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key))


# -- colour -----------------------------------------------------------------
def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    safe = np.where(delta > 0, delta, 1)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def grayscale(patch: np.ndarray) -> np.ndarray:
    gray = patch @ LUMA.astype(patch.dtype)
    return np.repeat(gray[..., None], 3, axis=-1)


@dataclass(frozen=True)
class Grayscale:
    pass


@dataclass(frozen=True)
class HSVAdjust:
    saturation: float = 1.0
    hue: float = 0.0


def color_convert(patch: np.ndarray, target: Grayscale | HSVAdjust) -> np.ndarray:
    """Grayscale via luma weights, or saturation/hue adjustment.

    Saturation blends towards the luma grayscale image; hue rotates the H
    channel through an RGB -> HSV -> RGB round trip.
    """
    if patch.shape[-1] != 3:
        raise ContractError("colour conversion needs 3 channels")
    if isinstance(target, Grayscale):
        return grayscale(patch)
    out = patch
    if target.saturation != 1.0:
        gray = grayscale(out)
        out = np.clip(gray + target.saturation * (out - gray), 0.0, 1.0)
    if target.hue != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + target.hue) % 1.0
        out = hsv_to_rgb(hsv)
    return out.astype(patch.dtype, copy=False)


# -- geometry ---------------------------------------------------------------
def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None].astype(img.dtype)
    wx = (xs - x0)[None, :, None].astype(img.dtype)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def random_resized_crop(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator,
                        retries: int = 10) -> np.ndarray:
    h, w = img.shape[:2]
    area = h * w
    log_lo, log_hi = math.log(policy.ratio_min), math.log(policy.ratio_max)
    for _ in range(retries):
        target = area * rng.uniform(policy.scale_min, policy.scale_max)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    else:
        ch = cw = min(h, w)
        top, left = (h - ch) // 2, (w - cw) // 2
    crop = img[top:top + ch, left:left + cw]
    return resize_bilinear(crop, policy.output_size, policy.output_size)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k = (k / k.sum()).astype(img.dtype)
    pad = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    tmp = sum(k[i] * pad[i:i + img.shape[0]] for i in range(len(k)))
    pad = np.pad(tmp, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    return sum(k[i] * pad[:, i:i + img.shape[1]] for i in range(len(k)))


def _jitter(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(1 - policy.brightness, 1 + policy.brightness)
    c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
    s = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
    h = rng.uniform(-policy.hue, policy.hue)
    img = np.clip(img * b, 0.0, 1.0)
    mean = (img @ LUMA.astype(img.dtype)).mean() if img.shape[-1] == 3 else img.mean()
    img = np.clip((img - mean) * c + mean, 0.0, 1.0)
    if img.shape[-1] == 3:
        img = color_convert(img, HSVAdjust(saturation=s, hue=h))
    return img


def augment(patch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Crop -> colour jitter -> grayscale -> blur -> horizontal flip, clamped to [0, 1]."""
    img = np.asarray(patch, dtype=np.float32)
    img = random_resized_crop(img, policy, rng)
    if rng.random() < policy.jitter_p:
        img = _jitter(img, policy, rng)
    if img.shape[-1] == 3 and rng.random() < policy.grayscale_p:
        img = grayscale(img)
    if rng.random() < policy.blur_p:
        img = gaussian_blur(img, rng.uniform(policy.sigma_min, policy.sigma_max))
    if rng.random() < policy.hflip_p:
        img = img[:, ::-1]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment_batch(patches: np.ndarray, ids, policy: AugmentPolicy, seed: int, epoch: int,
                  view: int = 0) -> np.ndarray:
    out = np.empty((len(patches), policy.output_size, policy.output_size, patches.shape[-1]), dtype=np.float32)
    for i, (p, iid) in enumerate(zip(patches, ids)):
        out[i] = augment(p, policy, rng_stream(seed, iid, epoch, view))
    return out
