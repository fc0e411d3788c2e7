"""Multi-crop and single-crop image augmentation.

Random decisions for each crop are drawn from their own seeded stream into a
:class:`CropParams` record; :func:`render_crops` then applies a batch of
records with vectorised numpy ops. The same path serves single images and
whole training batches, so results never depend on how crops are grouped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
_RATIO = (3.0 / 4.0, 4.0 / 3.0)
_MAX_ATTEMPTS = 10
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)

Preset = Literal["multi-crop-dino", "single-pytorch", "single-simsiam"]


class OpParams(BaseModel):
    """Probabilities and strengths of the photometric ops for one branch."""

    model_config = ConfigDict(extra="forbid")

    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    gray_p: float = 0.2
    blur_p: float = 0.2
    blur_radius: Tuple[float, float] = (0.1, 2.0)
    solarize_p: float = 0.2
    solarize_threshold: float = 128.0 / 255.0

    @field_validator("flip_p", "jitter_p", "gray_p", "blur_p", "solarize_p")
    @classmethod
    def _prob(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        return v

    @field_validator("hue")
    @classmethod
    def _hue(cls, v):
        if not 0.0 <= v <= 0.5:
            raise ValueError("hue strength must lie in [0, 0.5]")
        return v


def _no_ops(**kw) -> OpParams:
    base = dict(flip_p=0.0, jitter_p=0.0, gray_p=0.0, blur_p=0.0, solarize_p=0.0)
    base.update(kw)
    return OpParams(**base)


def _preset_fields(preset: str) -> dict:
    if preset == "single-pytorch":
        return dict(n_global=1, n_local=0, global_scale=(0.08, 1.0), global_ops=_no_ops(flip_p=0.5))
    if preset == "single-simsiam":
        return dict(n_global=1, n_local=0, global_scale=(0.2, 1.0),
                    global_ops=OpParams(saturation=0.4, blur_p=0.5, solarize_p=0.0))
    return {}


_PRESETS = ("multi-crop-dino", "single-pytorch", "single-simsiam")


class AugmentConfig(BaseModel):
    """Multi-crop pipeline. Naming a ``preset`` fills in its fields; explicit keys win."""

    model_config = ConfigDict(extra="forbid")

    preset: Preset = "multi-crop-dino"
    n_global: int = 1
    n_local: int = 8
    global_scale: Tuple[float, float] = (0.4, 1.0)
    local_scale: Tuple[float, float] = (0.05, 0.4)
    global_resolution: int = 32
    local_resolution: int = 16
    global_ops: OpParams = Field(default_factory=OpParams)
    # Solarisation lives on the global branch only.
    local_ops: OpParams = Field(default_factory=lambda: OpParams(solarize_p=0.0))
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD

    @model_validator(mode="before")
    @classmethod
    def _expand_preset(cls, data):
        if isinstance(data, dict) and data.get("preset") in _PRESETS:
            return {**_preset_fields(data["preset"]), **data}
        return data

    @field_validator("global_scale", "local_scale")
    @classmethod
    def _scale(cls, v):
        lo, hi = v
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("scale must satisfy 0 < min <= max <= 1")
        return v

    @model_validator(mode="after")
    def _counts(self):
        if self.n_global < 0 or self.n_local < 0 or self.n_global + self.n_local < 1:
            raise ValueError("need at least one crop")
        if self.global_resolution < 2 or self.local_resolution < 2:
            raise ValueError("resolutions must be >= 2")
        if any(s <= 0 for s in self.std):
            raise ValueError("std must be positive")
        return self

    @property
    def n_crops(self) -> int:
        return self.n_global + self.n_local


def preset_config(preset: str, **overrides) -> AugmentConfig:
    """Build the configuration of a named pipeline; ``overrides`` win."""
    if preset not in _PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    return AugmentConfig(preset=preset, **overrides)


@dataclass(frozen=True)
class CropParams:
    top: int
    left: int
    height: int
    width: int
    flip: bool = False
    jitter: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    gray: bool = False
    blur_sigma: float = 0.0
    solarize: bool = False
    solarize_threshold: float = 128.0 / 255.0


@dataclass
class CropSet:
    globals: List[np.ndarray]
    locals: List[np.ndarray]
    source_index: int = -1


_BOX_DRAWS = 4 * _MAX_ATTEMPTS
_OP_DRAWS = 10


def _box_from_uniforms(height: int, width: int, scale: Sequence[float], u: np.ndarray) -> Tuple[int, int, int, int]:
    area = height * width
    log_lo, log_hi = math.log(_RATIO[0]), math.log(_RATIO[1])
    for a in range(_MAX_ATTEMPTS):
        ua, ur, ut, ul = u[4 * a:4 * a + 4]
        target = area * (scale[0] + (scale[1] - scale[0]) * ua)
        ratio = math.exp(log_lo + (log_hi - log_lo) * ur)
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = min(int(ut * (height - h + 1)), height - h)
            left = min(int(ul * (width - w + 1)), width - w)
            return top, left, h, w
    # Center crop at the largest admissible area, keeping the image aspect.
    frac = math.sqrt(scale[1])
    h = min(height, max(1, int(round(height * frac))))
    w = min(width, max(1, int(round(width * frac))))
    return (height - h) // 2, (width - w) // 2, h, w


def sample_box(height: int, width: int, scale: Sequence[float], rng: np.random.Generator) -> Tuple[int, int, int, int]:
    """Pick a crop box (top, left, h, w) with area fraction in ``scale``.

    A fixed block of uniforms is drawn up front (four per attempt), so the
    stream position afterwards does not depend on how many attempts failed.
    """
    return _box_from_uniforms(height, width, scale, rng.random(_BOX_DRAWS))


def sample_crop_params(height: int, width: int, scale: Sequence[float], ops: OpParams,
                       rng: np.random.Generator) -> CropParams:
    u = rng.random(_BOX_DRAWS + _OP_DRAWS)
    top, left, h, w = _box_from_uniforms(height, width, scale, u[:_BOX_DRAWS])
    uf, uj, ub, uc, us, uh, ug, ubl, usig, uso = u[_BOX_DRAWS:].tolist()

    def span(x, strength):
        lo = max(0.0, 1.0 - strength)
        return lo + (1.0 + strength - lo) * x

    jitter = uj < ops.jitter_p
    blur = ubl < ops.blur_p
    sigma = ops.blur_radius[0] + (ops.blur_radius[1] - ops.blur_radius[0]) * usig
    return CropParams(
        top, left, h, w, uf < ops.flip_p, jitter,
        span(ub, ops.brightness) if jitter else 1.0,
        span(uc, ops.contrast) if jitter else 1.0,
        span(us, ops.saturation) if jitter else 1.0,
        ops.hue * (2.0 * uh - 1.0) if jitter else 0.0,
        ug < ops.gray_p, sigma if blur else 0.0, uso < ops.solarize_p, ops.solarize_threshold,
    )


def crop_stream(run_seed: int, stream: int, epoch: int, sample_index: int, crop_index: int) -> np.random.Generator:
    """Independent generator for one crop of one sample in one epoch."""
    return np.random.default_rng([run_seed, stream, epoch, sample_index, crop_index])


def sample_multi_crop_params(height: int, width: int, cfg: AugmentConfig,
                             rngs: Sequence[np.random.Generator]) -> Tuple[List[CropParams], List[CropParams]]:
    """Draw global then local crop records, one generator per crop."""
    if len(rngs) != cfg.n_crops:
        raise ValueError(f"need {cfg.n_crops} crop streams, got {len(rngs)}")
    g = [sample_crop_params(height, width, cfg.global_scale, cfg.global_ops, rngs[i]) for i in range(cfg.n_global)]
    l = [sample_crop_params(height, width, cfg.local_scale, cfg.local_ops, rngs[cfg.n_global + i])
         for i in range(cfg.n_local)]
    return g, l


# --- rendering -------------------------------------------------------------


def _axis_coords(start: np.ndarray, length: np.ndarray, out: int):
    """Bilinear source coordinates (half-pixel centres) clamped to each box."""
    pos = start[:, None] + (np.arange(out)[None, :] + 0.5) * (length[:, None] / out) - 0.5
    lo = start[:, None].astype(np.float64)
    hi = (start + length - 1)[:, None].astype(np.float64)
    pos = np.clip(pos, lo, hi)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, hi.astype(np.int64))
    frac = (pos - i0).astype(np.float32)
    return i0, i1, frac


def resample(images: np.ndarray, src: np.ndarray, boxes: np.ndarray, out_h: int, out_w: Optional[int] = None) -> np.ndarray:
    """Bilinearly resize boxes (top, left, h, w) of ``images[src]`` to out_h x out_w."""
    out_w = out_h if out_w is None else out_w
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    y0, y1, fy = _axis_coords(boxes[:, 0], boxes[:, 2], out_h)
    x0, x1, fx = _axis_coords(boxes[:, 1], boxes[:, 3], out_w)
    n, h, w, c = images.shape
    flat = images.reshape(n * h * w, c)
    rows0 = ((np.asarray(src, dtype=np.int64)[:, None] * h + y0) * w)[:, :, None]
    rows1 = ((np.asarray(src, dtype=np.int64)[:, None] * h + y1) * w)[:, :, None]
    x0, x1 = x0[:, None, :], x1[:, None, :]
    fy = fy[:, :, None, None]
    fx = fx[:, None, :, None]

    def gather(idx):
        return np.take(flat, idx, axis=0)

    top = gather(rows0 + x0) * (1 - fx) + gather(rows0 + x1) * fx
    bot = gather(rows1 + x0) * (1 - fx) + gather(rows1 + x1) * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _gray(img: np.ndarray) -> np.ndarray:
    return (img[..., 0:1] * _LUMA[0] + img[..., 1:2] * _LUMA[1] + img[..., 2:3] * _LUMA[2]).astype(np.float32)


def _rgb_to_hsv(img):
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    safe = np.where(delta > 0, delta, 1)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return h, s, v


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices_r = np.stack([v, q, p, p, t, v])
    choices_g = np.stack([t, v, v, q, p, p])
    choices_b = np.stack([p, p, t, v, v, q])
    idx = i[None]
    r = np.take_along_axis(choices_r, idx, 0)[0]
    g = np.take_along_axis(choices_g, idx, 0)[0]
    b = np.take_along_axis(choices_b, idx, 0)[0]
    return np.stack([r, g, b], axis=-1)


def _blur(img: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Separable Gaussian blur, per-image sigma, kernels truncated at 3 sigma."""
    radius = np.ceil(3.0 * sigma).astype(np.int64)
    k = int(radius.max())
    if k == 0:
        return img
    taps = np.arange(-k, k + 1)
    w = np.exp(-(taps[None, :] ** 2) / (2.0 * sigma[:, None] ** 2))
    w = np.where(np.abs(taps)[None, :] <= radius[:, None], w, 0.0)
    w = (w / w.sum(axis=1, keepdims=True)).astype(np.float32)
    h, wd = img.shape[1], img.shape[2]
    out = img
    padded = np.pad(out, ((0, 0), (k, k), (0, 0), (0, 0)), mode="edge")
    acc = np.zeros_like(out)
    for t in range(2 * k + 1):
        acc += w[:, t, None, None, None] * padded[:, t:t + h]
    out = acc
    padded = np.pad(out, ((0, 0), (0, 0), (k, k), (0, 0)), mode="edge")
    acc = np.zeros_like(out)
    for t in range(2 * k + 1):
        acc += w[:, t, None, None, None] * padded[:, :, t:t + wd]
    return acc


def render_crops(images: np.ndarray, src: Sequence[int], params: Sequence[CropParams], out_size: int,
                 mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD,
                 normalize: bool = True) -> np.ndarray:
    """Apply crop records to source images; returns (B, out, out, 3) float32.

    Op order: crop/resize, flip, colour jitter (brightness, contrast,
    saturation, hue), grayscale, blur, solarize, normalize.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(params) == 0:
        return np.zeros((0, out_size, out_size, 3), dtype=np.float32)
    boxes = np.array([(p.top, p.left, p.height, p.width) for p in params])
    img = resample(images, np.asarray(src), boxes, out_size)

    def col(name, dtype=np.float32):
        return np.array([getattr(p, name) for p in params], dtype=dtype)

    def factor(name, idx):
        return col(name)[idx][:, None, None, None]

    flip = np.flatnonzero(col("flip", bool))
    if flip.size:
        img[flip] = img[flip, :, ::-1]

    jit = np.flatnonzero(col("jitter", bool))
    if jit.size:
        sub = img[jit]
        sub = np.clip(sub * factor("brightness", jit), 0, 1)
        f = factor("contrast", jit)
        m = np.mean(_gray(sub), axis=(1, 2, 3), keepdims=True, dtype=np.float32)
        sub = np.clip(f * sub + (1 - f) * m, 0, 1)
        f = factor("saturation", jit)
        sub = np.clip(f * sub + (1 - f) * _gray(sub), 0, 1)
        shift = col("hue")[jit]
        hue = np.flatnonzero(shift != 0)
        if hue.size:
            h, s, v = _rgb_to_hsv(sub[hue])
            h = (h + shift[hue, None, None]) % 1.0
            sub[hue] = _hsv_to_rgb(h, s, v)
        img[jit] = sub

    gray = np.flatnonzero(col("gray", bool))
    if gray.size:
        img[gray] = _gray(img[gray])

    sigma = col("blur_sigma", np.float64)
    blur = np.flatnonzero(sigma > 0)
    if blur.size:
        img[blur] = _blur(img[blur], sigma[blur])

    solar = np.flatnonzero(col("solarize", bool))
    if solar.size:
        sub = img[solar]
        thr = factor("solarize_threshold", solar)
        img[solar] = np.where(sub >= thr, 1.0 - sub, sub)

    if normalize:
        img = (img - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return img.astype(np.float32)


# --- public single-image API ----------------------------------------------


def _as_batch(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {img.shape}")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError("image must be at least 2 x 2")
    return img[None]


def random_resized_crop(img: np.ndarray, scale: Sequence[float], out_size: int,
                        rng: np.random.Generator) -> np.ndarray:
    batch = _as_batch(img)
    if out_size < 2:
        raise ValueError("out_size must be >= 2")
    box = sample_box(batch.shape[1], batch.shape[2], scale, rng)
    return resample(batch, [0], [box], out_size)[0]


def multi_crop(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, source_index: int = -1) -> CropSet:
    batch = _as_batch(img)
    rngs = rng.spawn(cfg.n_crops)
    g, l = sample_multi_crop_params(batch.shape[1], batch.shape[2], cfg, rngs)
    zeros = [0] * max(len(g), len(l))
    gc = render_crops(batch, zeros[:len(g)], g, cfg.global_resolution, cfg.mean, cfg.std)
    lc = render_crops(batch, zeros[:len(l)], l, cfg.local_resolution, cfg.mean, cfg.std)
    return CropSet(list(gc), list(lc), source_index)


def eval_boxes(height: int, width: int, short_side: int):
    """Resized size and center window for the evaluation transform."""
    f = short_side / min(height, width)
    nh = max(short_side, int(round(height * f)))
    nw = max(short_side, int(round(width * f)))
    return nh, nw, (nh - short_side) // 2, (nw - short_side) // 2


def eval_transform_batch(images: np.ndarray, short_side: int, mean: Sequence[float] = IMAGENET_MEAN,
                         std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if short_side < 2:
        raise ValueError("short_side must be >= 2")
    n, h, w, _ = images.shape
    nh, nw, top, left = eval_boxes(h, w, short_side)
    if (nh, nw) == (h, w):
        resized = images
    else:
        boxes = np.tile([0, 0, h, w], (n, 1))
        resized = resample(images, np.arange(n), boxes, nh, nw)
    out = resized[:, top:top + short_side, left:left + short_side]
    return ((out - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)).astype(np.float32)


def eval_transform(img: np.ndarray, short_side: int, mean: Sequence[float] = IMAGENET_MEAN,
                   std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    return eval_transform_batch(_as_batch(img), short_side, mean, std)[0]
