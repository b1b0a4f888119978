"""Training-set expansion and input standardisation."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import (
    DatasetManifest,
    GrayImage,
    Record,
    Rng,
    Tensor,
    quantize,
    read_pgm,
    save_manifest,
    tensor_from_image,
    write_pgm,
)
from .errors import DegenerateStats, ParamError

FULL_ROTATIONS = (45.0, 90.0, 135.0, 180.0, 270.0)


@dataclass(frozen=True)
class AugmentPlan:
    """How each source image is expanded.

    ``mode="default"`` emits exactly five outputs per source (centre crop,
    two seeded corner crops, one seeded right-angle rotation, one noisy
    copy); ``mode="full"`` emits five crops, one rotation per angle in
    ``rotation_angles`` and one noisy copy.
    """

    crop_fraction: float = 7 / 8
    rotation_angles: tuple[float, ...] = FULL_ROTATIONS
    noise_sigma: float = 8.0
    noise_fraction: float = 1.0
    target_size: int = 64
    seed: int = 0
    mode: str = "default"

    def __post_init__(self):
        if not 0 < self.crop_fraction <= 1:
            raise ParamError("crop_fraction must lie in (0, 1]")
        if self.target_size < 8:
            raise ParamError("target_size must be at least 8")
        if self.noise_sigma < 0 or not 0 <= self.noise_fraction <= 1:
            raise ParamError("invalid noise settings")
        if self.mode not in ("default", "full"):
            raise ParamError(f"unknown plan mode {self.mode!r}")
        if self.mode == "full" and not self.rotation_angles:
            raise ParamError("full plan needs rotation angles")

    @property
    def factor(self) -> int:
        return 5 if self.mode == "default" else 5 + len(self.rotation_angles) + 1


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 1e-12:
            raise DegenerateStats(f"standard deviation {self.std} is not positive")

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean, "std": self.std})

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        d = json.loads(Path(path).read_text())
        return cls(float(d["mean"]), float(d["std"]))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def five_crop(img: GrayImage, crop_fraction: float) -> list[GrayImage]:
    """Top-left, top-right, bottom-left, bottom-right and centre crops."""
    if not 0 < crop_fraction <= 1:
        raise ParamError("crop_fraction must lie in (0, 1]")
    cw = _round_half_up(img.width * crop_fraction)
    ch = _round_half_up(img.height * crop_fraction)
    if cw < 8 or ch < 8:
        raise ParamError(f"crop of {cw}x{ch} is smaller than 8x8")
    return [GrayImage(img.pixels[y : y + ch, x : x + cw]) for x, y in five_crop_offsets(img.width, img.height, cw, ch)]


def five_crop_offsets(w: int, h: int, cw: int, ch: int) -> list[tuple[int, int]]:
    dx, dy = w - cw, h - ch
    return [(0, 0), (dx, 0), (0, dy), (dx, dy), (dx // 2, dy // 2)]


def _bilinear_sample(px: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = px.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x0 = np.clip(x0, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    top = px[y0, x0] * (1 - fx) + px[y0, x1] * fx
    bot = px[y1, x0] * (1 - fx) + px[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def rotate(img: GrayImage, angle: float) -> GrayImage:
    """Counter-clockwise rotation (as displayed) about the image centre.

    Right angles are exact remaps: 90 degrees sends (x, y) to (y, w-1-x)
    and swaps the dimensions. Other angles keep the input size, sample
    bilinearly and fill uncovered pixels with 0.
    """
    if not math.isfinite(angle):
        raise ParamError("rotation angle must be finite")
    turns = angle / 90.0
    if turns == math.floor(turns):
        return GrayImage(np.rot90(img.pixels, k=int(turns) % 4))
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    h, w = img.height, img.width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    sx = c * dx - s * dy + cx
    sy = s * dx + c * dy + cy
    eps = 1e-9
    inside = (sx >= -eps) & (sx <= w - 1 + eps) & (sy >= -eps) & (sy <= h - 1 + eps)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    vals = _bilinear_sample(img.pixels.astype(np.float64), sx, sy)
    return GrayImage(np.where(inside, quantize(vals), 0))


def rotations(img: GrayImage, angles) -> list[GrayImage]:
    return [rotate(img, a) for a in angles]


def add_gaussian_noise(img: GrayImage, sigma: float, rng: Rng) -> GrayImage:
    if sigma < 0:
        raise ParamError("sigma must be non-negative")
    if sigma == 0:
        return img
    noise = rng.normal(img.width * img.height).reshape(img.height, img.width)
    return GrayImage(quantize(img.pixels + sigma * noise))


def resize_bilinear(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    """Bilinear resize with half-pixel centres and clamped source coordinates."""
    if out_w < 1 or out_h < 1:
        raise ParamError("output size must be positive")
    if (out_w, out_h) == (img.width, img.height):
        return img
    sx = (np.arange(out_w) + 0.5) * (img.width / out_w) - 0.5
    sy = (np.arange(out_h) + 0.5) * (img.height / out_h) - 0.5
    sx = np.clip(sx, 0, img.width - 1)
    sy = np.clip(sy, 0, img.height - 1)
    gx, gy = np.meshgrid(sx, sy)
    return GrayImage(quantize(_bilinear_sample(img.pixels.astype(np.float64), gx, gy)))


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def stats_from_images(images) -> NormalizationStats:
    """Streaming mean/variance (pairwise merge of per-image moments)."""
    n = 0
    mean = 0.0
    m2 = 0.0
    for img in images:
        x = img.pixels.astype(np.float64) / 255.0
        nb = x.size
        mb = float(x.mean())
        m2b = float(((x - mb) ** 2).sum())
        delta = mb - mean
        tot = n + nb
        mean += delta * nb / tot
        m2 += m2b + delta * delta * n * nb / tot
        n = tot
    if n == 0:
        raise ParamError("no images to compute statistics from")
    return NormalizationStats(mean, math.sqrt(m2 / n))


def compute_stats(manifest: DatasetManifest) -> NormalizationStats:
    """Scalar mean and population std of all pixels, in [0, 1] units."""
    if len(manifest) == 0:
        raise ParamError("manifest is empty")
    return stats_from_images(read_pgm(manifest.resolve(r)) for r in manifest.records)


def normalize(t: Tensor, stats: NormalizationStats) -> Tensor:
    return (np.asarray(t, dtype=np.float64) - stats.mean) / stats.std


def denormalize(t: Tensor, stats: NormalizationStats) -> Tensor:
    return np.asarray(t, dtype=np.float64) * stats.std + stats.mean


def prepare_input(img: GrayImage, size: int, stats: NormalizationStats) -> Tensor:
    """Resize to ``size`` x ``size`` and normalise; shape [1, size, size]."""
    return normalize(tensor_from_image(resize_bilinear(img, size, size)), stats)


# ---------------------------------------------------------------------------
# Dataset expansion
# ---------------------------------------------------------------------------

def augment_image(img: GrayImage, plan: AugmentPlan, rng: Rng) -> list[GrayImage]:
    """Outputs for one source, ordered crops, rotations, noise."""
    size = plan.target_size
    crops = five_crop(img, plan.crop_fraction)
    if plan.mode == "default":
        corners = sorted(int(i) for i in rng.choice(4, 2))
        picked = [crops[4]] + [crops[i] for i in corners]
        angles = [90.0 * rng.integers(1, 4)]
    else:
        picked = crops
        angles = list(plan.rotation_angles)
    outs = [resize_bilinear(c, size, size) for c in picked]
    outs += [resize_bilinear(r, size, size) for r in rotations(img, angles)]
    base = resize_bilinear(img, size, size)
    noisy = base
    if rng.uniform(1)[0] < plan.noise_fraction:
        noisy = add_gaussian_noise(base, plan.noise_sigma, rng)
    outs.append(noisy)
    return outs


def _stem(path: str) -> str:
    p = Path(path)
    return str(p.with_suffix("")).replace(os.sep, "_").replace("/", "_")


def expand_dataset(manifest: DatasetManifest, plan: AugmentPlan, out_dir) -> DatasetManifest:
    """Write augmented images and ``manifest.csv`` into ``out_dir``.

    Each record draws from its own child generator, so the result does not
    depend on processing order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root_rng = Rng(plan.seed)
    records = []
    for i, rec in enumerate(manifest.records):
        img = read_pgm(manifest.resolve(rec))
        outs = augment_image(img, plan, root_rng.spawn(i))
        stem = _stem(rec.path)
        for k, aug in enumerate(outs):
            name = f"{stem}_aug{k}.pgm"
            write_pgm(aug, out_dir / name)
            records.append(Record(name, rec.label))
    result = DatasetManifest(records, classes=manifest.classes, root=out_dir)
    save_manifest(result, out_dir / "manifest.csv")
    return result


def plan_to_dict(plan: AugmentPlan) -> dict:
    d = asdict(plan)
    d["rotation_angles"] = list(plan.rotation_angles)
    return d
