"""Labelled synthetic coal/gangue textures standing in for real photographs.

Gangue is light and rough, matt coal is dark and smooth, gloss coal is dark
with specular highlights. All textures carry vertical stripes so that the
horizontal gradient dominates inside an object, which is what the detector
keys on.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import ClassLabel, DatasetManifest, GrayImage, Record, Rng, quantize, save_manifest, write_pgm
from .detect import CropBox
from .errors import FormatError, ParamError

GAP_CENTER = 110.0


@dataclass(frozen=True)
class Recipe:
    name: str
    base: float
    noise_sigma: float
    period: float
    amplitude: float
    spots: int = 0  # specular highlights per image
    spot_gain: float = 90.0


COAL_RECIPES = (
    Recipe("gangue", base=170.0, noise_sigma=10.0, period=5.0, amplitude=12.0),
    Recipe("matt_coal", base=50.0, noise_sigma=6.0, period=11.0, amplitude=6.0),
    Recipe("gloss_coal", base=100.0, noise_sigma=8.0, period=8.0, amplitude=8.0, spots=5),
)

# Source task for transfer experiments: five texture classes unrelated to the coal labels.
PRETRAIN_RECIPES = (
    Recipe("t0", base=35.0, noise_sigma=5.0, period=4.0, amplitude=6.0),
    Recipe("t1", base=75.0, noise_sigma=6.0, period=9.0, amplitude=10.0, spots=3),
    Recipe("t2", base=115.0, noise_sigma=7.0, period=6.0, amplitude=8.0),
    Recipe("t3", base=155.0, noise_sigma=8.0, period=12.0, amplitude=12.0, spots=3),
    Recipe("t4", base=195.0, noise_sigma=6.0, period=7.0, amplitude=9.0),
)


@dataclass(frozen=True)
class SynthSpec:
    recipes: tuple[Recipe, ...] = COAL_RECIPES
    image_size: int = 64
    with_background: bool = False
    n_per_class: int = 20
    seed: int = 0
    gap: float = 1.0  # scales class base intensities about a common centre
    brightness_jitter: float = 0.0  # per-image uniform offset in [-j, j]
    background: float = 200.0
    scene_amplitude: float = 20.0  # minimum stripe amplitude of objects on a belt
    scene_period: float = 6.0  # maximum stripe period of objects on a belt

    def __post_init__(self):
        if self.image_size < 16 or self.n_per_class < 0:
            raise ParamError("image_size must be >= 16 and n_per_class >= 0")
        bases = [self.base_of(r) for r in self.recipes]
        for i in range(len(bases)):
            for j in range(i + 1, len(bases)):
                need = 3.0 * max(self.recipes[i].noise_sigma, self.recipes[j].noise_sigma)
                if abs(bases[i] - bases[j]) < need:
                    raise ParamError(
                        f"recipes {self.recipes[i].name} and {self.recipes[j].name} are closer than 3 sigma"
                    )

    def base_of(self, recipe: Recipe) -> float:
        return GAP_CENTER + self.gap * (recipe.base - GAP_CENTER)


def _texture(recipe: Recipe, base: float, h: int, w: int, rng: Rng) -> np.ndarray:
    phase = 2 * math.pi * rng.uniform(1)[0]
    x = np.arange(w, dtype=np.float64)
    stripes = recipe.amplitude * np.sin(2 * math.pi * x / recipe.period + phase)
    tex = base + stripes[None, :] + recipe.noise_sigma * rng.normal(h * w).reshape(h, w)
    if recipe.spots:
        yy, xx = np.mgrid[0:h, 0:w]
        cx = rng.uniform(recipe.spots) * w
        cy = rng.uniform(recipe.spots) * h
        for sx, sy in zip(cx, cy):
            d2 = (xx - sx) ** 2 + (yy - sy) ** 2
            tex += recipe.spot_gain * np.exp(-d2 / 3.0)
    return tex


def render(spec: SynthSpec, class_index: int, rng: Rng) -> tuple[GrayImage, CropBox | None]:
    recipe = spec.recipes[class_index]
    s = spec.image_size
    base = spec.base_of(recipe)
    if spec.brightness_jitter:
        base += spec.brightness_jitter * (2 * rng.uniform(1)[0] - 1)
    if not spec.with_background:
        return GrayImage(quantize(_texture(recipe, base, s, s, rng))), None
    # smooth belt: vertical shading only, so it has no horizontal gradient
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    belt = spec.background - 10.0 + 20.0 * yy / (s - 1) + 1.0 * rng.normal(s * s).reshape(s, s)
    bw = int(round(s * (0.35 + 0.35 * rng.uniform(1)[0])))
    bh = int(round(s * (0.35 + 0.35 * rng.uniform(1)[0])))
    x0 = rng.integers(2, s - bw - 1)
    y0 = rng.integers(2, s - bh - 1)
    cx, cy = x0 + (bw - 1) / 2.0, y0 + (bh - 1) / 2.0
    # superellipse: a rounded rectangle-like fragment
    mask = (np.abs((xx - cx) / (bw / 2.0)) ** 4 + np.abs((yy - cy) / (bh / 2.0)) ** 4) <= 1.0
    # objects on a belt need enough horizontal gradient inside the silhouette
    # to survive binarisation next to their own strong outline
    scene = replace(recipe, amplitude=max(recipe.amplitude, spec.scene_amplitude),
                    period=min(recipe.period, spec.scene_period))
    tex = _texture(scene, base, s, s, rng)
    img = np.where(mask, tex, belt)
    ys, xs = np.nonzero(mask)
    box = CropBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return GrayImage(quantize(img)), box


def generate_images(spec: SynthSpec):
    """In-memory dataset: (images, labels, boxes) in class-major order."""
    root = Rng(spec.seed)
    images, labels, boxes = [], [], []
    for k in range(len(spec.recipes)):
        for i in range(spec.n_per_class):
            img, box = render(spec, k, root.spawn(k * 1_000_003 + i))
            images.append(img)
            labels.append(k)
            boxes.append(box)
    return images, np.asarray(labels, dtype=np.int64), boxes


def generate(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write PGMs, ``manifest.csv`` and, with backgrounds, ``boxes.csv``."""
    if [r.name for r in spec.recipes] != [c.label for c in ClassLabel]:
        # manifests carry the coal label space; order recipes to match it
        order = {c.label: int(c) for c in ClassLabel}
        if sorted(r.name for r in spec.recipes) != sorted(order):
            raise ParamError("file datasets need exactly the three coal recipes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, labels, boxes = generate_images(spec)
    records = []
    box_rows = []
    counters: dict[str, int] = {}
    for img, k, box in zip(images, labels, boxes):
        name = spec.recipes[k].name
        counters[name] = counters.get(name, 0) + 1
        fname = f"{name}_{counters[name] - 1:04d}.pgm"
        write_pgm(img, out_dir / fname)
        records.append(Record(fname, ClassLabel.parse(name)))
        if box is not None:
            box_rows.append((fname, box))
    manifest = DatasetManifest(records, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    if spec.with_background:
        lines = ["path,min_x,min_y,max_x,max_y"]
        lines += [f"{p},{b.min_x},{b.min_y},{b.max_x},{b.max_y}" for p, b in box_rows]
        (out_dir / "boxes.csv").write_text("\n".join(lines) + "\n")
    return manifest


def ground_truth_boxes(out_dir) -> list[tuple[str, CropBox]]:
    path = Path(out_dir) / "boxes.csv"
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["path", "min_x", "min_y", "max_x", "max_y"]:
        raise FormatError("boxes.csv must start with 'path,min_x,min_y,max_x,max_y'")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            vals = [int(v) for v in row[1:]]
        except ValueError:
            raise FormatError(f"line {lineno}: non-integer box coordinate") from None
        if len(vals) != 4:
            raise FormatError(f"line {lineno}: expected 5 columns")
        out.append((row[0], CropBox(*vals)))
    return out


def synth_arrays(spec: SynthSpec, size: int | None = None, stats=None):
    """Network-ready arrays [N, 1, S, S] and labels, normalised with ``stats``
    (computed from these very images when omitted)."""
    from .augment import prepare_input, stats_from_images

    images, labels, _ = generate_images(spec)
    size = size or spec.image_size
    stats = stats or stats_from_images(images)
    x = np.stack([prepare_input(img, size, stats) for img in images])
    return x, labels, stats
