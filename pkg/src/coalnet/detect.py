"""Object detection and region clipping for fragments on a conveyor belt.

The pipeline runs, in order: Sobel gradients, horizontal-minus-vertical
gradient emphasis, Gaussian smoothing, Otsu binarisation, Moore contour
tracing with straight-run compression, minimum-area rectangle of each
contour, and finally the axis-aligned envelope of the best rectangle.
All borders are handled by edge replication.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import GrayImage, Tensor, quantize, write_pgm
from .errors import (
    DegenerateGeometry,
    DegenerateImage,
    EmptyCrop,
    NoObjectFound,
    ParamError,
    ShapeMismatch,
    SizeError,
)

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True)
class Contour:
    points: list[tuple[int, int]]

    def __len__(self):
        return len(self.points)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class RotatedRect:
    vertices: np.ndarray  # (4, 2), consecutive corners

    @property
    def area(self) -> float:
        v = self.vertices
        return float(np.linalg.norm(v[1] - v[0]) * np.linalg.norm(v[3] - v[0]))

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        v = self.vertices
        e1, e2 = v[1] - v[0], v[3] - v[0]
        l1, l2 = np.linalg.norm(e1), np.linalg.norm(e2)
        rel = np.asarray(points, dtype=np.float64) - v[0]
        a = rel @ (e1 / l1)
        b = rel @ (e2 / l2)
        return (a >= -tol) & (a <= l1 + tol) & (b >= -tol) & (b <= l2 + tol)


@dataclass(frozen=True)
class CropBox:
    """Half-open pixel box: columns [min_x, max_x), rows [min_y, max_y)."""

    min_x: int
    min_y: int
    max_x: int
    max_y: int

    @property
    def width(self) -> int:
        return self.max_x - self.min_x

    @property
    def height(self) -> int:
        return self.max_y - self.min_y

    @property
    def area(self) -> int:
        return self.width * self.height

    def iou(self, other: "CropBox") -> float:
        ix = max(0, min(self.max_x, other.max_x) - max(self.min_x, other.min_x))
        iy = max(0, min(self.max_y, other.max_y) - max(self.min_y, other.min_y))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union else 0.0

    def contains_box(self, other: "CropBox") -> bool:
        return (
            self.min_x <= other.min_x
            and self.min_y <= other.min_y
            and self.max_x >= other.max_x
            and self.max_y >= other.max_y
        )

    def apply(self, img: GrayImage) -> GrayImage:
        return GrayImage(img.pixels[self.min_y : self.max_y, self.min_x : self.max_x])


@dataclass(frozen=True)
class DetectParams:
    sigma: float = 1.5
    ksize: int = 5
    morphology: bool = False  # binary closing before contouring
    closing_size: int = 5


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

def _correlate3(px: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = px.shape
    padded = np.pad(px, 1, mode="edge")
    out = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            if kernel[dy, dx]:
                out += kernel[dy, dx] * padded[dy : dy + h, dx : dx + w]
    return out


def sobel_gradients(img: GrayImage) -> tuple[Tensor, Tensor]:
    """Horizontal and vertical Sobel responses, each of shape [height, width]."""
    if img.width < 3 or img.height < 3:
        raise SizeError(f"Sobel needs at least 3x3 pixels, got {img.width}x{img.height}")
    px = img.pixels.astype(np.float64)
    return _correlate3(px, SOBEL_X), _correlate3(px, SOBEL_Y)


def gradient_emphasis(gx: Tensor, gy: Tensor) -> GrayImage:
    """Keep regions with strong horizontal and weak vertical gradient: clamp(|gx|-|gy|)."""
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if gx.shape != gy.shape or gx.ndim != 2:
        raise ShapeMismatch(f"gradient shapes differ: {gx.shape} vs {gy.shape}")
    return GrayImage(quantize(np.abs(gx) - np.abs(gy)))


def gaussian_kernel(sigma: float, ksize: int) -> np.ndarray:
    if not sigma > 0:
        raise ParamError("sigma must be positive")
    if ksize < 3 or ksize % 2 == 0:
        raise ParamError("ksize must be an odd integer >= 3")
    r = ksize // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur_float(img: GrayImage, sigma: float, ksize: int) -> np.ndarray:
    """Separable Gaussian smoothing before quantisation."""
    k = gaussian_kernel(sigma, ksize)
    r = ksize // 2
    h, w = img.height, img.width
    padded = np.pad(img.pixels.astype(np.float64), r, mode="edge")
    rows = np.zeros((h + 2 * r, w))
    for i, kv in enumerate(k):
        rows += kv * padded[:, i : i + w]
    out = np.zeros((h, w))
    for i, kv in enumerate(k):
        out += kv * rows[i : i + h, :]
    return out


def gaussian_blur(img: GrayImage, sigma: float = 1.5, ksize: int = 5) -> GrayImage:
    return GrayImage(quantize(gaussian_blur_float(img, sigma, ksize)))


# ---------------------------------------------------------------------------
# Otsu
# ---------------------------------------------------------------------------

def otsu_threshold(img: GrayImage) -> tuple[int, GrayImage]:
    """Threshold maximising between-class variance; foreground is ``p > t``.

    Scores are compared as exact rationals, so equal variances tie exactly
    and the smallest threshold wins.
    """
    hist = np.bincount(img.pixels.ravel(), minlength=256).astype(np.int64)
    if np.count_nonzero(hist) < 2:
        raise DegenerateImage("image has a single gray level")
    total = int(hist.sum())
    total_sum = int(np.dot(hist, np.arange(256)))
    best_t, best = 0, Fraction(-1)
    n0 = s0 = 0
    for t in range(255):
        n0 += int(hist[t])
        s0 += t * int(hist[t])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            score = Fraction(0)
        else:
            # w0*w1*(mu0-mu1)^2 up to the constant factor 1/total^4
            diff = total * s0 - n0 * total_sum
            score = Fraction(diff * diff, n0 * n1)
        if score > best:
            best, best_t = score, t
    binary = np.where(img.pixels > best_t, 255, 0).astype(np.uint8)
    return best_t, GrayImage(binary)


# ---------------------------------------------------------------------------
# Contours
# ---------------------------------------------------------------------------

# Moore neighbourhood in clockwise order (image coordinates, y down), starting west.
_NEIGHBOURS = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)]
_DIR_INDEX = {d: i for i, d in enumerate(_NEIGHBOURS)}


def _trace_component(mask: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Moore boundary following on a zero-padded mask, Jacob's stopping rule."""
    sx, sy = start
    pts = [start]
    # the pixel west of the raster-scan start is background
    back = 0
    cur = start
    first_move = None
    limit = 4 * mask.size + 8
    for _ in range(limit):
        cx, cy = cur
        nxt = None
        for k in range(1, 9):
            d = (back + k) % 8
            dx, dy = _NEIGHBOURS[d]
            if mask[cy + dy, cx + dx]:
                nxt = (cx + dx, cy + dy)
                # new backtrack: the neighbour examined just before, seen from nxt
                bx, by = _NEIGHBOURS[(d + 7) % 8]
                prev_cell = (cx + bx, cy + by)
                back = _DIR_INDEX[(prev_cell[0] - nxt[0], prev_cell[1] - nxt[1])]
                break
        if nxt is None:
            return pts  # isolated pixel
        move = (cur, nxt)
        if first_move is None:
            first_move = move
        elif move == first_move:
            pts.pop()  # the start pixel was appended again
            return pts
        pts.append(nxt)
        cur = nxt
    raise RuntimeError("contour tracing did not terminate")


def compress_contour(points: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Drop points in the interior of straight horizontal, vertical or diagonal runs."""
    n = len(points)
    if n < 3:
        return list(points)

    def step(a, b):
        return (int(np.sign(b[0] - a[0])), int(np.sign(b[1] - a[1])))

    keep = []
    for i in range(n):
        prev, cur, nxt = points[i - 1], points[i], points[(i + 1) % n]
        if step(prev, cur) != step(cur, nxt):
            keep.append(cur)
    return keep or [points[0]]


def find_contours(binary: GrayImage, compress: bool = True) -> list[Contour]:
    """Outer boundary of each 8-connected foreground component (value > 0).

    Contours are returned in raster order of their starting pixel. Points are
    (x, y). Components of one or two pixels yield fewer than 3 points.
    """
    fg = binary.pixels > 0
    labels, count = ndimage.label(fg, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return []
    padded = np.pad(labels, 1)
    contours = []
    objects = ndimage.find_objects(labels)
    for idx, sl in enumerate(objects, start=1):
        ys, xs = np.nonzero(labels[sl] == idx)
        # first pixel in raster order of this component
        y0 = ys.min()
        x0 = xs[ys == y0].min()
        start = (int(x0 + sl[1].start) + 1, int(y0 + sl[0].start) + 1)
        mask = padded == idx
        pts = [(x - 1, y - 1) for x, y in _trace_component(mask, start)]
        contours.append(Contour(compress_contour(pts) if compress else pts))
    return contours


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> np.ndarray:
    """Monotone chain hull, counter-clockwise, without collinear points."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).reshape(-1, 2).tolist())))
    if len(pts) < 3:
        return np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)


def min_area_rect(points) -> RotatedRect:
    """Minimum-area enclosing rectangle by rotating calipers over the hull."""
    hull = convex_hull(points)
    n = len(hull)
    if n < 3:
        raise DegenerateGeometry("points are collinear or fewer than three")

    def nxt(i):
        return (i + 1) % n

    best = None
    right = top = left = None
    for i in range(n):
        p, q = hull[i], hull[nxt(i)]
        e = q - p
        e = e / math.hypot(e[0], e[1])
        nrm = np.array([-e[1], e[0]])  # inward for a counter-clockwise hull
        if right is None:
            right = nxt(i)
        while hull[nxt(right)] @ e > hull[right] @ e + 1e-15:
            right = nxt(right)
        if top is None:
            top = right
        while hull[nxt(top)] @ nrm > hull[top] @ nrm + 1e-15:
            top = nxt(top)
        if left is None:
            left = top
        while hull[nxt(left)] @ e < hull[left] @ e - 1e-15:
            left = nxt(left)
        lo = (hull[left] - p) @ e
        hi = (hull[right] - p) @ e
        height = (hull[top] - p) @ nrm
        area = (hi - lo) * height
        if best is None or area < best[0]:
            verts = np.array([p + lo * e, p + hi * e, p + hi * e + height * nrm, p + lo * e + height * nrm])
            best = (area, verts)
    return RotatedRect(best[1])


def crop_box_of(rect: RotatedRect, img_w: int, img_h: int) -> CropBox:
    """Axis-aligned envelope of the rectangle, rounded outward and clamped."""
    v = rect.vertices
    min_x = max(0, math.floor(v[:, 0].min()))
    min_y = max(0, math.floor(v[:, 1].min()))
    max_x = min(img_w, math.ceil(v[:, 0].max()))
    max_y = min(img_h, math.ceil(v[:, 1].max()))
    if min_x >= max_x or min_y >= max_y:
        raise EmptyCrop(f"crop collapsed to ({min_x},{min_y})-({max_x},{max_y})")
    return CropBox(min_x, min_y, max_x, max_y)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

def detect_box(img: GrayImage, params: DetectParams = DetectParams(), debug_dir=None) -> CropBox:
    """Run the detection steps and return the crop box of the chosen object.

    Output dimensions: gradients, emphasis, blur and binary images all keep
    the input's width and height.
    """
    if img.width < 32 or img.height < 32:
        raise SizeError("detection needs an image of at least 32x32")
    gx, gy = sobel_gradients(img)
    emph = gradient_emphasis(gx, gy)
    blurred = gaussian_blur(emph, params.sigma, params.ksize)
    try:
        _, binary = otsu_threshold(blurred)
    except DegenerateImage as exc:
        raise NoObjectFound("no foreground after binarisation") from exc
    if params.morphology:
        st = np.ones((params.closing_size, params.closing_size), dtype=bool)
        closed = ndimage.binary_closing(binary.pixels > 0, structure=st, border_value=0)
        binary = GrayImage(np.where(closed | (binary.pixels > 0), 255, 0))
    if debug_dir is not None:
        d = Path(debug_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_pgm(GrayImage(quantize(np.abs(gx))), d / "1_gx.pgm")
        write_pgm(emph, d / "2_emph.pgm")
        write_pgm(blurred, d / "3_blur.pgm")
        write_pgm(binary, d / "4_binary.pgm")

    best = None
    for contour in find_contours(binary):
        try:
            rect = min_area_rect(contour.points)
        except DegenerateGeometry:
            continue
        if best is None or rect.area > best.area:
            best = rect
    if best is None:
        raise NoObjectFound("no contour encloses a region")
    # contour points are pixel centres; shift so pixel i spans [i, i+1)
    shifted = RotatedRect(best.vertices + 0.5)
    return crop_box_of(shifted, img.width, img.height)


def detect_and_crop(img: GrayImage, params: DetectParams = DetectParams(), debug_dir=None) -> GrayImage:
    return detect_box(img, params, debug_dir).apply(img)
