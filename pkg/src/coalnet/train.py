"""Mini-batch SGD, layer freezing, fine-tuning, checkpoints and kernel grids."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .augment import NormalizationStats, prepare_input
from .core import DatasetManifest, GrayImage, Rng, read_pgm, write_pgm
from .errors import FormatError, NoSuchLayer, NotConv, ParamError, ShapeMismatch, SpecMismatch, VersionError

log = logging.getLogger(__name__)

MAGIC = b"CGCK"
VERSION = 1


@dataclass(frozen=True)
class SgdConfig:
    eta: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    iterations: int = 500
    seed: int = 0
    classic_momentum: bool = False
    init_std: float = 0.1

    def __post_init__(self):
        if not self.eta > 0:
            raise ParamError("eta must be positive")
        if not 0 <= self.momentum < 1:
            raise ParamError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.batch_size < 1 or self.iterations < 0:
            raise ParamError("invalid weight decay, batch size or iteration count")


def sgd_step(params: dict, grads: dict, velocity: dict, cfg: SgdConfig, lr_mult: dict | None = None):
    """One update of every parameter present in ``grads``.

    Default rule: ``w(n) = w(n-1) - eta * (dJ/dw + momentum * dw(n-1))`` where
    ``dw(n-1)`` is the previous actual step; ``velocity`` stores that step.
    With ``classic_momentum`` the usual ``v = momentum*v - eta*g; w += v`` is
    used instead. ``weight_decay`` adds ``lambda * w`` to the gradient.
    Returns new ``(params, velocity)`` dicts; inputs are not modified.
    """
    new_params = dict(params)
    new_vel = dict(velocity)
    for name, g in grads.items():
        if name not in params:
            continue
        w = params[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        eta = cfg.eta * (lr_mult or {}).get(name, 1.0)
        if cfg.weight_decay > 0:
            g = g + cfg.weight_decay * w
        prev = velocity.get(name)
        if prev is None:
            prev = np.zeros_like(w)
        if cfg.classic_momentum:
            step = cfg.momentum * prev - eta * g
        else:
            step = -eta * (g + cfg.momentum * prev)
        new_params[name] = w + step
        new_vel[name] = step
    return new_params, new_vel


@dataclass
class LossLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def append(self, iteration: int, loss: float, acc: float):
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError("iterations must increase")
        self.rows.append((iteration, loss, acc))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_csv(self) -> str:
        lines = ["iter,loss,acc"] + [f"{i},{l!r},{a!r}" for i, l, a in self.rows]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def iterations_to_reach(self, threshold: float, window: int = 10) -> int | None:
        """First iteration whose trailing ``window``-mean loss is <= threshold."""
        losses = self.losses
        for k in range(len(losses)):
            lo = max(0, k - window + 1)
            if losses[lo : k + 1].mean() <= threshold:
                return self.rows[k][0]
        return None


def resolve_freeze(spec: nn.NetworkSpec, freeze) -> set[str]:
    """Layer names from indices or names; only parameterised layers may be frozen."""
    names = set()
    for key in freeze or ():
        try:
            info = spec.layer(key)
        except KeyError:
            raise ParamError(f"no layer {key!r} to freeze") from None
        if not info.has_params:
            raise ParamError(f"layer {key!r} ({info.kind}) has no parameters to freeze")
        names.add(info.name)
    return names


def load_arrays(manifest: DatasetManifest, stats: NormalizationStats, size: int):
    """Resized, normalised images [N, 1, size, size] and labels [N]."""
    if len(manifest) == 0:
        raise ParamError("manifest is empty")
    x = np.stack([prepare_input(read_pgm(manifest.resolve(r)), size, stats) for r in manifest.records])
    return x, manifest.labels()


def fit(spec: nn.NetworkSpec, params: dict, x: np.ndarray, y: np.ndarray, cfg: SgdConfig,
        freeze=(), rng: Rng | None = None, lr_mult: dict | None = None):
    """Train on in-memory arrays. Returns (params, LossLog)."""
    rng = rng if rng is not None else Rng(cfg.seed)
    shuffle_rng, dropout_rng = rng.spawn(0), rng.spawn(1)
    frozen = resolve_freeze(spec, freeze)
    params = {k: v.copy() for k, v in params.items()}
    velocity: dict = {}
    log_rows = LossLog()
    n = len(x)
    order = np.zeros(0, dtype=np.int64)
    pos = 0
    for it in range(1, cfg.iterations + 1):
        if pos >= len(order):
            order, pos = shuffle_rng.permutation(n), 0
        idx = order[pos : pos + cfg.batch_size]
        pos += len(idx)
        xb, yb = x[idx], y[idx]
        logits, cache = nn.network_forward(spec, params, xb, "train", dropout_rng, return_cache=True)
        loss, grad = nn.softmax_cross_entropy(logits, yb)
        grads = nn.network_backward(spec, params, cache, grad, skip=frozen, need_input_grad=False)
        del grads["input"]
        params, velocity = sgd_step(params, grads, velocity, cfg, lr_mult)
        acc = float((logits.argmax(axis=1) == yb).mean())
        log_rows.append(it, loss, acc)
        if not math.isfinite(loss):
            raise FloatingPointError(f"loss diverged at iteration {it}")
    return params, log_rows


def train_loop(spec: nn.NetworkSpec, init_params: dict, manifest: DatasetManifest, stats: NormalizationStats,
               cfg: SgdConfig, freeze=(), rng: Rng | None = None, lr_mult: dict | None = None):
    x, y = load_arrays(manifest, stats, spec.input_shape[1])
    return fit(spec, init_params, x, y, cfg, freeze, rng, lr_mult)


def accuracy(spec: nn.NetworkSpec, params: dict, x: np.ndarray, y: np.ndarray) -> float:
    probs = nn.predict_proba(spec, params, x)
    return float((probs.argmax(axis=1) == y).mean())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    spec: nn.NetworkSpec
    params: dict

    @property
    def stats(self) -> NormalizationStats | None:
        d = self.spec.extra.get("normalization")
        return NormalizationStats(d["mean"], d["std"]) if d else None


def encode_checkpoint(params: dict, spec: nn.NetworkSpec) -> bytes:
    blob = spec.to_json().encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(blob)))
    out.write(blob)
    out.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("checkpoint is truncated")
        chunk = bytes(view[pos : pos + n])
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    version, blob_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    try:
        spec = nn.NetworkSpec.from_dict(json.loads(take(blob_len).decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bad spec blob: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("bad tensor name") from exc
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float64)
    if pos != len(view):
        raise FormatError("trailing bytes after last tensor")
    return Checkpoint(spec, params)


def save_checkpoint(params: dict, spec: nn.NetworkSpec, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params, spec))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

def transfer_params(pretrained: Checkpoint, new_spec: nn.NetworkSpec, rng: Rng, init_std: float = 0.1):
    """Copy every tensor whose shape matches; initialise the rest.

    Only the final dense layer's output count may differ between the specs.
    Returns (params, names of layers copied from the checkpoint).
    """
    old, new = pretrained.spec.structure(), new_spec.structure()
    if len(old) != len(new) or tuple(pretrained.spec.input_shape) != tuple(new_spec.input_shape):
        raise SpecMismatch("specs differ in depth or input shape")
    for i, (a, b) in enumerate(zip(old, new)):
        if i == len(old) - 1 and a.get("kind") == b.get("kind") == "dense":
            continue
        if a != b:
            raise SpecMismatch(f"layer {i} differs: {a} vs {b}")
    params = {}
    copied = []
    shapes = new_spec.param_shapes()
    for info in new_spec.param_layers():
        keys = [f"{info.name}.weight", f"{info.name}.bias"]
        if all(k in pretrained.params and pretrained.params[k].shape == shapes[k] for k in keys):
            for k in keys:
                params[k] = pretrained.params[k].copy()
            copied.append(info.name)
        else:
            params.update(nn.init_layer_params(new_spec, info, rng, init_std))
    return params, copied


def fine_tune(pretrained: Checkpoint, new_spec: nn.NetworkSpec, freeze, cfg: SgdConfig,
              manifest: DatasetManifest | None = None, stats: NormalizationStats | None = None,
              rng: Rng | None = None, pretrained_lr_mult: float = 0.1, arrays=None):
    """Initialise from a checkpoint, then train.

    Copied layers learn at ``pretrained_lr_mult * eta``. Data comes from
    ``manifest``/``stats`` or directly from ``arrays=(x, y)``.
    """
    rng = rng if rng is not None else Rng(cfg.seed)
    params, copied = transfer_params(pretrained, new_spec, rng.spawn(2), cfg.init_std)
    lr_mult = {}
    for name in copied:
        lr_mult[f"{name}.weight"] = lr_mult[f"{name}.bias"] = pretrained_lr_mult
    if arrays is None:
        x, y = load_arrays(manifest, stats, new_spec.input_shape[1])
    else:
        x, y = arrays
    return fit(new_spec, params, x, y, cfg, freeze, rng, lr_mult)


# ---------------------------------------------------------------------------
# Kernel visualisation
# ---------------------------------------------------------------------------

def kernel_grid(weights: np.ndarray) -> GrayImage:
    """Tile each [M, N] kernel slice into a near-square grid with 1-px black separators.

    Every (filter, input channel) slice is its own cell, min-max scaled to
    0..255; a constant slice becomes mid-gray 128. Unused cells stay black.
    """
    o, c, m, n = weights.shape
    cells = weights.reshape(o * c, m, n)
    count = len(cells)
    cols = math.ceil(math.sqrt(count))
    rows = math.ceil(count / cols)
    out = np.zeros((rows * (m + 1) + 1, cols * (n + 1) + 1), dtype=np.uint8)
    for i, k in enumerate(cells):
        lo, hi = float(k.min()), float(k.max())
        if hi - lo <= 0:
            tile = np.full((m, n), 128, dtype=np.uint8)
        else:
            tile = np.clip(np.floor((k - lo) / (hi - lo) * 255 + 0.5), 0, 255).astype(np.uint8)
        r, cc = divmod(i, cols)
        y0, x0 = 1 + r * (m + 1), 1 + cc * (n + 1)
        out[y0 : y0 + m, x0 : x0 + n] = tile
    return GrayImage(out)


def export_kernel_grid(ck: Checkpoint, layer_name: str, path) -> GrayImage:
    try:
        info = ck.spec.layer(layer_name)
    except KeyError:
        raise NoSuchLayer(f"no layer named {layer_name!r}") from None
    if info.kind != "conv":
        raise NotConv(f"layer {layer_name!r} is {info.kind}, not conv")
    img = kernel_grid(ck.params[f"{info.name}.weight"])
    write_pgm(img, path)
    return img
