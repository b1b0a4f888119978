"""Layers of the convolutional network with hand-written backward passes.

Tensors are float64 numpy arrays laid out [batch, channels, height, width].
Every layer is a pair of pure functions; the network composes them from a
declarative :class:`NetworkSpec` and a flat ``{name: array}`` parameter dict
(``conv1.weight``, ``conv1.bias``, ``dense2.weight`` ...).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Rng, Tensor
from .errors import LabelOutOfRange, ParamError, ShapeMismatch, SizeError

LAYER_KINDS = ("conv", "relu", "lrn", "pool", "dropout", "dense")
PARAM_KINDS = ("conv", "dense")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvLayer:
    weights: Tensor  # [out_ch, in_ch, M, N]
    bias: Tensor  # [out_ch]
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatch("conv weights must be [O, C, M, N] with bias [O]")
        if self.stride < 1 or self.pad < 0:
            raise ParamError("stride must be >= 1 and pad >= 0")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: Tensor, kh: int, kw: int, stride: int, pad: int):
    """Columns [C*kh*kw, B*oh*ow] of every receptive field."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow = win.shape[:4]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * oh * ow)
    return cols, oh, ow


def _check_conv_input(layer: ConvLayer, x: Tensor):
    o, c, kh, kw = layer.weights.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeMismatch(f"conv expects [B, {c}, H, W], got {list(x.shape)}")
    if x.shape[2] + 2 * layer.pad < kh or x.shape[3] + 2 * layer.pad < kw:
        raise ShapeMismatch("input smaller than the kernel after padding")


def _conv_forward_cols(layer: ConvLayer, x: Tensor):
    _check_conv_input(layer, x)
    o = layer.weights.shape[0]
    kh, kw = layer.weights.shape[2:]
    cols, oh, ow = _im2col(x, kh, kw, layer.stride, layer.pad)
    y = layer.weights.reshape(o, -1) @ cols + layer.bias[:, None]
    return y.reshape(o, x.shape[0], oh, ow).transpose(1, 0, 2, 3), cols


def conv_forward(layer: ConvLayer, x: Tensor) -> Tensor:
    """Cross-correlation plus bias; activation is a separate layer.

    Output spatial size is ``(H + 2*pad - M) // stride + 1`` (same for W).
    """
    return _conv_forward_cols(layer, x)[0]


def conv_backward(layer: ConvLayer, x: Tensor, grad_out: Tensor, cols: Tensor | None = None,
                  need_grad_x: bool = True):
    """Returns (grad_x, grad_w, grad_b).

    ``cols`` may carry the forward im2col buffer; with ``need_grad_x=False``
    grad_x is returned as None.
    """
    _check_conv_input(layer, x)
    o, c, kh, kw = layer.weights.shape
    s, p = layer.stride, layer.pad
    b = x.shape[0]
    oh = conv_output_size(x.shape[2], kh, s, p)
    ow = conv_output_size(x.shape[3], kw, s, p)
    if grad_out.shape != (b, o, oh, ow):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != {(b, o, oh, ow)}")
    if cols is None:
        cols = _im2col(x, kh, kw, s, p)[0]
    g2 = grad_out.transpose(1, 0, 2, 3).reshape(o, -1)
    grad_w = (g2 @ cols.T).reshape(layer.weights.shape)
    grad_b = g2.sum(axis=1)
    if not need_grad_x:
        return None, grad_w, grad_b
    dcols = (layer.weights.reshape(o, -1).T @ g2).reshape(c, kh, kw, b, oh, ow)
    hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
    gxp = np.zeros((c, b, hp, wp))
    for m in range(kh):
        for n in range(kw):
            gxp[:, :, m : m + s * oh : s, n : n + s * ow : s] += dcols[:, m, n]
    grad_x = gxp[:, :, p : hp - p, p : wp - p] if p else gxp
    return grad_x.transpose(1, 0, 2, 3), grad_w, grad_b


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    return np.where(x > 0, grad_out, 0.0)


# ---------------------------------------------------------------------------
# Local response normalisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LrnParams:
    """``h / (k + alpha/R * sum h^2) ** beta`` over an R-wide neighbourhood.

    The neighbourhood is the R x R spatial window inside each channel
    (zero-padded), or R adjacent channels when ``across_channels`` is set.
    """

    size: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 1.0
    across_channels: bool = False

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ParamError("LRN size must be odd and >= 1")
        if self.alpha < 0 or self.beta <= 0 or self.k <= 0:
            raise ParamError("LRN needs alpha >= 0, beta > 0, k > 0")


def _box_sum_axis(a: Tensor, r: int, axis: int) -> Tensor:
    """Sum over a centred window of half-width r along ``axis``, zero outside."""
    if r == 0:
        return a
    n = a.shape[axis]
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    ap = np.pad(a, pad)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(0, n)
    out = ap[tuple(sl)].copy()
    for d in range(1, 2 * r + 1):
        sl[axis] = slice(d, d + n)
        out += ap[tuple(sl)]
    return out


def _lrn_window_sum(params: LrnParams, a: Tensor) -> Tensor:
    r = params.size // 2
    if params.across_channels:
        return _box_sum_axis(a, r, 1)
    return _box_sum_axis(_box_sum_axis(a, r, a.ndim - 2), r, a.ndim - 1)


def _lrn_denominator(params: LrnParams, h: Tensor) -> Tensor:
    return params.k + (params.alpha / params.size) * _lrn_window_sum(params, h * h)


def lrn_forward(params: LrnParams, h: Tensor) -> Tensor:
    return h * _lrn_denominator(params, h) ** (-params.beta)


def lrn_backward(params: LrnParams, h: Tensor, grad_out: Tensor, denom: Tensor | None = None) -> Tensor:
    d = _lrn_denominator(params, h) if denom is None else denom
    direct = grad_out * d ** (-params.beta)
    if params.alpha == 0:
        return direct
    # the centred window is symmetric, so the window sum is its own adjoint
    t = _lrn_window_sum(params, grad_out * h * d ** (-params.beta - 1.0))
    return direct - (2.0 * params.alpha * params.beta / params.size) * h * t


# ---------------------------------------------------------------------------
# Max pooling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolLayer:
    window: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ParamError("pool window and stride must be >= 1")


def maxpool_forward(layer: PoolLayer, x: Tensor):
    """Returns (y, argmax) where argmax indexes each window in row-major order.

    Ties go to the first maximum in scan order.
    """
    w, s = layer.window, layer.stride
    if x.shape[-2] < w or x.shape[-1] < w:
        raise SizeError(f"pool window {w} larger than input {x.shape[-2:]}")
    win = sliding_window_view(x, (w, w), axis=(2, 3))[:, :, ::s, ::s]
    flat = win.reshape(win.shape[:4] + (w * w,))
    arg = np.argmax(flat, axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool_backward(layer: PoolLayer, x_shape, argmax: np.ndarray, grad_out: Tensor) -> Tensor:
    """Route each output gradient to its recorded argmax (accumulating on overlap)."""
    w, s = layer.window, layer.stride
    b, c, h, wd = x_shape
    oh, ow = argmax.shape[2:]
    rows = np.arange(oh)[:, None] * s + argmax // w
    cols = np.arange(ow)[None, :] * s + argmax % w
    plane = (np.arange(b)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * wd)
    flat = (plane + rows * wd + cols).ravel()
    grad_x = np.bincount(flat, weights=grad_out.ravel(), minlength=b * c * h * wd)
    return grad_x.reshape(x_shape)


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DropoutLayer:
    p: float = 0.5
    mode: str = "train"

    def __post_init__(self):
        if not 0 <= self.p < 1:
            raise ParamError("dropout probability must lie in [0, 1)")
        if self.mode not in ("train", "eval"):
            raise ParamError("dropout mode is 'train' or 'eval'")


def dropout_forward(layer: DropoutLayer, x: Tensor, rng: Rng | None = None):
    """Inverted dropout. Returns (y, mask); the mask already carries 1/(1-p)."""
    if layer.mode == "eval" or layer.p == 0:
        return x, np.ones_like(x)
    if rng is None:
        raise ParamError("training-mode dropout needs an rng")
    keep = rng.uniform(x.size).reshape(x.shape) >= layer.p
    mask = keep / (1.0 - layer.p)
    return x * mask, mask


def dropout_backward(mask: Tensor, grad_out: Tensor) -> Tensor:
    return grad_out * mask


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

@dataclass
class DenseLayer:
    weights: Tensor  # [out, in]
    bias: Tensor  # [out]


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != layer.weights.shape[1]:
        raise ShapeMismatch(f"dense expects {layer.weights.shape[1]} inputs, got {x2.shape[1]}")
    return x2 @ layer.weights.T + layer.bias


def dense_backward(layer: DenseLayer, x: Tensor, grad_out: Tensor):
    """Returns (grad_x shaped like x, grad_w, grad_b)."""
    x2 = x.reshape(x.shape[0], -1)
    if grad_out.shape != (x.shape[0], layer.weights.shape[0]):
        raise ShapeMismatch("grad_out does not match dense output")
    grad_w = grad_out.T @ x2
    grad_b = grad_out.sum(axis=0)
    grad_x = (grad_out @ layer.weights).reshape(x.shape)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean negative log-likelihood over the batch and its gradient."""
    y = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if y.shape != (b,):
        raise ShapeMismatch("one label per batch row required")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(b), y] - log_norm
    loss = float(-logp.mean())
    grad = np.exp(z - log_norm[:, None])
    grad[np.arange(b), y] -= 1.0
    return loss, grad / b


# ---------------------------------------------------------------------------
# Network specification
# ---------------------------------------------------------------------------

_DEFAULTS: dict[str, dict[str, Any]] = {
    "conv": {"out_channels": None, "kernel": None, "stride": 1, "pad": 0},
    "relu": {},
    "lrn": {"size": 5, "alpha": 1e-4, "beta": 0.75, "k": 1.0, "across_channels": False},
    "pool": {"window": 2, "stride": 2},
    "dropout": {"p": 0.5},
    "dense": {"out": None},
}


@dataclass(frozen=True)
class LayerInfo:
    index: int
    name: str
    kind: str
    hyper: dict
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS


@dataclass
class NetworkSpec:
    """Ordered layer list plus input shape [C, H, W] and class count.

    JSON form::

        {"input_shape": [1, 64, 64], "num_classes": 3,
         "layers": [{"kind": "conv", "out_channels": 8, "kernel": 5,
                     "stride": 1, "pad": 2}, {"kind": "relu"}, ...]}

    Layer fields: conv (out_channels, kernel, stride, pad), lrn (size,
    alpha, beta, k, across_channels), pool (window, stride), dropout (p),
    dense (out). An optional "name" overrides the automatic name, which is
    the kind plus a 1-based per-kind counter (conv1, relu1, dense2 ...).
    """

    layers: list[dict]
    input_shape: tuple[int, int, int] = (1, 64, 64)
    num_classes: int = 3
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.layers = [dict(l) for l in self.layers]
        self._infos = self._infer()

    # -- construction -----------------------------------------------------
    def _infer(self) -> list[LayerInfo]:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeMismatch("input_shape must be [channels, height, width]")
        counters: dict[str, int] = {}
        shape = self.input_shape
        infos = []
        names = set()
        for i, raw in enumerate(self.layers):
            kind = raw.get("kind")
            if kind not in LAYER_KINDS:
                raise ParamError(f"layer {i}: unknown kind {kind!r}")
            unknown = set(raw) - set(_DEFAULTS[kind]) - {"kind", "name"}
            if unknown:
                raise ParamError(f"layer {i} ({kind}): unknown fields {sorted(unknown)}")
            hyper = {**_DEFAULTS[kind], **{k: v for k, v in raw.items() if k not in ("kind", "name")}}
            missing = [k for k, v in hyper.items() if v is None]
            if missing:
                raise ParamError(f"layer {i} ({kind}): missing {missing}")
            counters[kind] = counters.get(kind, 0) + 1
            name = raw.get("name", f"{kind}{counters[kind]}")
            if name in names:
                raise ParamError(f"duplicate layer name {name!r}")
            names.add(name)
            out = _layer_out_shape(kind, hyper, shape, i)
            infos.append(LayerInfo(i, name, kind, hyper, shape, out))
            shape = out
        if shape != (self.num_classes,):
            raise ShapeMismatch(f"network output {shape} does not match num_classes={self.num_classes}")
        return infos

    @property
    def infos(self) -> list[LayerInfo]:
        return self._infos

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self._infos[-1].out_shape if self._infos else self.input_shape

    def param_layers(self) -> list[LayerInfo]:
        return [info for info in self._infos if info.has_params]

    def layer(self, key) -> LayerInfo:
        for info in self._infos:
            if info.name == key or info.index == key:
                return info
        raise KeyError(key)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for info in self.param_layers():
            if info.kind == "conv":
                kh, kw = _pair(info.hyper["kernel"])
                shapes[f"{info.name}.weight"] = (info.hyper["out_channels"], info.in_shape[0], kh, kw)
                shapes[f"{info.name}.bias"] = (info.hyper["out_channels"],)
            else:
                fan_in = int(np.prod(info.in_shape))
                shapes[f"{info.name}.weight"] = (info.hyper["out"], fan_in)
                shapes[f"{info.name}.bias"] = (info.hyper["out"],)
        return shapes

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        d = {"input_shape": list(self.input_shape), "num_classes": self.num_classes, "layers": copy.deepcopy(self.layers)}
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        extra = {k: v for k, v in d.items() if k not in ("input_shape", "num_classes", "layers")}
        return cls(d["layers"], tuple(d["input_shape"]), int(d["num_classes"]), extra)

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def structure(self) -> list[dict]:
        return [{k: v for k, v in l.items() if k != "name"} for l in self.layers]

    def with_num_classes(self, k: int) -> "NetworkSpec":
        layers = copy.deepcopy(self.layers)
        layers[-1]["out"] = k
        return NetworkSpec(layers, self.input_shape, k, dict(self.extra))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (list, tuple)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _layer_out_shape(kind, hyper, shape, i) -> tuple[int, ...]:
    if kind == "dense":
        return (int(hyper["out"]),)
    if kind in ("relu", "dropout"):
        if kind == "dropout" and not 0 <= hyper["p"] < 1:
            raise ParamError(f"layer {i}: dropout p must lie in [0, 1)")
        return shape
    if len(shape) != 3:
        raise ShapeMismatch(f"layer {i} ({kind}) needs a [C, H, W] input, got {list(shape)}")
    c, h, w = shape
    if kind == "lrn":
        LrnParams(hyper["size"], hyper["alpha"], hyper["beta"], hyper["k"], hyper["across_channels"])
        return shape
    if kind == "pool":
        win, s = int(hyper["window"]), int(hyper["stride"])
        if win < 1 or s < 1 or h < win or w < win:
            raise ShapeMismatch(f"layer {i}: pool window {win} does not fit {h}x{w}")
        return (c, (h - win) // s + 1, (w - win) // s + 1)
    kh, kw = _pair(hyper["kernel"])
    s, p = int(hyper["stride"]), int(hyper["pad"])
    if kh < 1 or kw < 1 or s < 1 or p < 0:
        raise ParamError(f"layer {i}: invalid conv hyperparameters")
    oh, ow = conv_output_size(h, kh, s, p), conv_output_size(w, kw, s, p)
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"layer {i}: conv kernel does not fit {h}x{w}")
    return (int(hyper["out_channels"]), oh, ow)


def mini_alexnet(input_size: int = 64, channels: int = 1, num_classes: int = 3) -> NetworkSpec:
    """Desk-scale AlexNet-style network used by default."""
    layers = [
        {"kind": "conv", "out_channels": 8, "kernel": 5, "stride": 1, "pad": 2},
        {"kind": "relu"},
        {"kind": "lrn", "size": 5, "alpha": 1e-4, "beta": 0.75},
        {"kind": "pool", "window": 3, "stride": 2},
        {"kind": "conv", "out_channels": 16, "kernel": 5, "stride": 1, "pad": 2},
        {"kind": "relu"},
        {"kind": "pool", "window": 3, "stride": 2},
        {"kind": "conv", "out_channels": 32, "kernel": 3, "stride": 1, "pad": 1},
        {"kind": "relu"},
        {"kind": "pool", "window": 3, "stride": 2},
        {"kind": "dense", "out": 128},
        {"kind": "relu"},
        {"kind": "dropout", "p": 0.5},
        {"kind": "dense", "out": num_classes},
    ]
    return NetworkSpec(layers, (channels, input_size, input_size), num_classes)


def alexnet_256(channels: int = 1, num_classes: int = 3) -> NetworkSpec:
    """AlexNet proportions at 256x256 input; far too slow for CPU tests."""
    layers = [
        {"kind": "conv", "out_channels": 96, "kernel": 11, "stride": 4, "pad": 0},
        {"kind": "relu"},
        {"kind": "lrn", "size": 5, "alpha": 1e-4, "beta": 0.75},
        {"kind": "pool", "window": 3, "stride": 2},
        {"kind": "conv", "out_channels": 256, "kernel": 5, "stride": 1, "pad": 2},
        {"kind": "relu"},
        {"kind": "lrn", "size": 5, "alpha": 1e-4, "beta": 0.75},
        {"kind": "pool", "window": 3, "stride": 2},
        {"kind": "conv", "out_channels": 384, "kernel": 3, "stride": 1, "pad": 1},
        {"kind": "relu"},
        {"kind": "conv", "out_channels": 384, "kernel": 3, "stride": 1, "pad": 1},
        {"kind": "relu"},
        {"kind": "conv", "out_channels": 256, "kernel": 3, "stride": 1, "pad": 1},
        {"kind": "relu"},
        {"kind": "pool", "window": 3, "stride": 2},
        {"kind": "dense", "out": 4096},
        {"kind": "relu"},
        {"kind": "dropout", "p": 0.5},
        {"kind": "dense", "out": 4096},
        {"kind": "relu"},
        {"kind": "dropout", "p": 0.5},
        {"kind": "dense", "out": num_classes},
    ]
    return NetworkSpec(layers, (channels, 256, 256), num_classes)


# ---------------------------------------------------------------------------
# Parameters and composition
# ---------------------------------------------------------------------------

def init_layer_params(spec: NetworkSpec, info: LayerInfo, rng: Rng, std: float = 0.1) -> dict[str, Tensor]:
    """Gaussian weights with standard deviation ``std`` (variance 0.01 by default), zero bias."""
    shapes = spec.param_shapes()
    out = {}
    for suffix in ("weight", "bias"):
        key = f"{info.name}.{suffix}"
        shape = shapes[key]
        if suffix == "weight":
            out[key] = std * rng.normal(int(np.prod(shape))).reshape(shape)
        else:
            out[key] = np.zeros(shape)
    return out


def init_params(spec: NetworkSpec, rng: Rng, std: float = 0.1) -> dict[str, Tensor]:
    params = {}
    for info in spec.param_layers():
        params.update(init_layer_params(spec, info, rng, std))
    return params


def _lrn_params(hyper) -> LrnParams:
    return LrnParams(hyper["size"], hyper["alpha"], hyper["beta"], hyper["k"], hyper["across_channels"])


def network_forward(spec: NetworkSpec, params: dict, x: Tensor, mode: str = "eval",
                    rng: Rng | None = None, return_cache: bool = False):
    """Logits [B, num_classes]; with ``return_cache`` also the per-layer cache."""
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeMismatch(f"input {list(x.shape)} does not match spec input {list(spec.input_shape)}")
    cache = []
    h = x
    for info in spec.infos:
        k = info.kind
        if k == "conv":
            layer = ConvLayer(params[f"{info.name}.weight"], params[f"{info.name}.bias"],
                              info.hyper["stride"], info.hyper["pad"])
            y, cols = _conv_forward_cols(layer, h)
            cache.append((h, cols))
            h = y
        elif k == "relu":
            cache.append(h)
            h = relu_forward(h)
        elif k == "lrn":
            lp = _lrn_params(info.hyper)
            d = _lrn_denominator(lp, h)
            cache.append((h, d))
            h = h * d ** (-lp.beta)
        elif k == "pool":
            y, arg = maxpool_forward(PoolLayer(info.hyper["window"], info.hyper["stride"]), h)
            cache.append((h.shape, arg))
            h = y
        elif k == "dropout":
            h, mask = dropout_forward(DropoutLayer(info.hyper["p"], mode), h, rng)
            cache.append(mask)
        elif k == "dense":
            cache.append(h)
            h = dense_forward(DenseLayer(params[f"{info.name}.weight"], params[f"{info.name}.bias"]), h)
    return (h, cache) if return_cache else h


def network_backward(spec: NetworkSpec, params: dict, cache: list, grad: Tensor,
                     skip: set[str] | None = None, need_input_grad: bool = True) -> dict[str, Tensor]:
    """Parameter gradients for every parameterised layer, plus ``"input"``.

    Layers named in ``skip`` get no gradient entries (the input gradient is
    still propagated through them). Without ``need_input_grad`` a leading
    conv layer does not compute it and ``"input"`` may be None.
    """
    skip = skip or set()
    grads: dict[str, Tensor] = {}
    g = grad
    for info, c in zip(reversed(spec.infos), reversed(cache)):
        k = info.kind
        if k == "conv":
            layer = ConvLayer(params[f"{info.name}.weight"], params[f"{info.name}.bias"],
                              info.hyper["stride"], info.hyper["pad"])
            g, gw, gb = conv_backward(layer, c[0], g, c[1], need_grad_x=info.index > 0 or need_input_grad)
        elif k == "relu":
            g = relu_backward(c, g)
        elif k == "lrn":
            g = lrn_backward(_lrn_params(info.hyper), c[0], g, c[1])
        elif k == "pool":
            shape, arg = c
            g = maxpool_backward(PoolLayer(info.hyper["window"], info.hyper["stride"]), shape, arg, g)
        elif k == "dropout":
            g = dropout_backward(c, g)
        elif k == "dense":
            layer = DenseLayer(params[f"{info.name}.weight"], params[f"{info.name}.bias"])
            g, gw, gb = dense_backward(layer, c, g)
        if info.has_params and info.name not in skip:
            grads[f"{info.name}.weight"] = gw
            grads[f"{info.name}.bias"] = gb
    grads["input"] = g
    return grads


def predict_proba(spec: NetworkSpec, params: dict, x: Tensor, batch_size: int = 64) -> Tensor:
    out = [softmax(network_forward(spec, params, x[i : i + batch_size])) for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)
