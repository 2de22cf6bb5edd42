"""A small convolutional classifier with hand-written reverse mode.

Layout: conv blocks -> global average pooling -> dropout -> dense -> head
(sigmoid with one output for binary tasks, softmax over K outputs otherwise).
Activations are batched NCHW float arrays. Parameters live in a flat dict
keyed ``conv{i}.W``, ``conv{i}.b``, ``dense.W``, ``dense.b``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .seeding import hash_seed, make_rng

RELU = "relu"
LINEAR = "linear"
VALID = "valid"
SAME = "same"
SIGMOID = "sigmoid"
SOFTMAX = "softmax"
HEAD_TENSORS = ("dense.W", "dense.b")


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# convolution


@dataclass
class ConvLayer:
    W: np.ndarray  # (out_ch, in_ch, kh, kw)
    b: np.ndarray  # (out_ch,)
    activation: str = LINEAR
    stride: int = 1
    padding: str = VALID

    def __post_init__(self) -> None:
        if self.W.ndim != 4 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"conv kernel {self.W.shape} and bias {self.b.shape} do not agree")
        if self.padding == SAME and (self.W.shape[2] % 2 == 0 or self.W.shape[3] % 2 == 0):
            raise ShapeError(f"'same' padding needs odd kernel sizes, got {self.W.shape[2:]}")
        if self.padding not in (SAME, VALID) or self.activation not in (RELU, LINEAR) or self.stride < 1:
            raise ValueError(f"bad conv config: {self.padding}, {self.activation}, stride {self.stride}")


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C, H, W) or (N, C, H, W) input, got shape {x.shape}")


def _conv_forward(x: np.ndarray, layer: ConvLayer):
    out_ch, in_ch, kh, kw = layer.W.shape
    if x.shape[1] != in_ch:
        raise ShapeError(f"input shape {x.shape} has {x.shape[1]} channels, kernel shape {layer.W.shape} expects {in_ch}")
    ph, pw = (kh // 2, kw // 2) if layer.padding == SAME else (0, 0)
    n, _, h, w = x.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"input shape {x.shape} is smaller than kernel shape {layer.W.shape}")
    s = layer.stride
    ho = (h + 2 * ph - kh) // s + 1
    wo = (w + 2 * pw - kw) // s + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    cols = np.empty((n, in_ch, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    z = np.tensordot(cols, layer.W, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    z = z + layer.b[None, :, None, None]
    y = np.maximum(z, 0.0) if layer.activation == RELU else z
    return y, (x.shape, xp.shape, cols, z, (ph, pw))


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """``f(x * W + b)`` with cross-correlation (no kernel flip)."""
    xb, single = _as_batch(x)
    y, _ = _conv_forward(xb, layer)
    return y[0] if single else y


def _conv_backward(dy: np.ndarray, layer: ConvLayer, cache):
    x_shape, xp_shape, cols, z, (ph, pw) = cache
    dz = dy * (z > 0) if layer.activation == RELU else dy
    _, _, kh, kw = layer.W.shape
    s = layer.stride
    ho, wo = dz.shape[2:]
    db = dz.sum(axis=(0, 2, 3))
    dW = np.tensordot(dz, cols, axes=([0, 2, 3], [0, 4, 5]))
    dcols = np.tensordot(dz, layer.W, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, ph : ph + x_shape[2], pw : pw + x_shape[3]]
    return dx, dW, db


# --------------------------------------------------------------------------
# pooling, dropout, dense, heads


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the two trailing (spatial) axes: (..., H, W) -> (...)."""
    if x.ndim < 3:
        raise ShapeError(f"global average pooling needs spatial axes, got shape {x.shape}")
    return x.mean(axis=(-2, -1))


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None = None):
    """Inverted dropout. ``rng=None`` is evaluation mode (identity).

    Returns ``(output, mask)``; mask is None in evaluation mode.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ShapeError(f"softmax needs at least two logits, got shape {z.shape}")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def head(logits: np.ndarray, kind: str) -> np.ndarray:
    if kind == SIGMOID:
        return sigmoid(logits)
    if kind == SOFTMAX:
        return softmax(logits)
    raise ValueError(f"unknown head {kind!r}")


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 2
    padding: str = SAME
    activation: str = RELU


@dataclass(frozen=True)
class ModelSpec:
    resolution: int
    in_channels: int
    convs: tuple[ConvSpec, ...]
    out_dim: int
    head: str
    dropout: float = 0.2

    def __post_init__(self) -> None:
        object.__setattr__(self, "convs", tuple(self.convs))
        if self.head == SIGMOID and self.out_dim != 1:
            raise ValueError("a sigmoid head needs out_dim 1")
        if self.head == SOFTMAX and self.out_dim < 2:
            raise ValueError("a softmax head needs out_dim >= 2")
        if self.head not in (SIGMOID, SOFTMAX):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def num_classes(self) -> int:
        return 2 if self.head == SIGMOID else self.out_dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c = self.in_channels
        for i, conv in enumerate(self.convs):
            shapes[f"conv{i}.W"] = (conv.out_channels, c, conv.kernel, conv.kernel)
            shapes[f"conv{i}.b"] = (conv.out_channels,)
            c = conv.out_channels
        shapes["dense.W"] = (c, self.out_dim)
        shapes["dense.b"] = (self.out_dim,)
        return shapes

    def with_classes(self, num_classes: int) -> "ModelSpec":
        if num_classes == 2 and self.head == SIGMOID:
            return self
        return replace(self, out_dim=num_classes, head=SOFTMAX)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["convs"] = tuple(ConvSpec(**c) for c in d["convs"])
        return cls(**d)


def reference_spec(num_classes: int, resolution: int = 32, in_channels: int = 3, dropout_rate: float = 0.2) -> ModelSpec:
    """Two 3x3 stride-2 ReLU blocks (8 and 16 channels), GAP, dropout, dense, head."""
    binary = num_classes == 2
    return ModelSpec(
        resolution=resolution,
        in_channels=in_channels,
        convs=(ConvSpec(8), ConvSpec(16)),
        out_dim=1 if binary else num_classes,
        head=SIGMOID if binary else SOFTMAX,
        dropout=dropout_rate,
    )


def _init_tensor(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    if name.endswith(".b"):
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    bound = math.sqrt(6.0 / fan_in)
    return make_rng(hash_seed(seed, "init", name)).uniform(-bound, bound, size=shape)


def init_params(spec: ModelSpec, seed: int, names: tuple[str, ...] | None = None) -> dict[str, np.ndarray]:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases; each tensor
    drawn from its own stream keyed by (seed, name)."""
    shapes = spec.param_shapes()
    return {k: _init_tensor(k, s, seed) for k, s in shapes.items() if names is None or k in names}


def _conv_layer(spec: ModelSpec, params: dict[str, np.ndarray], i: int) -> ConvLayer:
    c = spec.convs[i]
    return ConvLayer(params[f"conv{i}.W"], params[f"conv{i}.b"], c.activation, c.stride, c.padding)


@dataclass
class ForwardCache:
    conv_caches: list = field(default_factory=list)
    pooled_shape: tuple = ()
    feature_shape: tuple = ()
    dropout_mask: np.ndarray | None = None
    dense_input: np.ndarray | None = None
    logits: np.ndarray | None = None


def check_params(spec: ModelSpec, params: dict[str, np.ndarray]) -> None:
    shapes = spec.param_shapes()
    if set(shapes) != set(params):
        raise ShapeError(f"parameter names {sorted(params)} do not match model {sorted(shapes)}")
    for k, s in shapes.items():
        if tuple(params[k].shape) != s:
            raise ShapeError(f"parameter {k} has shape {params[k].shape}, model expects {s}")


def model_forward(spec: ModelSpec, params: dict[str, np.ndarray], x: np.ndarray,
                  rng: np.random.Generator | None = None, train: bool = False):
    """Forward pass on a batch ``x`` of shape (N, C, R, R).

    Returns ``(probs, logits, cache)``; ``cache`` is None unless ``train``.
    Dropout is active only when ``train`` is set and an rng is supplied.
    """
    if x.ndim != 4 or x.shape[1:] != (spec.in_channels, spec.resolution, spec.resolution):
        raise ShapeError(
            f"input shape {x.shape} does not match model input "
            f"(N, {spec.in_channels}, {spec.resolution}, {spec.resolution})"
        )
    cache = ForwardCache() if train else None
    h = x
    for i in range(len(spec.convs)):
        h, conv_cache = _conv_forward(h, _conv_layer(spec, params, i))
        if cache is not None:
            cache.conv_caches.append(conv_cache)
    feature_shape = h.shape
    h = global_avg_pool(h)
    h, mask = dropout(h, spec.dropout, rng if train else None)
    logits = h @ params["dense.W"] + params["dense.b"]
    if cache is not None:
        cache.feature_shape = feature_shape
        cache.dropout_mask = mask
        cache.dense_input = h
        cache.logits = logits
    return head(logits, spec.head), logits, cache


def model_backward(spec: ModelSpec, params: dict[str, np.ndarray], cache: ForwardCache | None,
                   dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of the loss for every parameter, given dloss/dlogits."""
    if cache is None or cache.logits is None:
        raise ValueError("model_backward needs the cache from a training-mode forward pass")
    if dlogits.shape != cache.logits.shape:
        raise ShapeError(f"logit gradient shape {dlogits.shape} does not match logits {cache.logits.shape}")
    grads = {
        "dense.W": cache.dense_input.T @ dlogits,
        "dense.b": dlogits.sum(axis=0),
    }
    dh = dlogits @ params["dense.W"].T
    if cache.dropout_mask is not None:
        dh = dh * cache.dropout_mask
    n, c, fh, fw = cache.feature_shape
    dh = np.broadcast_to(dh[:, :, None, None] / (fh * fw), cache.feature_shape)
    for i in reversed(range(len(spec.convs))):
        dh, dW, db = _conv_backward(dh, _conv_layer(spec, params, i), cache.conv_caches[i])
        grads[f"conv{i}.W"] = dW
        grads[f"conv{i}.b"] = db
    return grads


# --------------------------------------------------------------------------
# compound scaling


@dataclass(frozen=True)
class ScalingResult:
    depth_mult: float
    width_mult: float
    resolution_mult: float
    constraint_value: float
    constraint_ok: bool


CONSTRAINT_TARGET = 2.0
CONSTRAINT_TOLERANCE = 0.1


def compound_scale(alpha: float, beta: float, gamma: float, phi: float,
                   tolerance: float = CONSTRAINT_TOLERANCE) -> ScalingResult:
    """Depth, width and resolution multipliers ``alpha**phi``, ``beta**phi``,
    ``gamma**phi`` and the FLOP constraint ``alpha * beta**2 * gamma**2``."""
    if not (alpha > 0 and beta > 0 and gamma > 0):
        raise ValueError(f"scaling factors must be positive, got alpha={alpha}, beta={beta}, gamma={gamma}")
    if not phi >= 0:
        raise ValueError(f"phi must be >= 0, got {phi}")
    value = alpha * beta**2 * gamma**2
    return ScalingResult(alpha**phi, beta**phi, gamma**phi, value, abs(value - CONSTRAINT_TARGET) <= tolerance)


def scale_spec(spec: ModelSpec, scaling: ScalingResult) -> ModelSpec:
    """Apply multipliers to a spec: ceil(depth * blocks) conv blocks (extra
    blocks repeat the last one at stride 1), ceil(width * channels) per block
    and round(resolution * size) input pixels."""
    depth = max(1, math.ceil(len(spec.convs) * scaling.depth_mult - 1e-9))
    convs = list(spec.convs)
    while len(convs) < depth:
        convs.append(replace(convs[-1], stride=1))
    convs = [replace(c, out_channels=max(1, math.ceil(c.out_channels * scaling.width_mult - 1e-9))) for c in convs[:depth]]
    resolution = max(1, round(spec.resolution * scaling.resolution_mult))
    return replace(spec, convs=tuple(convs), resolution=resolution)
