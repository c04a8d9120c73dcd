"""Minimal sequential CNN engine on numpy.

Tensors are plain ``np.ndarray`` in float32, channel-first. Layers operate
on batched arrays (N, ...); the public ``forward`` works on one image and
returns a :class:`ForwardTrace` with every layer's input and output cached,
which is what the attribution rules walk backwards over.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import ClassVar, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

DTYPE = np.float32


class ModelError(ValueError):
    """Invalid model structure or a shape mismatch during evaluation."""

    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class ModelFormatError(ModelError):
    """Malformed or truncated .xbw file."""


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# primitive kernels (batched, N first)
# ---------------------------------------------------------------------------

def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, weight, bias, stride=1, padding=0):
    kh, kw = weight.shape[2:]
    win = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[:, None, None]
    return np.ascontiguousarray(out)


def conv2d_transpose(grad, weight, in_shape, stride=1, padding=0):
    """Gradient of ``conv2d`` w.r.t. its input for upstream ``grad``."""
    n, c, h, w = in_shape
    kh, kw = weight.shape[2:]
    ho, wo = grad.shape[2:]
    cols = np.tensordot(grad, weight, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dx)


def conv2d_weight_grad(x, grad, kernel, stride=1, padding=0):
    win = sliding_window_view(_pad(x, padding), kernel, axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))


def _pool_windows(x, size, stride):
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.reshape(n, c, ho, wo, size * size)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Conv2D:
    weight: np.ndarray  # out, in, kh, kw
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    kind: ClassVar[str] = "Conv2D"

    def __post_init__(self):
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ModelError(f"Conv2D weight {self.weight.shape} / bias {self.bias.shape} inconsistent")
        if self.stride < 1 or self.padding < 0:
            raise ModelError("Conv2D needs stride >= 1 and padding >= 0")

    @property
    def params(self):
        return (self.weight, self.bias)

    def output_shape(self, shape):
        c, h, w = shape
        out, cin, kh, kw = self.weight.shape
        if c != cin:
            raise ModelError(f"Conv2D expects {cin} input channels, got {c}")
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ModelError(f"Conv2D kernel {kh}x{kw} larger than padded input {h}x{w}")
        return (out, ho, wo)

    def apply(self, x, weight, bias=None):
        return conv2d(x, weight, bias, self.stride, self.padding)

    def transpose(self, grad, weight, in_shape):
        return conv2d_transpose(grad, weight, in_shape, self.stride, self.padding)

    def forward(self, x):
        return self.apply(x, self.weight, self.bias)

    def backward(self, x, grad):
        return self.transpose(grad, self.weight, x.shape)

    def param_grads(self, x, grad):
        dw = conv2d_weight_grad(x, grad, self.weight.shape[2:], self.stride, self.padding)
        return dw, grad.sum(axis=(0, 2, 3))


@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray  # out, in
    bias: np.ndarray
    kind: ClassVar[str] = "Dense"

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ModelError(f"Dense weight {self.weight.shape} / bias {self.bias.shape} inconsistent")

    @property
    def params(self):
        return (self.weight, self.bias)

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.weight.shape[1]:
            raise ModelError(f"Dense expects ({self.weight.shape[1]},), got {tuple(shape)}")
        return (self.weight.shape[0],)

    def apply(self, x, weight, bias=None):
        out = x @ weight.T
        return out + bias if bias is not None else out

    def transpose(self, grad, weight, in_shape):
        return grad @ weight

    def forward(self, x):
        return self.apply(x, self.weight, self.bias)

    def backward(self, x, grad):
        return grad @ self.weight

    def param_grads(self, x, grad):
        return grad.T @ x, grad.sum(axis=0)


@dataclass(frozen=True)
class ReLU:
    kind: ClassVar[str] = "ReLU"
    params: ClassVar[tuple] = ()

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, x, grad):
        return grad * (x > 0)


@dataclass(frozen=True)
class MaxPool2D:
    size: int
    stride: int
    kind: ClassVar[str] = "MaxPool2D"
    params: ClassVar[tuple] = ()

    def __post_init__(self):
        if self.size < 1 or self.stride < 1:
            raise ModelError("MaxPool2D needs size >= 1 and stride >= 1")

    def output_shape(self, shape):
        c, h, w = _spatial(shape, self.kind)
        ho, wo = (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ModelError(f"MaxPool2D window {self.size} larger than input {h}x{w}")
        return (c, ho, wo)

    def forward(self, x):
        return _pool_windows(x, self.size, self.stride).max(axis=-1)

    def backward(self, x, grad):
        # ties go to the first element in row-major window order (np.argmax)
        arg = _pool_windows(x, self.size, self.stride).argmax(axis=-1)
        ho, wo = grad.shape[2:]
        s = self.stride
        dx = np.zeros_like(x, dtype=grad.dtype)
        for idx in range(self.size * self.size):
            i, j = divmod(idx, self.size)
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(arg == idx, grad, 0)
        return dx


@dataclass(frozen=True)
class AvgPool2D:
    size: int
    stride: int
    kind: ClassVar[str] = "AvgPool2D"
    params: ClassVar[tuple] = ()

    def __post_init__(self):
        if self.size < 1 or self.stride < 1:
            raise ModelError("AvgPool2D needs size >= 1 and stride >= 1")

    output_shape = MaxPool2D.output_shape

    def forward(self, x):
        return _pool_windows(x, self.size, self.stride).mean(axis=-1, dtype=x.dtype)

    def backward(self, x, grad):
        ho, wo = grad.shape[2:]
        s = self.stride
        share = grad / (self.size * self.size)
        dx = np.zeros_like(x, dtype=grad.dtype)
        for i in range(self.size):
            for j in range(self.size):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += share
        return dx


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "Flatten"
    params: ClassVar[tuple] = ()

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, grad):
        return grad.reshape(x.shape)


@dataclass(frozen=True)
class GlobalAvgPool:
    kind: ClassVar[str] = "GlobalAvgPool"
    params: ClassVar[tuple] = ()

    def output_shape(self, shape):
        return (_spatial(shape, self.kind)[0],)

    def forward(self, x):
        return x.mean(axis=(2, 3), dtype=x.dtype)

    def backward(self, x, grad):
        h, w = x.shape[2:]
        return np.broadcast_to((grad / (h * w))[:, :, None, None], x.shape).copy()


def _spatial(shape, kind):
    if len(shape) != 3:
        raise ModelError(f"{kind} expects a C x H x W input, got {tuple(shape)}")
    return shape


Layer = Conv2D | Dense | ReLU | MaxPool2D | AvgPool2D | Flatten | GlobalAvgPool
PARAMETERIZED = (Conv2D, Dense)


# ---------------------------------------------------------------------------
# model graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelGraph:
    input_shape: tuple[int, int, int]  # C, H, W
    mean: np.ndarray
    std: np.ndarray
    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=DTYPE))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=DTYPE))
        if not self.layers:
            raise ModelError("model has no layers")
        c = self.input_shape[0]
        if self.mean.shape != (c,) or self.std.shape != (c,):
            raise ModelError(f"normalization needs {c} mean/std entries")
        if not np.all(self.std > 0):
            raise ModelError("every std entry must be > 0")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            for p in getattr(layer, "params", ()):
                if p.dtype != DTYPE:
                    raise ModelError(f"{layer.kind} parameters must be float32", i)
                if not np.all(np.isfinite(p)):
                    raise ModelError(f"{layer.kind} has non-finite weights", i)
            try:
                shape = layer.output_shape(shape)
            except ModelError as exc:
                raise ModelError(str(exc), i) from None
        if shape != (self.num_classes,):
            raise ModelError(f"final output shape {shape} != ({self.num_classes},)")
        for layer in self.layers:
            for p in layer.params:
                p.flags.writeable = False

    @property
    def first_parameterized(self) -> int:
        return next(i for i, l in enumerate(self.layers) if isinstance(l, PARAMETERIZED))



@dataclass
class ForwardTrace:
    inputs: list
    outputs: list
    logits: np.ndarray
    probabilities: np.ndarray = field(repr=False)


def run_layers(model: ModelGraph, x, start=0, stop=None):
    """Batched forward. Returns the list of activations, ``acts[i]`` being
    the input of layer ``start + i`` and ``acts[-1]`` the final output."""
    acts = [x]
    layers = model.layers[start:stop]
    for offset, layer in enumerate(layers):
        try:
            acts.append(layer.forward(acts[-1]))
        except ValueError as exc:
            raise ModelError(f"{layer.kind} failed: {exc}", start + offset) from None
    return acts


def _check_input(model, x):
    x = np.asarray(x)
    if x.shape[-3:] != model.input_shape:
        raise ModelError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x


def forward(model: ModelGraph, x) -> ForwardTrace:
    x = _check_input(model, x)
    acts = run_layers(model, x[None])
    unbatched = [a[0] for a in acts]
    logits = unbatched[-1]
    return ForwardTrace(unbatched[:-1], unbatched[1:], logits, softmax(logits))


def logits_batch(model: ModelGraph, x) -> np.ndarray:
    x = _check_input(model, x)
    return run_layers(model, x if x.ndim == 4 else x[None])[-1]


def backward(model: ModelGraph, acts, grad, relu_rule="gradient", stop=0):
    """Propagate ``grad`` from the output back to the input of layer ``stop``.

    ``relu_rule`` selects the ReLU backward gate: ``gradient`` (forward
    activation), ``guided`` (activation and positive upstream) or ``deconv``
    (positive upstream only).
    """
    for i in range(len(model.layers) - 1, stop - 1, -1):
        layer, x = model.layers[i], acts[i]
        if isinstance(layer, ReLU) and relu_rule != "gradient":
            if relu_rule == "guided":
                grad = grad * ((x > 0) & (grad > 0))
            elif relu_rule == "deconv":
                grad = grad * (grad > 0)
            else:
                raise ValueError(f"unknown relu rule {relu_rule!r}")
        else:
            grad = layer.backward(x, grad)
    return grad


def input_gradient(model: ModelGraph, x, target: int, relu_rule="gradient"):
    """d logit[target] / d x for a single C x H x W input or an N-batch."""
    x = _check_input(model, x)
    single = x.ndim == 3
    xb = x[None] if single else x
    acts = run_layers(model, xb)
    seed = np.zeros_like(acts[-1])
    seed[:, target] = 1
    g = backward(model, acts, seed, relu_rule)
    return g[0] if single else g


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def preprocess(image, model: ModelGraph) -> np.ndarray:
    """8-bit H x W x 3 image -> normalized C x H x W float32 tensor."""
    image = np.asarray(image)
    c, h, w = model.input_shape
    if image.shape != (h, w, c):
        raise ModelError(f"image shape {image.shape} does not match model input ({h}, {w}, {c})")
    x = image.astype(DTYPE).transpose(2, 0, 1) / DTYPE(255)
    return ((x - model.mean[:, None, None]) / model.std[:, None, None]).astype(DTYPE)


def deprocess(x, model: ModelGraph) -> np.ndarray:
    img = (x * model.std[:, None, None] + model.mean[:, None, None]) * 255
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def target_probability(model: ModelGraph, image, target: int) -> float:
    if not 0 <= target < model.num_classes:
        raise ValueError(f"class {target} out of range [0, {model.num_classes})")
    return float(forward(model, preprocess(image, model)).probabilities[target])


def predict(model: ModelGraph, images) -> np.ndarray:
    """Arg-max class for a stack of 8-bit images."""
    x = np.stack([preprocess(im, model) for im in images])
    return logits_batch(model, x).argmax(axis=1)


# ---------------------------------------------------------------------------
# .xbw weight files
# ---------------------------------------------------------------------------

def _fmt(v):
    return repr(float(np.float32(v)))


def _layer_header(layer) -> str:
    if isinstance(layer, Conv2D):
        o, i, kh, kw = layer.weight.shape
        return f"Conv2D {o} {i} {kh} {kw} {layer.stride} {layer.padding}"
    if isinstance(layer, Dense):
        o, i = layer.weight.shape
        return f"Dense {o} {i}"
    if isinstance(layer, (MaxPool2D, AvgPool2D)):
        return f"{layer.kind} {layer.size} {layer.stride}"
    return layer.kind


def save_model(model: ModelGraph, path) -> None:
    c, h, w = model.input_shape
    head = ["XBW", "1", str(len(model.layers)), str(c), str(h), str(w), str(model.num_classes)]
    head += [_fmt(v) for v in model.mean] + [_fmt(v) for v in model.std]
    lines = [" ".join(head)] + [_layer_header(l) for l in model.layers]
    payload = b"".join(p.astype("<f4").tobytes() for l in model.layers for p in l.params)
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii") + payload)


_SIMPLE = {"ReLU": ReLU, "Flatten": Flatten, "GlobalAvgPool": GlobalAvgPool}


def load_model(path) -> ModelGraph:
    raw = Path(path).read_bytes()
    pos = 0

    def line(layer=None):
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ModelFormatError("truncated header", layer)
        text = raw[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        return text.split()

    first = line()
    if len(first) < 7 or first[:2] != ["XBW", "1"]:
        raise ModelFormatError("malformed header: expected 'XBW 1 ...'")
    try:
        n_layers, c, h, w, n_cls = (int(v) for v in first[2:7])
        norm = [float(v) for v in first[7:]]
    except ValueError:
        raise ModelFormatError("malformed header: non-numeric field") from None
    if len(norm) != 2 * c:
        raise ModelFormatError(f"malformed header: expected {2 * c} mean/std values, got {len(norm)}")
    if n_layers == 0:
        raise ModelFormatError("model has no layers")

    specs = []
    for i in range(n_layers):
        fields = line(i)
        if not fields:
            raise ModelFormatError("empty layer line", i)
        kind, args = fields[0], fields[1:]
        try:
            args = [int(a) for a in args]
        except ValueError:
            raise ModelFormatError(f"non-integer parameter in {kind}", i) from None
        expected = {"Conv2D": 6, "Dense": 2, "MaxPool2D": 2, "AvgPool2D": 2}.get(kind, 0)
        if kind not in _SIMPLE and expected == 0:
            raise ModelFormatError(f"unknown layer kind {kind!r}", i)
        if len(args) != expected:
            raise ModelFormatError(f"{kind} takes {expected} parameters, got {len(args)}", i)
        specs.append((kind, args))

    layers = []
    for i, (kind, args) in enumerate(specs):
        if kind in ("Conv2D", "Dense"):
            wshape = tuple(args[:4]) if kind == "Conv2D" else tuple(args)
            arrays = []
            for shape in (wshape, wshape[:1]):
                count = int(np.prod(shape))
                nbytes = 4 * count
                if pos + nbytes > len(raw):
                    raise ModelFormatError("truncated payload", i)
                arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(DTYPE)
                pos += nbytes
                if not np.all(np.isfinite(arr)):
                    raise ModelFormatError("non-finite weight", i)
                arrays.append(arr.reshape(shape))
            if kind == "Conv2D":
                layers.append(Conv2D(arrays[0], arrays[1], stride=args[4], padding=args[5]))
            else:
                layers.append(Dense(arrays[0], arrays[1]))
        elif kind in ("MaxPool2D", "AvgPool2D"):
            cls = MaxPool2D if kind == "MaxPool2D" else AvgPool2D
            try:
                layers.append(cls(*args))
            except ModelError as exc:
                raise ModelFormatError(str(exc), i) from None
        else:
            layers.append(_SIMPLE[kind]())
    if pos != len(raw):
        raise ModelFormatError(f"{len(raw) - pos} trailing bytes after payload")
    try:
        return ModelGraph((c, h, w), norm[:c], norm[c:], layers, n_cls)
    except ModelFormatError:
        raise
    except ModelError as exc:
        raise ModelFormatError(str(exc)) from None


# ---------------------------------------------------------------------------
# construction and training
# ---------------------------------------------------------------------------

def random_model(spec: Sequence[tuple], input_shape, num_classes, seed=0,
                 mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0), bias_scale=0.0) -> ModelGraph:
    """Build a graph with He-initialised weights from a compact spec.

    ``spec`` entries: ("conv", out, k, stride, pad), ("dense", out),
    ("relu",), ("maxpool", size, stride), ("avgpool", size, stride),
    ("flatten",), ("gap",).
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []
    for entry in spec:
        kind, args = entry[0], entry[1:]
        if kind == "conv":
            out, k, stride, pad = args
            fan_in = shape[0] * k * k
            w = rng.normal(0, np.sqrt(2 / fan_in), (out, shape[0], k, k))
            layer = Conv2D(w.astype(DTYPE), (bias_scale * rng.normal(size=out)).astype(DTYPE), stride, pad)
        elif kind == "dense":
            (out,) = args
            w = rng.normal(0, np.sqrt(2 / shape[0]), (out, shape[0]))
            layer = Dense(w.astype(DTYPE), (bias_scale * rng.normal(size=out)).astype(DTYPE))
        else:
            layer = {"relu": ReLU, "maxpool": MaxPool2D, "avgpool": AvgPool2D,
                     "flatten": Flatten, "gap": GlobalAvgPool}[kind](*args)
        shape = layer.output_shape(shape)
        layers.append(layer)
    return ModelGraph(tuple(input_shape), mean, std, layers, num_classes)


def _with_params(model, params):
    layers, it = [], iter(params)
    for layer in model.layers:
        if isinstance(layer, PARAMETERIZED):
            layers.append(replace(layer, weight=next(it), bias=next(it)))
        else:
            layers.append(layer)
    return replace(model, layers=tuple(layers))


def accuracy(model, images, labels) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(model, images) == np.asarray(labels)))


def train_fixture(model: ModelGraph, images, labels, epochs=20, learning_rate=0.05,
                  batch_size=16, seed=0) -> ModelGraph:
    """Plain mini-batch gradient descent on softmax cross-entropy.

    Works on a private copy of the weights. If training ends below the
    starting training accuracy, the starting model is returned.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty training set")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError("label out of range")
    x = np.stack([preprocess(im, model) for im in images])
    params = [np.array(p, copy=True) for l in model.layers for p in l.params]
    if learning_rate == 0:
        return _with_params(model, params)
    rng = np.random.default_rng(seed)
    lr = DTYPE(learning_rate)
    current = model
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        for b, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start:start + batch_size]
            with np.errstate(all="ignore"):
                acts = run_layers(current, x[idx])
                probs = softmax(acts[-1])
                loss = -np.mean(np.log(probs[np.arange(len(idx)), labels[idx]] + 1e-300))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grad = probs
            grad[np.arange(len(idx)), labels[idx]] -= 1
            grad = (grad / len(idx)).astype(DTYPE)
            grads = []
            for i in range(len(current.layers) - 1, -1, -1):
                layer = current.layers[i]
                if isinstance(layer, PARAMETERIZED):
                    dw, db = layer.param_grads(acts[i], grad)
                    grads = [dw, db] + grads
                if i > 0:
                    grad = layer.backward(acts[i], grad)
            params = [(p - lr * g).astype(DTYPE) for p, g in zip(params, grads)]
            current = _with_params(model, params)
        log.debug("epoch %d loss %.4f", epoch, loss)
    before = accuracy(model, images, labels)
    after = accuracy(current, images, labels)
    if after < before:
        log.warning("training lowered accuracy (%.3f -> %.3f); keeping initial weights", before, after)
        return _with_params(model, [np.array(p, copy=True) for l in model.layers for p in l.params])
    return current


def clone(model: ModelGraph) -> ModelGraph:
    return copy.deepcopy(model)
