"""Gradient-based attributions and rule-based LRP over a sequential graph.

All methods explain the pre-softmax logit of the target class with respect
to the normalized input. The per-pixel heatmap is the plain channel sum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import (
    AvgPool2D, Conv2D, Dense, DTYPE, Flatten, GlobalAvgPool, MaxPool2D, ModelError,
    ModelGraph, ReLU, input_gradient, logits_batch, preprocess, run_layers,
)

METHODS = (
    "gradients",
    "input_x_gradients",
    "integrated_gradients",
    "guided_backprop",
    "deconvolution",
    "lrp_epsilon_plus_flat",
    "lrp_epsilon_gamma_box",
    "lrp_epsilon_alpha2beta1_flat",
)

METHOD_LABELS = {
    "gradients": "Gradients",
    "input_x_gradients": "Input x Gradients",
    "integrated_gradients": "Integrated Gradients",
    "guided_backprop": "Guided Backprop",
    "deconvolution": "Deconvolution",
    "lrp_epsilon_plus_flat": "LRP: EpsilonPlusFlat",
    "lrp_epsilon_gamma_box": "LRP: EpsilonGammaBox",
    "lrp_epsilon_alpha2beta1_flat": "LRP: EpsilonAlpha2Beta1Flat",
}

RULES = ("epsilon", "zplus", "alphabeta", "gamma", "flat", "zbox")


@dataclass
class Explanation:
    per_channel: np.ndarray
    heatmap: np.ndarray
    method: str
    target_class: int
    completeness_gap: float | None = None


def reduce_heatmap(per_channel) -> np.ndarray:
    return np.asarray(per_channel).sum(axis=0, dtype=np.float64).astype(DTYPE)


def _explanation(per_channel, method, target, **extra):
    per_channel = np.ascontiguousarray(per_channel, dtype=DTYPE)
    if not np.all(np.isfinite(per_channel)):
        raise FloatingPointError(f"{method} produced non-finite relevance")
    return Explanation(per_channel, reduce_heatmap(per_channel), method, target, **extra)


def _check_class(model, target):
    if not 0 <= target < model.num_classes:
        raise ValueError(f"class {target} out of range [0, {model.num_classes})")


# ---------------------------------------------------------------------------
# gradient family
# ---------------------------------------------------------------------------

def explain_gradients(model, image, target) -> Explanation:
    _check_class(model, target)
    x = preprocess(image, model)
    return _explanation(input_gradient(model, x, target), "gradients", target)


def explain_input_x_gradients(model, image, target) -> Explanation:
    _check_class(model, target)
    x = preprocess(image, model)
    return _explanation(x * input_gradient(model, x, target), "input_x_gradients", target)


def explain_guided_backprop(model, image, target) -> Explanation:
    _check_class(model, target)
    x = preprocess(image, model)
    return _explanation(input_gradient(model, x, target, "guided"), "guided_backprop", target)


def explain_deconvolution(model, image, target) -> Explanation:
    _check_class(model, target)
    x = preprocess(image, model)
    return _explanation(input_gradient(model, x, target, "deconv"), "deconvolution", target)


def integrated_gradients(model, x, target, steps=64, baseline=None, chunk=64):
    """Midpoint-rule IG on a normalized tensor.

    Returns ``(attribution, completeness_gap)`` where the gap is
    ``|sum(attribution) - (f(x) - f(baseline))|``.
    """
    if steps < 2:
        raise ValueError("integrated gradients needs steps >= 2")
    x = np.asarray(x, dtype=DTYPE)
    x0 = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=DTYPE)
    delta = x - x0
    alphas = ((np.arange(steps) + 0.5) / steps).astype(DTYPE)
    total = np.zeros(x.shape, dtype=np.float64)
    for start in range(0, steps, chunk):
        a = alphas[start:start + chunk, None, None, None]
        total += input_gradient(model, x0 + a * delta, target).sum(axis=0, dtype=np.float64)
    attr = (total / steps * delta).astype(DTYPE)
    f = logits_batch(model, np.stack([x, x0]))[:, target].astype(np.float64)
    gap = abs(float(attr.sum(dtype=np.float64)) - (f[0] - f[1]))
    return attr, gap


def explain_integrated_gradients(model, image, target, steps=64, baseline=None) -> Explanation:
    """IG from a black image unless ``baseline`` (8-bit image) is given."""
    _check_class(model, target)
    x = preprocess(image, model)
    base = np.zeros_like(np.asarray(image)) if baseline is None else baseline
    attr, gap = integrated_gradients(model, x, target, steps, preprocess(base, model))
    return _explanation(attr, "integrated_gradients", target, completeness_gap=gap)


# ---------------------------------------------------------------------------
# LRP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Composite:
    dense_rule: str
    conv_rule: str
    first_layer_rule: str

    def __post_init__(self):
        for r in (self.dense_rule, self.conv_rule, self.first_layer_rule):
            if r not in RULES:
                raise ValueError(f"unknown rule {r!r}")
        if self.first_layer_rule not in ("flat", "zbox"):
            raise ValueError("first layer rule must be 'flat' or 'zbox'")

    def rule_for(self, layer, is_first: bool) -> str:
        if is_first:
            return self.first_layer_rule
        if isinstance(layer, Conv2D):
            return self.conv_rule
        if isinstance(layer, Dense):
            return self.dense_rule
        raise ModelError(f"no LRP rule for {layer.kind}")


def composite_epsilon_plus_flat() -> Composite:
    return Composite(dense_rule="epsilon", conv_rule="zplus", first_layer_rule="flat")


def composite_epsilon_gamma_box() -> Composite:
    return Composite(dense_rule="epsilon", conv_rule="gamma", first_layer_rule="zbox")


def composite_epsilon_alpha2beta1_flat() -> Composite:
    return Composite(dense_rule="epsilon", conv_rule="alphabeta", first_layer_rule="flat")


@dataclass
class RuleParams:
    epsilon: float = 1e-6
    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 0.25
    # per-channel bounds of the normalized input; None -> pixel range [0, 255]
    box_low: np.ndarray | None = field(default=None)
    box_high: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if abs(self.alpha - self.beta - 1) > 1e-12:
            raise ValueError("alpha - beta must equal 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.box_low is not None and self.box_high is not None:
            if np.any(np.asarray(self.box_low) > np.asarray(self.box_high)):
                raise ValueError("box_low must be <= box_high")


def _stabilize(z, eps):
    out = z + eps * np.where(z >= 0, 1, -1).astype(z.dtype)
    assert np.all(out != 0), "LRP denominator vanished after stabilization"
    return out


def _zrule(layer, terms, bias, relevance, eps):
    """Generic z-rule. ``terms`` is a list of (input, weight, sign); the
    output contributions are ``sum(sign * layer(input, weight)) + bias``."""
    z = _contrib(layer, terms, bias)
    s = relevance / _stabilize(z, eps)
    return sum(sign * a * layer.transpose(s, w, a.shape) for a, w, sign in terms)


def _pos(v):
    return np.maximum(v, 0)


def _neg(v):
    return np.minimum(v, 0)


def _alphabeta(layer, a, relevance, alpha, beta, eps):
    w, b = layer.weight, layer.bias
    pos_terms = [(_pos(a), _pos(w), 1), (_neg(a), _neg(w), 1)]
    neg_terms = [(_pos(a), _neg(w), 1), (_neg(a), _pos(w), 1)]
    # a unit with an empty side sends all of its relevance through the other
    # one (net coefficient alpha - beta = 1) so nothing leaks
    no_pos = _contrib(layer, pos_terms, _pos(b)) == 0
    no_neg = _contrib(layer, neg_terms, _neg(b)) == 0
    r_pos = relevance * np.where(no_pos, 0, np.where(no_neg, 1, alpha)).astype(relevance.dtype)
    r_neg = relevance * np.where(no_neg, 0, np.where(no_pos, -1, beta)).astype(relevance.dtype)
    return _zrule(layer, pos_terms, _pos(b), r_pos, eps) - _zrule(layer, neg_terms, _neg(b), r_neg, eps)


def _contrib(layer, terms, bias):
    z = sum(sign * layer.apply(a, w) for a, w, sign in terms)
    return z + bias if isinstance(layer, Dense) else z + bias[:, None, None]


def _flat(layer, a, relevance):
    ones = np.ones_like(a)
    w = np.ones_like(layer.weight)
    z = layer.apply(ones, w)  # receptive-field sizes, >= 1
    return layer.transpose(relevance / z, w, a.shape)


def apply_rule(rule, layer, a, relevance, params, bounds=None):
    """One LRP backward step through a Conv2D/Dense layer (batched ``a``)."""
    eps = params.epsilon
    if rule == "epsilon":
        return _zrule(layer, [(a, layer.weight, 1)], layer.bias, relevance, eps)
    if rule == "zplus":
        return _alphabeta(layer, a, relevance, 1.0, 0.0, eps)
    if rule == "alphabeta":
        return _alphabeta(layer, a, relevance, params.alpha, params.beta, eps)
    if rule == "gamma":
        w = layer.weight + params.gamma * _pos(layer.weight)
        b = layer.bias + params.gamma * _pos(layer.bias)
        return _zrule(layer, [(a, w, 1)], b, relevance, eps)
    if rule == "flat":
        return _flat(layer, a, relevance)
    if rule == "zbox":
        low, high = bounds
        terms = [(a, layer.weight, 1), (low, _pos(layer.weight), -1), (high, _neg(layer.weight), -1)]
        return _zrule(layer, terms, layer.bias, relevance, eps)
    raise ValueError(f"unknown rule {rule!r}")


def _box_bounds(model, params, shape):
    if params.box_low is None:
        low = (0 - model.mean) / model.std
    else:
        low = np.asarray(params.box_low, dtype=DTYPE)
    if params.box_high is None:
        high = (1 - model.mean) / model.std
    else:
        high = np.asarray(params.box_high, dtype=DTYPE)
    c, h, w = model.input_shape
    low = np.broadcast_to(low.astype(DTYPE)[:, None, None], (c, h, w))
    high = np.broadcast_to(high.astype(DTYPE)[:, None, None], (c, h, w))
    # the first parameterized layer may sit behind a Flatten
    return low.reshape((1,) + tuple(shape)), high.reshape((1,) + tuple(shape))


def lrp_relevance(model: ModelGraph, x, target, composite: Composite, params: RuleParams | None = None):
    """Input relevance for a normalized C x H x W tensor."""
    params = params or RuleParams()
    acts = run_layers(model, np.asarray(x, dtype=DTYPE)[None])
    relevance = np.zeros_like(acts[-1])
    relevance[0, target] = acts[-1][0, target]
    first = model.first_parameterized
    for i in range(len(model.layers) - 1, -1, -1):
        layer, a = model.layers[i], acts[i]
        if isinstance(layer, (Conv2D, Dense)):
            rule = composite.rule_for(layer, i == first)
            bounds = _box_bounds(model, params, a.shape[1:]) if rule == "zbox" else None
            relevance = apply_rule(rule, layer, a, relevance, params, bounds)
        elif isinstance(layer, (ReLU, Flatten, MaxPool2D, AvgPool2D, GlobalAvgPool)):
            # ReLU is identity; Flatten reshapes; max-pool routes to the
            # arg-max; average pools share uniformly over the window
            relevance = layer.backward(a, relevance)
        else:
            raise ModelError(f"no LRP rule for layer kind {type(layer).__name__}", i)
    return relevance[0]


_COMPOSITES = {
    "lrp_epsilon_plus_flat": composite_epsilon_plus_flat,
    "lrp_epsilon_gamma_box": composite_epsilon_gamma_box,
    "lrp_epsilon_alpha2beta1_flat": composite_epsilon_alpha2beta1_flat,
}


def explain_lrp(model, image, target, composite: Composite, params: RuleParams | None = None,
                method="lrp") -> Explanation:
    _check_class(model, target)
    x = preprocess(image, model)
    return _explanation(lrp_relevance(model, x, target, composite, params), method, target)


def explain(model, image, target, method: str) -> Explanation:
    """Dispatch by method id (see ``METHODS``)."""
    if method in _COMPOSITES:
        return explain_lrp(model, image, target, _COMPOSITES[method](), method=method)
    fn = {
        "gradients": explain_gradients,
        "input_x_gradients": explain_input_x_gradients,
        "integrated_gradients": explain_integrated_gradients,
        "guided_backprop": explain_guided_backprop,
        "deconvolution": explain_deconvolution,
    }.get(method)
    if fn is None:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return fn(model, image, target)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def save_explanation_bin(expl: Explanation, path) -> None:
    """Text header line ``XEXP <method> <C> <H> <W>`` then little-endian float32."""
    c, h, w = expl.per_channel.shape
    head = f"XEXP {expl.method} {c} {h} {w}\n".encode("ascii")
    Path(path).write_bytes(head + expl.per_channel.astype("<f4").tobytes())


def load_explanation_bin(path):
    raw = Path(path).read_bytes()
    end = raw.index(b"\n")
    magic, method, c, h, w = raw[:end].decode("ascii").split()
    if magic != "XEXP":
        raise ValueError("not an explanation file")
    shape = (int(c), int(h), int(w))
    data = np.frombuffer(raw[end + 1:], dtype="<f4")
    if data.size != np.prod(shape):
        raise ValueError("explanation payload size does not match header")
    return method, data.reshape(shape).astype(DTYPE)


def heatmap_to_png(heatmap, path) -> None:
    from PIL import Image

    h = np.asarray(heatmap, dtype=np.float64)
    lo, hi = h.min(), h.max()
    scaled = np.zeros_like(h) if hi == lo else (h - lo) / (hi - lo)
    Image.fromarray(np.floor(scaled * 255 + 0.5).astype(np.uint8), mode="L").save(path)
