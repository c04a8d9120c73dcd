"""Response curves, robustness scores, pixel flipping and interval calibration.

Scores are normalized areas. A response curve is shifted so that its value
at the identity parameter is exactly 1, clamped to [0, 1] and integrated
with the trapezoid rule over [M, N]; the result is divided by N - M.
Clamping is what keeps every score inside [0, 1]: a shifted probability
curve can exceed 1 and a correlation can go negative.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .attribution import explain
from .augment import (
    AugmentationInterval, AugmentationSpec, apply_augmentation, identity_value,
    sample_interval, validity_mask, warp_explanation,
)
from .nn import ModelGraph, logits_batch, preprocess, softmax

log = logging.getLogger(__name__)


class UndefinedCorrelation(ValueError):
    """Both maps are constant over the mask."""


@dataclass
class MetricConfig:
    k: int = 1000
    pixel_flip_fraction: float = 0.2
    pixel_flip_steps: int = 20
    calibration_drop: float = 0.10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.pixel_flip_fraction <= 1:
            raise ValueError("pixel_flip_fraction must be in (0, 1]")
        if self.pixel_flip_steps < 1:
            raise ValueError("pixel_flip_steps must be >= 1")
        if not 0 < self.calibration_drop < 1:
            raise ValueError("calibration_drop must be in (0, 1)")


@dataclass
class ResponseCurve:
    params: np.ndarray
    values: np.ndarray
    identity_index: int
    kind: str  # probability | correlation | top1000 | pixel_flip

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.params.shape != self.values.shape or self.params.ndim != 1:
            raise ValueError("params and values must be 1-d and the same length")
        if np.any(np.diff(self.params) <= 0):
            raise ValueError("params must be strictly increasing")
        if not 0 <= self.identity_index < len(self.params):
            raise ValueError("identity_index out of range")


# ---------------------------------------------------------------------------
# comparison kernels
# ---------------------------------------------------------------------------

def _masked(a, b, mask):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    return a[mask].astype(np.float64), b[mask].astype(np.float64)


def pearson(a, b, mask=None) -> float:
    av, bv = _masked(a, b, mask)
    if av.size < 2:
        raise ValueError("pearson needs at least 2 masked pixels")
    da, db = av - av.mean(), bv - bv.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0 and sbb == 0:
        raise UndefinedCorrelation("both maps are constant over the mask")
    if saa == 0 or sbb == 0:
        return 0.0
    if np.array_equal(av, bv):
        return 1.0
    return float(np.clip((da @ db) / np.sqrt(saa * sbb), -1.0, 1.0))


def top_indices(values, mask, k):
    """Flat indices of the ``k`` largest masked values; ties -> lower index."""
    idx = np.flatnonzero(mask)
    vals = np.asarray(values, dtype=np.float64).ravel()[idx]
    order = np.lexsort((idx, -vals))
    return idx[order[:k]]


def topk_intersection(a, b, mask=None, k=1000) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise ValueError("empty mask")
    k_eff = min(k, n)
    common = np.intersect1d(top_indices(a, mask, k_eff), top_indices(b, mask, k_eff))
    return common.size / k_eff


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

def shifted_clamped(curve: ResponseCurve) -> np.ndarray:
    v = curve.values + (1.0 - curve.values[curve.identity_index])
    v[curve.identity_index] = 1.0
    return np.clip(v, 0.0, 1.0)


def curve_score(curve: ResponseCurve, low: float, high: float) -> float:
    span = high - low
    tol = 1e-9 * max(abs(span), 1.0)
    if not span > 0:
        raise ValueError("interval must have positive width")
    if abs(curve.params[0] - low) > tol or abs(curve.params[-1] - high) > tol:
        raise ValueError(f"curve [{curve.params[0]}, {curve.params[-1]}] does not cover [{low}, {high}]")
    area = np.trapezoid(shifted_clamped(curve), curve.params)
    return float(np.clip(area / span, 0.0, 1.0))


def s_ratio(expl_score: float, prob_score: float) -> float:
    if not prob_score > 0:
        raise ZeroDivisionError("probability-curve score is zero")
    return expl_score / prob_score


# ---------------------------------------------------------------------------
# pixel flipping
# ---------------------------------------------------------------------------

def flip_order(heatmap) -> np.ndarray:
    """Pixel indices by descending relevance, row-major tie-break."""
    h = np.asarray(heatmap, dtype=np.float64).ravel()
    return np.lexsort((np.arange(h.size), -h))


def pixel_flip_curve(model: ModelGraph, image, heatmap, target, config: MetricConfig | None = None,
                     ) -> ResponseCurve:
    config = config or MetricConfig()
    image = np.asarray(image)
    hgt, wid = image.shape[:2]
    order = flip_order(heatmap)
    fractions = config.pixel_flip_fraction * np.arange(1, config.pixel_flip_steps + 1) / config.pixel_flip_steps
    batch = [image]
    for f in fractions:
        n = int(np.floor(f * hgt * wid + 0.5))
        flipped = image.copy().reshape(-1, 3)
        flipped[order[:n]] = 0
        batch.append(flipped.reshape(image.shape))
    # one forward per image: batched BLAS rows are not bit-stable, and an
    # unchanged image must give a ratio of exactly 1
    probs = np.array([softmax(logits_batch(model, preprocess(im, model)[None]))[0, target] for im in batch])
    if probs[0] <= 0:
        raise ValueError("original probability is zero")
    values = np.concatenate([[1.0], probs[1:] / probs[0]])
    return ResponseCurve(np.concatenate([[0.0], fractions]), values, 0, "pixel_flip")


def pixel_flip_score(curve: ResponseCurve, config: MetricConfig | None = None) -> float:
    config = config or MetricConfig()
    frac = config.pixel_flip_fraction
    keep = curve.params <= frac + 1e-12
    v = np.clip(curve.values[keep], 0.0, 1.0)
    return float(np.clip(np.trapezoid(1.0 - v, curve.params[keep]) / frac, 0.0, 1.0))


# ---------------------------------------------------------------------------
# response curves for one (image, method, augmentation)
# ---------------------------------------------------------------------------

@dataclass
class CurveSet:
    probability: ResponseCurve
    correlation: ResponseCurve
    top1000: ResponseCurve
    skipped_correlation: list = field(default_factory=list)
    skipped_top1000: list = field(default_factory=list)


def _probabilities(model, images, target):
    x = np.stack([preprocess(im, model) for im in images])
    return softmax(logits_batch(model, x))[:, target]


def build_curves(model, image, target, method, interval: AugmentationInterval,
                 config: MetricConfig | None = None) -> CurveSet:
    config = config or MetricConfig()
    specs = sample_interval(interval)
    h, w = np.asarray(image).shape[:2]
    base = explain(model, image, target, method).heatmap
    augmented = [apply_augmentation(image, s) for s in specs]
    probs = _probabilities(model, augmented, target)
    params = np.array([s.t for s in specs])
    ident = next(i for i, s in enumerate(specs) if s.is_identity)

    corr, top = {}, {}
    skipped_c, skipped_t = [], []
    for i, (spec, img) in enumerate(zip(specs, augmented)):
        if spec.is_identity:
            corr[i] = top[i] = 1.0  # self-comparison
            continue
        heat = explain(model, img, target, method).heatmap
        ref = warp_explanation(base, spec) if spec.equivariant else base
        mask = validity_mask(spec, h, w)
        try:
            corr[i] = pearson(heat, ref, mask)
        except ValueError as exc:
            log.debug("skip correlation at %s: %s", spec, exc)
            skipped_c.append(spec.t)
        try:
            top[i] = topk_intersection(heat, ref, mask, config.k)
        except ValueError as exc:
            log.debug("skip top-k at %s: %s", spec, exc)
            skipped_t.append(spec.t)

    def curve(values, kind):
        keep = sorted(values)
        return ResponseCurve(params[keep], [values[i] for i in keep], keep.index(ident), kind)

    return CurveSet(
        ResponseCurve(params, probs, ident, "probability"),
        curve(corr, "correlation"),
        curve(top, "top1000"),
        skipped_c,
        skipped_t,
    )


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

# largest magnitude scanned per kind (Scale: largest factor s, interval [1/s, s])
CALIBRATION_MAX = {
    "Brightness": 128.0,
    "Hue": 90.0,
    "Saturation": 128.0,
    "Rotate": 45.0,
    "Scale": 1.5,
    "Translate": 0.25,
}
CALIBRATION_POINTS = 20


def calibration_grid(kind: str) -> np.ndarray:
    """Twenty log-spaced magnitudes from max/50 up to the per-kind maximum."""
    top = CALIBRATION_MAX[kind]
    if kind == "Scale":
        return np.exp(np.geomspace(np.log(top) / 50, np.log(top), CALIBRATION_POINTS))
    return np.geomspace(top / 50, top, CALIBRATION_POINTS)


def endpoints(kind: str, magnitude: float) -> tuple[float, float]:
    magnitude = float(magnitude)
    if kind == "Scale":
        return 1.0 / magnitude, magnitude
    ident = identity_value(kind)
    return ident - magnitude, ident + magnitude


def mean_relative_drop(model, corpus, spec: AugmentationSpec, base_probs=None) -> float:
    """Mean over ``(image, label)`` pairs of (p(x) - p(aug x)) / p(x)."""
    images = [im for im, _ in corpus]
    labels = np.array([lab for _, lab in corpus])
    if base_probs is None:
        base_probs = _all_probs(model, images)[np.arange(len(labels)), labels]
    aug = _all_probs(model, [apply_augmentation(im, spec) for im in images])
    aug = aug[np.arange(len(labels)), labels]
    return float(np.mean((base_probs - aug) / base_probs))


def _all_probs(model, images):
    x = np.stack([preprocess(im, model) for im in images])
    return softmax(logits_batch(model, x))


@dataclass
class Calibration:
    interval: AugmentationInterval
    magnitude: float
    drop_low: float
    drop_high: float
    warning: bool


def calibrate_interval(model, corpus, kind: str, config: MetricConfig | None = None,
                       samples: int = 21) -> Calibration:
    """Smallest symmetric grid interval whose mean relative drop reaches
    ``config.calibration_drop`` at one endpoint; widest interval with
    ``warning=True`` if none does."""
    config = config or MetricConfig()
    corpus = list(corpus)
    if not corpus:
        raise ValueError("calibration corpus is empty")
    labels = np.array([lab for _, lab in corpus])
    base = _all_probs(model, [im for im, _ in corpus])[np.arange(len(labels)), labels]
    drops = None
    for m in calibration_grid(kind):
        lo, hi = endpoints(kind, m)
        drops = (mean_relative_drop(model, corpus, AugmentationSpec(kind, lo), base),
                 mean_relative_drop(model, corpus, AugmentationSpec(kind, hi), base))
        if max(drops) >= config.calibration_drop:
            return Calibration(AugmentationInterval(kind, lo, hi, samples), float(m), *drops, False)
    log.warning("%s: no grid magnitude reaches a %.0f%% drop; using widest interval",
                kind, 100 * config.calibration_drop)
    return Calibration(AugmentationInterval(kind, lo, hi, samples), float(m), *drops, True)
