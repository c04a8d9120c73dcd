"""Colour and geometric augmentations, explanation warping and overlap masks.

Parameter units:

* Brightness / Saturation: added to the V / S channel on a 0..255 scale.
* Hue: byte-hue units, 1 unit = 2 degrees, period 180.
* Rotate: degrees, positive turns the content clockwise on screen.
* Scale: multiplicative factor about the image centre.
* Translate: signed fraction of the image side, applied to both axes
  (positive moves content right and down).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INVARIANT_KINDS = ("Brightness", "Hue", "Saturation")
EQUIVARIANT_KINDS = ("Rotate", "Scale", "Translate")
KINDS = INVARIANT_KINDS + EQUIVARIANT_KINDS

# reference intervals: an ImageNet ResNet50 trained with full augmentation
DEFAULT_INTERVALS = {
    "Brightness": (-95.0, 95.0),
    "Hue": (-30.0, 30.0),
    "Saturation": (-70.0, 70.0),
    "Rotate": (-18.0, 18.0),
    "Scale": (0.89, 1.11),
    "Translate": (-0.06, 0.06),
}


def identity_value(kind: str) -> float:
    return 1.0 if kind == "Scale" else 0.0


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    t: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unsupported augmentation kind {self.kind!r}")
        if self.kind == "Scale" and not self.t > 0:
            raise ValueError(f"scale factor must be > 0, got {self.t}")
        object.__setattr__(self, "t", float(self.t))

    @property
    def equivariant(self) -> bool:
        return self.kind in EQUIVARIANT_KINDS

    @property
    def is_identity(self) -> bool:
        return self.t == identity_value(self.kind)

    def __str__(self):
        return f"kind={self.kind} t={self.t!r}"

    @classmethod
    def parse(cls, text: str) -> "AugmentationSpec":
        fields = dict(part.split("=", 1) for part in text.split())
        return cls(fields["kind"], float(fields["t"]))


@dataclass(frozen=True)
class AugmentationInterval:
    kind: str
    low: float
    high: float
    samples: int = 21

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unsupported augmentation kind {self.kind!r}")
        ident = identity_value(self.kind)
        if not self.low < ident < self.high:
            raise ValueError(f"{self.kind} interval [{self.low}, {self.high}] must contain {ident} strictly")
        if self.samples < 3 or self.samples % 2 == 0:
            raise ValueError("samples must be odd and >= 3")

    @classmethod
    def default(cls, kind: str, samples: int = 21) -> "AugmentationInterval":
        return cls(kind, *DEFAULT_INTERVALS[kind], samples=samples)


def sample_interval(interval: AugmentationInterval) -> list[AugmentationSpec]:
    """Equidistant parameters from low to high, identity included exactly once."""
    ident = identity_value(interval.kind)
    values = np.linspace(interval.low, interval.high, interval.samples)
    tol = 1e-9 * (interval.high - interval.low)
    values[np.abs(values - ident) <= tol] = ident
    values = list(values)
    if ident not in values:
        values = sorted(values + [ident])
    return [AugmentationSpec(interval.kind, float(v)) for v in values]


# ---------------------------------------------------------------------------
# colour
# ---------------------------------------------------------------------------

def rgb_to_hsv(image):
    """8-bit RGB -> float HSV with H in byte-hue units [0, 180), S and V in [0, 255]."""
    rgb = np.asarray(image, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    d = v - rgb.min(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(v > 0, d / v * 255.0, 0.0)
        safe = np.where(d > 0, d, 1.0)
        h = np.where(v == r, (g - b) / safe,
                     np.where(v == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe))
    h = np.where(d > 0, (h * 30.0) % 180.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv):
    """Inverse of :func:`rgb_to_hsv`; returns float RGB on 0..255."""
    h, s, v = hsv[..., 0] * 2.0, hsv[..., 1] / 255.0, hsv[..., 2]
    hp = (h % 360.0) / 60.0
    c = v * s
    x = c * (1 - np.abs(hp % 2 - 1))
    m = v - c
    sector = np.floor(hp).astype(int) % 6
    zero = np.zeros_like(c)
    table = [(c, x, zero), (x, c, zero), (zero, c, x), (zero, x, c), (x, zero, c), (c, zero, x)]
    out = np.zeros(h.shape + (3,))
    for k, (r1, g1, b1) in enumerate(table):
        sel = sector == k
        out[sel] = np.stack([r1[sel], g1[sel], b1[sel]], axis=-1)
    return out + m[..., None]


def _to_uint8(values):
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def _colour(image, kind, t):
    hsv = rgb_to_hsv(image)
    if kind == "Brightness":
        hsv[..., 2] = np.clip(hsv[..., 2] + t, 0, 255)
    elif kind == "Saturation":
        hsv[..., 1] = np.clip(hsv[..., 1] + t, 0, 255)
    else:
        hsv[..., 0] = (hsv[..., 0] + t) % 180.0
    return _to_uint8(hsv_to_rgb(hsv))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def round_half_away(v):
    return float(np.sign(v) * np.floor(abs(v) + 0.5))


def translation_pixels(t, h, w):
    return int(round_half_away(t * w)), int(round_half_away(t * h))


def source_coordinates(spec: AugmentationSpec, h: int, w: int):
    """For every output pixel, the (y, x) location it samples in the source."""
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if spec.kind == "Translate":
        dx, dy = translation_pixels(spec.t, h, w)
        sy, sx = y - dy, x - dx
    elif spec.kind == "Scale":
        sy, sx = cy + (y - cy) / spec.t, cx + (x - cx) / spec.t
    elif spec.kind == "Rotate":
        th = np.deg2rad(spec.t)
        c, s = np.cos(th), np.sin(th)
        dx, dy = x - cx, y - cy
        sx, sy = cx + c * dx + s * dy, cy - s * dx + c * dy
    else:
        raise ValueError(f"{spec.kind} is not a geometric augmentation")
    # snap float noise so exact grid maps stay exact
    for arr in (sy, sx):
        near = np.round(arr)
        close = np.abs(arr - near) < 1e-9
        arr[close] = near[close]
    return sy, sx


def bilinear_sample(field, sy, sx):
    """Sample ``field`` (H x W or H x W x C) at float coordinates; zero outside."""
    field = np.asarray(field, dtype=np.float64)
    h, w = field.shape[:2]
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    out = np.zeros(sy.shape + field.shape[2:])
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + oy, x0 + ox
            wgt = wy * wx * ((yy >= 0) & (yy < h) & (xx >= 0) & (xx < w))
            vals = field[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            if field.ndim == 3:
                wgt = wgt[..., None]
            out += wgt * vals
    return out


def apply_augmentation(image, spec: AugmentationSpec) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an 8-bit H x W x 3 image")
    if spec.is_identity:
        return image.copy()
    if not spec.equivariant:
        return _colour(image, spec.kind, spec.t)
    sy, sx = source_coordinates(spec, *image.shape[:2])
    return _to_uint8(bilinear_sample(image, sy, sx))


def warp_explanation(heatmap, spec: AugmentationSpec) -> np.ndarray:
    if not spec.equivariant:
        raise ValueError(f"{spec.kind} is invariant; explanations are not warped")
    heatmap = np.asarray(heatmap)
    if spec.is_identity:
        return heatmap.copy()
    sy, sx = source_coordinates(spec, *heatmap.shape)
    return bilinear_sample(heatmap, sy, sx).astype(heatmap.dtype)


def validity_mask(spec: AugmentationSpec, h: int, w: int) -> np.ndarray:
    """Pixels of the augmented frame whose content fully comes from the source."""
    if not spec.equivariant or spec.is_identity:
        return np.ones((h, w), dtype=bool)
    sy, sx = source_coordinates(spec, h, w)
    return bilinear_sample(np.ones((h, w)), sy, sx) >= 0.999
