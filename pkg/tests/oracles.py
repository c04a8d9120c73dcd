"""Independent reference implementations used as test oracles.

Nothing here calls into the engine's kernels; layers are re-derived from
their definitions in float64 with explicit loops.
"""
import math

import numpy as np

from xplain_bench.nn import AvgPool2D, Conv2D, Dense, Flatten, GlobalAvgPool, MaxPool2D, ReLU


def ref_conv(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        acc = np.full((ho, wo), float(b[oc]))
        for ic in range(c):
            for i in range(kh):
                for j in range(kw):
                    acc += w[oc, ic, i, j] * xp[ic, i:i + stride * ho:stride, j:j + stride * wo:stride]
        out[oc] = acc
    return out


def ref_pool(x, size, stride, op):
    c, h, w = x.shape
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    out = np.zeros((c, ho, wo))
    pattern = np.zeros((c, ho, wo), dtype=int)
    for y in range(ho):
        for xx in range(wo):
            win = x[:, y * stride:y * stride + size, xx * stride:xx * stride + size].reshape(c, -1)
            out[:, y, xx] = op(win, axis=1)
            pattern[:, y, xx] = win.argmax(axis=1)
    return out, pattern


def reference_forward(model, x):
    """float64 forward. Returns (logits, activation pattern) where the pattern
    collects ReLU gates and max-pool arg-max choices (to detect kinks)."""
    a = np.asarray(x, dtype=np.float64)
    pattern = []
    for layer in model.layers:
        if isinstance(layer, Conv2D):
            a = ref_conv(a, layer.weight.astype(np.float64), layer.bias.astype(np.float64),
                         layer.stride, layer.padding)
        elif isinstance(layer, Dense):
            a = layer.weight.astype(np.float64) @ a + layer.bias.astype(np.float64)
        elif isinstance(layer, ReLU):
            pattern.append((a > 0).ravel())
            a = np.maximum(a, 0)
        elif isinstance(layer, MaxPool2D):
            a, p = ref_pool(a, layer.size, layer.stride, np.max)
            pattern.append(p.ravel())
        elif isinstance(layer, AvgPool2D):
            a, _ = ref_pool(a, layer.size, layer.stride, np.mean)
        elif isinstance(layer, Flatten):
            a = a.ravel()
        elif isinstance(layer, GlobalAvgPool):
            a = a.mean(axis=(1, 2))
        else:
            raise TypeError(layer)
    return a, np.concatenate(pattern) if pattern else np.zeros(0)


def finite_difference_probes(model, x, target, n_probes, rng, step=1e-3):
    """Central differences of logit[target] at random coordinates, skipping
    probes whose +/- step crosses a ReLU or max-pool kink."""
    probes = []
    attempts = 0
    while len(probes) < n_probes:
        attempts += 1
        if attempts > 50 * n_probes:
            raise RuntimeError("too many probes crossed kinks")
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        xp, xm = x.astype(np.float64).copy(), x.astype(np.float64).copy()
        xp[idx] += step
        xm[idx] -= step
        fp, pp = reference_forward(model, xp)
        fm, pm = reference_forward(model, xm)
        if not np.array_equal(pp, pm):
            continue
        probes.append((idx, (fp[target] - fm[target]) / (2 * step)))
    return probes


def relative_error(a, b, floor=1e-7):
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def pearson_two_pass(a, b):
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    cov = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = math.fsum((x - ma) ** 2 for x in a)
    vb = math.fsum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def topk_bruteforce(a, b, mask, k):
    """Exhaustive sort-and-set: sort (-value, index) tuples in pure Python."""
    flat_a, flat_b, flat_m = np.ravel(a), np.ravel(b), np.ravel(mask)
    cand = [i for i in range(flat_m.size) if flat_m[i]]
    k_eff = min(k, len(cand))
    top_a = {i for _, i in sorted((-float(flat_a[i]), i) for i in cand)[:k_eff]}
    top_b = {i for _, i in sorted((-float(flat_b[i]), i) for i in cand)[:k_eff]}
    return len(top_a & top_b) / k_eff


def trapezoid_bruteforce(xs, ys):
    return math.fsum((xs[i + 1] - xs[i]) * (ys[i] + ys[i + 1]) / 2 for i in range(len(xs) - 1))
