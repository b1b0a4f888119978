"""Reference implementations shared by the unit and acceptance tests."""

import math
from fractions import Fraction

import numpy as np

from coalnet.detect import convex_hull


def conv_naive(x, w, b, stride=1, pad=0):
    """Seven nested loops, accumulating in (c, m, n) order."""
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((bsz, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((bsz, o, oh, ow))
    for s in range(bsz):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for m in range(kh):
                            for n in range(kw):
                                acc += w[f, ch, m, n] * xp[s, ch, i * stride + m, j * stride + n]
                    out[s, f, i, j] = acc + b[f]
    return out


def maxpool_naive(x, window, stride):
    bsz, c, h, w = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((bsz, c, oh, ow))
    grad_route = np.zeros((bsz, c, oh, ow, 2), dtype=int)
    for s in range(bsz):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    best, at = None, None
                    for m in range(window):
                        for n in range(window):
                            v = x[s, ch, i * stride + m, j * stride + n]
                            if best is None or v > best:
                                best, at = v, (i * stride + m, j * stride + n)
                    out[s, ch, i, j] = best
                    grad_route[s, ch, i, j] = at
    return out, grad_route


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f with respect to every entry of x (in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """Max abs difference relative to the larger of the two gradients' max magnitudes."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    diff = np.abs(a - n).max(initial=0.0)
    return 0.0 if scale == 0 else diff / scale


def confusion_naive(true, pred, k):
    m = [[0] * k for _ in range(k)]
    for t, p in zip(true, pred):
        m[t][p] += 1
    return m


def metrics_naive(m):
    k = len(m)
    total = sum(map(sum, m))
    recg = sum(m[i][i] for i in range(k)) / total
    rec, pre = [], []
    for i in range(k):
        row = sum(m[i])
        col = sum(m[j][i] for j in range(k))
        rec.append(m[i][i] / row if row else 0.0)
        pre.append(m[i][i] / col if col else 0.0)
    return recg, rec, pre


def otsu_oracle(pixels):
    """Exhaustive search, variance from direct class means, exact arithmetic."""
    vals = pixels.ravel().astype(int).tolist()
    n = len(vals)
    best_t, best = None, None
    for t in range(255):
        c0 = [v for v in vals if v <= t]
        c1 = [v for v in vals if v > t]
        if not c0 or not c1:
            score = Fraction(0)
        else:
            mu0 = Fraction(sum(c0), len(c0))
            mu1 = Fraction(sum(c1), len(c1))
            score = Fraction(len(c0), n) * Fraction(len(c1), n) * (mu0 - mu1) ** 2
        if best is None or score > best:
            best, best_t = score, t
    return best_t


def rect_area_at(points, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = points @ np.array([c, s])
    v = points @ np.array([-s, c])
    return (u.max() - u.min()) * (v.max() - v.min())


def sweep_oracle(points):
    """Best enclosing rectangle over all hull-edge orientations."""
    hull = convex_hull(points)
    best = math.inf
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        best = min(best, rect_area_at(points, math.atan2(e[1], e[0])))
    return best
