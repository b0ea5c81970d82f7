"""Slow, obviously-correct reference implementations used by the tests."""
import math

import numpy as np


def conv3d_loops(x, w, b, stride=1, padding=0):
    """Direct nested-loop cross-correlation. x (C, D, H, W), w (O, C, k, k, k)."""
    C, D, H, W = x.shape
    O, _, k, _, _ = w.shape
    xp = np.zeros((C, D + 2 * padding, H + 2 * padding, W + 2 * padding))
    xp[:, padding:padding + D, padding:padding + H, padding:padding + W] = x
    Do = (D + 2 * padding - k) // stride + 1
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    y = np.zeros((O, Do, Ho, Wo))
    for o in range(O):
        for i in range(Do):
            for j in range(Ho):
                for l in range(Wo):
                    s = b[o]
                    for c in range(C):
                        for a in range(k):
                            for bb in range(k):
                                for cc in range(k):
                                    s += w[o, c, a, bb, cc] * xp[c, i * stride + a,
                                                                 j * stride + bb, l * stride + cc]
                    y[o, i, j, l] = s
    return y


def maxpool_loops(x, k=2):
    C, D, H, W = x.shape
    y = np.zeros((C, D // k, H // k, W // k))
    for c in range(C):
        for i in range(D // k):
            for j in range(H // k):
                for l in range(W // k):
                    y[c, i, j, l] = x[c, i * k:(i + 1) * k, j * k:(j + 1) * k, l * k:(l + 1) * k].max()
    return y


def bce_scalar(p, t, eps=1e-7):
    p = min(max(p, eps), 1 - eps)
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def adam_scalar(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Python-float Adam on a single scalar; ``grads`` is a function of theta."""
    m = v = 0.0
    out = []
    for t in range(1, 11):
        g = grads(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
        out.append(theta)
    return out


def cell_center(i, n):
    return -0.5 + (i + 0.5) / n


def trilinear_at(grid, p):
    """Per-point 8-corner blend written out by hand.  grid (C, R, R, R), p (3,)."""
    R = grid.shape[1]
    idx, frac = [], []
    for a in range(3):
        u = min(max((p[a] + 0.5) * R - 0.5, 0.0), R - 1)
        i0 = min(int(math.floor(u)), R - 2)
        idx.append(i0)
        frac.append(u - i0)
    out = np.zeros(grid.shape[0])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wgt = ((frac[0] if dx else 1 - frac[0]) * (frac[1] if dy else 1 - frac[1])
                       * (frac[2] if dz else 1 - frac[2]))
                out += wgt * grid[:, idx[0] + dx, idx[1] + dy, idx[2] + dz]
    return out


def upsample_materialized(grid, n):
    """Trilinearly resample (C, R, R, R) onto the n^3 cell-center lattice, point by point."""
    c = np.array([cell_center(i, n) for i in range(n)])
    out = np.zeros((grid.shape[0], n, n, n))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                out[:, i, j, k] = trilinear_at(grid, (c[i], c[j], c[k]))
    return out


def chamfer_loops(a, b):
    def directed(p, q):
        return sum(min(((x - y) ** 2).sum() for y in q) for x in p) / len(p)
    return directed(a, b) + directed(b, a)


def iou_count(p, g):
    inter = union = 0
    for x, y in zip(np.asarray(p).reshape(-1), np.asarray(g).reshape(-1)):
        inter += bool(x) and bool(y)
        union += bool(x) or bool(y)
    return 1.0 if union == 0 else inter / union


def pooled_flat(fs_grids, ft_grids):
    """Flatten, multiply, mean: (B, d)."""
    cols = []
    for a, b in zip(fs_grids, ft_grids):
        B, C = a.shape[:2]
        for c in range(C):
            cols.append([(a[i, c].ravel() * b[i, c].ravel()).mean() for i in range(B)])
    return np.array(cols).T


def uv_sphere(r, n=96):
    from scanadapt.shapes import Sphere
    return Sphere((0.0, 0.0, 0.0), r).mesh(rings=n, segments=2 * n)
