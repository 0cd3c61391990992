"""Independent reference implementations used by the test-suite.

Nothing here imports the code under test except for the Tensor wrapper
needed to call a function numerically.
"""
from __future__ import annotations

import numpy as np


def naive_conv2d(x, k, b, stride, dilation, padding):
    """Six nested loops, zero padding by bounds check."""
    B, C, H, W = x.shape
    O, _, KH, KW = k.shape
    Ho = (H + 2 * padding - dilation * (KH - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (KW - 1) - 1) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(KH):
                            for v in range(KW):
                                r = i * stride + u * dilation - padding
                                s = j * stride + v * dilation - padding
                                if 0 <= r < H and 0 <= s < W:
                                    acc += x[n, c, r, s] * k[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def scatter_conv_transpose2d(x, k, stride, padding, output_padding=0):
    """Each input pixel scatters a scaled copy of the kernel."""
    B, Ci, H, W = x.shape
    _, Co, KH, KW = k.shape
    full = np.zeros((B, Co, (H - 1) * stride + KH + output_padding, (W - 1) * stride + KW + output_padding))
    for n in range(B):
        for c in range(Ci):
            for i in range(H):
                for j in range(W):
                    full[n, :, i * stride : i * stride + KH, j * stride : j * stride + KW] += x[n, c, i, j] * k[c]
    Ho = full.shape[2] - 2 * padding
    Wo = full.shape[3] - 2 * padding
    return full[:, :, padding : padding + Ho, padding : padding + Wo]


def central_difference(f, arrays, index, eps):
    """d f / d arrays[index] by central differences; ``f`` takes the list."""
    target = arrays[index]
    grad = np.zeros_like(target, dtype=np.float64)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + eps
        fp = f(arrays)
        target[idx] = orig - eps
        fm = f(arrays)
        target[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def rmse_rows_bruteforce(pred, truth):
    H, W = pred.shape
    total = 0.0
    for i in range(H):
        s = 0.0
        for j in range(W):
            s += (pred[i][j] - truth[i][j]) ** 2
        total += (s / W) ** 0.5
    return total / H


def rmse_pooled_bruteforce(pred, truth):
    vals = [(p - t) ** 2 for p, t in zip(np.ravel(pred).tolist(), np.ravel(truth).tolist())]
    return (sum(vals) / len(vals)) ** 0.5


def nmse_bruteforce(pred, truth):
    p = np.ravel(pred).tolist()
    t = np.ravel(truth).tolist()
    mu = sum(t) / len(t)
    num = sum((a - b) ** 2 for a, b in zip(p, t))
    den = sum((b - mu) ** 2 for b in t)
    return num / den


def kriging_dense_oracle(points, values, query, nugget, sill, rng_):
    """Ordinary kriging by explicit loops over the (n+1) system."""
    n = len(points)

    def gamma(d):
        return nugget + (sill - nugget) * (1 - np.exp(-d / rng_)) if d > 0 else 0.0

    A = np.zeros((n + 1, n + 1))
    rhs = np.zeros(n + 1)
    for i in range(n):
        for j in range(n):
            A[i, j] = gamma(np.hypot(points[i][0] - points[j][0], points[i][1] - points[j][1]))
        A[i, n] = A[n, i] = 1.0
        rhs[i] = gamma(np.hypot(points[i][0] - query[0], points[i][1] - query[1]))
    rhs[n] = 1.0
    w = np.linalg.solve(A, rhs)[:n]
    return float(np.dot(w, values)), w


def rbf_dense_oracle(points, values, query, eps, ridge=0.0):
    n = len(points)
    K = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d = np.hypot(points[i][0] - points[j][0], points[i][1] - points[j][1])
            K[i, j] = np.exp(-((eps * d) ** 2))
    alpha = np.linalg.solve(K + ridge * np.eye(n), np.asarray(values, dtype=float))
    kq = np.array([np.exp(-((eps * np.hypot(p[0] - query[0], p[1] - query[1])) ** 2)) for p in points])
    return float(kq @ alpha)
