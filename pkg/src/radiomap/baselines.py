"""Classical interpolators: inverse distance weighting, RBF, ordinary kriging.

All three take the sampled pixels of a :class:`SampleMask` and fill the full
grid. Above ``DENSE_LIMIT`` samples the RBF and kriging systems are solved
per query against the ``LOCAL_K`` nearest samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit
from scipy.spatial import cKDTree

from .simdata import GridMap, SampleMask

DENSE_LIMIT = 500
LOCAL_K = 64
QUERY_CHUNK = 2048


class InterpolationError(ValueError):
    """The interpolation system cannot be solved."""


def _sample_arrays(samples: GridMap, mask: SampleMask) -> tuple[np.ndarray, np.ndarray]:
    pts = np.argwhere(mask.mask)  # row-major, so independent of mask.points order
    if len(pts) == 0:
        raise InterpolationError("no samples to interpolate from")
    return pts.astype(np.float64), samples.values[mask.mask].astype(np.float64)


def _canonical(points, values):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(points) == 0:
        raise InterpolationError("no samples to interpolate from")
    if len(points) != len(values):
        raise InterpolationError(f"{len(points)} points but {len(values)} values")
    order = np.lexsort((points[:, 1], points[:, 0]))
    return points[order], values[order]


def _grid_queries(shape) -> np.ndarray:
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    return np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)


def _finish(flat: np.ndarray, shape, method: str, source: GridMap) -> GridMap:
    grid = flat.reshape(shape)
    clamped = (grid < 0) | (grid > 1)
    out = GridMap(np.clip(grid, 0.0, 1.0), "pathloss", source.tx_pixel, source.map_id)
    out.meta.update(method=method, clamped=clamped)
    return out


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])


def _local_distances(local: np.ndarray) -> np.ndarray:
    """(Q, k, 2) neighbour sets -> (Q, k, k) distance matrices."""
    return np.hypot(local[:, :, None, 0] - local[:, None, :, 0], local[:, :, None, 1] - local[:, None, :, 1])


# IDW -----------------------------------------------------------------------

def idw_points(points, values, queries, power: float = 2.0) -> np.ndarray:
    points, values = _canonical(points, values)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    out = np.empty(len(queries))
    for s in range(0, len(queries), QUERY_CHUNK):
        q = queries[s : s + QUERY_CHUNK]
        d = _pairwise(q, points)
        exact = d == 0
        with np.errstate(divide="ignore"):
            w = np.where(exact, 0.0, d ** (-power))
        est = (w @ values) / w.sum(axis=1)
        hit = exact.any(axis=1)
        if hit.any():
            est[hit] = values[np.argmax(exact[hit], axis=1)]
        out[s : s + QUERY_CHUNK] = est
    return out


def idw(samples: GridMap, mask: SampleMask, power: float = 2.0) -> GridMap:
    pts, vals = _sample_arrays(samples, mask)
    return _finish(idw_points(pts, vals, _grid_queries(samples.shape), power), samples.shape, "idw", samples)


# RBF -----------------------------------------------------------------------

def _kernel(name: str, eps: float):
    if name == "gaussian":
        return lambda d: np.exp(-((eps * d) ** 2))
    if name == "multiquadric":
        return lambda d: np.sqrt(1.0 + (eps * d) ** 2)
    raise ValueError(f"unknown RBF kernel {name!r}")


def spacing_epsilon(n_samples: int, shape) -> float:
    """Shape parameter 1/h with h the mean sample spacing sqrt(area/n)."""
    return float(np.sqrt(n_samples / (shape[0] * shape[1])))


def _solve(a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        raise InterpolationError(f"{what} system is singular") from None
    if not np.all(np.isfinite(x)):
        raise InterpolationError(f"{what} system is too ill-conditioned (cond={np.linalg.cond(a):.3g})")
    return x


def rbf_points(points, values, queries, kernel: str = "gaussian", epsilon: float = 0.1, ridge: float = 1e-8) -> np.ndarray:
    points, values = _canonical(points, values)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    k = _kernel(kernel, epsilon)
    n = len(points)
    if n < DENSE_LIMIT:
        a = k(_pairwise(points, points)) + ridge * np.eye(n)
        alpha = _solve(a, values, "RBF")
        return np.concatenate(
            [k(_pairwise(queries[s : s + QUERY_CHUNK], points)) @ alpha for s in range(0, len(queries), QUERY_CHUNK)]
        )
    tree = cKDTree(points)
    m = min(LOCAL_K, n)
    out = np.empty(len(queries))
    for s in range(0, len(queries), QUERY_CHUNK // 4):
        q = queries[s : s + QUERY_CHUNK // 4]
        dq, idx = tree.query(q, k=m)
        local = points[idx]
        dd = _local_distances(local)
        a = k(dd) + ridge * np.eye(m)
        alpha = _solve(a, values[idx][..., None], "RBF")[..., 0]
        out[s : s + len(q)] = np.einsum("qk,qk->q", k(dq), alpha)
    return out


def rbf(
    samples: GridMap,
    mask: SampleMask,
    kernel: str = "gaussian",
    epsilon: float | None = None,
    ridge: float = 1e-8,
) -> GridMap:
    pts, vals = _sample_arrays(samples, mask)
    eps = spacing_epsilon(len(pts), samples.shape) if epsilon is None else epsilon
    flat = rbf_points(pts, vals, _grid_queries(samples.shape), kernel, eps, ridge)
    return _finish(flat, samples.shape, "rbf", samples)


# kriging -------------------------------------------------------------------

@dataclass(frozen=True)
class VariogramParams:
    nugget: float = 0.0
    sill: float = 1.0
    range: float = 10.0
    model: str = "exponential"

    def __post_init__(self):
        if self.model != "exponential":
            raise ValueError(f"unsupported variogram model {self.model!r}")
        if self.nugget < 0 or self.sill <= 0 or self.range <= 0 or self.sill < self.nugget:
            raise ValueError(f"invalid variogram parameters {self}")

    def __call__(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=np.float64)
        g = self.nugget + (self.sill - self.nugget) * (1.0 - np.exp(-d / self.range))
        return np.where(d > 0, g, 0.0)


def empirical_variogram(points, values, n_lags: int = 8, max_pairs_points: int = 800, seed: int = 0):
    """Binned semivariance; returns (lag centres, gamma, pair counts)."""
    points, values = _canonical(points, values)
    if len(points) > max_pairs_points:
        keep = np.sort(np.random.default_rng(seed).choice(len(points), max_pairs_points, replace=False))
        points, values = points[keep], values[keep]
    iu = np.triu_indices(len(points), k=1)
    d = _pairwise(points, points)[iu]
    sv = 0.5 * (values[:, None] - values[None, :])[iu] ** 2
    edges = np.linspace(0, d.max() / 2 if d.size else 1.0, n_lags + 1)
    centres, gammas, counts = [], [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (d > lo) & (d <= hi)
        if sel.any():
            centres.append(0.5 * (lo + hi))
            gammas.append(sv[sel].mean())
            counts.append(int(sel.sum()))
    return np.array(centres), np.array(gammas), np.array(counts)


def fit_variogram(points, values, n_lags: int = 8) -> VariogramParams:
    """Least-squares exponential fit to the binned empirical variogram."""
    lags, gam, _ = empirical_variogram(points, values, n_lags)
    var = float(np.var(values)) or 1e-6
    if len(lags) < 3:
        return VariogramParams(0.0, var, max(float(lags.max()) if len(lags) else 1.0, 1.0))

    def model(d, nugget, psill, rng_):
        return nugget + psill * (1 - np.exp(-d / rng_))

    p0 = (0.0, var, float(lags.mean()))
    upper = (var * 2 + 1e-9, var * 4 + 1e-9, float(lags.max()) * 4)
    try:
        (nugget, psill, rng_), _ = curve_fit(model, lags, gam, p0=p0, bounds=((0, 1e-9, 1e-3), upper), maxfev=5000)
    except RuntimeError:
        nugget, psill, rng_ = p0
    return VariogramParams(float(nugget), float(nugget + psill), float(rng_))


def kriging_system(points, vp: VariogramParams) -> np.ndarray:
    n = len(points)
    a = np.ones((n + 1, n + 1))
    a[:n, :n] = vp(_pairwise(points, points))
    a[n, n] = 0.0
    return a


def kriging_weights(points, queries, vp: VariogramParams, ridge: float = 0.0) -> np.ndarray:
    """Dense ordinary-kriging weights, one column per query."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    a = kriging_system(points, vp)
    if ridge:
        a[:n, :n] -= ridge * np.eye(n)
    b = np.ones((n + 1, len(queries)))
    b[:n] = vp(_pairwise(points, queries))
    return _solve(a, b, "kriging")[:n]


def kriging_points(points, values, queries, vp: VariogramParams) -> np.ndarray:
    points, values = _canonical(points, values)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    if n == 1:
        return np.full(len(queries), values[0])
    if n < DENSE_LIMIT:
        out = []
        for s in range(0, len(queries), QUERY_CHUNK):
            q = queries[s : s + QUERY_CHUNK]
            try:
                w = kriging_weights(points, q, vp)
            except InterpolationError:
                w = kriging_weights(points, q, vp, ridge=1e-8 * max(vp.sill, 1e-12))
            out.append(values @ w)
        return np.concatenate(out)
    tree = cKDTree(points)
    m = min(LOCAL_K, n)
    out = np.empty(len(queries))
    ridge = 1e-8 * max(vp.sill, 1e-12) * np.diag((np.arange(m + 1) < m).astype(np.float64))
    for s in range(0, len(queries), QUERY_CHUNK // 4):
        q = queries[s : s + QUERY_CHUNK // 4]
        dq, idx = tree.query(q, k=m)
        local = points[idx]
        dd = _local_distances(local)
        a = np.ones((len(q), m + 1, m + 1))
        a[:, :m, :m] = vp(dd)
        a[:, m, m] = 0.0
        b = np.ones((len(q), m + 1, 1))
        b[:, :m, 0] = vp(dq)
        try:
            w = _solve(a, b, "kriging")
        except InterpolationError:
            w = _solve(a - ridge, b, "kriging")
        out[s : s + len(q)] = np.einsum("qk,qk->q", w[:, :m, 0], values[idx])
    return out


def kriging(samples: GridMap, mask: SampleMask, vp: VariogramParams | None = None) -> GridMap:
    pts, vals = _sample_arrays(samples, mask)
    if vp is None:
        vp = fit_variogram(pts, vals) if len(pts) > 2 else VariogramParams(0.0, max(float(np.var(vals)), 1e-6), 10.0)
    flat = kriging_points(pts, vals, _grid_queries(samples.shape), vp)
    out = _finish(flat, samples.shape, "kriging", samples)
    out.meta["variogram"] = vp
    return out


METHODS = {"idw": idw, "rbf": rbf, "kriging": kriging}


def run_baseline(name: str, samples: GridMap, mask: SampleMask) -> GridMap:
    try:
        fn = METHODS[name]
    except KeyError:
        raise ValueError(f"unknown baseline {name!r}; choose from {sorted(METHODS)}") from None
    return fn(samples, mask)
