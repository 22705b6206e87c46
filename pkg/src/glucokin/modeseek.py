"""Weighted kernel mode seeking: mean-shift, medoid-shift and their robust
and sparse variants.

All iterations run in bandwidth-scaled coordinates ``z = x / h`` (one
bandwidth per feature dimension), so the Gaussian profile is evaluated as
``k(|z - z_l|^2)`` with ``k(u) = exp(-u / 2)``.  The shift weights use
``g = -k' = k / 2``; the factor one half cancels in every ratio and in every
argmin, so the code works with ``k`` directly.

Variants
--------
``ms``      mean-shift, uniform weights
``rms``     mean-shift, IRWLS weights
``meds``    medoid-shift, uniform weights
``rmeds``   medoid-shift, IRWLS weights
``ssms``    mean-shift over a sparse basis (alphas)
``rssms``   sparse basis fitted to the IRWLS-weighted density
``ssmeds``  medoid-shift over a sparse basis
``rssmeds`` robust sparse medoid-shift
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

log = logging.getLogger(__name__)

VARIANTS = ("ms", "rms", "meds", "rmeds", "ssms", "rssms", "ssmeds", "rssmeds")

HUBER_C = 1.345
# mean absolute deviation -> sigma for Gaussian data: sqrt(pi / 2)
MAD_TO_SIGMA = 1.2533

# medoid-shift keeps the current point when it is within this relative margin
# of the best candidate; floating-point ties must not create cycles
_TIE_RTOL = 1e-12


class IsolatedPointError(ArithmeticError):
    """All kernel weights underflowed at the query point."""


class _EvalCounter:
    def __init__(self):
        self.count = 0


evaluations = _EvalCounter()


@contextlib.contextmanager
def counting():
    """Count kernel profile evaluations inside the block."""
    start = evaluations.count
    box = _EvalCounter()
    try:
        yield box
    finally:
        box.count = evaluations.count - start


def profile(u):
    """Gaussian profile ``k(u) = exp(-u/2)`` on squared scaled distances."""
    u = np.asarray(u, dtype=float)
    evaluations.count += u.size
    return np.exp(-0.5 * u)


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel with one bandwidth per feature dimension."""

    bandwidth: Union[float, tuple] = 1.0

    def __post_init__(self):
        h = np.atleast_1d(np.asarray(self.bandwidth, dtype=float))
        if h.size == 0 or not np.all(h > 0) or not np.all(np.isfinite(h)):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth!r}")

    def scales(self, dim: int) -> np.ndarray:
        h = np.atleast_1d(np.asarray(self.bandwidth, dtype=float))
        if h.size == 1:
            return np.full(dim, float(h[0]))
        if h.size != dim:
            raise ValueError(f"{h.size} bandwidths for {dim}-d data")
        return h

    def norm(self, dim: int) -> float:
        return 1.0 / float(np.prod(self.scales(dim)))


@dataclass(frozen=True)
class RobustConfig:
    c: float = HUBER_C
    scale: Optional[float] = None  # None means estimate from the data
    max_iters: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("Huber constant must be positive")
        if self.scale is not None and not self.scale > 0:
            raise ValueError("fixed scale must be positive")


@dataclass
class IrwlsResult:
    weights: np.ndarray
    scale: float
    iterations: int
    converged: bool


@dataclass
class ModeSeekResult:
    variant: str
    modes: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    density: np.ndarray
    center_weights: np.ndarray
    center_index: np.ndarray
    paths: Optional[np.ndarray] = None
    basis: Optional[object] = None

    @property
    def medoid(self) -> bool:
        return "meds" in self.variant

    def trajectory_density(self, i: int) -> np.ndarray:
        col = self.density[:, i]
        return col[~np.isnan(col)]

    def trajectory(self, i: int) -> np.ndarray:
        """Visited data indices of a medoid-shift trajectory, up to its fixed point."""
        if self.paths is None:
            raise ValueError("trajectories are only recorded for medoid variants")
        col = self.paths[:, i]
        steps = int(self.iterations[i])
        return col[: steps + 1]


@dataclass
class ClusterSet:
    labels: np.ndarray
    centers: np.ndarray
    sizes: np.ndarray

    @property
    def intensities(self) -> np.ndarray:
        return self.centers[:, 0]

    def __len__(self) -> int:
        return len(self.sizes)

    def to_dict(self) -> dict:
        return {
            "centers": [[float(v) for v in c] for c in self.centers],
            "sizes": [int(s) for s in self.sizes],
            "labels": [int(v) for v in self.labels],
        }


# -- helpers ------------------------------------------------------------------

def as_points(data) -> np.ndarray:
    x = np.asarray(data, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("data must be a non-empty sequence of points")
    return x


def _query(x, dim: int) -> np.ndarray:
    q = np.atleast_1d(np.asarray(x, dtype=float))
    if q.size != dim:
        raise ValueError(f"query has {q.size} coordinates, data has {dim}")
    return q


def _weights(w, n: int) -> np.ndarray:
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=float).ravel()
    if w.size != n:
        raise ValueError(f"{w.size} weights for {n} points")
    if not np.all(w > 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and strictly positive")
    return w


def sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between rows of ``a`` and ``b``."""
    if a.shape[1] == 1:
        d = a[:, 0][:, None] - b[:, 0][None, :]
        return d * d
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def kernel_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``k(|a_i - b_j|^2)`` for scaled points, computed in place."""
    if a.shape[1] == 1:
        d = np.subtract.outer(a[:, 0], b[:, 0])
        np.multiply(d, d, out=d)
    else:
        d = sqdist(a, b)
    evaluations.count += d.size
    d *= -0.5
    return np.exp(d, out=d)


def _shape_like(point: np.ndarray, data) -> Union[float, np.ndarray]:
    if np.ndim(data) == 1:
        return float(point[0])
    return point


# -- single-point operations ---------------------------------------------------

def kde(x, data, w=None, kernel: KernelConfig = KernelConfig()) -> float:
    """Weighted kernel density ``(1/h) sum_l w_l k(|x - x_l|^2 / h^2)``."""
    pts = as_points(data)
    w = _weights(w, len(pts))
    h = kernel.scales(pts.shape[1])
    q = _query(x, pts.shape[1])
    u = (((q - pts) / h) ** 2).sum(axis=1)
    return kernel.norm(pts.shape[1]) * float(w @ profile(u))


def mean_shift_step(x, data, w=None, kernel: KernelConfig = KernelConfig()):
    """Kernel-weighted mean of the data around ``x``."""
    pts = as_points(data)
    w = _weights(w, len(pts))
    h = kernel.scales(pts.shape[1])
    q = _query(x, pts.shape[1])
    c = w * profile((((q - pts) / h) ** 2).sum(axis=1))
    den = c.sum()
    if not den > 0:
        raise IsolatedPointError(f"no kernel mass at {x!r}")
    return _shape_like(c @ pts / den, data)


def medoid_shift_step(x, data, w=None, kernel: KernelConfig = KernelConfig()):
    """Data point minimising ``sum_l |y - x_l|^2 w_l g(|x - x_l|^2 / h^2)``.

    The objective equals ``C |y - m|^2`` plus a constant, ``m`` being the
    mean-shift target, so the minimiser is the datum nearest to ``m``.  Ties
    go to ``x`` itself when it is a datum, otherwise to the lowest index.
    """
    pts = as_points(data)
    w = _weights(w, len(pts))
    h = kernel.scales(pts.shape[1])
    q = _query(x, pts.shape[1])
    z = pts / h
    zq = q / h
    c = w * profile(((zq - z) ** 2).sum(axis=1))
    den = c.sum()
    current = np.flatnonzero(np.all(pts == q, axis=1))
    if not den > 0:
        idx = current[0] if current.size else 0
        return _shape_like(pts[idx], data)
    m = c @ z / den
    d = ((z - m) ** 2).sum(axis=1)
    best = int(np.argmin(d))
    if current.size and d[current[0]] <= d[best] * (1.0 + _TIE_RTOL):
        best = int(current[0])
    return _shape_like(pts[best], data)


# -- robust weights -------------------------------------------------------------

def huber_psi(u, c: float = HUBER_C):
    return np.clip(u, -c, c)


def huber_weight(e, scale: float, c: float = HUBER_C):
    """``scale * psi(e / scale) / e``: exactly 1 inside the core, ``c scale / |e|`` outside."""
    e = np.abs(np.asarray(e, dtype=float))
    out = np.ones_like(e)
    tail = e > c * scale
    out[tail] = c * scale / e[tail]
    return out


def _feature_residuals(gram: np.ndarray, w: np.ndarray) -> np.ndarray:
    # |phi(x_l) - sum_j w_j phi(x_j)|^2 = K_ll - 2 (K w)_l + w'Kw
    kw = gram @ w
    r2 = np.diag(gram) - 2.0 * kw + w @ kw
    return np.sqrt(np.maximum(r2, 0.0))


def robust_scale(residuals: np.ndarray) -> float:
    """Gaussian-consistent mean absolute deviation about the median."""
    e = np.asarray(residuals, dtype=float)
    s = MAD_TO_SIGMA * float(np.mean(np.abs(e - np.median(e))))
    if s > 1e-12:
        return s
    # degenerate spread: fall back to the residual magnitude itself
    return MAD_TO_SIGMA * float(np.mean(e))


def irwls(data, kernel: KernelConfig = KernelConfig(), cfg: RobustConfig = RobustConfig()) -> IrwlsResult:
    """Huber M-estimate of the feature-space mean, via kernel evaluations only.

    Returns normalised, strictly positive weights of the data points.
    """
    pts = as_points(data)
    n = len(pts)
    if n < 2:
        raise ValueError("IRWLS needs at least two points")
    z = pts / kernel.scales(pts.shape[1])
    gram = kernel_matrix(z, z)
    w = np.full(n, 1.0 / n)
    e = _feature_residuals(gram, w)
    scale = cfg.scale if cfg.scale is not None else robust_scale(e)
    if not scale > 0:
        # every residual is zero: the uniform weights are already the fixed point
        return IrwlsResult(w, 0.0, 0, True)
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        new = huber_weight(e, scale, cfg.c)
        new /= new.sum()
        delta = float(np.max(np.abs(new - w)))
        w = new
        if delta < cfg.tol:
            converged = True
            break
        e = _feature_residuals(gram, w)
    return IrwlsResult(w, float(scale), it, converged)


def irwls_weights(data, kernel: KernelConfig = KernelConfig(), cfg: RobustConfig = RobustConfig()) -> np.ndarray:
    res = irwls(data, kernel, cfg)
    if not res.converged:
        log.warning("IRWLS stopped after %d iterations without converging", res.iterations)
    return res.weights


# -- trajectories ---------------------------------------------------------------

@dataclass(frozen=True)
class SparseOptions:
    n: Optional[int] = None
    t_nu: float = 1e-3
    coverage: Optional[float] = None


def run(data, variant: str = "ms", kernel: KernelConfig = KernelConfig(), *,
        weights=None, robust: RobustConfig = RobustConfig(),
        sparse: SparseOptions = SparseOptions(), tol: float = 1e-6,
        max_iters: int = 200) -> ModeSeekResult:
    """Run one mode-seeking variant from every data point.

    ``tol`` is the step-size threshold in bandwidth units.  ``weights``
    replaces the uniform weights of the non-robust variants.
    """
    from . import sparse as sparse_mod

    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    pts = as_points(data)
    n, dim = pts.shape
    h = kernel.scales(dim)
    z = pts / h
    norm = kernel.norm(dim)

    robust_variant = variant.startswith("r")
    if robust_variant:
        w = irwls_weights(pts, kernel, robust) if n > 1 else np.ones(1)
    else:
        w = _weights(weights, n)

    basis = None
    if variant.lstrip("r").startswith("ss"):
        basis = sparse_mod.select_subset(pts, kernel, n=sparse.n, t_nu=sparse.t_nu,
                                           weights=w, coverage=sparse.coverage)
        center_index = basis.indices
        wc = basis.alphas
    else:
        center_index = np.arange(n)
        wc = w
    centers = z[center_index]

    if "meds" in variant:
        res = _medoid_trajectories(z, centers, wc, norm, max_iters)
    else:
        res = _mean_trajectories(z, centers, wc, norm, tol, max_iters)
    modes_z, iters, conv, dens, paths = res
    return ModeSeekResult(
        variant=variant,
        modes=modes_z * h,
        iterations=iters,
        converged=conv,
        density=dens,
        center_weights=wc,
        center_index=np.asarray(center_index),
        paths=paths,
        basis=basis,
    )


def _mean_trajectories(z, centers, wc, norm, tol, max_iters):
    n = len(z)
    pos = z.copy()
    iters = np.zeros(n, dtype=int)
    conv = np.zeros(n, dtype=bool)
    finishing = np.zeros(n, dtype=bool)
    weighted_centers = wc[:, None] * centers
    rows = []
    active = np.arange(n)
    for j in range(max_iters + 1):
        if active.size == 0:
            break
        k = kernel_matrix(pos[active], centers)
        den = k @ wc
        row = np.full(n, np.nan)
        row[active] = norm * den
        rows.append(row)
        # converged points leave once the density at their final position is in
        fin = finishing[active]
        idx = active[~fin]
        if j == max_iters or idx.size == 0:
            break
        k, den = k[~fin], den[~fin]
        ok = den > 0
        new = pos[idx].copy()
        new[ok] = (k[ok] @ weighted_centers) / den[ok][:, None]
        step = np.sqrt(((new - pos[idx]) ** 2).sum(axis=1))
        pos[idx] = new
        iters[idx[ok]] += 1
        done = ok & (step < tol)
        conv[idx[done]] = True
        finishing[idx[done]] = True
        # an isolated point cannot move; its density is already recorded
        active = idx[ok]
    return pos, iters, conv, np.vstack(rows), None


def _nearest_datum(m: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of (and squared distance to) the datum nearest each row of ``m``;
    equal distances go to the lowest index."""
    if z.shape[1] != 1:
        d = sqdist(m, z)
        best = np.argmin(d, axis=1)
        return best, d[np.arange(len(m)), best]
    v = z[:, 0]
    order = np.argsort(v, kind="stable")
    sv = v[order]
    # lowest original index among duplicates of each sorted value
    first = np.r_[True, sv[1:] != sv[:-1]]
    group = np.cumsum(first) - 1
    rep = np.minimum.reduceat(order, np.flatnonzero(first))[group]
    q = m[:, 0]
    hi = np.clip(np.searchsorted(sv, q), 0, len(sv) - 1)
    lo = np.clip(hi - 1, 0, len(sv) - 1)
    dl = (sv[lo] - q) ** 2
    dh = (sv[hi] - q) ** 2
    il, ih = rep[lo], rep[hi]
    take_lo = (dl < dh) | ((dl == dh) & (il < ih))
    return np.where(take_lo, il, ih), np.where(take_lo, dl, dh)


def _medoid_successors(z, centers, wc):
    k = kernel_matrix(z, centers)
    den = k @ wc
    n = len(z)
    succ = np.arange(n)
    ok = den > 0
    m = np.zeros_like(z)
    m[ok] = (k[ok] @ (wc[:, None] * centers)) / den[ok][:, None]
    best, dmin = _nearest_datum(m, z)
    own = ((z - m) ** 2).sum(axis=1)
    move = ok & (own > dmin * (1.0 + _TIE_RTOL))
    succ[move] = best[move]
    return succ, den


def _medoid_trajectories(z, centers, wc, norm, max_iters):
    n = len(z)
    succ, den = _medoid_successors(z, centers, wc)
    f = norm * den
    cur = np.arange(n)
    iters = np.zeros(n, dtype=int)
    alive = np.ones(n, dtype=bool)
    paths = [cur.copy()]
    rows = [f.copy()]
    for _ in range(max_iters):
        nxt = succ[cur]
        moving = alive & (nxt != cur)
        alive &= moving
        if not moving.any():
            break
        cur = np.where(moving, nxt, cur)
        iters[moving] += 1
        paths.append(cur.copy())
        row = np.full(n, np.nan)
        row[moving] = f[cur[moving]]
        rows.append(row)
    conv = succ[cur] == cur
    return z[cur], iters, conv, np.vstack(rows), np.vstack(paths)


# -- pruning ---------------------------------------------------------------------

def _group_medoid(values: np.ndarray, counts: np.ndarray) -> np.ndarray:
    cost = np.sqrt(sqdist(values, values)) @ counts
    return values[int(np.argmin(cost))]


def prune_modes(modes, kernel: KernelConfig = KernelConfig(), medoid: bool = False) -> ClusterSet:
    """Group converged modes that lie within one bandwidth of each other.

    Distinct modes are scanned in order of first appearance; each joins the
    first group whose representative is within ``h`` or opens a new group.
    Representatives are the count-weighted mean (or medoid, for medoid-shift
    modes, so centres stay on data points).  A final pass merges groups whose
    representatives are still within ``h`` of each other.
    """
    pts = as_points(modes)
    h = kernel.scales(pts.shape[1])
    z = pts / h
    uniq, first, inverse, counts = np.unique(z, axis=0, return_index=True,
                                             return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    order = np.argsort(first, kind="stable")
    uniq, counts = uniq[order], counts[order]
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    inverse = rank[inverse]
    originals = pts[first[order]]  # unscaled, so medoid centres are exact modes

    groups: list[list[int]] = []
    reps: list[np.ndarray] = []
    totals: list[float] = []
    owner = np.empty(len(uniq), dtype=int)
    for u, (p, c) in enumerate(zip(uniq, counts)):
        for g, r in enumerate(reps):
            if float(((p - r) ** 2).sum()) <= 1.0:
                break
        else:
            g = len(reps)
            groups.append([])
            reps.append(p.copy())
            totals.append(0.0)
        groups[g].append(u)
        owner[u] = g
        if medoid:
            members = uniq[groups[g]]
            reps[g] = _group_medoid(members, counts[groups[g]].astype(float))
        else:
            totals[g] += c
            reps[g] = reps[g] + (p - reps[g]) * (c / totals[g])

    # merge groups whose representatives ended up within one bandwidth
    while len(reps) > 1:
        r = np.vstack(reps)
        d = sqdist(r, r)
        np.fill_diagonal(d, np.inf)
        a, b = np.unravel_index(int(np.argmin(d)), d.shape)
        if d[a, b] > 1.0:
            break
        a, b = min(a, b), max(a, b)
        groups[a].extend(groups[b])
        members = groups[a]
        cw = counts[members].astype(float)
        if medoid:
            reps[a] = _group_medoid(uniq[members], cw)
        else:
            reps[a] = (cw @ uniq[members]) / cw.sum()
        del groups[b], reps[b]
        owner[np.asarray(groups[a])] = a
        for g in range(b, len(groups)):
            owner[np.asarray(groups[g])] = g

    labels = owner[inverse]
    sizes = np.bincount(labels, minlength=len(reps))
    if medoid:
        centers = np.vstack([originals[int(np.argmin(((uniq - r) ** 2).sum(axis=1)))] for r in reps])
    else:
        centers = np.vstack(reps) * h
    return ClusterSet(labels=labels, centers=centers, sizes=sizes)


def segment(data, variant: str = "ms", kernel: KernelConfig = KernelConfig(), **kwargs):
    """Mode seeking followed by pruning; returns ``(result, clusters)``."""
    result = run(data, variant, kernel, **kwargs)
    clusters = prune_modes(result.modes, kernel, medoid=result.medoid)
    return result, clusters
