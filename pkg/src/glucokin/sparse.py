"""Sparse approximation of the weighted kernel mean.

A subset ``I`` of the data is picked greedily so that its kernel functions
cover the data as evenly as possible, and weights ``alpha`` are fitted so
that ``sum_i alpha_i phi(x_i)`` is the feature-space projection of
``sum_l w_l phi(x_l)`` onto the span of the subset.  Shift steps then cost
``O(N)`` kernel evaluations instead of ``O(L)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .modeseek import (
    KernelConfig,
    IsolatedPointError,
    _TIE_RTOL,
    _weights,
    as_points,
    kernel_matrix,
    profile,
    sqdist,
)

log = logging.getLogger(__name__)

DEFAULT_T_NU = 1e-3
# the gradient rule only applies once every datum has kernel affinity of at
# least this much to some basis point; before that, gains can be flat simply
# because a far cluster is still uncovered
COVERAGE_FLOOR = 0.995
_RIDGE = 1e-8


class DegenerateBasisError(ArithmeticError):
    """No positive weight survived the alpha solve."""


@dataclass
class SparseBasis:
    indices: np.ndarray
    alphas: np.ndarray
    nu_trace: np.ndarray
    n_nu: int

    @property
    def N(self) -> int:
        return len(self.indices)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "N_nu": self.n_nu,
            "indices": [int(i) for i in self.indices],
            "alphas": [float(a) for a in self.alphas],
        }


def gram(subset, kernel: KernelConfig = KernelConfig()) -> np.ndarray:
    pts = as_points(subset)
    z = pts / kernel.scales(pts.shape[1])
    return kernel_matrix(z, z)


def xi(subset, data, w=None, kernel: KernelConfig = KernelConfig()) -> np.ndarray:
    """``xi_m = sum_j w_j k(|x_m - x_j|^2 / h^2)`` for every subset point."""
    sub = as_points(subset)
    pts = as_points(data)
    if sub.shape[1] != pts.shape[1]:
        raise ValueError("subset and data differ in dimension")
    w = _weights(w, len(pts))
    h = kernel.scales(pts.shape[1])
    return kernel_matrix(sub / h, pts / h) @ w


def _finish(alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keep = alpha > 0
    if not keep.any():
        raise DegenerateBasisError("all alpha entries are non-positive")
    alpha = np.where(keep, alpha, 0.0)
    return alpha[keep] / alpha[keep].sum(), np.flatnonzero(keep)


def _ridge_solve(g: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    n = len(g)
    lam = _RIDGE * float(np.trace(g)) / n
    return linalg.solve(g + lam * np.eye(n), rhs, assume_a="pos")


def solve_alpha(g, xi_vec, return_index: bool = False):
    """Solve ``(Xi + lambda I) alpha = xi``, drop negatives and renormalise.

    ``lambda = 1e-8 trace(Xi) / N`` keeps systems with duplicated points
    solvable.  With ``return_index`` the positions of the surviving entries
    are returned as well.
    """
    g = np.atleast_2d(np.asarray(g, dtype=float))
    v = np.atleast_1d(np.asarray(xi_vec, dtype=float))
    if g.shape != (len(v), len(v)):
        raise ValueError(f"Gram matrix {g.shape} does not match xi of length {len(v)}")
    alpha, keep = _finish(_ridge_solve(g, v))
    return (alpha, keep) if return_index else alpha


def _alpha_for(kz: np.ndarray, w: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Projection weights for subset ``idx`` given kernel rows ``kz[idx]``.

    Written as a correction to ``w_I``: ``alpha = w_I + Xi^-1 Xi_{I,rest} w_rest``.
    This is the same solution as ``Xi^-1 xi`` but recovers ``alpha = w``
    exactly when the subset is the whole data set.
    """
    rows = kz[: len(idx)]
    g = rows[:, idx]
    rest = np.ones(rows.shape[1], dtype=bool)
    rest[idx] = False
    residual = rows[:, rest] @ w[rest]
    if not residual.any():
        return _finish(w[idx].copy())
    return _finish(w[idx] + _ridge_solve(g, residual))


def select_subset(data, kernel: KernelConfig = KernelConfig(), *, n: Optional[int] = None,
                  t_nu: float = DEFAULT_T_NU, weights=None,
                  coverage: Optional[float] = None) -> SparseBasis:
    """Greedy min-max kernel selection followed by the alpha solve.

    The seed is the datum with the largest weighted kernel sum.  Each step adds
    the datum whose largest affinity to the current subset is smallest, and
    ``nu`` records that affinity; it is non-decreasing in ``N`` and bounded by
    ``k(0) = 1``, which is used as the normaliser.  With ``n`` the subset has
    exactly ``n`` points; otherwise growth stops at the first ``N`` whose
    gain ``nu(N+1) - nu(N)`` is at most ``t_nu``, once ``nu(N)`` clears the
    coverage floor (default :data:`COVERAGE_FLOOR`).
    """
    floor = COVERAGE_FLOOR if coverage is None else coverage
    pts = as_points(data)
    L = len(pts)
    w = _weights(weights, L)
    if n is not None:
        if not 1 <= n <= L:
            raise ValueError(f"subset size must lie in [1, {L}], got {n}")
    elif not t_nu > 0:
        raise ValueError("t_nu must be positive")
    z = pts / kernel.scales(pts.shape[1])

    seed = int(np.argmax(kernel_matrix(z, z) @ w))
    target = n if n is not None else L
    idx = [seed]
    rows = [kernel_matrix(z[seed:seed + 1], z)[0]]
    cover = rows[0].copy()
    taken = np.zeros(L, dtype=bool)
    taken[seed] = True
    nu = []
    n_nu = None
    while len(idx) < L:
        free = np.flatnonzero(~taken)
        j = int(free[np.argmin(cover[free])])
        nu.append(float(cover[j]))
        if n is None and len(nu) >= 2:
            if nu[-2] >= floor and nu[-1] - nu[-2] <= t_nu:
                n_nu = len(idx) - 1
                break
        if len(idx) == target:
            break
        idx.append(j)
        taken[j] = True
        row = kernel_matrix(z[j:j + 1], z)[0]
        rows.append(row)
        np.maximum(cover, row, out=cover)
    if n is None and n_nu is None:
        # the gain rule never fired: every point was needed
        n_nu = len(idx)
        nu.append(1.0)
    if n is not None:
        n_nu = len(idx)
    if len(nu) > n_nu:
        nu = nu[:n_nu]
    chosen = np.asarray(idx[:n_nu])
    kz = np.vstack(rows[:n_nu])
    try:
        alpha, keep = _alpha_for(kz, w, chosen)
    except DegenerateBasisError:
        # fall back to the kernel-smoothed mass at each basis point
        log.warning("degenerate alpha solve with N=%d; using xi weights", n_nu)
        alpha, keep = _finish(kz @ w)
    return SparseBasis(indices=chosen[keep], alphas=alpha, nu_trace=np.asarray(nu), n_nu=int(n_nu))


def sparse_shift_step(x, basis: SparseBasis, data, kernel: KernelConfig = KernelConfig(),
                      mode: str = "mean"):
    """One mean- or medoid-shift step driven by the basis points only."""
    if mode not in ("mean", "medoid"):
        raise ValueError("mode must be 'mean' or 'medoid'")
    pts = as_points(data)
    h = kernel.scales(pts.shape[1])
    q = np.atleast_1d(np.asarray(x, dtype=float))
    z = pts / h
    zc = z[basis.indices]
    c = basis.alphas * profile(((q / h - zc) ** 2).sum(axis=1))
    den = c.sum()
    if not den > 0:
        raise IsolatedPointError(f"no basis mass at {x!r}")
    m = c @ zc / den
    if mode == "mean":
        out = m * h
    else:
        d = ((z - m) ** 2).sum(axis=1)
        best = int(np.argmin(d))
        current = np.flatnonzero(np.all(pts == q, axis=1))
        if current.size and d[current[0]] <= d[best] * (1.0 + _TIE_RTOL):
            best = int(current[0])
        out = pts[best]
    return float(out[0]) if np.ndim(data) == 1 else out
