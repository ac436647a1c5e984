"""Wasserstein distances on the model spaces.

One-dimensional problems are solved exactly through quantile functions (the
circle via the optimal rotation of the lifted quantile), grid problems either
exactly by network simplex or by log-domain entropic OT with ε-scaling.  The
spectral dual upper bounds for ``W_2`` and ``W_p`` between a smoothed
empirical density and the invariant law live here as well.
"""

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .errors import InputError, NumericalError, ResourceError

EXACT_CELL_CAP = 4096
CERT_TOL = 1e-10
SINKHORN_TOL = 1e-7
GOLDEN_TOL = 1e-13


def _check_p(p):
    if not p >= 1:
        raise InputError("W_p needs p >= 1")


# -- one-dimensional measures ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class Measure1D:
    """Probability measure on ``[0, 1]`` stored through its quantile function.

    The quantile is piecewise linear in ``u``: on ``(ubreak[j], ubreak[j+1])``
    it equals ``qstart[j] + slope[j] * (u - ubreak[j])``.  Atoms have zero
    slope; piecewise-constant densities give linear pieces.
    """

    ubreak: np.ndarray
    qstart: np.ndarray
    slope: np.ndarray

    @classmethod
    def atoms(cls, x, w=None):
        x = np.asarray(x, dtype=float).ravel()
        w = np.full(len(x), 1.0 / len(x)) if w is None else np.asarray(w, dtype=float).ravel()
        if len(x) != len(w) or len(x) == 0:
            raise InputError("atoms and weights must be non-empty and of equal length")
        if np.any(w < 0):
            raise InputError("negative weight")
        order = np.argsort(x, kind="stable")
        x, w = x[order], w[order]
        keep = w > 0
        x, w = x[keep], w[keep]
        c = np.concatenate([[0.0], np.cumsum(w)])
        c /= c[-1]
        return cls(c, x, np.zeros(len(x)))

    @classmethod
    def density(cls, edges, masses):
        """Piecewise-constant density with the given bin masses."""
        edges = np.asarray(edges, dtype=float)
        masses = np.asarray(masses, dtype=float)
        if len(edges) != len(masses) + 1:
            raise InputError("need one more edge than masses")
        if np.any(masses < 0):
            raise InputError("negative mass")
        keep = masses > 0
        lo, hi, m = edges[:-1][keep], edges[1:][keep], masses[keep]
        m = m / m.sum()
        c = np.concatenate([[0.0], np.cumsum(m)])
        c[-1] = 1.0
        return cls(c, lo, (hi - lo) / m)

    @classmethod
    def uniform(cls):
        return cls(np.array([0.0, 1.0]), np.array([0.0]), np.array([1.0]))

    def mean(self):
        du = np.diff(self.ubreak)
        return float(np.sum(du * (self.qstart + 0.5 * self.slope * du)))


def _pow_integral(y0, y1, du, p):
    """Exact ``∫ |y(u)|^p du`` for y linear from y0 to y1 over length du."""
    if p == 2.0:
        return du * (y0 * y0 + y0 * y1 + y1 * y1) / 3.0
    if p == 1.0:
        same = (y0 >= 0) == (y1 >= 0)
        with np.errstate(invalid="ignore", divide="ignore"):
            cross = du * (y0 * y0 + y1 * y1) / (2.0 * np.abs(y1 - y0))
        return np.where(same, du * np.abs(y0 + y1) / 2.0, np.where(y1 == y0, 0.0, cross))
    dy = y1 - y0
    scale = np.maximum(np.abs(y0), np.abs(y1))
    small = np.abs(dy) <= 1e-6 * np.maximum(scale, 1e-300)
    ym = 0.5 * (y0 + y1)
    simpson = du * (np.abs(y0) ** p + 4 * np.abs(ym) ** p + np.abs(y1) ** p) / 6.0

    def F(y):
        return np.sign(y) * np.abs(y) ** (p + 1) / (p + 1)

    with np.errstate(invalid="ignore", divide="ignore"):
        exact = du * (F(y1) - F(y0)) / dy
    return np.where(small, simpson, exact)


def _quantile_pieces(ub, q0, sl, u):
    """Evaluate a piecewise-linear quantile at the left and right ends of the
    merged intervals ``u[k]..u[k+1]`` (pieces chosen by interval midpoints)."""
    mid = 0.5 * (u[:-1] + u[1:])
    j = np.clip(np.searchsorted(ub, mid, side="right") - 1, 0, len(q0) - 1)
    left = q0[j] + sl[j] * (u[:-1] - ub[j])
    right = q0[j] + sl[j] * (u[1:] - ub[j])
    return left, right


def _quantile_cost(a_ub, a_q, a_s, b, p):
    u = np.union1d(a_ub, b.ubreak)
    u = u[(u >= 0.0) & (u <= 1.0)]
    a_l, a_r = _quantile_pieces(a_ub, a_q, a_s, u)
    b_l, b_r = _quantile_pieces(b.ubreak, b.qstart, b.slope, u)
    return float(np.sum(_pow_integral(a_l - b_l, a_r - b_r, np.diff(u), p)))


def w_p_interval(a, b, p=2.0):
    """``W_p`` on ``[0, 1]`` by exact piecewise quantile integration."""
    _check_p(p)
    return _quantile_cost(a.ubreak, a.qstart, a.slope, b, float(p)) ** (1.0 / p)


def _lifted(a, theta):
    """Pieces of ``u -> Q̃_a(u + θ)`` on ``[0, 1]`` using ``Q̃(u+1) = Q̃(u) + 1``."""
    ub = np.concatenate([a.ubreak[:-1] - 1.0, a.ubreak[:-1], a.ubreak[:-1] + 1.0, [2.0]]) - theta
    q0 = np.concatenate([a.qstart - 1.0, a.qstart, a.qstart + 1.0])
    sl = np.concatenate([a.slope, a.slope, a.slope])
    lo = np.searchsorted(ub, 0.0, side="right") - 1
    hi = np.searchsorted(ub, 1.0, side="left")
    ub, q0, sl = ub[lo:hi + 1].copy(), q0[lo:hi].copy(), sl[lo:hi]
    q0[0] += sl[0] * (0.0 - ub[0])
    ub[0], ub[-1] = 0.0, 1.0
    return ub, q0, sl


def circle_cost(a, b, p, theta):
    """``∫_0^1 |Q̃_a(u + θ) − Q_b(u)|^p du`` (convex in θ)."""
    ub, q0, sl = _lifted(a, theta)
    return _quantile_cost(ub, q0, sl, b, p)


def _golden(f, lo, hi, tol=GOLDEN_TOL, return_x=False):
    res = optimize.minimize_scalar(f, bracket=None, bounds=(lo, hi), method="bounded",
                                   options={"xatol": tol, "maxiter": 500})
    # bounded Brent can stall on kinks; polish with a golden-section pass
    g = (math.sqrt(5) - 1) / 2
    a_, b_ = max(lo, res.x - 1e-3), min(hi, res.x + 1e-3)
    c, d = b_ - g * (b_ - a_), a_ + g * (b_ - a_)
    fc, fd = f(c), f(d)
    while b_ - a_ > tol:
        if fc < fd:
            b_, d, fd = d, c, fc
            c = b_ - g * (b_ - a_)
            fc = f(c)
        else:
            a_, c, fc = c, d, fd
            d = a_ + g * (b_ - a_)
            fd = f(d)
    mid = 0.5 * (a_ + b_)
    best = min((res.fun, res.x), (fc, c), (fd, d), (f(mid), mid))
    return best if return_x else best[0]


def w_p_circle(a, b, p=2.0):
    """``W_p`` on the circle ``[0, 1)`` with the wrap metric.

    Minimises the convex rotation cost ``θ -> ∫|Q̃_a(u+θ) − Q_b(u)|^p du``
    over ``θ ∈ [-1, 1]``; for ``p = 2`` against the uniform law the minimiser
    is explicit.
    """
    _check_p(p)
    p = float(p)
    if p == 2.0 and _is_uniform(b):
        return math.sqrt(max(_w2sq_circle_vs_uniform(a), 0.0))
    if p == 2.0 and _is_uniform(a):
        return math.sqrt(max(_w2sq_circle_vs_uniform(b), 0.0))
    if p == 1.0 and _is_uniform(b) and not np.any(a.slope):
        return _w1_circle_atoms_vs_uniform(a)
    if p == 1.0 and _is_uniform(a) and not np.any(b.slope):
        return _w1_circle_atoms_vs_uniform(b)
    cost = lambda t: circle_cost(a, b, p, t)  # noqa: E731
    best, theta = _golden(cost, -1.0, 1.0, return_x=True)
    if not np.any(a.slope) and not np.any(b.slope):
        best = min(best, *(cost(t) for t in _nearest_kinks(a, b, theta)))
    return max(best, 0.0) ** (1.0 / p)


def _nearest_kinks(a, b, theta):
    """Rotations next to ``theta`` where a break of ``a`` meets a break of ``b``.

    Between two atomic measures the rotation cost is piecewise linear, so
    its minimum sits exactly on one of these kinks.
    """
    breaks = np.concatenate([a.ubreak - 1.0, a.ubreak, a.ubreak + 1.0])
    target = b.ubreak + theta
    idx = np.clip(np.searchsorted(breaks, target), 1, len(breaks) - 1)
    left = breaks[idx - 1] - b.ubreak
    right = breaks[idx] - b.ubreak
    out = []
    below, above = left[left <= theta], right[right >= theta]
    if below.size:
        out.append(float(below.max()))
    if above.size:
        out.append(float(above.min()))
    return [t for t in out if -1.0 <= t <= 1.0]


def _is_uniform(m):
    return len(m.qstart) == 1 and m.qstart[0] == 0.0 and m.slope[0] == 1.0


def _w2sq_circle_vs_uniform(a):
    # ∫(Q(u) − u)² du − (∫(Q(u) − u) du)²
    u = a.ubreak
    du = np.diff(u)
    y0 = a.qstart - u[:-1]
    y1 = a.qstart + a.slope * du - u[1:]
    second = np.sum(du * (y0 * y0 + y0 * y1 + y1 * y1) / 3.0)
    first = np.sum(du * (y0 + y1) / 2.0)
    return float(second - first * first)


def _w1_circle_atoms_vs_uniform(a):
    # W_1 = min_t ∫ |F(x) − x − t| dx, with F − x linear of slope −1 between atoms
    x = np.concatenate([[0.0], a.qstart, [1.0]])
    level = a.ubreak  # F on [x_j, x_{j+1}) is ubreak[j]
    dx = np.diff(x)
    y0 = level - x[:-1]
    y1 = level - x[1:]

    def cost(t):
        return float(np.sum(_pow_integral(y0 - t, y1 - t, dx, 1.0)))

    lo, hi = float(min(y0.min(), y1.min())), float(max(y0.max(), y1.max()))
    return _golden(cost, lo, hi)


def empirical_measure_1d(traj, start=0, stop=None):
    """Occupation measure of a stored 1D path with trapezoid time weights."""
    stop = len(traj.points) if stop is None else stop
    return Measure1D.atoms(traj.points[start:stop, 0], traj.weights(start, stop))


def invariant_measure_1d(space, pieces=4096):
    """Invariant law as a 1D measure (uniform exactly; otherwise a fine
    piecewise-linear quantile from the tabulated inverse CDF)."""
    if space.is_uniform:
        return Measure1D.uniform()
    u = np.linspace(0.0, 1.0, pieces + 1)
    q = space.quantile(u)
    return Measure1D(u, q[:-1], np.diff(q) / np.diff(u))


def w_p_1d(space, a, b, p=2.0):
    """Dispatch on the topology of a one-dimensional space."""
    return w_p_circle(a, b, p) if space.is_torus else w_p_interval(a, b, p)


def transport_lp(a, b, cost):
    """Brute-force transportation LP (HiGHS).  Returns the optimal cost.

    Used as an independent oracle; fine for a few hundred atoms.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, m = len(a), len(b)
    rows = []
    from scipy.sparse import coo_matrix, vstack

    ii = np.repeat(np.arange(n), m)
    jj = np.tile(np.arange(m), n)
    idx = np.arange(n * m)
    rows.append(coo_matrix((np.ones(n * m), (ii, idx)), shape=(n, n * m)))
    rows.append(coo_matrix((np.ones(n * m), (jj, idx)), shape=(m, n * m)))
    res = optimize.linprog(np.asarray(cost, dtype=float).ravel(),
                           A_eq=vstack(rows).tocsr(), b_eq=np.concatenate([a, b]),
                           bounds=(0, None), method="highs",
                           options={"primal_feasibility_tolerance": 1e-10,
                                    "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise NumericalError(f"LP failed: {res.message}")
    return float(res.fun)


# -- grid measures --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Weights on the ``m^d`` cell centres ``(j + 1/2)/m`` of a periodic grid."""

    space: object
    m: int
    weights: np.ndarray

    def __post_init__(self):
        w = self.weights
        if w.shape != (self.m,) * self.space.d:
            raise InputError("weights must have shape (m,)*d")
        if np.any(w < 0):
            raise InputError("grid weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InputError(f"grid weights sum to {w.sum()!r}, not 1")

    @property
    def size(self):
        return self.weights.size

    def centers(self):
        g = (np.arange(self.m) + 0.5) / self.m
        mesh = np.meshgrid(*([g] * self.space.d), indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.space.d)


def uniform_grid(space, m):
    w = np.full((m,) * space.d, 1.0 / m**space.d)
    return GridMeasure(space, m, w / w.sum())


def bin_points(space, points, weights, m):
    """Nearest-cell binning (torus cells ``[j/m, (j+1)/m)``)."""
    pts = np.asarray(points, dtype=float).reshape(-1, space.d)
    idx = np.minimum((pts * m).astype(np.int64), m - 1)
    flat = np.ravel_multi_index(tuple(idx.T), (m,) * space.d)
    w = np.bincount(flat, weights=np.asarray(weights, dtype=float), minlength=m**space.d)
    w = w / w.sum()
    return GridMeasure(space, m, w.reshape((m,) * space.d))


def mix(a, b, theta):
    """``(1 − θ) a + θ b`` for grid measures on the same grid."""
    w = (1.0 - theta) * a.weights + theta * b.weights
    return GridMeasure(a.space, a.m, w / w.sum())


def _axis_cost(m, p_axis=2.0):
    g = np.arange(m) / m
    diff = np.abs(g[:, None] - g[None, :])
    diff = np.minimum(diff, 1.0 - diff)
    return diff**p_axis


@lru_cache(maxsize=8)
def _dense_cost(d, m, p, torus_topology=True):
    g = (np.arange(m) + 0.5) / m
    mesh = np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)
    diff = np.abs(mesh[:, None, :] - mesh[None, :, :])
    if torus_topology:
        diff = np.minimum(diff, 1.0 - diff)
    c = np.sqrt((diff * diff).sum(-1)) ** p
    c.setflags(write=False)
    return c


def _same_grid(a, b):
    if a.m != b.m or a.space.d != b.space.d:
        raise InputError("measures must live on the same grid")


def _pot():
    for backend in ("TENSORFLOW", "JAX", "PYTORCH", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{backend}", "1")
    import ot

    return ot


def w_p_grid_exact(a, b, p=2.0, cap=EXACT_CELL_CAP, return_plan=False):
    """Exact ``W_p`` between grid measures by network simplex.

    Optimality is certified from the returned dual potentials: all reduced
    costs must be nonnegative and complementary slackness must hold, both to
    ``1e-10`` relative to the cost scale.
    """
    _check_p(p)
    _same_grid(a, b)
    if a.size > cap:
        raise ResourceError(f"{a.size} cells exceed the exact-solver cap {cap}; "
                            "use w_p_grid_sinkhorn")
    ot = _pot()
    cost = _dense_cost(a.space.d, a.m, float(p), a.space.is_torus)
    wa, wb = a.weights.ravel(), b.weights.ravel()
    ia, ib = np.flatnonzero(wa > 0), np.flatnonzero(wb > 0)
    c = np.ascontiguousarray(cost[np.ix_(ia, ib)])
    xa, xb = wa[ia] / wa[ia].sum(), wb[ib] / wb[ib].sum()
    plan, log = ot.emd(xa, xb, c, numItermax=100_000_000, log=True)
    if log.get("warning"):
        raise NumericalError(f"network simplex did not finish: {log['warning']}")
    scale = max(float(c.max()), 1e-300)
    reduced = c - log["u"][:, None] - log["v"][None, :]
    if reduced.min() < -CERT_TOL * scale:
        raise NumericalError("optimality certificate failed (negative reduced cost)",
                             {"min_reduced": float(reduced.min())})
    slack = float((plan * np.abs(reduced)).sum())
    if slack > CERT_TOL * scale:
        raise NumericalError("optimality certificate failed (complementary slackness)",
                             {"slack": slack})
    value = float(max((plan * c).sum(), 0.0)) ** (1.0 / p)
    return (value, plan) if return_plan else value


# -- entropic solver ------------------------------------------------------------


class _SeparableKernel:
    """Log-kernel ``−C/ε`` for ``C = Σ_axes δ_axis²`` on a periodic grid."""

    def __init__(self, d, m):
        self.d, self.m = d, m
        self.c1 = _axis_cost(m, 2.0)
        with np.errstate(divide="ignore"):
            self.logc1 = np.log(self.c1)

    def lse(self, t, eps, weighted_axis=None):
        """``log Σ_j exp(t_j − C_ij/ε) [C^axis_ij]`` for all i."""
        out = t
        for ax in range(self.d):
            k = -self.c1 / eps
            if ax == weighted_axis:
                k = k + self.logc1
            moved = np.moveaxis(out, ax, -1)
            moved = logsumexp(moved[..., None, :] + k, axis=-1)
            out = np.moveaxis(moved, -1, ax)
        return out


class _DenseKernel:
    def __init__(self, cost):
        self.cost = cost
        with np.errstate(divide="ignore"):
            self.logc = np.log(cost)

    def lse(self, t, eps, weighted_axis=None):
        k = -self.cost / eps
        if weighted_axis is not None:
            k = k + self.logc
        return logsumexp(t.ravel()[None, :] + k, axis=1).reshape(t.shape)


def w_p_grid_sinkhorn(a, b, p=2.0, reg=None, stages=8, tol=SINKHORN_TOL,
                      max_iter=200_000, dense_cap=EXACT_CELL_CAP, stage_cap=2000,
                      relax=1.5):
    """Entropic ``W_p`` by log-domain Sinkhorn with ε-scaling.

    The regularisation starts at ``2**stages`` times the final value and is
    halved each stage; the final value defaults to ``1e-4`` times the median
    pairwise cost.  Iteration stops once both marginal ``L¹`` violations are
    below ``tol``.  Returns ``(W_p, violation)`` where ``W_p`` uses only the
    transport part of the objective, so it is biased upward relative to the
    exact value.

    Parameters
    ----------
    relax : float
        Over-relaxation factor in ``[1, 2)`` for the dual updates.  Values
        near 1.5 cut the iteration count several-fold at small
        regularisation; 1 gives plain Sinkhorn.
    """
    _check_p(p)
    _same_grid(a, b)
    if not 1.0 <= relax < 2.0:
        raise InputError("relaxation factor must lie in [1, 2)")
    d, m = a.space.d, a.m
    if not a.space.is_torus:
        raise InputError("grid solvers assume periodic grids")
    p = float(p)
    if p == 2.0:
        kern = _SeparableKernel(d, m)
        axis_terms = range(d)
        med = _median_sq_cost(d, m)
    else:
        if a.size > dense_cap:
            raise ResourceError(f"dense entropic solve limited to {dense_cap} cells")
        cost = _dense_cost(d, m, p, True)
        kern = _DenseKernel(cost)
        axis_terms = [0]
        med = float(np.median(cost))
    final = 1e-4 * med if reg is None else float(reg)
    if not final > 0:
        raise InputError("regularisation must be positive")
    with np.errstate(divide="ignore"):
        la, lb = np.log(a.weights), np.log(b.weights)
    live_a, live_b = np.isfinite(la), np.isfinite(lb)
    f = np.where(live_a, 0.0, -np.inf)
    g = np.where(live_b, 0.0, -np.inf)

    def relaxed(old, new, live, w):
        return np.where(live, (1.0 - w) * np.where(live, old, 0.0) + w * new, -np.inf)

    total_iter = 0
    viol = np.inf
    for s in range(stages, -1, -1):
        eps = final * 2.0**s
        stage_tol = tol if s == 0 else max(tol, 1e-4)
        # plain updates on coarse stages, relaxed ones where convergence is slow
        w = relax if s == 0 else 1.0
        it = 0
        while s == 0 or it < stage_cap:
            f = relaxed(f, eps * (la - kern.lse(g / eps, eps)), live_a, w)
            g = relaxed(g, eps * (lb - kern.lse(f / eps, eps)), live_b, w)
            it += 1
            total_iter += 1
            if it % 25 == 0:
                row = np.where(live_a, np.exp(f / eps + kern.lse(g / eps, eps)), 0.0)
                viol = float(np.abs(row - a.weights).sum())
                if w != 1.0:
                    col = np.where(live_b, np.exp(g / eps + kern.lse(f / eps, eps)), 0.0)
                    viol = max(viol, float(np.abs(col - b.weights).sum()))
                if not np.isfinite(viol):
                    raise NumericalError("Sinkhorn diverged",
                                         {"iterations": total_iter, "eps": eps})
                if viol < stage_tol:
                    break
            if total_iter >= max_iter:
                raise NumericalError("Sinkhorn did not converge",
                                     {"violation": viol, "iterations": total_iter, "eps": eps})
    # transport part Σ P_ij C_ij
    with np.errstate(invalid="ignore"):
        cost = 0.0
        for ax in axis_terms:
            inner = kern.lse(g / eps, eps, weighted_axis=ax)
            cost += float(np.where(live_a, np.exp(f / eps + inner), 0.0).sum())
    return max(cost, 0.0) ** (1.0 / p), viol


@lru_cache(maxsize=16)
def _median_sq_cost(d, m):
    c1 = _axis_cost(m, 2.0)[0]
    if m**d <= 1 << 20:
        vals = c1
        for _ in range(d - 1):
            vals = (vals[:, None] + c1[None, :]).ravel()
        return float(np.median(vals))
    rng = np.random.default_rng(0)
    return float(np.median(c1[rng.integers(0, m, (1 << 20, d))].sum(1)))


# -- densities near the uniform law ------------------------------------------------

MA_TOL = 1e-9


class _PeriodicCalculus:
    """Spectral derivatives of periodic grid functions on ``[0,1)^d``."""

    def __init__(self, shape):
        self.shape = shape
        self.d = len(shape)
        freqs = [2j * np.pi * np.fft.fftfreq(n, 1.0 / n) for n in shape]
        self.k = np.meshgrid(*freqs, indexing="ij", sparse=True)
        lap = sum((k * k).real for k in self.k)
        lap = np.broadcast_to(lap, shape).copy()
        lap.flat[0] = 1.0
        self.lap = lap

    def hessian(self, uh):
        H = np.empty((self.d, self.d) + self.shape)
        for i in range(self.d):
            for j in range(i, self.d):
                H[i, j] = np.fft.ifftn(self.k[i] * self.k[j] * uh).real
                H[j, i] = H[i, j]
        return H

    def gradient(self, uh):
        return np.stack([np.fft.ifftn(k * uh).real for k in self.k])

    def inverse_laplacian(self, rhs):
        vh = np.fft.fftn(rhs) / self.lap
        vh.flat[0] = 0.0
        return vh


def _monge_ampere_residual(H, rho):
    M = np.moveaxis(H, (0, 1), (-2, -1)) + np.eye(H.shape[0])
    res = np.linalg.det(M) - rho
    return M, res - res.mean()


def _convex(M):
    return bool(np.all(np.linalg.eigvalsh(M)[..., 0] > 0))


def w2_grid_to_uniform(a, tol=MA_TOL, max_newton=60):
    """``W_2`` between the grid density of ``a`` and the uniform law on the torus.

    The cell weights are read as a density ``ρ`` sampled on the grid and the
    optimal map ``x + ∇φ`` is found from the Monge–Ampère equation
    ``det(I + D²φ) = ρ``; then ``W_2² = ∫ |∇φ|² ρ``.  Derivatives are spectral,
    Newton steps are solved by GMRES preconditioned with the inverse
    Laplacian, and a backtracking line search keeps ``x²/2 + φ`` convex at
    every node.  Unlike the atomic solvers, mass is not forced to move in
    whole cells, so displacements far below the grid spacing are resolved.

    Raises
    ------
    NumericalError
        If Newton stalls (for instance when empty cells make the equation
        degenerate).
    """
    from scipy.sparse.linalg import LinearOperator, gmres

    if not a.space.is_torus:
        raise InputError("the density solver needs a periodic grid")
    shape = a.weights.shape
    rho = a.weights * a.size
    calc = _PeriodicCalculus(shape)
    n = rho.size

    def precondition(v):
        return np.fft.ifftn(calc.inverse_laplacian(v.reshape(shape))).real.ravel()

    uh = calc.inverse_laplacian(rho - 1.0)
    M, res = _monge_ampere_residual(calc.hessian(uh), rho)
    err = float(np.abs(res).max())
    for it in range(max_newton):
        if err < tol:
            break
        if a.space.d == 1:
            cof = np.ones(shape + (1, 1))
        else:
            cof = np.linalg.inv(M).swapaxes(-1, -2) * np.linalg.det(M)[..., None, None]

        def jac(v):
            Hv = calc.hessian(np.fft.fftn(v.reshape(shape)))
            out = np.einsum("...ij,ij...->...", cof, Hv)
            return (out - out.mean()).ravel()

        op = LinearOperator((n, n), jac)
        step, _ = gmres(op, -res.ravel(), M=LinearOperator((n, n), precondition),
                        rtol=min(1e-3, err), atol=0.0, restart=40, maxiter=25)
        sh = np.fft.fftn(step.reshape(shape))
        sh.flat[0] = 0.0
        t = 1.0
        while True:
            cand = uh + t * sh
            Mc, rc = _monge_ampere_residual(calc.hessian(cand), rho)
            ec = float(np.abs(rc).max())
            if _convex(Mc) and ec < (1.0 - 1e-4 * t) * err:
                break
            t *= 0.5
            if t < 1e-8:
                raise NumericalError("Monge-Ampere Newton stalled",
                                     {"residual": err, "newton_steps": it,
                                      "min_density": float(rho.min())})
        uh, M, res, err = cand, Mc, rc, ec
    else:
        raise NumericalError("Monge-Ampere Newton hit its step cap", {"residual": err})
    grad = calc.gradient(uh)
    return math.sqrt(max(float(np.mean((grad * grad).sum(0) * rho)), 0.0))


# -- spectral dual bounds ---------------------------------------------------------


@dataclass(frozen=True)
class DualBounds:
    """Upper bounds for the smoothed empirical measure ``μ_{T,ε,ε}``.

    ``am0`` bounds ``W_2^2`` (flux over logarithmic mean); ``l17`` bounds
    ``W_p`` by ``p ||∇(−L̂)^{-1}(f−1)||_p``; ``l2_sq`` is
    ``||∇(−L̂)^{-1}(f_{T,ε}−1)||²_{L²(μ)}``, which equals ``Ξ_ε/T``.
    """

    am0: float
    l17: float
    l2_sq: float
    p: float


def log_mean(f):
    """``(f − 1)/log f`` on ``f > 0`` with the removable value 1 at ``f = 1``."""
    f = np.asarray(f, dtype=float)
    pos = f > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        lf = np.log(np.where(pos, f, 1.0))
        val = (f - 1.0) / lf
    near = np.abs(f - 1.0) < 1e-8
    out = np.where(near, 1.0 + 0.5 * (f - 1.0), val)
    return np.where(pos, out, 0.0)


def w2_dual_upper_bound(psi, basis, horizon, eps, grid, p=2.0):
    """Evaluate both dual bounds on quadrature ``grid = (points, weights)``.

    ``weights`` integrate against the invariant law.  The gradient field is
    ``Σ_i exp(−ελ_i) ψ_i/(sqrt(T) λ_i) ∇φ_i``.
    """
    if not eps > 0:
        raise InputError("smoothing time must be positive")
    pts, qw = grid
    lam = basis.eigenvalues
    psi = np.asarray(psi, dtype=float)[: basis.N]
    coef = np.exp(-eps * lam) * psi / math.sqrt(horizon)
    f = 1.0 + basis.evaluate(pts) @ coef
    f = np.maximum(f, 1e-12)
    grad = np.einsum("qnd,n->qd", basis.gradient(pts), coef / lam)
    g2 = (grad * grad).sum(-1)
    mix_density = (1.0 - eps) * f + eps
    am0 = float(qw @ (g2 / log_mean(mix_density)))
    l17 = float(p * (qw @ g2 ** (p / 2.0)) ** (1.0 / p))
    return DualBounds(am0=am0, l17=l17, l2_sq=float(qw @ g2), p=float(p))
