"""Spectral functionals of trajectories.

Everything here is a function of the normalised ergodic integrals
``ψ_i(T) = T^{-1/2} ∫_0^T φ_i(X_t) dt``: the quadratic functional
``Ξ(T) = Σ ψ_i²/λ_i`` and its heat-smoothed and time-shifted variants, the
smoothed empirical density, the Bernstein parameters of an observable and its
long-run variance, plus exact draws of the limit variable ``Ξ(∞)``.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InputError
from .model_space import invariant_density
from .spectral import spectral_tail_sum
from .wasserstein import GridMeasure

BERNSTEIN_P_GRID = np.round(np.arange(2.1, 10.0 + 1e-9, 0.1), 10)
DENSITY_FLOOR = 1e-12


# -- ergodic integrals ----------------------------------------------------------


def _segment(traj, start_time, stop_time):
    i0 = traj.index_of(start_time)
    i1 = traj.index_of(stop_time)
    if i1 <= i0:
        raise InputError("empty time window")
    return i0, i1 + 1


def psi_all(traj, basis, start_time=0.0, stop_time=None):
    """``ψ_i`` for every retained mode over the window ``[start, stop]``.

    The window length plays the role of ``T`` in the normalisation.
    """
    stop_time = traj.horizon if stop_time is None else stop_time
    i0, i1 = _segment(traj, start_time, stop_time)
    sums = basis.weighted_sums(traj.points[i0:i1], traj.weights(i0, i1))
    return sums / math.sqrt(stop_time - start_time)


def psi(traj, basis, i):
    """``ψ_i(T)`` for one mode (1-based)."""
    if not 1 <= i <= basis.N:
        raise InputError(f"mode index {i} outside 1..{basis.N}")
    return float(psi_all(traj, basis.truncated(i))[i - 1])


def xi_from_psi(psi_values, eigenvalues, eps=0.0):
    """``Σ exp(−2ελ_i) ψ_i²/λ_i`` (``eps = 0`` gives ``Ξ``)."""
    if eps < 0:
        raise InputError("smoothing time must be nonnegative")
    lam = np.asarray(eigenvalues, dtype=float)
    v = np.asarray(psi_values, dtype=float)
    n = min(len(v), len(lam))
    w = np.exp(-2.0 * eps * lam[:n]) / lam[:n] if eps else 1.0 / lam[:n]
    return float(np.dot(v[:n] * v[:n], w))


def xi_tail_bound(psi_values, basis):
    """Reported truncation bound ``C · Σ_{i>N} λ_i^{-2}``.

    ``C = 2 max_{i>N/2} λ_i ψ_i²`` is read off the upper half of the retained
    spectrum.  Infinite when the tail series diverges (``d >= 4``).
    """
    lam = basis.eigenvalues
    half = len(lam) // 2
    c = 2.0 * float(np.max(lam[half:] * np.asarray(psi_values)[half:] ** 2))
    try:
        return c * spectral_tail_sum(basis, 2.0)
    except DomainError:
        return math.inf


@dataclass(frozen=True)
class SpectralStatistics:
    """``ψ(T)`` with the functionals derived from it.

    ``xi`` is the retained sum only; ``xi_tail`` is its reported truncation
    bound and is never added in.
    """

    psi: np.ndarray
    horizon: float
    xi: float
    xi_tail: float
    xi_eps: float = None
    eps: float = None
    xi_bar: float = None
    xi_tilde: float = None
    r: float = None


def xi(traj, basis, eps=None):
    """Spectral statistics of the whole trajectory.

    Parameters
    ----------
    eps : float, optional
        Also evaluate the heat-smoothed ``Ξ_ε``.
    """
    v = psi_all(traj, basis)
    out = SpectralStatistics(psi=v, horizon=traj.horizon,
                             xi=xi_from_psi(v, basis.eigenvalues),
                             xi_tail=xi_tail_bound(v, basis))
    if eps is not None:
        out = _with(out, xi_eps=xi_from_psi(v, basis.eigenvalues, eps), eps=float(eps))
    return out


def _with(stats, **changes):
    return SpectralStatistics(**{**stats.__dict__, **changes})


def xi_smoothed(traj, basis, eps):
    """Heat-smoothed ``Ξ_ε(T) = Σ exp(−2ελ_i) ψ_i²/λ_i``."""
    if eps < 0:
        raise InputError("smoothing time must be nonnegative")
    return xi_from_psi(psi_all(traj, basis), basis.eigenvalues, eps)


def xi_shifted(traj, basis, r, mode, horizon=None):
    """Time-shifted variants of ``Ξ``.

    ``bar`` drops the initial stretch: ``ψ̄_i = (T−r)^{-1/2} ∫_r^T φ_i``.
    ``tilde`` shifts the window: ``ψ̃_i = T^{-1/2} ∫_r^{r+T} φ_i``, which needs a
    path of length ``T + r``.  ``horizon`` is ``T`` and defaults to the
    trajectory horizon (``bar``) or the horizon minus ``r`` (``tilde``).
    """
    if r < 0:
        raise InputError("shift must be nonnegative")
    if mode == "bar":
        T = traj.horizon if horizon is None else horizon
        if not T > r or T > traj.horizon + 1e-9:
            raise InputError("bar variant needs r < T <= trajectory horizon")
        v = psi_all(traj, basis, r, T)
    elif mode == "tilde":
        T = traj.horizon - r if horizon is None else horizon
        if T + r > traj.horizon + 1e-9 or not T > 0:
            raise InputError("tilde variant needs a trajectory of length T + r")
        v = psi_all(traj, basis, r, r + T)
    else:
        raise InputError(f"unknown shift mode {mode!r}")
    return xi_from_psi(v, basis.eigenvalues)


# -- smoothed empirical density ---------------------------------------------------


@dataclass(frozen=True)
class SmoothedDensity:
    """``f_{T,ε}`` on a cell-centred grid.

    ``values`` are the raw spectral values (possibly slightly negative);
    ``measure`` carries the floored, renormalised cell masses;
    ``floored_mass`` is the mass added by flooring at ``1e-12``.
    """

    values: np.ndarray
    measure: GridMeasure
    raw_mass: float
    floored_mass: float


def grid_points(d, m):
    """Cell centres ``(j + 1/2)/m`` of the ``m^d`` grid, shape ``(m^d, d)``."""
    g = (np.arange(m) + 0.5) / m
    return np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)


def density_values(psi_values, basis, horizon, eps, points):
    """``1 + T^{-1/2} Σ exp(−ελ_i) ψ_i φ_i(y)`` at the given points."""
    if not eps > 0:
        raise InputError("smoothing time must be positive")
    coef = np.exp(-eps * basis.eigenvalues) * np.asarray(psi_values)[: basis.N]
    return 1.0 + basis.evaluate(points) @ coef / math.sqrt(horizon)


def smoothed_density(psi_values, basis, horizon, eps, m):
    """Grid version of ``f_{T,ε}`` with respect to the invariant law.

    Cell masses are ``f(y) μ(cell)`` with midpoint quadrature; negative
    values from spectral truncation are floored at ``1e-12``.
    """
    space = basis.space
    pts = grid_points(space.d, m)
    f = density_values(psi_values, basis, horizon, eps, pts)
    cell_mu = invariant_density(space, pts[:, 0] if space.d == 1 else pts) / m**space.d
    cell_mu = cell_mu / cell_mu.sum()
    raw_mass = float(f @ cell_mu)
    floored = np.maximum(f, DENSITY_FLOOR)
    added = float((floored - f) @ cell_mu)
    w = floored * cell_mu
    measure = GridMeasure(space, m, (w / w.sum()).reshape((m,) * space.d))
    return SmoothedDensity(values=f.reshape((m,) * space.d), measure=measure,
                           raw_mass=raw_mass, floored_mass=added)


# -- Bernstein parameters ------------------------------------------------------------


@dataclass(frozen=True)
class DeviationParams:
    """Variance ``σ²(g)`` and sub-exponential scale ``𝔪(g)`` of an observable.

    ``rule`` records which dimension case fixed the scale: ``"d<2"``,
    ``"d=2"`` (with the minimising ``p``) or ``"d>2"``.
    """

    sigma_sq: float
    scale: float
    rule: str
    p_opt: float = None


def mu_quadrature(space, m):
    """Midpoint points and weights integrating against the invariant law."""
    pts = grid_points(space.d, m)
    w = invariant_density(space, pts[:, 0] if space.d == 1 else pts)
    return pts, w / w.sum()


def _flux_norms(basis, coeffs, m):
    lam = basis.eigenvalues[: len(coeffs)]
    pts, qw = mu_quadrature(basis.space, m)
    sub = basis.truncated(len(coeffs))
    grad = np.einsum("qnd,n->qd", sub.gradient(pts), coeffs / lam)
    return np.sqrt((grad * grad).sum(-1)), qw


def deviation_params(basis, coeffs, d=None, m=None):
    """Bernstein parameters of ``g = Σ c_i φ_i``.

    Parameters
    ----------
    coeffs : array
        Coefficients on the first ``len(coeffs)`` modes.
    d : float, optional
        Dimension parameter selecting the case; defaults to the space
        dimension.
    m : int, optional
        Quadrature resolution per axis for the ``L^p`` norms of the flux
        ``∇(−L̂)^{-1} g``; defaults to 256 (d=1), 128 (d=2), 24 otherwise.
    """
    c = np.atleast_1d(np.asarray(coeffs, dtype=float))
    if c.size == 0:
        raise InputError("empty coefficient vector")
    if c.size > basis.N:
        raise InputError("more coefficients than modes")
    d = basis.d if d is None else d
    lam = basis.eigenvalues[: c.size]
    energy = float(np.sum(c * c / lam))
    sigma_sq = 2.0 * energy
    if d < 2:
        return DeviationParams(sigma_sq, math.sqrt(energy), "d<2")
    m = m or {1: 256, 2: 128}.get(basis.d, 24)
    flux, qw = _flux_norms(basis, c, m)
    if d == 2:
        vals = [p / (p - 2.0) * float(qw @ flux**p) ** (1.0 / p) for p in BERNSTEIN_P_GRID]
        k = int(np.argmin(vals))
        return DeviationParams(sigma_sq, vals[k], "d=2", float(BERNSTEIN_P_GRID[k]))
    return DeviationParams(sigma_sq, float(qw @ flux**d) ** (1.0 / d), "d>2")


def bernstein_bound(params, horizon, level, alpha):
    """``2 exp(−Tξ²/(2σ² + α𝔪ξ))`` (stationary start)."""
    level = np.asarray(level, dtype=float)
    return 2.0 * np.exp(-horizon * level**2 / (2.0 * params.sigma_sq + alpha * params.scale * level))


# -- long-run variance -----------------------------------------------------------------


def mode_variance(basis, drift=None):
    """Per-mode ``V(φ_i)``.

    Without drift this is ``1/λ_i``.  A constant torus drift ``z`` rotates
    the Fourier pair of frequency ``k`` at rate ``ω = 2πk·z``, which gives
    ``a/(a² + ω²)`` with ``a = λ_i``.
    """
    lam = basis.eigenvalues
    z = basis.space.drift_vector if drift is None else np.asarray(drift, dtype=float)
    if not np.any(z):
        return 1.0 / lam
    if basis.family != "torus":
        raise InputError("closed-form drift variance needs a torus basis")
    omega = 2 * np.pi * (basis.freqs @ z)
    return lam / (lam * lam + omega * omega)


def drift_mode_variance(basis, drift=None):
    """``V(Zφ_i)`` for a constant torus drift: ``ω² a/(a² + ω²)``."""
    lam = basis.eigenvalues
    z = basis.space.drift_vector if drift is None else np.asarray(drift, dtype=float)
    if not np.any(z):
        return np.zeros_like(lam)
    omega = 2 * np.pi * (basis.freqs @ z)
    return omega * omega * lam / (lam * lam + omega * omega)


def long_run_variance(basis, coeffs, trajectories=None, n_batches=20):
    """``V(g) = ∫_0^∞ μ(g P_t g) dt`` for ``g = Σ c_i φ_i``.

    Closed form for zero and constant torus drift (cosine and sine of the
    same frequency do not mix in the integral).  Any other case falls back to
    :func:`batch_means_variance` over ``trajectories`` with a warning.
    """
    c = np.atleast_1d(np.asarray(coeffs, dtype=float))
    sub = basis.truncated(c.size)
    try:
        return float(np.sum(c * c * mode_variance(sub)))
    except InputError:
        if trajectories is None:
            raise
    warnings.warn("no closed form for this drift; using batch means", stacklevel=2)
    return batch_means_variance(trajectories, sub, c, n_batches)[0]


def batch_means_variance(trajectories, basis, coeffs, n_batches=20):
    """Batch-means estimate of ``V(g)`` with its standard error.

    Each path is cut into ``n_batches`` equal windows; ``V`` is half the
    window length times the variance of the window means (the CLT variance
    is ``2V``).
    """
    c = np.atleast_1d(np.asarray(coeffs, dtype=float))
    sub = basis.truncated(c.size)
    est = []
    for tr in trajectories:
        n = len(tr.points) - 1
        if n % n_batches:
            raise InputError("path length must split into whole batches")
        step = n // n_batches
        length = step * tr.dt
        means = []
        for b in range(n_batches):
            i0, i1 = b * step, (b + 1) * step + 1
            means.append(sub.weighted_sums(tr.points[i0:i1], tr.weights(i0, i1)) @ c / length)
        means = np.asarray(means)
        est.append(0.5 * length * means.var(ddof=1))
    est = np.asarray(est)
    se = est.std(ddof=1) / math.sqrt(len(est)) if len(est) > 1 else math.inf
    return float(est.mean()), float(se)


# -- limit law --------------------------------------------------------------------------


def xi_infinity_mean(basis):
    """``E Ξ(∞) = Σ 2/λ_i²`` including the analytic tail."""
    lam = basis.eigenvalues
    return float(np.sum(2.0 / lam**2) + 2.0 * spectral_tail_sum(basis, 2.0))


def sample_xi_infinity(basis, rng, size=None, chunk=2048):
    """Draws of ``Σ_{i≤N} 2ξ_i²/λ_i² + 2 Σ_{i>N} λ_i^{-2}``.

    The tail term replaces the discarded modes by their mean.
    """
    lam = basis.eigenvalues
    weights = 2.0 / lam**2
    tail = 2.0 * spectral_tail_sum(basis, 2.0) if basis.N else 0.0
    n = 1 if size is None else int(size)
    out = np.empty(n)
    for s in range(0, n, chunk):
        k = min(chunk, n - s)
        xi_ = rng.standard_normal((k, basis.N))
        out[s:s + k] = (xi_ * xi_) @ weights + tail
    return float(out[0]) if size is None else out


def gaussian_abs_moment(q, variance):
    """``E|N(0, 2V)|^q = 2^q Γ((q+1)/2)/√π · V^{q/2}``."""
    return 2.0**q * math.gamma((q + 1) / 2.0) / math.sqrt(math.pi) * variance ** (q / 2.0)
