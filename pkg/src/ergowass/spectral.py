"""Eigenpairs of the symmetric generator and the series built from them.

Three families are supported:

* torus ``[0,1)^d``: real Fourier modes ``sqrt(2) cos(2π k·x)`` and
  ``sqrt(2) sin(2π k·x)`` with ``λ = 4π²|k|²``, ``k`` in the half-space whose
  first nonzero coordinate is positive;
* flat Neumann interval: ``sqrt(2) cos(nπx)`` with ``λ = n²π²``;
* interval with a potential: finite-difference eigenvectors of the weighted
  Dirichlet form, interpolated by cubic splines.

All eigenfunctions are orthonormal in ``L²(mu)`` and orthogonal to constants;
the zero eigenvalue is never stored.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.interpolate import CubicSpline
from scipy.linalg import eigh_tridiagonal

from .errors import DomainError, InputError, ResourceError

DEFAULT_CAP = 200_000
FD_NODES = 4096
FD_GRAD_STEP = 1e-6
HEAT_TAIL_TOL = 1e-8
SQRT2 = math.sqrt(2.0)


def default_truncation(d):
    if d <= 1:
        return 512
    if d == 2:
        return 2048
    return 4096


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Ordered nonzero eigenpairs ``(λ_i, φ_i)``, ``i = 1..N``.

    Mode numbers in the public functions are 1-based, matching ``λ_1`` as the
    first nonzero eigenvalue; arrays are 0-based.
    """

    space: object
    eigenvalues: np.ndarray
    family: str
    # torus: (N, d) integer frequencies and 0/1 parity (cos/sin)
    freqs: np.ndarray = None
    parity: np.ndarray = None
    # finite-difference family
    nodes: np.ndarray = None
    vectors: np.ndarray = None
    _spline: object = field(default=None, repr=False)

    @property
    def N(self):
        return len(self.eigenvalues)

    @property
    def d(self):
        return self.space.d

    def descriptor(self, i):
        j = i - 1
        if self.family == "torus":
            k = ",".join(str(int(v)) for v in self.freqs[j])
            return f"k=({k});{'sin' if self.parity[j] else 'cos'}"
        if self.family == "neumann":
            return f"n={j + 1}"
        return f"fd:n={j + 1}"

    def truncated(self, n):
        """Basis restricted to its first ``n`` modes."""
        if not 1 <= n <= self.N:
            raise InputError("truncation must lie in [1, N]")
        if self.family == "fd":
            spline = CubicSpline(self.nodes, self.vectors[:, :n], axis=0)
            return SpectralBasis(self.space, self.eigenvalues[:n], "fd",
                                 nodes=self.nodes, vectors=self.vectors[:, :n], _spline=spline)
        return SpectralBasis(
            self.space, self.eigenvalues[:n], self.family,
            freqs=None if self.freqs is None else self.freqs[:n],
            parity=None if self.parity is None else self.parity[:n],
        )

    # -- evaluation ---------------------------------------------------------

    def _points(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(-1, self.d)

    def evaluate(self, x):
        """Values of all modes at points ``x``; returns shape ``(n_points, N)``."""
        x = self._points(x)
        if self.family == "torus":
            phase = 2 * np.pi * (x @ self.freqs.T)
            return SQRT2 * np.where(self.parity.astype(bool), np.sin(phase), np.cos(phase))
        if self.family == "neumann":
            n = np.arange(1, self.N + 1)
            return SQRT2 * np.cos(np.pi * x[:, :1] * n)
        return self._spline(x[:, 0])

    def gradient(self, x):
        """Gradients of all modes; returns shape ``(n_points, N, d)``."""
        x = self._points(x)
        if self.family == "torus":
            phase = 2 * np.pi * (x @ self.freqs.T)
            par = self.parity.astype(bool)
            amp = np.where(par, np.cos(phase), -np.sin(phase)) * (2 * np.pi * SQRT2)
            return amp[:, :, None] * self.freqs[None, :, :]
        if self.family == "neumann":
            n = np.arange(1, self.N + 1)
            return (-SQRT2 * np.pi * n * np.sin(np.pi * x[:, :1] * n))[:, :, None]
        t = x[:, 0]
        lo = np.clip(t - FD_GRAD_STEP, 0.0, 1.0)
        hi = np.clip(t + FD_GRAD_STEP, 0.0, 1.0)
        g = (self._spline(hi) - self._spline(lo)) / (hi - lo)[:, None]
        return g[:, :, None]

    def weighted_sums(self, x, w, chunk=1 << 16):
        """``Σ_j w_j φ_i(x_j)`` for every mode, accumulated in fixed order.

        Fourier families use exact power recurrences instead of trig calls,
        which is what makes long trajectories affordable.
        """
        x = self._points(x)
        w = np.asarray(w, dtype=float)
        out = np.zeros(self.N)
        for start in range(0, len(w), chunk):
            xs, ws = x[start:start + chunk], w[start:start + chunk]
            if self.family == "torus":
                out += self._torus_sums(xs, ws)
            elif self.family == "neumann":
                out += _cos_power_sums(np.pi * xs[:, 0], ws, self.N)
            else:
                out += ws @ self._spline(xs[:, 0])
        return out

    def _torus_sums(self, x, w):
        kmax = int(np.abs(self.freqs).max())
        d = self.d
        if d == 1:
            c = _complex_power_sums(2 * np.pi * x[:, 0], w, kmax)
            vals = c[self.freqs[:, 0]]
        else:
            base = np.exp(2j * np.pi * x)  # (B, d)
            pows = np.empty((d, 2 * kmax + 1, len(w)), dtype=complex)
            pows[:, kmax] = 1.0
            for m in range(1, kmax + 1):
                pows[:, kmax + m] = pows[:, kmax + m - 1] * base.T
            pows[:, :kmax] = np.conj(pows[:, kmax + 1:][:, ::-1])
            uniq, inverse = np.unique(self.freqs, axis=0, return_inverse=True)
            acc = np.empty(len(uniq), dtype=complex)
            for u, k in enumerate(uniq):
                prod = pows[0, kmax + k[0]].copy()
                for c_ in range(1, d):
                    prod *= pows[c_, kmax + k[c_]]
                acc[u] = prod @ w
            vals = acc[np.asarray(inverse).ravel()]
        return SQRT2 * np.where(self.parity.astype(bool), vals.imag, vals.real)


def _complex_power_sums(theta, w, kmax):
    """``Σ_j w_j exp(i k θ_j)`` for ``k = 0..kmax``."""
    base = np.exp(1j * theta)
    cur = np.ones_like(base)
    out = np.empty(kmax + 1, dtype=complex)
    out[0] = w.sum()
    for k in range(1, kmax + 1):
        cur *= base
        out[k] = cur @ w
    return out


def _cos_power_sums(theta, w, n):
    c = _complex_power_sums(theta, w, n)
    return SQRT2 * c[1:].real


# -- construction -----------------------------------------------------------


def _half_space_lattice(d, radius):
    r = int(math.floor(radius))
    axes = [np.arange(-r, r + 1)] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    norm2 = (grid * grid).sum(axis=1)
    grid, norm2 = grid[norm2 <= radius * radius], norm2[norm2 <= radius * radius]
    # first nonzero coordinate positive
    nz = grid != 0
    first = np.argmax(nz, axis=1)
    sign = grid[np.arange(len(grid)), first]
    keep = (norm2 > 0) & (sign > 0)
    return grid[keep], norm2[keep]


def _sorted_torus_modes(d, radius):
    ks, norm2 = _half_space_lattice(d, radius)
    ks = np.repeat(ks, 2, axis=0)
    norm2 = np.repeat(norm2, 2)
    parity = np.tile([0, 1], len(ks) // 2)
    keys = [parity] + [ks[:, c] for c in range(d - 1, -1, -1)] + [norm2]
    order = np.lexsort(keys)
    return ks[order], parity[order], norm2[order]


def _torus_radius_for(d, n_modes):
    # volume of the d-ball of radius R must hold about n_modes lattice points
    unit = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
    return (n_modes / unit) ** (1.0 / d) + math.sqrt(d) + 1.0


def _build_torus(space, n):
    radius = _torus_radius_for(space.d, n)
    while True:
        ks, parity, norm2 = _sorted_torus_modes(space.d, radius)
        if len(ks) >= n:
            break
        radius *= 1.25
    ks, parity, norm2 = ks[:n], parity[:n], norm2[:n]
    lam = 4 * np.pi**2 * norm2.astype(float)
    return SpectralBasis(space, lam, "torus", freqs=ks.astype(np.int64), parity=parity.astype(np.int8))


def fd_operator(space, nodes=FD_NODES):
    """Tridiagonal form of the weighted Dirichlet form on a uniform grid.

    Returns ``(x, diag, off, mass)`` where ``diag``/``off`` define the
    symmetrised matrix ``M^{-1/2} K M^{-1/2}`` and ``mass`` the lumped
    ``L²(mu)`` quadrature weights.
    """
    x = np.linspace(0.0, 1.0, nodes)
    dx = x[1] - x[0]
    rho = np.exp(space.potential.value(x)) / space.normalizer
    rho_mid = np.exp(space.potential.value(0.5 * (x[1:] + x[:-1]))) / space.normalizer
    mass = rho * dx
    mass[0] *= 0.5
    mass[-1] *= 0.5
    edge = rho_mid / dx
    kdiag = np.zeros(nodes)
    kdiag[:-1] += edge
    kdiag[1:] += edge
    diag = kdiag / mass
    off = -edge / np.sqrt(mass[:-1] * mass[1:])
    return x, diag, off, mass


def _build_fd(space, n, nodes):
    if nodes < 16 * n:
        raise InputError(f"finite-difference grid needs at least {16 * n} nodes for N={n}")
    x, diag, off, mass = fd_operator(space, nodes)
    lam, u = eigh_tridiagonal(diag, off, select="i", select_range=(1, n))
    v = u / np.sqrt(mass)[:, None]
    v *= np.sign(v[0])[None, :]
    spline = CubicSpline(x, v, axis=0)
    return SpectralBasis(space, lam, "fd", nodes=x, vectors=v, _spline=spline)


def build_basis(space, N=None, cap=DEFAULT_CAP, fd_nodes=FD_NODES):
    """Return the first ``N`` nonzero eigenpairs of ``-L̂`` in sorted order."""
    if N is None:
        N = default_truncation(space.d)
    N = int(N)
    if N < 1:
        raise InputError("N must be at least 1")
    if N > cap:
        raise ResourceError(f"N={N} exceeds the truncation cap {cap}")
    if space.is_torus:
        return _build_torus(space, N)
    if space.is_uniform:
        lam = (np.pi * np.arange(1, N + 1)) ** 2
        return SpectralBasis(space, lam, "neumann")
    return _build_fd(space, N, fd_nodes)


# -- heat kernel ------------------------------------------------------------


def _theta_series(t):
    """``Σ_{k∈Z} exp(-4π² t k²)`` to machine precision."""
    kmax = int(math.ceil(math.sqrt(40.0 / (4 * math.pi**2 * t)))) + 2
    k = np.arange(1, kmax + 1)
    return 1.0 + 2.0 * np.exp(-4 * np.pi**2 * t * k * k).sum()


def heat_tail_bound(basis, eps):
    """``Σ_{i>N} exp(-λ_i ε)``: exact on the torus and flat interval, a
    Weyl-law extrapolation for finite-difference bases."""
    lam = basis.eigenvalues
    if basis.family == "torus":
        total = _theta_series(eps) ** basis.d - 1.0
        return max(total - np.exp(-lam * eps).sum(), 0.0)
    if basis.family == "neumann":
        n0 = basis.N + 1
        n = np.arange(n0, n0 + int(math.ceil(math.sqrt(40.0 / (np.pi**2 * eps)))) + 2)
        return float(np.exp(-(np.pi * n) ** 2 * eps).sum())
    c = lam[-1] / basis.N**2
    n = np.arange(basis.N + 1, basis.N + 1 + int(math.ceil(math.sqrt(40.0 / (c * eps)))) + 2)
    return float(np.exp(-c * n * n * eps).sum())


def heat_kernel(basis, eps, x, y, return_tail=False):
    """Truncated series ``1 + Σ_i exp(-λ_i ε) φ_i(x) φ_i(y)``.

    ``x`` and ``y`` are matched point arrays.  The series may dip below zero
    for tiny ``ε``; consumers that take logarithms floor it themselves.  A
    warning is issued when the truncation tail exceeds ``1e-8``.
    """
    if not eps > 0:
        raise InputError("heat kernel time must be positive")
    fx = basis.evaluate(x)
    fy = basis.evaluate(y)
    val = 1.0 + (fx * fy) @ np.exp(-basis.eigenvalues * eps)
    tail = heat_tail_bound(basis, eps)
    if tail > HEAT_TAIL_TOL and not return_tail:
        warnings.warn(f"heat kernel truncation tail {tail:.3e} exceeds {HEAT_TAIL_TOL:g}",
                      stacklevel=2)
    if np.ndim(x) == 0 or (basis.d > 1 and np.ndim(x) == 1):
        val = float(val[0])
    if return_tail:
        return val, tail
    return val


def eigen_gradient(basis, i, x):
    """Gradient of mode ``i`` (1-based) at a single point; shape ``(d,)``."""
    if not 1 <= i <= basis.N:
        raise InputError(f"mode index {i} outside 1..{basis.N}")
    return basis.truncated(i).gradient(x)[0, i - 1]


# -- tail sums --------------------------------------------------------------

_TAIL_ENUM_POINTS = 2_000_000


def _torus_tail(basis, power):
    d = basis.d
    s = float(power)
    scale = (4 * np.pi**2) ** (-s)
    n = basis.N
    if d == 1:
        kfull = n // 2
        tail = 2.0 * special.zeta(2 * s, kfull + 1)
        if n % 2:
            tail -= float(kfull + 1) ** (-2 * s)
        return scale * tail
    # exact over a ball that contains the retained modes, integral bound beyond
    r_n = math.sqrt(basis.eigenvalues[-1]) / (2 * np.pi)
    unit = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
    r_enum = max((_TAIL_ENUM_POINTS / unit) ** (1.0 / d), r_n + 1.0)
    r_enum = max(min(r_enum, 4.0 * r_n + 4.0 * math.sqrt(d)), r_n + 1.0, 2.0 * math.sqrt(d) + 1.0)
    ks, parity, norm2 = _sorted_torus_modes(d, r_enum)
    exact = float((norm2[n:].astype(float) ** (-s)).sum())
    c = math.sqrt(d) / 2.0
    lower = r_enum - 2.0 * c
    # Σ_{|k|>R} |k|^{-2s} ≤ S_{d-1} ∫_{R-2c}^∞ (u + c)^{d-1} u^{-2s} du
    surface = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    integral = 0.0
    for j in range(d):
        expo = j - 2 * s + 1
        integral += math.comb(d - 1, j) * c ** (d - 1 - j) * lower**expo / (-expo)
    return scale * (exact + surface * integral)


def spectral_tail_sum(basis, power):
    """Upper estimate of ``Σ_{i>N} λ_i^{-power}``.

    Exact for the one-dimensional Fourier families (Hurwitz zeta); a lattice
    counting over-estimate on higher-dimensional tori; a Weyl-law
    extrapolation (labelled estimate, not a bound) for finite-difference
    bases.
    """
    d = basis.d
    if not power > d / 2:
        raise DomainError(f"tail sum diverges unless power > d/2 = {d / 2}")
    if basis.family == "torus":
        return float(_torus_tail(basis, power))
    if basis.family == "neumann":
        return float(np.pi ** (-2 * power) * special.zeta(2 * power, basis.N + 1))
    c = basis.eigenvalues[-1] / basis.N**2
    return float(c ** (-power) * special.zeta(2 * power, basis.N + 1))


def full_spectral_sum(space, power, N=4096):
    """``Σ_{i≥1} λ_i^{-power}`` = retained part plus tail."""
    basis = build_basis(space, N)
    return float((basis.eigenvalues ** (-power)).sum() + spectral_tail_sum(basis, power))
