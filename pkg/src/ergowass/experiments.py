"""Monte Carlo experiments built from simulations and spectral functionals.

Each ``run_*`` function takes an :class:`ExperimentConfig`, simulates the
replicas it needs (one Philox stream per replica, so results do not depend
on the worker count), and returns a report holding both summary numbers and
the long-format rows ``(T, replicate, statistic, value)`` that the CLI writes
to CSV.  Horizons in a T list are prefixes of one path per replica.
"""

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import stats as sstats

from . import functionals as fn
from .errors import ConfigError, DomainError, InputError
from .model_space import interval, torus
from .rng import named_stream
from .sde import InitialLaw, run_replicas, simulate
from .spectral import build_basis, default_truncation, spectral_tail_sum
from .wasserstein import (
    EXACT_CELL_CAP,
    GridMeasure,
    Measure1D,
    bin_points,
    empirical_measure_1d,
    invariant_measure_1d,
    uniform_grid,
    w2_dual_upper_bound,
    w2_grid_to_uniform,
    w_p_1d,
    w_p_circle,
    w_p_grid_exact,
    w_p_grid_sinkhorn,
)

DEFAULT_GRID = {2: 64, 3: 16, 4: 8, 5: 6}
SOLVERS = ("auto", "density", "exact", "sinkhorn")


# -- rates and admissible exponents -------------------------------------------------


def gamma_rate(d, T):
    """Sharp rate ``γ_d(T)`` of ``(E W_p^q)^{1/q}``."""
    if T < 2:
        raise InputError("rates are stated for T >= 2")
    if d < 4:
        return T**-0.5
    if d == 4:
        return T**-0.5 * math.sqrt(math.log(T))
    return T ** (-1.0 / (d - 2))


def rate_exponent(d):
    """Power-law part of ``γ_d``: -1/2 for ``d <= 4``, ``-1/(d-2)`` beyond."""
    return -0.5 if d <= 4 else -1.0 / (d - 2)


@dataclass(frozen=True)
class Interval:
    """``[lo, hi]`` or ``[lo, hi)``; ``hi = inf`` for half-lines."""

    lo: float
    hi: float
    closed: bool = True

    def __contains__(self, x):
        if x < self.lo:
            return False
        return x <= self.hi if self.closed else x < self.hi


def admissible_p(d):
    """Exponents ``p`` for which the upper rate holds."""
    if d <= 2:
        return Interval(1.0, math.inf, False)
    if d <= 4:
        return Interval(1.0, 2.0 * d / (d - 2))
    return Interval(1.0, d * (d - 2) / 2.0)


def admissible_q_limit(d):
    """Moments ``q`` for which ``T W_2²`` converges in ``L^q``."""
    if d <= 3:
        return Interval(1.0, math.inf, False)
    if d < 4:
        return Interval(1.0, (d - 2) / (2.0 * (d - 3)), False)
    raise DomainError("no renormalised limit for d >= 4")


# -- configuration ----------------------------------------------------------------------


def _tuple(v):
    if v is None:
        return ()
    return tuple(np.atleast_1d(v).tolist())


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an experiment needs; defaults give a small d=1 run.

    ``N = 0`` and ``grid = 0`` select the per-dimension defaults.
    ``sinkhorn_reg`` is the final entropic regularisation in units of the
    squared grid spacing.
    """

    kind: str = "torus"
    d: int = 1
    potential: str = "zero"
    a: float = 0.0
    drift: tuple = ()
    T: tuple = (32.0, 64.0, 128.0, 256.0, 512.0, 1024.0)
    replicas: int = 32
    seed: int = 0
    h: float = 1e-3
    stride: int = 1
    refine: int = 0
    p: float = 2.0
    q: float = 2.0
    init: str = "stationary"
    x0: tuple = ()
    r: float = 0.0
    zeta: float = 1.0
    N: int = 0
    grid: int = 0
    solver: str = "auto"
    sinkhorn_reg: float = 0.1
    bootstrap: int = 2000
    modes: tuple = (1,)
    moments: tuple = (1.0, 2.0, 4.0)
    shift: float = 1.0
    levels: int = 8
    alpha: float = 10.0
    limit_draws: int = 100_000
    nu: str = "point"
    nu_center: tuple = ()
    nu_width: float = 0.25
    thetas: tuple = (1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 0.1, 0.2)

    def __post_init__(self):
        for name in ("drift", "T", "x0", "modes", "moments", "nu_center", "thetas"):
            object.__setattr__(self, name, _tuple(getattr(self, name)))
        object.__setattr__(self, "T", tuple(float(t) for t in self.T))
        if not self.T:
            raise ConfigError("T list is empty")
        if any(b <= a for a, b in zip(self.T, self.T[1:])):
            raise ConfigError("T list must be strictly increasing")
        if self.replicas < 2:
            raise ConfigError("need at least 2 replicas")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}")
        if self.init not in ("stationary", "point", "smoothed"):
            raise ConfigError("init must be stationary, point or smoothed")
        if self.init == "point" and not self.x0:
            raise ConfigError("point init needs x0")
        if self.init == "smoothed" and not self.r > 0:
            raise ConfigError("smoothed init needs r > 0")
        if self.p < 1 or self.q < 1:
            raise ConfigError("p and q must be >= 1")
        if not self.zeta > 0:
            raise ConfigError("zeta must be positive")
        try:
            self.space()
            self.initial_law()
        except InputError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_mapping(cls, mapping):
        """Build from a (possibly sectioned) mapping such as parsed TOML."""
        known = {f.name for f in fields(cls)}
        flat = {}
        for key, value in mapping.items():
            items = value.items() if isinstance(value, dict) else [(key, value)]
            for k, v in items:
                if k not in known:
                    raise ConfigError(f"unknown config key {k!r}")
                if k in flat:
                    raise ConfigError(f"config key {k!r} given twice")
                flat[k] = v
        return cls(**flat)

    def replace(self, **changes):
        return ExperimentConfig(**{**asdict(self), **changes})

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def space(self):
        if self.kind == "torus":
            return torus(self.d, self.drift if self.drift else None)
        if self.kind == "interval":
            if self.d != 1:
                raise ConfigError("the interval is one-dimensional")
            if any(self.drift):
                raise ConfigError("the interval admits no antisymmetric drift")
            return interval(self.potential, self.a)
        raise ConfigError(f"unknown space kind {self.kind!r}")

    def initial_law(self):
        if self.init == "stationary":
            return InitialLaw()
        if self.init == "point":
            return InitialLaw.point(self.x0)
        return InitialLaw.smoothed(self.r, self.x0 or None)

    def basis(self):
        return build_basis(self.space(), self.N or default_truncation(self.d))

    def eps_for(self, T):
        """Smoothing time ``ε(T) = T^{-ζ}``."""
        return T ** (-self.zeta)

    def check_zeta_window(self):
        """Smoothing with ``ε = T^{-ζ}`` needs ``ζ ∈ (0, 2/(d−2)⁺)``."""
        hi = math.inf if self.d <= 2 else 2.0 / (self.d - 2)
        if not 0.0 < self.zeta < hi:
            raise ConfigError(f"zeta must lie in (0, {hi}) when smoothing is used")

    def grid_size(self):
        return self.grid or DEFAULT_GRID.get(self.d, 6)


def _path(cfg, replica, horizon, space=None):
    return simulate(space or cfg.space(), cfg.h, horizon, cfg.initial_law(), cfg.seed,
                    replica, stride=cfg.stride, refine=cfg.refine)


def _prefix_index(traj, T):
    return traj.index_of(T) + 1


def _window_sums(traj, basis, times):
    """``∫_0^{t} φ_i(X_s) ds`` at each (sorted, on-grid) time."""
    idx = [traj.index_of(t) for t in times]
    out = np.zeros((len(times), basis.N))
    acc = np.zeros(basis.N)
    last = 0
    for k, i in enumerate(idx):
        if i > last:
            acc = acc + basis.weighted_sums(traj.points[last:i + 1], traj.weights(last, i + 1))
            last = i
        out[k] = acc
    return out


# -- distances -------------------------------------------------------------------------------


def _target_1d(space):
    return Measure1D.uniform() if space.is_uniform else invariant_measure_1d(space)


def _grid_distance(cfg, weights_points, space, p):
    """``W_p`` between a binned path segment and the invariant law on the grid."""
    pts, w = weights_points
    m = cfg.grid_size()
    a = bin_points(space, pts, w, m)
    solver = cfg.solver
    if solver == "auto":
        if p == 2.0 and space.d <= 4:
            solver = "density"
        elif a.size <= EXACT_CELL_CAP:
            solver = "exact"
        else:
            solver = "sinkhorn"
    if solver == "density":
        if p != 2.0:
            raise ConfigError("the density solver computes W_2 only")
        return w2_grid_to_uniform(a)
    u = uniform_grid(space, m)
    if solver == "exact":
        return w_p_grid_exact(a, u, p)
    return w_p_grid_sinkhorn(a, u, p, reg=cfg.sinkhorn_reg / m**2)[0]


def empirical_distance(cfg, traj, T, p=None):
    """``W_p(μ_T, μ)`` for the prefix ``[0, T]`` of a path."""
    p = float(cfg.p if p is None else p)
    space = traj.space
    stop = _prefix_index(traj, T)
    if space.d == 1:
        emp = empirical_measure_1d(traj, 0, stop)
        target = _target_1d(space)
        if space.is_torus:
            return w_p_circle(emp, target, p)
        return w_p_1d(space, emp, target, p)
    if not space.is_uniform:
        raise ConfigError("grid solvers need a uniform invariant law")
    return _grid_distance(cfg, (traj.points[:stop], traj.weights(0, stop)), space, p)


# -- fitting --------------------------------------------------------------------------------


@dataclass(frozen=True)
class LogLogFit:
    slope: float
    intercept: float
    ci: tuple


def _wls(x, y, w):
    W = np.sum(w)
    xm, ym = np.sum(w * x) / W, np.sum(w * y) / W
    sxx = np.sum(w * (x - xm) ** 2)
    slope = np.sum(w * (x - xm) * (y - ym)) / sxx
    return slope, ym - slope * xm


def fit_loglog(T, values, weights=None, replicate_values=None, q=1.0, n_boot=2000, rng=None,
               level=0.95):
    """Weighted least squares of ``log value`` on ``log T``.

    Parameters
    ----------
    replicate_values : array (R, len(T)), optional
        Per-replica samples whose ``q``-th moment root gives ``values``.
        When given, the confidence interval comes from resampling replicas
        (the same resample for every T, which keeps their correlation).
        Otherwise it is the t-interval of the regression slope.

    Returns
    -------
    LogLogFit
    """
    T = np.asarray(T, dtype=float)
    v = np.asarray(values, dtype=float)
    if len(T) < 3 or len(T) != len(v):
        raise InputError("need at least 3 matching points")
    if np.any(v <= 0) or np.any(T <= 0):
        raise InputError("log-log fit needs positive values")
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    x, y = np.log(T), np.log(v)
    slope, icpt = _wls(x, y, w)
    alpha = 1.0 - level
    if replicate_values is not None:
        rv = np.asarray(replicate_values, dtype=float)
        rng = rng or np.random.default_rng(0)
        R = rv.shape[0]
        boots = np.empty(n_boot)
        for b in range(n_boot):
            take = rv[rng.integers(0, R, R)]
            est = np.mean(take**q, axis=0) ** (1.0 / q)
            boots[b] = _wls(x, np.log(est), w)[0] if np.all(est > 0) else np.nan
        lo, hi = np.nanquantile(boots, [alpha / 2, 1 - alpha / 2])
    else:
        resid = y - (slope * x + icpt)
        dof = len(x) - 2
        if dof > 0:
            s2 = np.sum(w * resid**2) / dof
            se = math.sqrt(s2 / np.sum(w * (x - np.sum(w * x) / np.sum(w)) ** 2))
        else:
            se = 0.0
        t = sstats.t.ppf(1 - alpha / 2, max(dof, 1))
        lo, hi = slope - t * se, slope + t * se
    return LogLogFit(float(slope), float(icpt), (float(lo), float(hi)))


def moment_summary(samples, q, n_boot, rng, level=0.95):
    """``(E X^q)^{1/q}`` with a percentile bootstrap interval and the
    bootstrap standard deviation of its logarithm."""
    x = np.asarray(samples, dtype=float)
    est = float(np.mean(x**q) ** (1.0 / q))
    boots = np.mean(x[rng.integers(0, len(x), (n_boot, len(x)))] ** q, axis=1) ** (1.0 / q)
    lo, hi = np.quantile(boots, [(1 - level) / 2, (1 + level) / 2])
    with np.errstate(divide="ignore"):
        log_sd = float(np.std(np.log(boots)))
    return est, float(lo), float(hi), log_sd


# -- rate experiment --------------------------------------------------------------------------


@dataclass
class RateResult:
    """Per-T ``(E W_p^q)^{1/q}`` with bootstrap intervals and the fitted slope.

    ``slope`` refers to ``(E W_p^q)^{1/q}``; for ``q = 2`` the slope of
    ``E W_p²`` is twice as large.  ``reference`` is the power-law exponent
    of ``γ_d``.
    """

    d: int
    p: float
    q: float
    T: np.ndarray
    estimates: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    values: np.ndarray
    reference: float
    fit: LogLogFit = None
    extras: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    @property
    def slope(self):
        return None if self.fit is None else self.fit.slope


def run_rate_experiment(cfg, threads=None, p=None, q=None):
    """Replicas of ``W_p(μ_T, μ)`` along the T list and the log-log slope."""
    p = float(cfg.p if p is None else p)
    q = float(cfg.q if q is None else q)
    space = cfg.space()
    T = np.asarray(cfg.T)

    def one(rep):
        tr = _path(cfg, rep, T[-1], space)
        return [empirical_distance(cfg, tr, t, p) for t in T]

    vals = np.asarray(run_replicas(one, range(cfg.replicas), threads))
    rng = named_stream(cfg.seed, f"bootstrap:rates:{p}:{q}")
    summ = [moment_summary(vals[:, j], q, cfg.bootstrap, rng) for j in range(len(T))]
    est = np.array([s[0] for s in summ])
    res = RateResult(d=space.d, p=p, q=q, T=T, estimates=est,
                     ci_low=np.array([s[1] for s in summ]),
                     ci_high=np.array([s[2] for s in summ]),
                     values=vals, reference=rate_exponent(space.d))
    if len(T) >= 3:
        log_sd = np.array([s[3] for s in summ])
        w = 1.0 / np.maximum(log_sd, 1e-12) ** 2
        res.fit = fit_loglog(T, est, w, vals, q, cfg.bootstrap, rng)
    if space.d == 4 and p == 2.0 and len(T) >= 3:
        scaled = T * np.mean(vals**2, axis=0)
        res.extras["log_corr"] = float(np.corrcoef(np.log(T), scaled)[0, 1])
        res.extras["loglog_coef"] = float(np.polyfit(np.log(np.log(T)), np.log(scaled), 1)[0])
        res.extras["monotone"] = bool(np.all(np.diff(scaled) > 0))
    for j, t in enumerate(T):
        for rep in range(cfg.replicas):
            res.rows.append((t, rep, f"W{p:g}", vals[rep, j]))
    return res


def sandwich(result):
    """Fit ``c`` in ``c γ_d(T)`` (log-space mean) and the spread of the ratios.

    Returns ``(c, ratios)`` where ``ratios = estimate / (c γ_d(T))``.
    """
    g = np.array([gamma_rate(result.d, t) for t in result.T])
    c = float(np.exp(np.mean(np.log(result.estimates / g))))
    return c, result.estimates / (c * g)


# -- limit experiment ------------------------------------------------------------------------------


@dataclass
class LimitReport:
    T: np.ndarray
    scaled_w2: np.ndarray      # (R, nT) values of T W_2²
    xi: np.ndarray             # (R, nT)
    xi_bar: np.ndarray
    xi_tilde: np.ndarray
    target_mean: float
    target_second: float
    ks: float
    psi: np.ndarray = None     # (R, nT, k) leading ψ_i(T), k = min(N, 4)
    rows: list = field(default_factory=list)

    def mean_scaled(self, j=-1):
        x = self.scaled_w2[:, j]
        return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))

    def gap_moment(self, q=1.0):
        """``E|T W_2² − Ξ(T)|^q`` per T."""
        return np.mean(np.abs(self.scaled_w2 - self.xi) ** q, axis=0)

    def moment_ratio(self, q, j=-1):
        target = self.target_mean if q == 1 else self.target_second
        return float(np.mean(self.scaled_w2[:, j] ** q) / target)


def xi_infinity_second_moment(basis):
    """``E Ξ(∞)²`` = mean² + ``Σ 8/λ_i⁴``, tails included."""
    lam = basis.eigenvalues
    mean = fn.xi_infinity_mean(basis)
    return mean * mean + float(np.sum(8.0 / lam**4) + 8.0 * spectral_tail_sum(basis, 4.0))


def run_limit_experiment(cfg, threads=None, with_xi=True):
    """``T W_2²(μ_T, μ)`` against ``Ξ(T)``, its shifted variants and ``Ξ(∞)``."""
    space = cfg.space()
    if any(cfg.drift):
        raise ConfigError("the weak-limit comparison needs zero drift")
    T = np.asarray(cfg.T)
    r = float(cfg.shift)
    basis = cfg.basis()
    lam = basis.eigenvalues

    def one(rep):
        tr = _path(cfg, rep, T[-1] + r, space)
        w2 = np.array([t * empirical_distance(cfg, tr, t, 2.0) ** 2 for t in T])
        if not with_xi:
            nan = np.full(len(T), np.nan)
            return w2, nan, nan, nan, np.full((len(T), lead), np.nan)
        times = sorted({0.0, r, *T, *(T + r)})
        sums = dict(zip(times, _window_sums(tr, basis, times)))
        xi_, bar, tilde = [], [], []
        for t in T:
            xi_.append(fn.xi_from_psi(sums[t] / math.sqrt(t), lam))
            bar.append(fn.xi_from_psi((sums[t] - sums[r]) / math.sqrt(t - r), lam))
            tilde.append(fn.xi_from_psi((sums[t + r] - sums[r]) / math.sqrt(t), lam))
        head = np.array([sums[t][:lead] / math.sqrt(t) for t in T])
        return w2, np.array(xi_), np.array(bar), np.array(tilde), head

    lead = min(basis.N, 4)
    out = run_replicas(one, range(cfg.replicas), threads)
    w2, xi_, bar, tilde, head = (np.asarray([o[k] for o in out]) for k in range(5))
    draws = fn.sample_xi_infinity(basis, named_stream(cfg.seed, "xi-infinity"), cfg.limit_draws)
    ks = float(sstats.ks_2samp(w2[:, -1], draws).statistic)
    rep = LimitReport(T=T, scaled_w2=w2, xi=xi_, xi_bar=bar, xi_tilde=tilde,
                      target_mean=fn.xi_infinity_mean(basis),
                      target_second=xi_infinity_second_moment(basis), ks=ks, psi=head)
    for j, t in enumerate(T):
        for k in range(cfg.replicas):
            rep.rows.append((t, k, "TW2sq", w2[k, j]))
            if with_xi:
                rep.rows.append((t, k, "Xi", xi_[k, j]))
                rep.rows.append((t, k, "Xi_bar", bar[k, j]))
                rep.rows.append((t, k, "Xi_tilde", tilde[k, j]))
    return rep


# -- Bernstein experiment ---------------------------------------------------------------------------


@dataclass
class BernsteinReport:
    levels: np.ndarray
    frequencies: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    alpha_hat: float
    params: object
    rows: list = field(default_factory=list)

    @property
    def dominated(self):
        return bool(np.all(self.bound >= self.frequencies + 3 * self.stderr))


def minimal_alpha(params, horizon, levels, targets):
    """Smallest ``α >= 0`` with ``2 exp(−Tξ²/(2σ² + α𝔪ξ)) >= target`` at every level."""
    alpha = 0.0
    for xi_, tgt in zip(levels, targets):
        if tgt <= 0:
            continue
        if tgt >= 2.0:
            return math.inf
        need = (horizon * xi_**2 / math.log(2.0 / tgt) - 2.0 * params.sigma_sq) / (params.scale * xi_)
        alpha = max(alpha, need)
    return float(alpha)


def run_bernstein_experiment(cfg, threads=None, scale=1.0):
    """Tail frequencies of ``T^{-1} ∫ g(X_t) dt`` for ``g = scale · φ_mode``.

    The ξ-grid spans 0.25 to 4 standard deviations of the time average.
    """
    space = cfg.space()
    mode = int(cfg.modes[0])
    T = cfg.T[-1]
    basis = cfg.basis().truncated(mode)
    coeffs = np.zeros(mode)
    coeffs[-1] = scale
    params = fn.deviation_params(basis, coeffs)

    def one(rep):
        tr = _path(cfg, rep, T, space)
        return float(basis.weighted_sums(tr.points, tr.weights()) @ coeffs) / T

    avg = np.asarray(run_replicas(one, range(cfg.replicas), threads))
    sd = math.sqrt(2.0 * fn.long_run_variance(basis, coeffs) / T)
    levels = sd * np.linspace(0.25, 4.0, cfg.levels)
    freq = np.array([np.mean(np.abs(avg) > x) for x in levels])
    se = np.sqrt(freq * (1 - freq) / len(avg))
    bound = fn.bernstein_bound(params, T, levels, cfg.alpha)
    alpha_hat = minimal_alpha(params, T, levels, freq + 3 * se)
    rep = BernsteinReport(levels, freq, se, bound, alpha_hat, params)
    for k, v in enumerate(avg):
        rep.rows.append((T, k, "time_average", v))
    return rep


# -- ψ moments ----------------------------------------------------------------------------------------


def scheme_psi_second_moment(space, basis, i, h, T):
    """Exact ``E|ψ_i(T)|²`` for the simulated Euler chain in stationarity.

    For a torus Fourier mode the Gaussian step multiplies ``exp(2πik·x)`` by
    ``exp(−λh + iωh)`` in mean, so the chain's autocovariance is
    ``Re ρ^n`` with ``ρ = exp((−λ + iω)h)``; the trapezoid weights then give
    the second moment in closed form.
    """
    if basis.family != "torus":
        raise InputError("scheme moments are available for torus modes only")
    lam = basis.eigenvalues[i - 1]
    omega = 2 * np.pi * float(basis.freqs[i - 1] @ space.drift_vector)
    M = int(round(T / h))
    n = np.arange(1, M + 1)
    cov = np.exp(-lam * h * n) * np.cos(omega * h * n)
    pair = (M - n).astype(float)
    pair[-1] = 0.25
    total = (M - 0.5) + 2.0 * np.sum(pair * cov)
    return float(h * h * total / T)


def scheme_psi_limit_moment(space, basis, i, h):
    """Large-T limit of :func:`scheme_psi_second_moment`, ``h·Re((1 + ρ)/(1 − ρ))``.

    It differs from the continuous-time value ``2V`` by the step-size bias only.
    """
    if basis.family != "torus":
        raise InputError("scheme moments are available for torus modes only")
    lam = basis.eigenvalues[i - 1]
    omega = 2 * np.pi * float(basis.freqs[i - 1] @ space.drift_vector)
    rho = np.exp((-lam + 1j * omega) * h)
    return float(h * ((1 + rho) / (1 - rho)).real)


@dataclass
class PsiMomentReport:
    modes: tuple
    T: np.ndarray
    psi: np.ndarray                 # (R, n_modes, nT)
    target: np.ndarray              # 2 V(φ_i) per mode
    scheme_mean: np.ndarray         # (n_modes, nT) exact scheme value, nan if unavailable
    scheme_limit: np.ndarray = None  # (n_modes,) large-T limit of scheme_mean
    gaussian: list = field(default_factory=list)   # rows (mode, q, empirical, stderr, target)
    rows: list = field(default_factory=list)

    def second_moment(self):
        x = self.psi**2
        return x.mean(axis=0), x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])


def run_psi_moment_experiment(cfg, threads=None):
    """Second moments of ``ψ_i(T)`` along the T list and the Gaussian
    moment table at the largest T."""
    space = cfg.space()
    if cfg.init != "stationary":
        raise ConfigError("psi moments need the stationary initial law")
    modes = tuple(int(m) for m in cfg.modes)
    basis = cfg.basis().truncated(max(modes))
    T = np.asarray(cfg.T)
    sel = np.asarray(modes) - 1

    def one(rep):
        tr = _path(cfg, rep, T[-1], space)
        sums = _window_sums(tr, basis, list(T))
        return (sums[:, sel] / np.sqrt(T)[:, None]).T

    psi = np.asarray(run_replicas(one, range(cfg.replicas), threads))
    V = fn.mode_variance(basis)[sel]
    scheme = np.full((len(modes), len(T)), np.nan)
    limit = np.full(len(modes), np.nan)
    if space.is_torus:
        step = cfg.h / (1 << cfg.refine) * cfg.stride
        for a, m in enumerate(modes):
            limit[a] = scheme_psi_limit_moment(space, basis, m, step)
            for j, t in enumerate(T):
                scheme[a, j] = scheme_psi_second_moment(space, basis, m, step, t)
    rep = PsiMomentReport(modes, T, psi, 2.0 * V, scheme, limit)
    rng = named_stream(cfg.seed, "bootstrap:psi")
    for a, m in enumerate(modes):
        x = np.abs(psi[:, a, -1])
        for q in cfg.moments:
            boots = np.mean(x[rng.integers(0, len(x), (cfg.bootstrap, len(x)))] ** q, axis=1)
            rep.gaussian.append((m, q, float(np.mean(x**q)), float(boots.std(ddof=1)),
                                 fn.gaussian_abs_moment(q, V[a])))
    for j, t in enumerate(T):
        for k in range(cfg.replicas):
            for a, m in enumerate(modes):
                rep.rows.append((t, k, f"psi_{m}", psi[k, a, j]))
    return rep


# -- mixtures ----------------------------------------------------------------------------------------------


MIXTURE_MODELS = {
    "linear": lambda th, p, d: th,
    "log": lambda th, p, d: th * np.log1p(1.0 / th),
    "power": lambda th, p, d: th ** (1.0 / p + 1.0 / d),
}


def mixture_case(p, d):
    """Which scaling the mixture bound predicts for ``(p, d)``."""
    crit = math.inf if d == 1 else d / (d - 1.0)
    if p < crit:
        return "linear"
    return "log" if p == crit else "power"


def _mixture_1d(theta, cfg):
    c = cfg.nu_center[0] if cfg.nu_center else 0.5
    if cfg.nu == "point":
        lo = (1 - theta) * c
        if theta >= 1.0:
            return Measure1D.atoms([c])
        return Measure1D(np.array([0.0, lo, lo + theta, 1.0]), np.array([0.0, c, c]),
                         np.array([1 / (1 - theta), 0.0, 1 / (1 - theta)]))
    w = cfg.nu_width
    edges = np.array([0.0, c - w / 2, c + w / 2, 1.0])
    if edges[1] < 0 or edges[2] > 1:
        raise ConfigError("mixture box must fit inside the unit cell")
    mass = (1 - theta) * np.diff(edges) + theta * np.array([0.0, 1.0, 0.0])
    return Measure1D.density(edges, mass)


def _mixture_grid(theta, cfg, space, m):
    c = np.asarray(cfg.nu_center or [0.5] * space.d, dtype=float)
    nu = np.zeros((m,) * space.d)
    if cfg.nu == "point":
        nu[tuple(np.minimum((c * m).astype(int), m - 1))] = 1.0
    else:
        g = (np.arange(m) + 0.5) / m
        inside = [np.abs(g - ci) <= cfg.nu_width / 2 for ci in c]
        nu[np.ix_(*inside)] = 1.0
        nu /= nu.sum()
    w = (1 - theta) / nu.size + theta * nu
    return GridMeasure(space, m, w / w.sum())


@dataclass
class MixtureReport:
    thetas: np.ndarray
    distances: np.ndarray
    predicted: str
    residuals: dict
    constants: dict
    fit: LogLogFit
    monotone: bool
    rows: list = field(default_factory=list)

    @property
    def best_model(self):
        return min(self.residuals, key=self.residuals.get)


def run_mixture_scaling_experiment(cfg):
    """``W_p((1−θ)μ + θν, μ)`` over the θ-grid and the model comparison."""
    space = cfg.space()
    p, d = float(cfg.p), space.d
    th = np.asarray(cfg.thetas, dtype=float)
    if np.any(th < 0) or np.any(th >= 1):
        raise ConfigError("theta values must lie in [0, 1)")
    dist = []
    for t in th:
        if t == 0:
            dist.append(0.0)
        elif d == 1:
            mix = _mixture_1d(t, cfg)
            target = _target_1d(space)
            dist.append(w_p_circle(mix, target, p) if space.is_torus
                        else w_p_1d(space, mix, target, p))
        else:
            m = cfg.grid_size()
            dist.append(w_p_grid_exact(_mixture_grid(t, cfg, space, m), uniform_grid(space, m), p))
    dist = np.asarray(dist)
    pos = th > 0
    tp, dp = th[pos], dist[pos]
    resid, const = {}, {}
    for name, model in MIXTURE_MODELS.items():
        lm = np.log(model(tp, p, d))
        logc = float(np.mean(np.log(dp) - lm))
        resid[name] = float(np.sum((np.log(dp) - lm - logc) ** 2))
        const[name] = float(np.max(dp / model(tp, p, d)))
    fit = fit_loglog(tp, dp) if len(tp) >= 3 else None
    rep = MixtureReport(th, dist, mixture_case(p, d), resid, const, fit,
                        bool(np.all(np.diff(dist) > 0)))
    for k, (t, v) in enumerate(zip(th, dist)):
        rep.rows.append((t, k, f"W{p:g}", v))
    return rep


# -- dual bounds ------------------------------------------------------------------------------------------------


@dataclass
class DualBoundReport:
    T: float
    eps: float
    measured: np.ndarray     # W_2² of the mixed smoothed measure
    am0: np.ndarray
    l17: np.ndarray
    rows: list = field(default_factory=list)

    @property
    def dominated(self):
        return bool(np.all(self.measured <= self.am0 + 1e-6))


def run_dual_bound_experiment(cfg, threads=None, m=4096):
    """Measured ``W_2²(μ_{T,ε,ε}, μ)`` against the spectral dual bounds (d = 1).

    ``μ_{T,ε,ε} = (1−ε) μ_{T,ε} + ε μ`` is represented by its density on
    ``m`` cells; the bounds use midpoint quadrature on the same cells.
    """
    space = cfg.space()
    if space.d != 1 or not space.is_uniform:
        raise ConfigError("the dual-bound experiment runs on the flat circle or interval")
    cfg.check_zeta_window()
    T = cfg.T[-1]
    eps = cfg.eps_for(T)
    basis = cfg.basis()
    quad = fn.mu_quadrature(space, m)
    edges = np.linspace(0.0, 1.0, m + 1)

    def one(rep):
        tr = _path(cfg, rep, T, space)
        psi = fn.psi_all(tr, basis)
        f = fn.smoothed_density(psi, basis, T, eps, m)
        mixed = (1 - eps) * f.measure.weights + eps / m
        meas = Measure1D.density(edges, mixed)
        target = Measure1D.uniform()
        w2 = (w_p_circle(meas, target, 2.0) if space.is_torus
              else w_p_1d(space, meas, target, 2.0)) ** 2
        b = w2_dual_upper_bound(psi, basis, T, eps, quad, 2.0)
        return w2, b.am0, b.l17

    out = np.asarray(run_replicas(one, range(cfg.replicas), threads))
    rep = DualBoundReport(T, eps, out[:, 0], out[:, 1], out[:, 2])
    for k in range(cfg.replicas):
        rep.rows.append((T, k, "W2sq_mixed", out[k, 0]))
        rep.rows.append((T, k, "AM0", out[k, 1]))
        rep.rows.append((T, k, "L17", out[k, 2]))
    return rep


def smoothing_displacement(traj, basis, eps, m=2048):
    """``W_2²(μ_T, μ_{T,ε})`` on the circle (atoms against the smoothed density)."""
    if traj.space.d != 1 or not traj.space.is_torus:
        raise InputError("smoothing displacement is implemented on the circle")
    psi = fn.psi_all(traj, basis)
    f = fn.smoothed_density(psi, basis, traj.horizon, eps, m)
    smooth = Measure1D.density(np.linspace(0, 1, m + 1), f.measure.weights)
    return w_p_circle(empirical_measure_1d(traj), smooth, 2.0) ** 2
