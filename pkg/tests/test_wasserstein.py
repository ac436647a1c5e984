import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ergowass.errors import InputError, NumericalError, ResourceError
from ergowass.functionals import mu_quadrature, xi_from_psi
from ergowass.model_space import torus
from ergowass.selftest import run_selftest
from ergowass.spectral import build_basis
from ergowass.wasserstein import (
    GridMeasure,
    Measure1D,
    log_mean,
    mix,
    transport_lp,
    uniform_grid,
    w2_dual_upper_bound,
    w2_grid_to_uniform,
    w_p_circle,
    w_p_grid_exact,
    w_p_grid_sinkhorn,
    w_p_interval,
)

T2 = torus(2)


def atoms(draw, n):
    x = draw(st.lists(st.floats(0, 1, exclude_max=True), min_size=n, max_size=n))
    w = draw(st.lists(st.floats(0.01, 1), min_size=n, max_size=n))
    w = np.asarray(w) / np.sum(w)
    return np.asarray(x), w


@st.composite
def atomic_pair(draw):
    n = draw(st.integers(1, 16))
    k = draw(st.integers(1, 16))
    return atoms(draw, n), atoms(draw, k)


def circle_lp(a, b, p):
    (xa, wa), (xb, wb) = a, b
    d = np.abs(xa[:, None] - xb[None, :])
    return transport_lp(wa, wb, np.minimum(d, 1 - d) ** p) ** (1 / p)


def random_grid(rng, m=4, floor=0.05):
    w = rng.random((m, m)) + floor
    return GridMeasure(T2, m, w / w.sum())


def test_interval_examples():
    assert w_p_interval(Measure1D.atoms([0.2]), Measure1D.atoms([0.9]), 1.5) == pytest.approx(0.7)
    u = Measure1D.uniform()
    assert w_p_interval(u, u, 2.0) == 0.0
    assert w_p_interval(u, Measure1D.atoms([0.5]), 2.0) == pytest.approx(1 / math.sqrt(12), abs=1e-12)
    x = (np.arange(1000) + 0.5) / 1000
    lp = transport_lp(np.full(1000, 1e-3), [1.0], ((x - 0.5) ** 2)[:, None])
    assert math.sqrt(lp) == pytest.approx(0.288675, abs=1e-6)
    with pytest.raises(InputError):
        w_p_interval(u, u, 0.5)


def test_circle_examples():
    assert w_p_circle(Measure1D.atoms([0.1]), Measure1D.atoms([0.8]), 3.0) == pytest.approx(0.3, abs=1e-12)
    a = Measure1D.atoms([0.1, 0.4], [0.3, 0.7])
    assert w_p_circle(a, a, 2.0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InputError):
        w_p_circle(a, a, 0.9)


@given(atomic_pair(), st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_circle_reduction_equals_lp(pair, p):
    a, b = pair
    got = w_p_circle(Measure1D.atoms(*a), Measure1D.atoms(*b), p)
    assert got == pytest.approx(circle_lp(a, b, p), abs=1e-9)


@given(st.lists(st.floats(0, 1, exclude_max=True), min_size=1, max_size=40))
def test_circle_w1_against_uniform_fast_path(xs):
    a = Measure1D.atoms(xs)
    fine = Measure1D.density(np.linspace(0, 1, 4097), np.full(4096, 1 / 4096))
    assert w_p_circle(a, Measure1D.uniform(), 1.0) == pytest.approx(w_p_circle(a, fine, 1.0), abs=1e-9)


def test_grid_examples():
    u = uniform_grid(T2, 8)
    assert w_p_grid_exact(u, u, 2.0) == 0.0
    a = GridMeasure(T2, 8, np.eye(1, 64, 0).reshape(8, 8))
    b = GridMeasure(T2, 8, np.eye(1, 64, 4 * 8 + 4).reshape(8, 8))
    assert w_p_grid_exact(a, b, 2.0) == pytest.approx(0.5 * math.sqrt(2))
    with pytest.raises(ResourceError):
        w_p_grid_exact(uniform_grid(T2, 65), uniform_grid(T2, 65), 2.0)


def test_oracle_suite_passes():
    rows = run_selftest(seed=3)
    assert all(r[-1] for r in rows), [r for r in rows if not r[-1]]


@given(st.integers(0, 2**32 - 1))
def test_metric_axioms_exact(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_grid(rng) for _ in range(3))
    ab, ba = w_p_grid_exact(a, b, 2.0), w_p_grid_exact(b, a, 2.0)
    assert abs(ab - ba) < 1e-10
    assert w_p_grid_exact(a, c, 2.0) <= ab + w_p_grid_exact(b, c, 2.0) + 1e-9


@given(st.integers(0, 2**32 - 1), st.floats(1, 3), st.floats(1, 3))
def test_monotone_in_p(seed, p, q):
    rng = np.random.default_rng(seed)
    a, b = random_grid(rng), random_grid(rng)
    lo, hi = sorted((p, q))
    assert w_p_grid_exact(a, b, lo) <= w_p_grid_exact(a, b, hi) + 1e-9


@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.sampled_from([1.0, 2.0]))
def test_mixture_convexity(seed, theta, p):
    rng = np.random.default_rng(seed)
    a, b, c, d = (random_grid(rng) for _ in range(4))
    lhs = w_p_grid_exact(mix(a, c, theta), mix(b, d, theta), p) ** p
    rhs = (1 - theta) * w_p_grid_exact(a, b, p) ** p + theta * w_p_grid_exact(c, d, p) ** p
    assert lhs <= rhs + 1e-9


def test_sinkhorn_reports_non_convergence():
    rng = np.random.default_rng(0)
    a, b = random_grid(rng, 16), random_grid(rng, 16)
    with pytest.raises(NumericalError) as info:
        w_p_grid_sinkhorn(a, b, 2.0, max_iter=5)
    assert info.value.diagnostics


def test_sinkhorn_upward_bias():
    rng = np.random.default_rng(1)
    a, b = random_grid(rng, 8), random_grid(rng, 8)
    sk, viol = w_p_grid_sinkhorn(a, b, 2.0)
    assert viol < 1e-7
    # marginals are met to 1e-7, so the cost may dip by up to that times the diameter²
    assert sk >= w_p_grid_exact(a, b, 2.0) - 1e-7


def test_density_solver_uniform_and_rough_input():
    assert w2_grid_to_uniform(uniform_grid(T2, 16)) == pytest.approx(0.0, abs=1e-12)
    # the density view sits below the atomic view, which pays a one-cell floor
    w = np.random.default_rng(2).random((16, 16)) + 0.5
    g = GridMeasure(T2, 16, w / w.sum())
    assert w2_grid_to_uniform(g) <= w_p_grid_exact(g, uniform_grid(T2, 16), 2.0)


def test_dual_bounds_vanish_at_equilibrium():
    b = build_basis(torus(1), 16)
    quad = mu_quadrature(torus(1), 256)
    bounds = w2_dual_upper_bound(np.zeros(16), b, 100.0, 0.01, quad)
    assert bounds.am0 == 0.0 and bounds.l17 == 0.0
    with pytest.raises(InputError):
        w2_dual_upper_bound(np.zeros(16), b, 100.0, 0.0, quad)


def test_single_mode_l2_identity():
    b = build_basis(torus(1), 4)
    psi = np.array([0.8, 0, 0, 0])
    T, eps = 100.0, 0.01
    bounds = w2_dual_upper_bound(psi, b, T, eps, mu_quadrature(torus(1), 1024))
    assert bounds.l2_sq == pytest.approx(xi_from_psi(psi, b.eigenvalues, eps) / T, rel=1e-10)
    lam = b.eigenvalues[0]
    assert bounds.l2_sq == pytest.approx(math.exp(-2 * eps * lam) * 0.64 / (T * lam), rel=1e-10)


@given(st.floats(1e-6, 50))
def test_log_mean_between_geometric_and_arithmetic(f):
    val = log_mean(f)
    assert math.sqrt(f) - 1e-12 <= val <= (1 + f) / 2 + 1e-12
