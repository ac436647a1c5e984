"""Oracle checks for the transport solvers, shared by ``lab ot-selftest`` and the tests."""

import math

import numpy as np

from .model_space import torus
from .rng import named_stream
from .wasserstein import (
    GridMeasure,
    Measure1D,
    transport_lp,
    uniform_grid,
    w2_grid_to_uniform,
    w_p_circle,
    w_p_grid_exact,
    w_p_grid_sinkhorn,
    w_p_interval,
)


def _dirac_grid(space, m, cell):
    w = np.zeros((m,) * space.d)
    w[cell] = 1.0
    return GridMeasure(space, m, w)


def _random_grid(space, m, rng, floor=0.0):
    w = rng.random((m,) * space.d) + floor
    return GridMeasure(space, m, w / w.sum())


def _circle_lp(xa, wa, xb, wb, p):
    diff = np.abs(xa[:, None] - xb[None, :])
    cost = np.minimum(diff, 1.0 - diff) ** p
    return transport_lp(wa, wb, cost) ** (1.0 / p)


def oracle_checks(seed=0):
    """Run every oracle; yields ``(name, value, expected, tolerance)``."""
    rng = named_stream(seed, "ot-selftest")
    yield "interval: two Diracs", w_p_interval(Measure1D.atoms([0.2]), Measure1D.atoms([0.9]), 3.0), 0.7, 1e-12
    yield ("interval: uniform vs Dirac, p=2",
           w_p_interval(Measure1D.uniform(), Measure1D.atoms([0.5]), 2.0), 1 / math.sqrt(12), 1e-12)
    yield "circle: wrap distance", w_p_circle(Measure1D.atoms([0.1]), Measure1D.atoms([0.8]), 2.0), 0.3, 1e-12
    for p in (1.0, 2.0, 3.0):
        xa, xb = rng.random(12), rng.random(12)
        wa, wb = rng.random(12), rng.random(12)
        wa, wb = wa / wa.sum(), wb / wb.sum()
        got = w_p_circle(Measure1D.atoms(xa, wa), Measure1D.atoms(xb, wb), p)
        yield f"circle vs LP, 12 atoms, p={p:g}", got, _circle_lp(xa, wa, xb, wb, p), 1e-9

    t2 = torus(2)
    u = uniform_grid(t2, 8)
    yield "grid: identical measures", w_p_grid_exact(u, u, 2.0), 0.0, 1e-12
    yield ("grid: Diracs at (0,0) and (1/2,1/2)",
           w_p_grid_exact(_dirac_grid(t2, 8, (0, 0)), _dirac_grid(t2, 8, (4, 4)), 2.0),
           0.5 * math.sqrt(2.0), 1e-12)
    m = 12
    a1, a2, b1, b2 = (rng.random(m) for _ in range(4))
    a1, a2, b1, b2 = (v / v.sum() for v in (a1, a2, b1, b2))
    prod = w_p_grid_exact(GridMeasure(t2, m, np.outer(a1, a2)), GridMeasure(t2, m, np.outer(b1, b2)), 2.0)
    c1 = (np.arange(m) + 0.5) / m
    sep = (w_p_circle(Measure1D.atoms(c1, a1), Measure1D.atoms(c1, b1), 2.0) ** 2
           + w_p_circle(Measure1D.atoms(c1, a2), Measure1D.atoms(c1, b2), 2.0) ** 2)
    yield "grid: product measures split by axis", prod**2, sep, 1e-6

    a, b = _random_grid(t2, 16, rng, 0.2), _random_grid(t2, 16, rng, 0.2)
    exact = w_p_grid_exact(a, b, 2.0)
    sk, _ = w_p_grid_sinkhorn(a, b, 2.0)
    yield "sinkhorn vs LP, 16x16", sk, exact, max(1e-3, 0.02 * exact)
    yield "sinkhorn: identical measures", w_p_grid_sinkhorn(a, a, 2.0)[0], 0.0, 1e-6
    d1, d2 = _dirac_grid(t2, 16, (0, 0)), _dirac_grid(t2, 16, (3, 0))
    yield "sinkhorn: two Diracs", w_p_grid_sinkhorn(d1, d2, 2.0)[0], 3 / 16, 1e-4

    # smooth product density: the continuous W_2² splits into two circle problems
    def f(x):
        return 1 + 0.5 * np.cos(2 * np.pi * x) + 0.2 * np.sin(4 * np.pi * x)

    edges = np.linspace(0.0, 1.0, (1 << 14) + 1)
    marg = w_p_circle(Measure1D.density(edges, f(0.5 * (edges[1:] + edges[:-1]))), Measure1D.uniform(), 2.0)
    g = (np.arange(32) + 0.5) / 32
    w = np.outer(f(g), f(g))
    yield ("density solver vs product oracle", w2_grid_to_uniform(GridMeasure(t2, 32, w / w.sum())),
           math.sqrt(2.0) * marg, 1e-6)


def run_selftest(seed=0):
    """Return rows ``(name, value, expected, tolerance, passed)``."""
    rows = []
    for name, got, want, tol in oracle_checks(seed):
        rows.append((name, float(got), float(want), tol, bool(abs(got - want) <= tol)))
    return rows
