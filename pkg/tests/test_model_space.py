import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, stats

from ergowass.errors import InputError
from ergowass.model_space import (
    canonicalize,
    distance,
    interval,
    invariant_density,
    sample_invariant,
    torus,
)
from ergowass.spectral import build_basis

coords = st.floats(-50, 50, allow_nan=False)


def test_torus_wraps_and_interval_folds():
    assert canonicalize(torus(1), np.array([1.25]))[0] == pytest.approx(0.25)
    assert canonicalize(torus(1), np.array([-0.25]))[0] == pytest.approx(0.75)
    assert canonicalize(interval(), np.array([1.001]))[0] == pytest.approx(0.999)
    assert canonicalize(interval(), np.array([-0.3]))[0] == pytest.approx(0.3)
    assert canonicalize(interval(), np.array([2.4]))[0] == pytest.approx(0.4)


def test_tiny_negative_wraps_inside():
    y = canonicalize(torus(1), np.array([-1e-18]))
    assert 0.0 <= y[0] < 1.0


def test_distance_wraps_on_torus_only():
    assert distance(torus(1), 0.1, 0.9) == pytest.approx(0.2)
    assert distance(interval(), 0.1, 0.9) == pytest.approx(0.8)
    assert distance(torus(2), [0.0, 0.0], [0.5, 0.5]) == pytest.approx(math.sqrt(0.5))


def test_uniform_densities():
    assert np.all(invariant_density(torus(2), np.random.default_rng(0).random((5, 2))) == 1.0)
    assert np.all(invariant_density(interval(), np.linspace(0, 1, 7)) == 1.0)


def test_cos_potential_density_at_zero():
    space = interval("cos", 1.0)
    Z, _ = integrate.quad(lambda u: math.exp(math.cos(2 * math.pi * u)), 0, 1, epsabs=0, epsrel=1e-13)
    assert invariant_density(space, 0.0) == pytest.approx(math.e / Z, rel=1e-12)


def test_density_integrates_to_one():
    for space in (interval("cos", 1.0), interval("quadratic", 2.0)):
        u = np.linspace(0, 1, 2**14 + 1)
        assert integrate.simpson(invariant_density(space, u), x=u) == pytest.approx(1.0, abs=1e-10)


def test_invalid_spaces():
    with pytest.raises(InputError):
        torus(0)
    with pytest.raises(InputError):
        interval("sextic", 1.0)
    with pytest.raises(InputError):
        torus(2, [1.0])


def test_sample_torus_mean():
    x = sample_invariant(torus(1), np.random.default_rng(1), 10**5)[:, 0]
    assert abs(x.mean() - 0.5) < 3 * x.std() / math.sqrt(len(x))


def test_sample_flat_interval_ks():
    x = sample_invariant(interval(), np.random.default_rng(2), 10**4)[:, 0]
    assert stats.kstest(x, "uniform").statistic < 1.63 / 100


def test_sample_cos_interval_mean():
    space = interval("cos", 1.0)
    x = sample_invariant(space, np.random.default_rng(3), 10**5)[:, 0]
    assert abs(x.mean() - space.mean()) < 3 * x.std() / math.sqrt(len(x))


def test_sample_shape():
    assert sample_invariant(torus(3), np.random.default_rng(0)).shape == (3,)
    assert sample_invariant(torus(3), np.random.default_rng(0), 4).shape == (4, 3)


@given(arrays(float, (3, 2), elements=coords))
def test_canonicalize_idempotent(x):
    for space in (torus(2),):
        y = canonicalize(space, x)
        assert np.array_equal(canonicalize(space, y), y)
        assert np.all((y >= 0) & (y < 1))
    z = canonicalize(interval(), x[:, :1])
    assert np.array_equal(canonicalize(interval(), z), z)
    assert np.all((z >= 0) & (z <= 1))


@given(arrays(float, (3, 2), elements=st.floats(0, 0.999999)))
def test_distance_is_metric(p):
    space = torus(2)
    a, b, c = p
    assert distance(space, a, b) == pytest.approx(distance(space, b, a), abs=1e-15)
    assert distance(space, a, c) <= distance(space, a, b) + distance(space, b, c) + 1e-12


def test_drift_is_divergence_free_in_the_mode_basis():
    space = torus(2, [0.7, -1.3])
    basis = build_basis(space, 20)
    m = 64
    g = (np.arange(m) + 0.5) / m
    pts = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    phi = basis.evaluate(pts)
    zphi = basis.gradient(pts) @ space.drift_vector
    gram = phi.T @ zphi / len(pts)
    assert np.max(np.abs(gram + gram.T)) < 1e-8
