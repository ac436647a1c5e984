import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import sparse
from scipy.sparse.linalg import eigsh
from scipy.special import zeta

from ergowass.errors import DomainError, InputError, ResourceError
from ergowass.model_space import interval, torus
from ergowass.spectral import (
    _build_fd,
    build_basis,
    eigen_gradient,
    full_spectral_sum,
    heat_kernel,
    spectral_tail_sum,
)

FOUR_PI_SQ = 4 * math.pi**2


def _quadrature(space, m):
    g = (np.arange(m) + 0.5) / m
    if space.d == 1:
        return g[:, None], np.full(m, 1.0 / m)
    pts = np.stack(np.meshgrid(*([g] * space.d), indexing="ij"), -1).reshape(-1, space.d)
    return pts, np.full(len(pts), 1.0 / len(pts))


def _periodic_fd_eigs(n, k):
    h = 1.0 / n
    lap = sparse.diags([np.full(n, 2.0), np.full(n - 1, -1.0), np.full(n - 1, -1.0)], [0, 1, -1]).tolil()
    lap[0, n - 1] = lap[n - 1, 0] = -1.0
    vals = eigsh(lap.tocsc() / h**2, k=k, sigma=-1.0, which="LM", return_eigenvectors=False)
    return np.sort(vals)


def test_torus_first_pair():
    b = build_basis(torus(1), 2)
    assert np.allclose(b.eigenvalues, [FOUR_PI_SQ, FOUR_PI_SQ], rtol=1e-15)
    assert [b.descriptor(1), b.descriptor(2)] == ["k=(1);cos", "k=(1);sin"]
    fd = _periodic_fd_eigs(4096, 3)[1:]
    assert np.allclose(fd, b.eigenvalues, rtol=1e-6)


def test_flat_interval_first_mode():
    b = build_basis(interval(), 1)
    assert b.eigenvalues[0] == pytest.approx(math.pi**2, rel=1e-15)
    x = np.linspace(0, 1, 9)
    assert np.allclose(b.evaluate(x)[:, 0], math.sqrt(2) * np.cos(math.pi * x))
    fd = _build_fd(interval(), 1, 4096)
    assert fd.eigenvalues[0] == pytest.approx(math.pi**2, rel=1e-6)
    pts, w = _quadrature(interval(), 4096)
    assert w @ b.evaluate(pts)[:, 0] ** 2 == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("space,n", [(torus(1), 50), (torus(2), 50), (interval(), 50),
                                     (interval("cos", 1.0), 30)])
def test_orthonormal_mean_zero_and_dirichlet_energy(space, n):
    b = build_basis(space, n)
    m = {1: 8192, 2: 256}[space.d]
    pts, w = _quadrature(space, m)
    if not space.is_uniform:
        dens = np.exp(space.potential.value(pts[:, 0])) / space.normalizer
        w = w * dens
    phi = b.evaluate(pts)
    gram = (phi * w[:, None]).T @ phi
    assert np.max(np.abs(gram - np.eye(n))) < 1e-6
    assert np.max(np.abs(w @ phi)) < 1e-8
    grad = b.gradient(pts)
    energy = np.einsum("q,qnd,qnd->n", w, grad, grad)
    tol = 1e-5 if b.family != "fd" else 1e-3
    assert np.allclose(energy, b.eigenvalues, rtol=tol)


def test_order_and_ties():
    b = build_basis(torus(2), 200)
    assert np.all(np.diff(b.eigenvalues) >= 0)
    desc = [b.descriptor(i) for i in range(1, 5)]
    assert len(set(desc)) == 4


def test_weyl_growth_torus():
    for d in (1, 2, 3):
        b = build_basis(torus(d), 2000)
        i = np.arange(100, 2001)
        ratio = b.eigenvalues[99:] / i ** (2.0 / d)
        assert ratio.max() / ratio.min() < 2.0


def test_truncation_cap():
    with pytest.raises(ResourceError):
        build_basis(torus(1), 300_000)
    with pytest.raises(InputError):
        build_basis(torus(1), 0)


def test_heat_kernel_image_sum():
    b = build_basis(torus(1), 512)
    eps = 0.01
    m = np.arange(-20, 21)
    oracle = np.sum(np.exp(-(m**2) / (4 * eps))) / math.sqrt(4 * math.pi * eps)
    assert heat_kernel(b, eps, 0.0, 0.0) == pytest.approx(oracle, abs=1e-9)
    assert oracle == pytest.approx(2.82095, abs=1e-5)


def test_heat_kernel_equilibrates_and_conserves():
    rng = np.random.default_rng(0)
    for space in (torus(1), interval(), torus(2)):
        b = build_basis(space, 64)
        x, y = rng.random(space.d), rng.random(space.d)
        assert heat_kernel(b, 10.0, x, y) == pytest.approx(1.0, abs=1e-8)
    b = build_basis(torus(2), 2048)
    pts, w = _quadrature(torus(2), 64)
    x = np.broadcast_to([0.3, 0.7], pts.shape)
    vals, _ = heat_kernel(b, 0.05, x, pts, return_tail=True)
    assert w @ vals == pytest.approx(1.0, abs=1e-7)


def test_heat_kernel_rejects_nonpositive_time():
    with pytest.raises(InputError):
        heat_kernel(build_basis(torus(1), 4), 0.0, 0.1, 0.2)


@given(st.floats(0, 1, exclude_max=True), st.floats(0, 1, exclude_max=True), st.floats(1e-3, 1.0))
def test_heat_kernel_symmetric(x, y, eps):
    b = build_basis(torus(1), 128)
    a, _ = heat_kernel(b, eps, x, y, return_tail=True)
    c, _ = heat_kernel(b, eps, y, x, return_tail=True)
    assert abs(a - c) < 1e-12


def test_semigroup_property():
    b = build_basis(torus(1), 256)
    s, t, x, y = 0.01, 0.02, 0.1, 0.45
    z = (np.arange(4096) + 0.5) / 4096
    lhs, _ = heat_kernel(b, s + t, x, y, return_tail=True)
    left, _ = heat_kernel(b, s, np.full_like(z, x), z, return_tail=True)
    right, _ = heat_kernel(b, t, z, np.full_like(z, y), return_tail=True)
    assert np.mean(left * right) == pytest.approx(lhs, abs=1e-9)


def test_fd_eigenvalues_converge_at_second_order():
    space = interval("cos", 1.0)
    ref = _build_fd(space, 10, 16384).eigenvalues
    coarse = np.abs(_build_fd(space, 10, 1024).eigenvalues - ref)
    fine = np.abs(_build_fd(space, 10, 2048).eigenvalues - ref)
    ratio = coarse / fine
    assert np.all((ratio > 3.0) & (ratio < 5.5))


def test_eigen_gradient_examples():
    b = build_basis(torus(1), 2)
    assert eigen_gradient(b, 1, 0.0)[0] == pytest.approx(0.0, abs=1e-15)
    assert eigen_gradient(b, 2, 0.0)[0] == pytest.approx(2 * math.pi * math.sqrt(2))
    assert eigen_gradient(build_basis(interval(), 3), 1, 0.0)[0] == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(InputError):
        eigen_gradient(b, 3, 0.0)


def test_full_sums():
    assert full_spectral_sum(torus(1), 2.0) == pytest.approx(zeta(4) / (8 * math.pi**4), rel=1e-12)
    assert full_spectral_sum(torus(1), 2.0) == pytest.approx(1.38889e-3, rel=1e-5)
    assert full_spectral_sum(interval(), 2.0) == pytest.approx(1 / 90, rel=1e-12)


def test_tail_sums_decrease_and_bound():
    for space in (torus(1), torus(2), torus(3)):
        tails = [spectral_tail_sum(build_basis(space, n), 2.0) for n in (100, 400, 1600)]
        assert tails[0] > tails[1] > tails[2] > 0
    b = build_basis(torus(2), 200)
    exact_rest = build_basis(torus(2), 20000).eigenvalues[200:]
    assert spectral_tail_sum(b, 2.0) >= np.sum(exact_rest**-2.0)


def test_tail_sum_domain():
    with pytest.raises(DomainError):
        spectral_tail_sum(build_basis(torus(4), 10), 2.0)
