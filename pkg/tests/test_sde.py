import math

import numpy as np
import pytest
from scipy import stats

from ergowass.errors import InputError
from ergowass.model_space import interval, torus
from ergowass.sde import (
    InitialLaw,
    dump_trajectory,
    load_trajectory_points,
    run_replicas,
    simulate,
    stationarity_report,
)
from ergowass.spectral import build_basis


def test_zero_noise_step_stays_put():
    tr = simulate(torus(1), 1e-3, 1e-3, InitialLaw.point([0.0]), noise=np.zeros((1, 1)))
    assert tr.points[-1, 0] == 0.0


def test_reflection_folds_back():
    h = 1e-3
    xi = 0.002 / math.sqrt(2 * h)
    tr = simulate(interval(), h, h, InitialLaw.point([0.999]), noise=np.array([[xi]]))
    assert tr.points[-1, 0] == pytest.approx(0.999, abs=1e-12)


def test_pure_drift_step():
    tr = simulate(torus(2, [1.0, 0.0]), 1e-3, 1e-3, InitialLaw.point([0.0, 0.0]), noise=np.zeros((1, 2)))
    assert np.allclose(tr.points[-1], [0.001, 0.0])


def test_length_and_canonical_points():
    tr = simulate(interval("cos", 1.0), 1e-3, 2.0, seed=3, stride=4)
    assert len(tr.points) == 2.0 / (1e-3 * 4) + 1
    assert np.all((tr.points >= 0) & (tr.points <= 1))
    assert tr.horizon == pytest.approx(2.0)


@pytest.mark.parametrize("kw", [dict(h=0.0, T=1.0), dict(h=0.02, T=1.0), dict(h=1e-3, T=1e-4)])
def test_invalid_steps(kw):
    with pytest.raises(InputError):
        simulate(torus(1), kw["h"], kw["T"])


def test_deterministic_across_threads():
    def run(threads):
        return run_replicas(lambda r: simulate(torus(2), 1e-3, 1.0, seed=11, replica=r).points,
                            range(4), threads)

    for a, b in zip(run(1), run(3)):
        assert np.array_equal(a, b)


def test_refined_path_tracks_coarse_path():
    coarse = simulate(torus(1), 1e-3, 1.0, seed=5)
    fine = simulate(torus(1), 1e-3, 1.0, seed=5, refine=1, stride=2)
    assert len(fine.points) == len(coarse.points)
    # Brownian motion on the torus is exact at grid times: coupled paths coincide
    diff = np.abs(fine.points - coarse.points)
    assert np.max(np.minimum(diff, 1 - diff)) < 1e-9


def test_smoothed_start_runs_burn_in():
    a = simulate(torus(1), 1e-3, 0.1, InitialLaw.smoothed(1.0, [0.2]), seed=2)
    assert a.points[0, 0] != 0.2


@pytest.mark.parametrize("space", [torus(1), interval(), torus(1, [1.0])])
def test_stationarity_report(space):
    reps = [simulate(space, 1e-3, 50.0, seed=9, replica=r, stride=10) for r in range(100)]
    rep = stationarity_report(reps, build_basis(space, 4), 1)
    assert not rep[0]["flagged"]
    assert abs(rep[0]["mean"]) <= 4 * rep[0]["stderr"]


def test_reflection_preserves_uniform_law():
    pts = np.concatenate([simulate(interval(), 1e-3, 20.0, seed=4, replica=r, stride=500).points[:, 0]
                          for r in range(50)])
    assert stats.kstest(pts, "uniform").pvalue > 0.01


def test_weak_error_torus():
    lam = 4 * math.pi**2
    x0, t = 0.1, 0.1
    target = math.exp(-lam * t) * math.sqrt(2) * math.cos(2 * math.pi * x0)
    for h in (1e-2, 5e-3):
        end = np.array([simulate(torus(1), h, t, InitialLaw.point([x0]), seed=1, replica=r).points[-1, 0]
                        for r in range(20000)])
        vals = math.sqrt(2) * np.cos(2 * math.pi * end)
        assert abs(vals.mean() - target) < 4 * vals.std() / math.sqrt(len(vals))


def test_dump_roundtrip(tmp_path):
    tr = simulate(torus(3), 1e-3, 0.5, seed=1)
    path = tmp_path / "t.bin"
    dump_trajectory(tr, path)
    raw = path.read_bytes()
    assert raw[:8] == b"EWTRAJ\x00\x00" and len(raw) == 32 + tr.points.size * 8
    assert np.array_equal(load_trajectory_points(path), tr.points)


def test_trapezoid_weights_and_index():
    tr = simulate(torus(1), 1e-3, 1.0, seed=0)
    w = tr.weights()
    assert w.sum() == pytest.approx(1.0)
    assert tr.index_of(0.5) == 500
    with pytest.raises(InputError):
        tr.index_of(0.50005)
