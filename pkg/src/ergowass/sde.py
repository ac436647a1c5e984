"""Euler–Maruyama paths of ``dX = b(X) dt + sqrt(2) dW`` on the model spaces.

Each step is ``x <- canonicalize(x + b(x) h + sqrt(2h) ξ)``: the torus wraps,
the interval folds by mirror reflection.  Paths are driven by per-replica
Philox streams (see :mod:`ergowass.rng`).  Halving the step ``refine`` times
reuses the coarse Gaussians through Brownian-bridge splitting, so a refined
path is coupled to its coarse twin and step-size comparisons are not swamped
by Monte Carlo noise.
"""

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .errors import InputError
from .model_space import canonicalize, sample_invariant
from .rng import replica_stream

MAX_STEP = 1e-2
NOISE_CHUNK = 1 << 16

_DUMP_MAGIC = b"EWTRAJ\x00\x00"
_DUMP_VERSION = 1


@dataclass(frozen=True)
class InitialLaw:
    """Law of ``X_0``.

    ``stationary`` draws from the invariant measure; ``point`` starts at
    ``x0``; ``smoothed`` starts at ``x0`` (or from the invariant law when
    ``x0`` is None) and runs the dynamics for time ``r`` before recording.
    """

    kind: str = "stationary"
    x0: tuple = None
    r: float = 0.0

    def __post_init__(self):
        if self.kind not in ("stationary", "point", "smoothed"):
            raise InputError(f"unknown initial law {self.kind!r}")
        if self.kind == "point" and self.x0 is None:
            raise InputError("point initial law needs x0")
        if self.kind == "smoothed" and not self.r > 0:
            raise InputError("smoothed initial law needs r > 0")

    @classmethod
    def point(cls, x0):
        return cls("point", tuple(np.atleast_1d(np.asarray(x0, dtype=float)).tolist()))

    @classmethod
    def smoothed(cls, r, x0=None):
        x0 = None if x0 is None else tuple(np.atleast_1d(np.asarray(x0, dtype=float)).tolist())
        return cls("smoothed", x0, float(r))

    def tag(self):
        if self.kind == "stationary":
            return "stationary"
        if self.kind == "point":
            return f"point({','.join(f'{v:g}' for v in self.x0)})"
        start = "mu" if self.x0 is None else ",".join(f"{v:g}" for v in self.x0)
        return f"smoothed(r={self.r:g};{start})"


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Stored path on the observation grid ``t_j = j·h·stride``."""

    space: object
    step: float
    horizon: float
    stride: int
    points: np.ndarray
    initial_law: InitialLaw
    seed_path: tuple = ()

    @property
    def dt(self):
        return self.step * self.stride

    @property
    def times(self):
        return np.arange(len(self.points)) * self.dt

    def weights(self, start=0, stop=None):
        """Trapezoid weights for ``∫ f(X_t) dt`` over points ``start..stop``."""
        stop = len(self.points) if stop is None else stop
        w = np.full(stop - start, self.dt)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def index_of(self, t):
        """Observation index of time ``t`` (must lie on the grid)."""
        j = t / self.dt
        jr = int(round(j))
        if abs(j - jr) > 1e-6 or not 0 <= jr < len(self.points):
            raise InputError(f"time {t} is not on the observation grid of this trajectory")
        return jr


# -- kernel -------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _advance(x, noise, h, is_torus, z, pkind, a, stride, out, pos, phase):
    d = x.shape[0]
    sq = math.sqrt(2.0 * h)
    two_pi = 2.0 * math.pi
    for n in range(noise.shape[0]):
        for c in range(d):
            if is_torus:
                b = z[c]
            elif pkind == 1:
                b = -two_pi * a * math.sin(two_pi * x[c])
            elif pkind == 2:
                b = a * (1.0 - 2.0 * x[c])
            else:
                b = 0.0
            y = x[c] + b * h + sq * noise[n, c]
            if is_torus:
                y = y - math.floor(y)
                if y >= 1.0:
                    y = 0.0
            else:
                y = y - 2.0 * math.floor(0.5 * y)
                if y >= 2.0:
                    y = 0.0
                if y > 1.0:
                    y = 2.0 - y
            x[c] = y
        phase += 1
        if out.shape[0] > 0 and phase == stride:
            phase = 0
            for c in range(d):
                out[pos, c] = x[c]
            pos += 1
    return pos, phase


def _refine(xi, etas):
    """Split coarse unit normals into ``2^len(etas)`` finer unit normals each."""
    cur = xi
    for eta in etas:
        nxt = np.empty((2 * cur.shape[0], cur.shape[1]))
        nxt[0::2] = (cur + eta) / math.sqrt(2.0)
        nxt[1::2] = (cur - eta) / math.sqrt(2.0)
        cur = nxt
    return cur


class _NoiseSource:
    def __init__(self, d, seed, replica, refine, forced=None):
        self.d = d
        self.refine = refine
        self.forced = None if forced is None else np.asarray(forced, dtype=float).reshape(-1, d)
        self.used = 0
        if forced is None:
            self.streams = [replica_stream(seed, replica, lvl) for lvl in range(refine + 1)]

    def initial(self):
        return self.streams[0] if self.forced is None else None

    def take(self, n_fine):
        """Next ``n_fine`` unit normals at the finest level."""
        if self.forced is not None:
            out = self.forced[self.used:self.used + n_fine]
            if len(out) < n_fine:
                raise InputError("forced noise is shorter than the number of steps")
            self.used += n_fine
            return out
        factor = 1 << self.refine
        if n_fine % factor:
            raise InputError("internal: refined chunk not aligned")
        k = n_fine // factor
        xi = self.streams[0].standard_normal((k, self.d))
        etas = [self.streams[lvl].standard_normal((k << (lvl - 1), self.d))
                for lvl in range(1, self.refine + 1)]
        return _refine(xi, etas)


def _space_params(space):
    pk = {"zero": 0, "cos": 1, "quadratic": 2}[space.potential.kind]
    return space.is_torus, space.drift_vector.astype(float), pk, float(space.potential.a)


def _step_count(duration, h):
    n = duration / h
    nr = int(round(n))
    if abs(n - nr) > 1e-6 * max(1.0, n):
        raise InputError(f"duration {duration} is not a multiple of the step {h}")
    return nr


def simulate(space, h, T, init=None, seed=0, replica=0, *, stride=1, refine=0, noise=None):
    """Simulate one replica on ``[0, T]``.

    Parameters
    ----------
    h : float
        Coarse integration step, ``0 < h <= 1e-2``.  The actual step is
        ``h / 2**refine``.
    T : float
        Horizon; must be a multiple of the actual step.
    init : InitialLaw, optional
        Defaults to the stationary law.
    seed, replica : int
        Select the Philox stream.
    stride : int
        Store every ``stride`` actual steps.
    noise : array, optional
        Standard normals to use instead of the stream, shape
        ``(n_steps, d)``; the initial point must then be deterministic.

    Returns
    -------
    Trajectory
    """
    if not 0 < h <= MAX_STEP:
        raise InputError(f"step must lie in (0, {MAX_STEP}]")
    if not T >= h:
        raise InputError("horizon must be at least one step")
    if stride < 1 or refine < 0:
        raise InputError("stride must be >= 1 and refine >= 0")
    init = InitialLaw() if init is None else init
    hf = h / (1 << refine)
    n_steps = _step_count(T, hf)
    if n_steps % stride:
        raise InputError("horizon must cover a whole number of strides")
    d = space.d
    src = _NoiseSource(d, seed, replica, refine, noise)

    if init.kind == "stationary" or (init.kind == "smoothed" and init.x0 is None):
        gen = src.initial()
        if gen is None:
            raise InputError("forced noise requires a deterministic initial point")
        x = np.array(sample_invariant(space, gen), dtype=float).reshape(d)
    else:
        x = canonicalize(space, np.asarray(init.x0, dtype=float).reshape(d)).astype(float)

    params = _space_params(space)
    empty = np.empty((0, d))
    factor = 1 << refine
    chunk = NOISE_CHUNK * factor

    def run(n_total, out, pos, phase):
        done = 0
        while done < n_total:
            k = min(chunk, n_total - done)
            if noise is None and k % factor:
                raise InputError("internal: step count not aligned with refinement")
            pos, phase = _advance(x, src.take(k), hf, *params, stride, out, pos, phase)
            done += k
        return pos, phase

    if init.kind == "smoothed":
        run(_step_count(init.r, h) * factor, empty, 0, 0)

    pts = np.empty((n_steps // stride + 1, d))
    pts[0] = x
    run(n_steps, pts, 1, 0)
    return Trajectory(space, hf, n_steps * hf, stride, pts, init, (seed, replica, refine))


def run_replicas(fn, replicas, threads=None):
    """Apply ``fn(replica)`` to each replica index, returning results in order.

    Work is spread over a thread pool; the result never depends on the thread
    count because every replica owns its stream.
    """
    replicas = list(replicas)
    threads = resolve_threads(threads)
    if threads <= 1 or len(replicas) <= 1:
        return [fn(r) for r in replicas]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, replicas))


def resolve_threads(threads=None):
    if threads:
        return max(1, int(threads))
    env = os.environ.get("LAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def stationarity_report(trajectories, basis, m):
    """Replica-averaged time means of ``φ_1..φ_m`` with standard errors.

    Returns a list of dicts with keys ``mode``, ``mean``, ``stderr``,
    ``flagged`` (``|mean| > 4 stderr``).
    """
    m = min(int(m), basis.N)
    sub = basis.truncated(m)
    per = []
    for tr in trajectories:
        if tr.initial_law.kind != "stationary":
            raise InputError("stationarity report needs stationary trajectories")
        per.append(sub.weighted_sums(tr.points, tr.weights()) / tr.horizon)
    per = np.asarray(per)
    mean = per.mean(axis=0)
    se = per.std(axis=0, ddof=1) / math.sqrt(len(per)) if len(per) > 1 else np.full(m, np.inf)
    return [
        {"mode": i + 1, "mean": float(mean[i]), "stderr": float(se[i]),
         "flagged": bool(abs(mean[i]) > 4 * se[i])}
        for i in range(m)
    ]


# -- binary dump ----------------------------------------------------------------


def dump_trajectory(traj, path):
    """Write points as little-endian float64 after a 32-byte header.

    Header layout: 8-byte magic ``EWTRAJ\\0\\0``, uint32 version, uint32
    dimension, uint64 point count, 8 reserved zero bytes.
    """
    pts = np.ascontiguousarray(traj.points, dtype="<f8")
    header = _DUMP_MAGIC + struct.pack("<IIQ8x", _DUMP_VERSION, pts.shape[1], pts.shape[0])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pts.tobytes())


def load_trajectory_points(path):
    with open(path, "rb") as fh:
        header = fh.read(32)
        if header[:8] != _DUMP_MAGIC:
            raise InputError("not a trajectory dump")
        version, d, count = struct.unpack("<IIQ8x", header[8:])
        if version != _DUMP_VERSION:
            raise InputError(f"unsupported dump version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != d * count:
        raise InputError("truncated trajectory dump")
    return data.reshape(count, d)
