"""Concrete state spaces: the flat torus and the reflecting unit interval.

A :class:`ModelSpace` bundles the metric, the invariant probability measure
``mu(dx) ∝ exp(V(x)) dx`` and the drift ``b = grad V + Z``.  The generator is
the full Laplacian plus drift, ``L = Δ + b·∇``, so the matching SDE has
diffusion coefficient ``sqrt(2)``.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate
from scipy.interpolate import PchipInterpolator

from .errors import InputError

QUANTILE_GRID = 2**14


@dataclass(frozen=True)
class PotentialSpec:
    """Closed-form potential on [0, 1].

    kind is one of ``"zero"``, ``"cos"`` (``a cos 2πx``) or ``"quadratic"``
    (``a x (1 - x)``).
    """

    kind: str = "zero"
    a: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "cos", "quadratic"):
            raise InputError(f"unknown potential kind {self.kind!r}")

    @property
    def is_zero(self):
        return self.kind == "zero" or self.a == 0.0

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "cos":
            return self.a * np.cos(2 * np.pi * x)
        if self.kind == "quadratic":
            return self.a * x * (1.0 - x)
        return np.zeros_like(x)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "cos":
            return -2 * np.pi * self.a * np.sin(2 * np.pi * x)
        if self.kind == "quadratic":
            return self.a * (1.0 - 2.0 * x)
        return np.zeros_like(x)


@dataclass(frozen=True)
class DriftSpec:
    """Divergence-free drift ``Z``: zero, or a constant vector on the torus."""

    z: tuple = ()

    @property
    def is_zero(self):
        return not any(self.z)


@dataclass(frozen=True)
class ModelSpace:
    """Torus ``[0,1)^d`` or the interval ``[0,1]`` with Neumann reflection.

    Use :func:`torus` and :func:`interval` to build instances.  Instances are
    immutable and safe to share between workers.
    """

    kind: str
    d: int = 1
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    drift: DriftSpec = field(default_factory=DriftSpec)

    def __post_init__(self):
        if self.kind not in ("torus", "interval"):
            raise InputError(f"unknown space kind {self.kind!r}")
        if int(self.d) != self.d or self.d < 1:
            raise InputError("dimension must be a positive integer")
        if self.kind == "interval":
            if self.d != 1:
                raise InputError("the interval is one-dimensional")
            if not self.drift.is_zero:
                raise InputError("the interval admits no antisymmetric drift")
        else:
            if not self.potential.is_zero:
                raise InputError("torus potentials are not supported")
            if self.drift.z and len(self.drift.z) != self.d:
                raise InputError("drift vector length must equal the dimension")

    @property
    def is_torus(self):
        return self.kind == "torus"

    @property
    def is_uniform(self):
        """True when the invariant measure is Lebesgue measure."""
        return self.potential.is_zero

    @property
    def drift_vector(self):
        """Constant part of the drift as a length-d array."""
        if self.drift.z:
            return np.asarray(self.drift.z, dtype=float)
        return np.zeros(self.d)

    def describe(self):
        if self.is_torus:
            return {"kind": "torus", "d": self.d, "drift": list(self.drift_vector)}
        return {"kind": "interval", "d": 1, "potential": self.potential.kind,
                "a": self.potential.a}

    # -- invariant measure -------------------------------------------------

    @cached_property
    def normalizer(self):
        """``∫ exp(V)`` over the unit cell (1 for the uniform case)."""
        if self.is_uniform:
            return 1.0
        val, _ = integrate.quad(lambda u: np.exp(self.potential.value(u)), 0.0, 1.0,
                                epsabs=0.0, epsrel=1e-13, limit=200)
        return val

    @cached_property
    def _quantile(self):
        u = np.linspace(0.0, 1.0, QUANTILE_GRID + 1)
        dens = np.exp(self.potential.value(u)) / self.normalizer
        cdf = integrate.cumulative_simpson(dens, x=u, initial=0.0)
        cdf /= cdf[-1]
        return PchipInterpolator(cdf, u)

    def quantile(self, q):
        """Quantile function of the invariant law (interval only)."""
        q = np.asarray(q, dtype=float)
        if self.is_uniform:
            return q.copy()
        return np.clip(self._quantile(q), 0.0, 1.0)

    def mean(self):
        """Mean of the invariant law (interval) or of each coordinate (torus)."""
        if self.is_uniform:
            return 0.5
        val, _ = integrate.quad(lambda u: u * np.exp(self.potential.value(u)), 0.0, 1.0,
                                epsabs=0.0, epsrel=1e-13, limit=200)
        return val / self.normalizer

    def drift_at(self, x):
        """Full drift ``b(x) = ∇V(x) + Z`` at canonical points of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        if self.is_torus:
            return np.broadcast_to(self.drift_vector, x.shape).copy()
        return self.potential.gradient(x)


def torus(d=1, z=None):
    """Flat torus ``[0,1)^d`` with optional constant drift ``z``."""
    drift = DriftSpec(tuple(float(v) for v in z)) if z is not None else DriftSpec()
    return ModelSpace("torus", int(d), PotentialSpec(), drift)


def interval(potential="zero", a=0.0):
    """Reflecting interval ``[0,1]`` with potential from the closed-form menu."""
    if isinstance(potential, PotentialSpec):
        spec = potential
    else:
        spec = PotentialSpec(potential, float(a))
    return ModelSpace("interval", 1, spec, DriftSpec())


def _as_points(space, x):
    x = np.asarray(x, dtype=float)
    if space.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != space.d:
        raise InputError(f"point dimension {x.shape[-1]} does not match space dimension {space.d}")
    return x


def canonicalize(space, x):
    """Map raw coordinates into the fundamental domain.

    The torus wraps each coordinate modulo 1 into ``[0, 1)``; the interval folds
    by repeated mirror reflection at 0 and 1.  The output has the shape of the
    input.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite coordinate")
    if space.is_torus:
        y = np.mod(x, 1.0)
        # np.mod(-tiny, 1) rounds to 1.0
        return np.where(y >= 1.0, 0.0, y)
    y = np.mod(x, 2.0)
    y = np.where(y >= 2.0, 0.0, y)
    return np.where(y > 1.0, 2.0 - y, y)


def distance(space, x, y):
    """Ground metric between canonical points; broadcasts over leading axes."""
    x = _as_points(space, x)
    y = _as_points(space, y)
    diff = np.abs(x - y)
    if space.is_torus:
        diff = np.minimum(diff, 1.0 - diff)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def invariant_density(space, x):
    """Density of the invariant law with respect to Lebesgue measure."""
    x = np.asarray(x, dtype=float)
    if space.is_uniform:
        # d > 1: the last axis holds coordinates; d = 1: any shape of positions
        return np.ones(x.shape[:-1] if space.d > 1 else x.shape)
    return np.exp(space.potential.value(x)) / space.normalizer


def sample_invariant(space, rng, size=None):
    """Draw exactly from the invariant law.

    Returns an array of shape ``(d,)`` or ``(size, d)``.
    """
    n = 1 if size is None else int(size)
    if space.is_torus or space.is_uniform:
        out = rng.random((n, space.d))
    else:
        out = space.quantile(rng.random(n))[:, None]
    return out[0] if size is None else out
