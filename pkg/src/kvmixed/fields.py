"""Catalogue of closed-form fields used as data, coefficients and reference solutions.

Every field exposes ``value(x, y)`` and ``grad(x, y)`` (a ``(gx, gy)`` tuple);
vector fields expose ``value`` returning a tuple and ``div``.  Fields are
also plain callables (``f(x, y) == f.value(x, y)``) so they can be handed to
assembly and interpolation routines directly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np


class FieldError(ValueError):
    pass


class ScalarField:
    def __call__(self, x, y):
        return self.value(x, y)

    def laplacian(self, x, y):
        raise NotImplementedError(f"{type(self).__name__} has no closed-form Laplacian")


@dataclass(frozen=True)
class Constant(ScalarField):
    c: float = 1.0

    def value(self, x, y):
        return np.full(np.shape(x), float(self.c))

    def grad(self, x, y):
        z = np.zeros(np.shape(x))
        return z, z.copy()

    def laplacian(self, x, y):
        return np.zeros(np.shape(x))


@dataclass(frozen=True)
class Polynomial(ScalarField):
    """``sum c_ij x^i y^j`` from a mapping ``{(i, j): c_ij}``."""

    coeffs: tuple = ()

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(sorted((tuple(map(int, k)), float(v)) for k, v in d.items())))

    def _eval(self, x, y, dx, dy):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape)
        for (i, j), c in self.coeffs:
            if i < dx or j < dy:
                continue
            fx = np.prod(np.arange(i - dx + 1, i + 1)) if dx else 1
            fy = np.prod(np.arange(j - dy + 1, j + 1)) if dy else 1
            out = out + c * fx * fy * x ** (i - dx) * y ** (j - dy)
        return out

    def value(self, x, y):
        return self._eval(x, y, 0, 0)

    def grad(self, x, y):
        return self._eval(x, y, 1, 0), self._eval(x, y, 0, 1)

    def laplacian(self, x, y):
        return self._eval(x, y, 2, 0) + self._eval(x, y, 0, 2)

    @property
    def degree(self):
        return max((i + j for (i, j), _ in self.coeffs), default=0)


@dataclass(frozen=True)
class HarmonicMode(ScalarField):
    """``r^m (a sin(m theta) + b cos(m theta))``, harmonic in the plane."""

    m: int
    a: float = 1.0
    b: float = 0.0

    def _z(self, x, y):
        return np.asarray(x, dtype=float) + 1j * np.asarray(y, dtype=float)

    def value(self, x, y):
        zm = self._z(x, y) ** self.m
        return self.a * zm.imag + self.b * zm.real

    def grad(self, x, y):
        if self.m == 0:
            z = np.zeros(np.broadcast(x, y).shape)
            return z, z.copy()
        d = self.m * self._z(x, y) ** (self.m - 1)
        # d/dx z^m = d, d/dy z^m = i d
        return self.a * d.imag + self.b * d.real, self.a * d.real - self.b * d.imag

    def laplacian(self, x, y):
        return np.zeros(np.broadcast(x, y).shape)


@dataclass(frozen=True)
class GaussianBump(ScalarField):
    """``base + amp * exp(-((x - x0)^2 + (y - y0)^2) / width^2)``."""

    base: float = 1.0
    amp: float = 1.0
    x0: float = -0.3
    y0: float = 0.3
    width: float = 1.0

    def _e(self, x, y):
        return self.amp * np.exp(-((x - self.x0) ** 2 + (y - self.y0) ** 2) / self.width ** 2)

    def value(self, x, y):
        return self.base + self._e(x, y)

    def grad(self, x, y):
        e = self._e(x, y)
        s = -2.0 / self.width ** 2
        return s * (x - self.x0) * e, s * (y - self.y0) * e


@dataclass(frozen=True)
class BoundaryTrig(ScalarField):
    """``cos(k1 theta) + sin(k2 theta)`` as a function of the polar angle (Dirichlet data)."""

    k1: int
    k2: int

    def value(self, x, y):
        t = np.arctan2(y, x)
        return np.cos(self.k1 * t) + np.sin(self.k2 * t)

    def harmonic_extension(self):
        """The harmonic function with these boundary values on the unit disc."""
        return Sum((HarmonicMode(self.k1, 0.0, 1.0), HarmonicMode(self.k2, 1.0, 0.0)))


@dataclass(frozen=True)
class Sum(ScalarField):
    terms: tuple

    def value(self, x, y):
        return sum(t.value(x, y) for t in self.terms)

    def grad(self, x, y):
        gs = [t.grad(x, y) for t in self.terms]
        return sum(g[0] for g in gs), sum(g[1] for g in gs)

    def laplacian(self, x, y):
        return sum(t.laplacian(x, y) for t in self.terms)


@dataclass(frozen=True)
class Flux:
    """The flux ``gamma grad u`` of a scalar field, with divergence ``grad gamma . grad u + gamma lap u``."""

    u: ScalarField
    gamma: ScalarField = field(default_factory=Constant)

    def value(self, x, y):
        g = self.gamma.value(x, y)
        ux, uy = self.u.grad(x, y)
        return g * ux, g * uy

    __call__ = value

    def div(self, x, y):
        gx, gy = self.gamma.grad(x, y)
        ux, uy = self.u.grad(x, y)
        return gx * ux + gy * uy + self.gamma.value(x, y) * self.u.laplacian(x, y)


class FeField(ScalarField):
    """A finite element function viewed as a field evaluable at arbitrary points."""

    def __init__(self, fe):
        self.fe = fe

    def value(self, x, y):
        return self.fe(np.stack(np.broadcast_arrays(x, y), axis=-1))

    def grad(self, x, y):
        d = self.fe.derivs(np.stack(np.broadcast_arrays(x, y), axis=-1))
        return d[..., 0], d[..., 1]


# Named catalogue entries; parametrised forms are parsed by ``lookup``.
CATALOGUE = {
    "zero": Constant(0.0),
    "one": Constant(1.0),
    "x+y": Polynomial.from_dict({(1, 0): 1.0, (0, 1): 1.0}),
    "x2-y2": Polynomial.from_dict({(2, 0): 1.0, (0, 2): -1.0}),
    "r3sin3t": HarmonicMode(3, 1.0, 0.0),
    "r2cos2t": HarmonicMode(2, 0.0, 1.0),
    "bump": GaussianBump(),
}

_CALL = re.compile(r"^\s*([a-z_]+)\s*\(([^()]*)\)\s*$")


def lookup(spec):
    """Resolve a catalogue name or a parametrised form.

    Accepted forms: the names in ``CATALOGUE``; ``const(c)``;
    ``harmonic(m, a, b)``; ``trig(k1, k2)``; ``bump(base, amp, x0, y0, width)``.
    """
    if isinstance(spec, ScalarField):
        return spec
    key = str(spec).strip()
    if key in CATALOGUE:
        return CATALOGUE[key]
    m = _CALL.match(key)
    if m is None:
        raise FieldError(f"unknown field {spec!r}; known: {sorted(CATALOGUE)} or const()/harmonic()/trig()/bump()")
    name, args = m.group(1), [a for a in m.group(2).split(",") if a.strip()]
    try:
        nums = [float(a) for a in args]
    except ValueError:
        raise FieldError(f"non-numeric argument in {spec!r}") from None
    try:
        if name == "const":
            return Constant(*nums)
        if name == "harmonic":
            return HarmonicMode(int(nums[0]), *nums[1:])
        if name == "trig":
            return BoundaryTrig(int(nums[0]), int(nums[1]))
        if name == "bump":
            return GaussianBump(*nums)
    except (TypeError, IndexError):
        raise FieldError(f"wrong number of arguments in {spec!r}") from None
    raise FieldError(f"unknown field constructor {name!r}")
