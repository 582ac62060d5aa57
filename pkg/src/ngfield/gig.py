"""Generalized inverse Gaussian (GIG) distribution.

Density on x > 0::

    f(x) = (a/b)^(p/2) / (2 K_p(sqrt(a b))) * x^(p-1) * exp(-(a x + b / x) / 2)

with the Gamma law as the ``b = 0`` limit and the reciprocal Gamma law as
the ``a = 0`` limit.  All parameter arguments broadcast, so a single
:class:`GigParams` can describe one independent GIG law per mesh node.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import special

from .errors import InvalidParams, MomentUndefined, NonPositiveArgument


@dataclass(frozen=True, eq=False)
class GigParams:
    """Order ``p`` and rates ``a``, ``b`` of one or many GIG laws."""

    p: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        p, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (self.p, self.a, self.b)))
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def shape(self):
        return self.p.shape

    def __len__(self):
        return self.p.size

    def __getitem__(self, idx) -> "GigParams":
        return GigParams(self.p[idx], self.a[idx], self.b[idx])

    def valid(self) -> np.ndarray:
        p, a, b = self.p, self.a, self.b
        finite = np.isfinite(p) & np.isfinite(a) & np.isfinite(b)
        return finite & np.where(p > 0, (a > 0) & (b >= 0),
                                 np.where(p == 0, (a > 0) & (b > 0), (a >= 0) & (b > 0)))

    def validate(self) -> "GigParams":
        ok = self.valid()
        if not np.all(ok):
            i = int(np.flatnonzero(~np.ravel(ok))[0])
            raise InvalidParams(f"invalid GIG parameters (p={np.ravel(self.p)[i]}, "
                                f"a={np.ravel(self.a)[i]}, b={np.ravel(self.b)[i]})")
        return self

    def astuple(self):
        return (self.p, self.a, self.b)


def log_bessel_k(order, x):
    """Logarithm of the modified Bessel function of the second kind.

    Evaluated as ``log(kve(order, x)) - x`` so large arguments do not
    underflow; where the scaled function overflows (tiny ``x``) the leading
    small-argument term is used instead.
    """
    order = np.asarray(order, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise NonPositiveArgument("log_bessel_k needs x > 0")
    with np.errstate(over="ignore", divide="ignore"):
        out = np.log(special.kve(order, x)) - x
    bad = ~np.isfinite(out)
    if np.any(bad):
        v = np.abs(np.broadcast_to(order, out.shape)[bad])
        xb = np.broadcast_to(x, out.shape)[bad]
        small = special.gammaln(v) + (v - 1.0) * math.log(2.0) - v * np.log(xb)
        out = np.array(out, dtype=float)
        out[bad] = small
    return out[()] if out.ndim == 0 else out


def _log_kve(order, x):
    with np.errstate(over="ignore", divide="ignore"):
        out = np.log(special.kve(order, x))
    bad = ~np.isfinite(out)
    if np.any(bad):
        out = np.array(out, dtype=float)
        v = np.abs(np.broadcast_to(order, out.shape)[bad])
        xb = np.broadcast_to(x, out.shape)[bad]
        out[bad] = special.gammaln(v) + (v - 1.0) * math.log(2.0) - v * np.log(xb) + xb
    return out


def gig_logpdf(params: GigParams, x):
    params.validate()
    p, a, b = params.astuple()
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise NonPositiveArgument("GIG density is defined for x > 0")
    p, a, b, x = np.broadcast_arrays(p, a, b, x)
    out = np.empty(x.shape)
    gam = b == 0
    inv = (a == 0) & ~gam
    gen = ~(gam | inv)
    if np.any(gam):
        pp, aa, xx = p[gam], a[gam], x[gam]
        out[gam] = pp * np.log(aa / 2) - special.gammaln(pp) + (pp - 1) * np.log(xx) - aa * xx / 2
    if np.any(inv):
        q, bb, xx = -p[inv], b[inv], x[inv]
        out[inv] = q * np.log(bb / 2) - special.gammaln(q) - (q + 1) * np.log(xx) - bb / (2 * xx)
    if np.any(gen):
        pp, aa, bb, xx = p[gen], a[gen], b[gen], x[gen]
        w = np.sqrt(aa * bb)
        out[gen] = (0.5 * pp * (np.log(aa) - np.log(bb)) - math.log(2.0) - log_bessel_k(pp, w)
                    + (pp - 1) * np.log(xx) - 0.5 * (aa * xx + bb / xx))
    return out[()] if out.ndim == 0 else out


def gig_moment(params: GigParams, lam):
    """E[V**lam] for V ~ GIG(p, a, b); ``lam`` may be negative.

    Raises
    ------
    MomentUndefined
        If the moment is infinite (Gamma case with p + lam <= 0, or the
        reciprocal Gamma case with -p - lam <= 0).
    """
    params.validate()
    p, a, b = params.astuple()
    lam = np.asarray(lam, dtype=float)
    p, a, b, lam = np.broadcast_arrays(p, a, b, lam)
    out = np.empty(p.shape)
    gam = b == 0
    inv = (a == 0) & ~gam
    gen = ~(gam | inv)
    if np.any(gam):
        s = p[gam] + lam[gam]
        if np.any(s <= 0):
            raise MomentUndefined("Gamma-limit moment needs p + lambda > 0")
        out[gam] = np.exp(special.gammaln(s) - special.gammaln(p[gam]) - lam[gam] * np.log(a[gam] / 2))
    if np.any(inv):
        q = -p[inv]
        s = q - lam[inv]
        if np.any(s <= 0):
            raise MomentUndefined("reciprocal-Gamma moment needs -p - lambda > 0")
        out[inv] = np.exp(special.gammaln(s) - special.gammaln(q) + lam[inv] * np.log(b[inv] / 2))
    if np.any(gen):
        pp, aa, bb, ll = p[gen], a[gen], b[gen], lam[gen]
        w = np.sqrt(aa * bb)
        out[gen] = np.exp(0.5 * ll * (np.log(bb) - np.log(aa)) + _log_kve(pp + ll, w) - _log_kve(pp, w))
    return out[()] if out.ndim == 0 else out


def gig_expect_log(params: GigParams, eps: float = 1e-5):
    """E[log V], with the order derivative of log K taken by central differences."""
    params.validate()
    p, a, b = params.astuple()
    out = np.empty(p.shape)
    gam = b == 0
    inv = (a == 0) & ~gam
    gen = ~(gam | inv)
    if np.any(gam):
        out[gam] = special.digamma(p[gam]) - np.log(a[gam] / 2)
    if np.any(inv):
        out[inv] = np.log(b[inv] / 2) - special.digamma(-p[inv])
    if np.any(gen):
        pp, aa, bb = p[gen], a[gen], b[gen]
        w = np.sqrt(aa * bb)
        dlogk = (_log_kve(pp + eps, w) - _log_kve(pp - eps, w)) / (2 * eps)
        out[gen] = 0.5 * (np.log(bb) - np.log(aa)) + dlogk
    return out[()] if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@njit(cache=True)
def _uniform(rng):
    # in (0, 1]
    return 1.0 - rng.random()


@njit(cache=True)
def _gig_mode(lam, omega):
    if lam >= 1.0:
        return (math.sqrt((lam - 1.0) ** 2 + omega * omega) + (lam - 1.0)) / omega
    return omega / (math.sqrt((1.0 - lam) ** 2 + omega * omega) + (1.0 - lam))


@njit(cache=True)
def _rou_noshift(rng, lam, omega):
    t = 0.5 * (lam - 1.0)
    s = 0.25 * omega
    xm = _gig_mode(lam, omega)
    nc = t * math.log(xm) - s * (xm + 1.0 / xm)
    ym = ((lam + 1.0) + math.sqrt((lam + 1.0) ** 2 + omega * omega)) / omega
    um = math.exp(0.5 * (lam + 1.0) * math.log(ym) - s * (ym + 1.0 / ym) - nc)
    while True:
        u = um * _uniform(rng)
        v = _uniform(rng)
        x = u / v
        if math.log(v) <= t * math.log(x) - s * (x + 1.0 / x) - nc:
            return x


@njit(cache=True)
def _rou_shift(rng, lam, omega):
    t = 0.5 * (lam - 1.0)
    s = 0.25 * omega
    xm = _gig_mode(lam, omega)
    nc = t * math.log(xm) - s * (xm + 1.0 / xm)
    # extrema of (x - xm) sqrt(f(x)) solve a cubic
    a = -(2.0 * (lam + 1.0) / omega + xm)
    b = 2.0 * (lam - 1.0) * xm / omega - 1.0
    c = xm
    p = b - a * a / 3.0
    q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c
    fi = math.acos(-q / (2.0 * math.sqrt(-(p * p * p) / 27.0)))
    fak = 2.0 * math.sqrt(-p / 3.0)
    y1 = fak * math.cos(fi / 3.0) - a / 3.0
    y2 = fak * math.cos(fi / 3.0 + 4.0 / 3.0 * math.pi) - a / 3.0
    uplus = (y1 - xm) * math.exp(t * math.log(y1) - s * (y1 + 1.0 / y1) - nc)
    uminus = (y2 - xm) * math.exp(t * math.log(y2) - s * (y2 + 1.0 / y2) - nc)
    while True:
        u = uminus + _uniform(rng) * (uplus - uminus)
        v = _uniform(rng)
        x = u / v + xm
        if x > 0.0 and math.log(v) <= t * math.log(x) - s * (x + 1.0 / x) - nc:
            return x


@njit(cache=True)
def _small_omega(rng, lam, omega):
    # 0 <= lam < 1, small omega: piecewise hat, not log-concave region
    xm = _gig_mode(lam, omega)
    x0 = omega / (1.0 - lam)
    k0 = math.exp((lam - 1.0) * math.log(xm) - 0.5 * omega * (xm + 1.0 / xm))
    a0 = k0 * x0
    if x0 >= 2.0 / omega:
        k1 = 0.0
        a1 = 0.0
        k2 = x0 ** (lam - 1.0)
        a2 = k2 * 2.0 * math.exp(-omega * x0 / 2.0) / omega
    else:
        k1 = math.exp(-omega)
        if lam == 0.0:
            a1 = k1 * math.log(2.0 / (omega * omega))
        else:
            a1 = k1 / lam * ((2.0 / omega) ** lam - x0 ** lam)
        k2 = (2.0 / omega) ** (lam - 1.0)
        a2 = k2 * 2.0 * math.exp(-1.0) / omega
    atot = a0 + a1 + a2
    while True:
        v = atot * _uniform(rng)
        if v <= a0:
            x = x0 * v / a0
            hx = k0
        elif v - a0 <= a1:
            v -= a0
            if lam == 0.0:
                x = omega * math.exp(math.exp(omega) * v)
                hx = k1 / x
            else:
                x = (x0 ** lam + lam / k1 * v) ** (1.0 / lam)
                hx = k1 * x ** (lam - 1.0)
        else:
            v -= a0 + a1
            lo = x0 if x0 > 2.0 / omega else 2.0 / omega
            x = -2.0 / omega * math.log(math.exp(-omega / 2.0 * lo) - omega / (2.0 * k2) * v)
            hx = k2 * math.exp(-omega / 2.0 * x)
        u = _uniform(rng) * hx
        if x > 0.0 and math.log(u) <= (lam - 1.0) * math.log(x) - omega / 2.0 * (x + 1.0 / x):
            return x


@njit(cache=True)
def _inverse_gaussian(rng, m, shape):
    nu = rng.standard_normal()
    y = nu * nu
    x = m - 2.0 * m * m * y / (m * y + math.sqrt(4.0 * m * shape * y + m * m * y * y))
    if _uniform(rng) * (m + x) <= m:
        return x
    return m * m / x


@njit(cache=True)
def _gig_one(rng, p, a, b):
    if b == 0.0:
        return rng.standard_gamma(p) * 2.0 / a
    if a == 0.0:
        return b / (2.0 * rng.standard_gamma(-p))
    if p == -0.5:
        return _inverse_gaussian(rng, math.sqrt(b / a), b)
    lam = abs(p)
    omega = math.sqrt(a * b)
    scale = math.sqrt(b / a)
    if lam > 2.0 or omega > 3.0:
        x = _rou_shift(rng, lam, omega)
    elif lam >= 1.0 - 2.25 * omega * omega or omega > 0.2:
        x = _rou_noshift(rng, lam, omega)
    else:
        x = _small_omega(rng, lam, omega)
    if p < 0.0:
        return scale / x
    return scale * x


@njit(cache=True)
def _gig_many(rng, p, a, b):
    out = np.empty(p.shape[0])
    for i in range(p.shape[0]):
        out[i] = _gig_one(rng, p[i], a[i], b[i])
    return out


def gig_sample(params: GigParams, rng: np.random.Generator, size=None):
    """Exact GIG draws.

    Gamma (``b = 0``), reciprocal Gamma (``a = 0``) and inverse Gaussian
    (``p = -1/2``) laws use direct generators; all other parameters use the
    ratio-of-uniforms and piecewise-hat rejection methods of Hörmann and
    Leydold (2014), whose rejection constants are uniformly bounded.

    ``size`` draws are produced per parameter set when the parameters are
    scalar; otherwise one draw per broadcast parameter entry.
    """
    params.validate()
    p, a, b = params.astuple()
    if size is not None:
        shape = (size,) if np.isscalar(size) else tuple(size)
        p, a, b = (np.broadcast_to(v, shape) for v in (p, a, b))
    shape = p.shape
    out = _gig_many(rng, np.ascontiguousarray(p, dtype=float).ravel(),
                    np.ascontiguousarray(a, dtype=float).ravel(),
                    np.ascontiguousarray(b, dtype=float).ravel())
    return out.reshape(shape)[()] if shape == () else out.reshape(shape)

