"""Gibbs sampling of (w, V) given data and Monte Carlo EM estimation.

The E-step alternates ``w | V, y`` (a sparse Gaussian in precision form)
with ``V | w`` (independent GIG laws per node).  The M-step works from a
fixed set of accumulated sufficient statistics, so memory does not grow
with the number of Monte Carlo samples.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import special

from . import _kernels
from .errors import (BracketFailure, DimensionMismatch, InvalidParams, NotPositiveDefinite,
                     RankDeficientB, SingularQpar, UnsupportedAlpha)
from .gig import GigParams, gig_expect_log, gig_moment, gig_sample
from .mesh import FemOperators, ObservationMatrix, build_K, build_K_alpha
from .model import Dataset, LatentState, ModelParams, NoiseSpec, drift, prior_mean_V
from .sparse import CholFactor, SparseSym, analyze, chol_factor

log = logging.getLogger(__name__)

B_FLOOR = 1e-12
VINV_CLAMP = 1e6
HAZARD_GAP = 0.05
SIGMA_EPS2_FLOOR = 1e-12


def _amat(A):
    return A.matrix if isinstance(A, ObservationMatrix) else sp.csr_matrix(A)


# ---------------------------------------------------------------------------
# w | V, y
# ---------------------------------------------------------------------------

class PosteriorPrecision:
    """Fast assembly of ``Qhat = K D K / sigma^2 + A^T A / sigma_eps^2``.

    The sparsity pattern of ``Qhat`` does not depend on ``D = diag(1/V)``
    nor on kappa, so it is analysed once; each new ``D`` only needs a
    weighted ``bincount`` over precomputed index triples and a numeric
    refactorization.
    """

    def __init__(self, Ka: sp.csc_matrix, AtA: sp.csc_matrix, ordering: str = "mmd"):
        n = Ka.shape[0]
        Ka = sp.csc_matrix(Ka)
        Ka.sort_indices()
        ones = sp.csc_matrix((np.ones(Ka.nnz), Ka.indices, Ka.indptr), shape=Ka.shape)
        patt = (ones @ ones + (AtA != 0).astype(float) + sp.identity(n, format="csc")).tocsc()
        patt.sort_indices()
        self.indptr = patt.indptr.astype(np.int64)
        self.indices = patt.indices.astype(np.int64)
        self.nnz = patt.nnz
        self.symbolic = analyze(patt, ordering=ordering)
        # canonical data layout of the pattern used by factor_data
        assert np.array_equal(self.symbolic.indices, patt.indices)
        self._ata = self._map(AtA)
        self.set_operator(Ka)

    def _map(self, m) -> np.ndarray:
        m = sp.coo_matrix(m)
        pos = _kernels.locate(self.indptr, self.indices, m.row.astype(np.int64), m.col.astype(np.int64))
        return np.bincount(pos, weights=m.data, minlength=self.nnz)

    def set_operator(self, Ka: sp.csc_matrix) -> None:
        Ka = sp.csc_matrix(Ka)
        Ka.sort_indices()
        self.Ka = Ka
        ptr, idx, val = Ka.indptr, Ka.indices.astype(np.int64), Ka.data
        counts = np.diff(ptr)
        col = np.repeat(np.arange(Ka.shape[0]), counts)
        e1 = np.repeat(np.arange(Ka.nnz), counts[col])
        starts = np.repeat(ptr[col], counts[col])
        offs = np.arange(e1.shape[0]) - np.repeat(np.cumsum(counts[col]) - counts[col], counts[col])
        e2 = starts + offs
        pos = _kernels.locate(self.indptr, self.indices, idx[e1], idx[e2])
        if np.any(pos < 0):
            raise DimensionMismatch("operator pattern changed; rebuild the posterior precision")
        self._pos = pos
        self._k = col[e1]
        self._coef = val[e1] * val[e2]

    def data(self, dinv: np.ndarray, sigma: float, sigma_eps: float) -> np.ndarray:
        q = np.bincount(self._pos, weights=self._coef * dinv[self._k], minlength=self.nnz)
        return q / sigma ** 2 + self._ata / sigma_eps ** 2

    def matrix(self, dinv, sigma, sigma_eps) -> sp.csc_matrix:
        n = self.Ka.shape[0]
        return sp.csc_matrix((self.data(dinv, sigma, sigma_eps), self.indices, self.indptr), shape=(n, n))

    def factor(self, dinv, sigma, sigma_eps) -> CholFactor:
        return self.symbolic.factor_data(self.data(dinv, sigma, sigma_eps))


@dataclass(eq=False)
class ConditionalGaussian:
    """``w | V, y ~ N(mean, Qhat^{-1})`` with ``Qhat mean = shift``."""

    precision: SparseSym
    shift: np.ndarray
    factor: CholFactor

    @property
    def mean(self) -> np.ndarray:
        return self.factor.solve(self.shift)


def _shift(params: ModelParams, Ka, Am, dataset: Dataset, V: np.ndarray, resid_y: np.ndarray):
    s2 = params.noise.sigma ** 2
    m_rhs = drift(params.noise, dataset.B_gamma, dataset.B_mu, V)
    return Ka @ (m_rhs / V) / s2 + Am.T @ resid_y / params.sigma_eps ** 2


def conditional_w(params: ModelParams, ops: FemOperators, A, dataset: Dataset, V) -> ConditionalGaussian:
    """Gaussian full conditional of the weights given the variances and the data."""
    V = np.asarray(V, dtype=float)
    if np.any(~(V > 0)):
        raise InvalidParams("V must be strictly positive")
    Am = _amat(A)
    Ka = build_K_alpha(ops, params.kappa, params.alpha)
    pp = PosteriorPrecision(Ka, (Am.T @ Am).tocsc())
    dinv = 1.0 / V
    f = pp.factor(dinv, params.noise.sigma, params.sigma_eps)
    shift = _shift(params, Ka, Am, dataset, V, dataset.y - dataset.B @ params.beta)
    return ConditionalGaussian(SparseSym(pp.matrix(dinv, params.noise.sigma, params.sigma_eps)), shift, f)


# ---------------------------------------------------------------------------
# V | w
# ---------------------------------------------------------------------------

def conditional_v_params(params: ModelParams, ops: FemOperators, w, B_gamma, B_mu, Ka=None):
    """GIG parameters of ``V | w``; ``None`` for the Gaussian family.

    The law does not involve the observations.
    """
    noise = params.noise
    if noise.is_gaussian:
        return None
    if Ka is None:
        Ka = build_K_alpha(ops, params.kappa, params.alpha)
    n = ops.n
    s2 = noise.sigma ** 2
    r = Ka @ np.asarray(w, dtype=float) - np.asarray(B_gamma, dtype=float).reshape(n, -1) @ noise.gamma
    bm = np.asarray(B_mu, dtype=float).reshape(n, -1) @ noise.mu
    a = bm ** 2 / s2 + 2.0
    b = np.maximum(r ** 2 / s2, B_FLOOR)
    if noise.family == "gal":
        return GigParams(ops.h * noise.tau - 0.5, a, b)
    return GigParams(-1.0, a, b + ops.h * noise.nu ** 2)


def gal_hazard(params: ModelParams, h) -> bool:
    """True if some ``tau h - 1/2`` is close to zero, where E[1/V | w] can blow up."""
    return params.noise.family == "gal" and float(np.min(np.abs(params.noise.tau * np.asarray(h) - 0.5))) < HAZARD_GAP


def conditional_expectations(g: GigParams | None, h, clamp: bool = False):
    """E[V], E[1/V] and E[log V] under the conditional GIG laws ``g``."""
    if g is None:
        h = np.asarray(h, dtype=float)
        return h.copy(), 1.0 / h, np.log(h)
    ev = gig_moment(g, 1.0)
    evi = gig_moment(g, -1.0)
    if clamp:
        evi = np.minimum(evi, VINV_CLAMP)
    return ev, evi, gig_expect_log(g)


# ---------------------------------------------------------------------------
# sufficient statistics
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SufficientStats:
    """Sums over Gibbs states of every quantity the M-step needs.

    S1..S9 follow the nine alpha = 2 sums; ``bx``/``Hx`` feed the
    regression update and the per-node vectors the noise updates and the
    complete-data likelihood.
    """

    n: int
    S1: float = 0.0
    S2: float = 0.0
    S3: float = 0.0
    S4: np.ndarray = None
    S5: np.ndarray = None
    S6: np.ndarray = None
    S7: np.ndarray = None
    S8: np.ndarray = None
    S9: np.ndarray = None
    bx: np.ndarray = None
    Hx: float = 0.0
    sum_logV: np.ndarray = None
    sum_V: np.ndarray = None
    sum_Vinv: np.ndarray = None
    k: int = 0

    @classmethod
    def empty(cls, n: int, n_gamma: int, n_mu: int, n_x: int) -> "SufficientStats":
        z = np.zeros
        return cls(n=n, S4=z(n_gamma), S5=z(n_gamma), S6=z(n_mu), S7=z(n_mu), S8=z((n_gamma, n_gamma)),
                   S9=z((n_mu, n_mu)), bx=z(n_x), sum_logV=z(n), sum_V=z(n), sum_Vinv=z(n))

    @classmethod
    def for_dataset(cls, dataset: Dataset) -> "SufficientStats":
        return cls.empty(dataset.n_nodes, dataset.B_gamma.shape[1], dataset.B_mu.shape[1], dataset.B.shape[1])

    def copy(self) -> "SufficientStats":
        out = SufficientStats(self.n)
        for k, v in self.__dict__.items():
            setattr(out, k, v.copy() if isinstance(v, np.ndarray) else v)
        return out

    def merge(self, other: "SufficientStats") -> "SufficientStats":
        out = self.copy()
        for k, v in other.__dict__.items():
            if k != "n":
                setattr(out, k, getattr(out, k) + v)
        return out


def accumulate(state: LatentState, stats: SufficientStats, ops: FemOperators, dataset: Dataset, A,
               V_moments=None) -> SufficientStats:
    """Add one state to ``stats`` in place (and return it).

    ``V_moments`` optionally replaces ``(V, 1/V, log V)`` by conditional
    expectations, which gives the Rao-Blackwellized statistics.
    """
    w = state.w
    if V_moments is None:
        V = state.V
        ev, evi, elog = V, 1.0 / V, np.log(V)
    else:
        ev, evi, elog = V_moments
    cw = ops.h * w
    gw = ops.G @ w
    Bg, Bm = dataset.B_gamma, dataset.B_mu
    cwi = cw * evi
    gwi = gw * evi
    stats.S1 += float(cw @ cwi)
    stats.S2 += float(cw @ gwi)
    stats.S3 += float(gw @ gwi)
    stats.S4 += cwi @ Bg
    stats.S5 += gwi @ Bg
    stats.S6 += cw @ Bm
    stats.S7 += gw @ Bm
    stats.S8 += Bg.T @ (evi[:, None] * Bg)
    stats.S9 += Bm.T @ (ev[:, None] * Bm)
    r = dataset.y - _amat(A) @ w
    stats.bx += r @ dataset.B
    stats.Hx += float(r @ r)
    stats.sum_logV += elog
    stats.sum_V += ev
    stats.sum_Vinv += evi
    stats.k += 1
    return stats


# ---------------------------------------------------------------------------
# Gibbs sampler
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GibbsConfig:
    samples: int = 100
    burnin: int = 50
    thinning: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1 or self.burnin < 0 or self.thinning < 1:
            raise InvalidParams("need samples >= 1, burnin >= 0, thinning >= 1")


@dataclass(eq=False)
class GibbsDraw:
    """One kept state with the conditional Gaussian it was drawn from."""

    w: np.ndarray
    V: np.ndarray
    mhat: np.ndarray
    factor: CholFactor
    V_prev: np.ndarray


@dataclass(eq=False)
class GibbsResult:
    stats: SufficientStats
    rb_stats: SufficientStats | None
    final: LatentState
    samples: list | None = None


class GibbsSampler:
    """Blocked Gibbs sampler for fixed parameters.

    Reusable across parameter updates: :meth:`set_params` only rebuilds the
    numeric parts when kappa changes.
    """

    def __init__(self, ops: FemOperators, A, dataset: Dataset, params: ModelParams, ordering: str = "mmd"):
        if params.alpha not in (2, 4):
            raise UnsupportedAlpha(params.alpha)
        self.ops = ops
        self.A = _amat(A)
        if self.A.shape != (dataset.N, ops.n):
            raise DimensionMismatch(f"A has shape {self.A.shape}, expected {(dataset.N, ops.n)}")
        self.dataset = dataset
        self._AtA = (self.A.T @ self.A).tocsc()
        self._pp = None
        self._ordering = ordering
        self.params = None
        self.set_params(params)

    def set_params(self, params: ModelParams) -> None:
        old = self.params
        self.params = params
        if old is None or old.kappa != params.kappa or old.alpha != params.alpha:
            self.Ka = build_K_alpha(self.ops, params.kappa, params.alpha)
            if self._pp is None or (old is not None and old.alpha != params.alpha):
                self._pp = PosteriorPrecision(self.Ka, self._AtA, self._ordering)
            else:
                self._pp.set_operator(self.Ka)
        self._resid_y = self.dataset.y - self.dataset.B @ params.beta
        self._gauss_cache = None

    def initial_V(self) -> np.ndarray:
        return prior_mean_V(self.params.noise, self.ops.h)

    def draw_w(self, V: np.ndarray, rng: np.random.Generator):
        p = self.params
        if p.noise.is_gaussian and self._gauss_cache is not None:
            f, mhat = self._gauss_cache
        else:
            f = self._pp.factor(1.0 / V, p.noise.sigma, p.sigma_eps)
            mhat = f.solve(_shift(p, self.Ka, self.A, self.dataset, V, self._resid_y))
            if p.noise.is_gaussian:
                self._gauss_cache = (f, mhat)
        w = mhat + f.solve_lt(rng.standard_normal(self.ops.n))
        return w, mhat, f

    def v_params(self, w):
        d = self.dataset
        return conditional_v_params(self.params, self.ops, w, d.B_gamma, d.B_mu, Ka=self.Ka)

    def draw_V(self, w, rng: np.random.Generator) -> np.ndarray:
        g = self.v_params(w)
        if g is None:
            return np.array(self.ops.h, dtype=float)
        return gig_sample(g, rng)

    def run(self, config: GibbsConfig, V0=None, rng: np.random.Generator | None = None, consumers=(),
            rb_every: int | None = 1, retain: bool = False, burnin: int | None = None) -> GibbsResult:
        """Burn-in, then ``samples * thinning`` sweeps keeping every ``thinning``-th state.

        Each kept state is added to the Monte Carlo statistics and, for every
        ``rb_every``-th kept state, to the Rao-Blackwellized statistics.
        ``consumers`` are called with a :class:`GibbsDraw` per kept state.
        """
        rng = np.random.default_rng(config.seed) if rng is None else rng
        V = self.initial_V() if V0 is None else np.array(V0, dtype=float)
        stats = SufficientStats.for_dataset(self.dataset)
        rb = SufficientStats.for_dataset(self.dataset) if rb_every else None
        clamp = gal_hazard(self.params, self.ops.h)
        kept = [] if retain else None
        nburn = config.burnin if burnin is None else burnin
        total = nburn + config.samples * config.thinning
        w = None
        j = 0
        for it in range(total):
            try:
                w, mhat, f = self.draw_w(V, rng)
            except NotPositiveDefinite as exc:
                err = NotPositiveDefinite(f"Gibbs sweep {it}: {exc}")
                err.state = LatentState(w if w is not None else np.zeros_like(V), V)
                raise err from None
            V_prev = V
            g = self.v_params(w)
            V = np.array(self.ops.h, dtype=float) if g is None else gig_sample(g, rng)
            if it < nburn or (it - nburn + 1) % config.thinning:
                continue
            state = LatentState(w, V)
            accumulate(state, stats, self.ops, self.dataset, self.A)
            if rb is not None and j % rb_every == 0:
                accumulate(state, rb, self.ops, self.dataset, self.A,
                           V_moments=conditional_expectations(g, self.ops.h, clamp))
            j += 1
            if kept is not None:
                kept.append(state)
            if consumers:
                draw = GibbsDraw(w, V, mhat, f, V_prev)
                for c in consumers:
                    c(draw)
        return GibbsResult(stats, rb, LatentState(w, V), kept)


def gibbs_run(params: ModelParams, ops: FemOperators, A, dataset: Dataset, config: GibbsConfig,
              consumers=(), V0=None, retain: bool = False, rb_every: int | None = 1) -> GibbsResult:
    return GibbsSampler(ops, A, dataset, params).run(config, V0=V0, consumers=consumers, retain=retain,
                                                     rb_every=rb_every)


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

def mstep_regression(stats: SufficientStats, B) -> tuple[np.ndarray, float]:
    """Least squares update of (beta, sigma_eps) from averaged residual statistics."""
    B = np.asarray(B, dtype=float)
    B = B.reshape(-1, 1) if B.ndim == 1 else B
    N = B.shape[0]
    if np.linalg.matrix_rank(B) < B.shape[1]:
        raise RankDeficientB("mean covariate matrix B is rank deficient")
    bx = stats.bx / stats.k
    Hx = stats.Hx / stats.k
    beta = np.linalg.solve(B.T @ B, bx)
    s2 = max((Hx - bx @ beta) / N, SIGMA_EPS2_FLOOR)
    return beta, math.sqrt(s2)


def _gal_tau(c: float, h: np.ndarray, tau0: float = 1.0) -> float:
    """Maximizer of ``tau c - sum(log Gamma(tau h))`` (strictly concave in tau)."""
    if not math.isfinite(c):
        raise BracketFailure(f"GAL shape objective is unbounded (h^T mean log V = {c})")

    def grad(t):
        return c - float(h @ special.digamma(t * h))

    lo, hi = tau0, tau0
    glo = grad(lo)
    while glo < 0:
        lo /= 4.0
        glo = grad(lo)
        if lo < 1e-12:
            raise BracketFailure(f"no root of the GAL shape equation above 1e-12 (c={c})")
    ghi = grad(hi)
    while ghi > 0:
        hi *= 4.0
        ghi = grad(hi)
        if hi > 1e12:
            raise BracketFailure(f"no root of the GAL shape equation below 1e12 (c={c})")
    t = tau0 if lo < tau0 < hi else 0.5 * (lo + hi)
    for _ in range(200):
        g = grad(t)
        if g > 0:
            lo = t
        else:
            hi = t
        scale = 1.0 + abs(c)
        if abs(g) < 1e-13 * scale or hi - lo < 1e-15 * t:
            break
        d2 = -float((h * h) @ special.polygamma(1, t * h))
        step = t - g / d2
        t = step if lo < step < hi else 0.5 * (lo + hi)
    return t


def mstep_noise(stats: SufficientStats, params: ModelParams, h) -> dict:
    """Closed-form (NIG) or Newton (GAL) update of the mixing-law parameter."""
    h = np.asarray(h, dtype=float)
    fam = params.noise.family
    if fam == "gal":
        c = float(h @ stats.sum_logV) / stats.k
        return {"tau": _gal_tau(c, h, params.noise.tau)}
    if fam == "nig":
        n = h.shape[0]
        s = float(np.sum(np.sqrt(h)))
        c = float(h @ stats.sum_Vinv) / stats.k
        nu2 = ((s + math.sqrt(s * s + 2.0 * n * c)) / (math.sqrt(2.0) * c)) ** 2
        return {"nu": math.sqrt(nu2)}
    return {}


def nig_nu2(h, Vinv_mean) -> float:
    h = np.asarray(h, dtype=float)
    n = h.shape[0]
    s = float(np.sum(np.sqrt(h)))
    c = float(h @ np.asarray(Vinv_mean, dtype=float))
    return ((s + math.sqrt(s * s + 2.0 * n * c)) / (math.sqrt(2.0) * c)) ** 2


def quadratic_parts(stats: SufficientStats, kappa: float, gaussian: bool, Bmg):
    """(H, b, Q_par) at ``kappa``, all averaged over the k states.

    ``Bmg`` is the constant block ``B_mu^T B_gamma``.
    """
    k = stats.k
    k2 = kappa * kappa
    H = (k2 * k2 * stats.S1 + 2.0 * k2 * stats.S2 + stats.S3) / k
    if gaussian:
        return H, np.zeros(0), np.zeros((0, 0))
    b = np.concatenate([(k2 * stats.S6 + stats.S7) / k, (k2 * stats.S4 + stats.S5) / k])
    Q = np.block([[stats.S9 / k, Bmg], [Bmg.T, stats.S8 / k]])
    return H, b, Q


class KappaProfile:
    """Profiled w-likelihood in kappa (alpha = 2) from sufficient statistics."""

    def __init__(self, ops: FemOperators, dataset: Dataset, family: str):
        self.ops = ops
        self.family = family
        self.n = ops.n
        self._sym = analyze(build_K(ops, 1.0))
        self.Bmg = dataset.B_mu.T @ dataset.B_gamma
        self.n_mu = dataset.B_mu.shape[1]

    def log_det_K(self, kappa: float) -> float:
        K = build_K(self.ops, kappa)
        return self._sym.factor(K).log_det()

    def parts(self, stats: SufficientStats, kappa: float):
        return quadratic_parts(stats, kappa, self.family == "gaussian", self.Bmg)

    def solve_par(self, Q, b):
        if Q.size == 0:
            return np.zeros(0)
        try:
            cond = np.linalg.cond(Q)
        except np.linalg.LinAlgError:
            cond = np.inf
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularQpar(f"Q_par is singular (condition number {cond:.3g}); B_gamma and B_mu colinear?")
        return np.linalg.solve(Q, b)

    def residual(self, stats, kappa) -> float:
        H, b, Q = self.parts(stats, kappa)
        theta = self.solve_par(Q, b)
        return H - b @ theta

    def objective(self, stats: SufficientStats, kappa: float) -> float:
        r = self.residual(stats, kappa)
        if not r > 0:
            return -np.inf
        return self.log_det_K(kappa) - 0.5 * self.n * math.log(r)

    def maximize(self, stats: SufficientStats, lo: float, hi: float, tol: float = 1e-7):
        """Golden-section search in log kappa; returns (kappa, at_edge)."""
        a, b = math.log(lo), math.log(hi)
        invphi = (math.sqrt(5.0) - 1.0) / 2.0
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        fc = self.objective(stats, math.exp(c))
        fd = self.objective(stats, math.exp(d))
        while b - a > tol:
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - invphi * (b - a)
                fc = self.objective(stats, math.exp(c))
            else:
                a, c, fc = c, d, fd
                d = a + invphi * (b - a)
                fd = self.objective(stats, math.exp(d))
        x = 0.5 * (a + b)
        edge = min(x - math.log(lo), math.log(hi) - x) < 10 * tol
        return math.exp(x), edge


def mstep_spde(stats: SufficientStats, ops: FemOperators, dataset: Dataset, params: ModelParams,
               kappa_bounds=None, profile: KappaProfile | None = None) -> dict:
    """Joint update of (gamma, mu, sigma, kappa) by profiling kappa.

    Returns a dict with the new values plus ``"kappa_at_edge"``.
    """
    if params.alpha != 2:
        raise UnsupportedAlpha("estimation is implemented for alpha = 2 only")
    fam = params.noise.family
    prof = profile or KappaProfile(ops, dataset, fam)
    if kappa_bounds is None:
        kappa_bounds = (params.kappa / 4.0, params.kappa * 4.0)
    kappa, edge = prof.maximize(stats, *kappa_bounds)
    H, b, Q = prof.parts(stats, kappa)
    theta = prof.solve_par(Q, b)
    sigma = math.sqrt(max((H - b @ theta) / ops.n, 1e-300))
    out = {"kappa": kappa, "kappa_at_edge": edge}
    if fam == "gaussian":
        out["phi"] = sigma
    else:
        nm = prof.n_mu
        out.update(sigma=sigma, mu=theta[:nm], gamma=theta[nm:])
    return out


def mstep(stats: SufficientStats, ops: FemOperators, dataset: Dataset, params: ModelParams,
          kappa_bounds=None, profile=None):
    """All three M-step blocks; returns (new params, edge flag)."""
    beta, seps = mstep_regression(stats, dataset.B)
    spde = mstep_spde(stats, ops, dataset, params, kappa_bounds, profile)
    noise_kw = mstep_noise(stats, params, ops.h)
    edge = spde.pop("kappa_at_edge")
    kappa = spde.pop("kappa")
    noise_kw.update(spde)
    new = params.replace(kappa=kappa, beta=beta, sigma_eps=seps).with_noise(**noise_kw)
    return new, edge


# ---------------------------------------------------------------------------
# complete-data log-likelihood and its Monte Carlo / Rao-Blackwell averages
# ---------------------------------------------------------------------------

def complete_loglik(stats: SufficientStats, params: ModelParams, ops: FemOperators, dataset: Dataset,
                    log_det_K: float | None = None) -> float:
    """Average of ``log pi(y, V, w | params)`` over the accumulated states.

    With Monte Carlo statistics this is Q^MC; with statistics built from
    conditional expectations of V it is the Rao-Blackwellized Q^RB.
    """
    if params.alpha != 2:
        raise UnsupportedAlpha("likelihood from sufficient statistics needs alpha = 2")
    k = stats.k
    n, N = ops.n, dataset.N
    B = dataset.B
    noise = params.noise
    bx, Hx = stats.bx / k, stats.Hx / k
    beta = params.beta
    se2 = params.sigma_eps ** 2
    ll_y = -0.5 * N * math.log(2 * math.pi * se2) - (Hx - 2 * bx @ beta + beta @ (B.T @ B) @ beta) / (2 * se2)
    if log_det_K is None:
        log_det_K = chol_factor(build_K(ops, params.kappa)).log_det()
    H, b, Q = quadratic_parts(stats, params.kappa, noise.is_gaussian, dataset.B_mu.T @ dataset.B_gamma)
    theta = np.concatenate([noise.mu, noise.gamma]) if not noise.is_gaussian else np.zeros(0)
    # average of sum_j (K w - B_gamma g - V B_mu mu)_j^2 / V_j
    quad = H - 2 * b @ theta + theta @ Q @ theta
    s2 = noise.sigma ** 2
    logV = stats.sum_logV / k
    ll_w = log_det_K - 0.5 * n * math.log(2 * math.pi * s2) - 0.5 * float(np.sum(logV)) - quad / (2 * s2)
    h = ops.h
    if noise.family == "gal":
        p = noise.tau * h
        ll_v = float(np.sum((p - 1) * logV - stats.sum_V / k - special.gammaln(p)))
    elif noise.family == "nig":
        bb = noise.nu ** 2 * h
        ll_v = float(np.sum(0.5 * np.log(bb / (2 * math.pi)) - 1.5 * logV + np.sqrt(2 * bb)
                            - stats.sum_V / k - 0.5 * bb * stats.sum_Vinv / k))
    else:
        ll_v = 0.0
    return ll_y + ll_w + ll_v


def rb_q_value(rb_stats: SufficientStats, params: ModelParams, ops: FemOperators, dataset: Dataset,
               log_det_K=None) -> float:
    """Rao-Blackwellized Q: complete-data likelihood averaged with E[V | w] moments."""
    return complete_loglik(rb_stats, params, ops, dataset, log_det_K)


# ---------------------------------------------------------------------------
# Monte Carlo EM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McemConfig:
    gibbs: GibbsConfig = GibbsConfig(samples=50, burnin=50)
    max_iter: int = 200
    k0: int = 50
    k_max: int = 2000
    growth: float = 1.2
    tol: float = 5e-3
    patience: int = 5
    later_burnin: int = 10
    kappa_bounds: tuple | None = None
    rb_max: int = 200

    def samples_at(self, p: int) -> int:
        return int(min(self.k_max, math.ceil(self.k0 * self.growth ** p)))


@dataclass(eq=False)
class FitResult:
    params: ModelParams
    trace: list = field(default_factory=list)
    q_rb: list = field(default_factory=list)
    iterations: int = 0
    reason: str = "max_iter"
    warnings: list = field(default_factory=list)
    final_state: LatentState | None = None


def param_vector(params: ModelParams):
    """(log of positive parameters, signed parameters) for convergence checks."""
    nz = params.noise
    pos = [params.kappa, params.sigma_eps, nz.sigma]
    if nz.family == "gal":
        pos.append(nz.tau)
    elif nz.family == "nig":
        pos.append(nz.nu)
    signed = [params.beta]
    if not nz.is_gaussian:
        signed += [nz.gamma, nz.mu]
    return np.log(np.array(pos)), np.concatenate(signed)


def relative_change(old: ModelParams, new: ModelParams) -> float:
    lo, so = param_vector(old)
    ln, sn = param_vector(new)
    return float(max(np.max(np.abs(ln - lo)), np.max(np.abs(sn - so) / (1.0 + np.abs(so)))))


def trace_row(p: int, params: ModelParams, k: int, q: float) -> dict:
    nz = params.noise
    row = {"iter": p, "k": k, "kappa": params.kappa, "sigma_eps": params.sigma_eps}
    for i, v in enumerate(params.beta):
        row[f"beta{i}"] = float(v)
    if nz.is_gaussian:
        row["phi"] = nz.phi
    else:
        row["sigma"] = nz.sigma
        row["tau" if nz.family == "gal" else "nu"] = nz.tau if nz.family == "gal" else nz.nu
        for i, v in enumerate(nz.gamma):
            row[f"gamma{i}"] = float(v)
        for i, v in enumerate(nz.mu):
            row[f"mu{i}"] = float(v)
    row["q_rb"] = q
    return row


def mcem_fit(dataset: Dataset, ops: FemOperators, A, init: ModelParams, config: McemConfig = McemConfig(),
             rng: np.random.Generator | None = None, callback=None) -> FitResult:
    """Monte Carlo EM with warm-started Gibbs chains and a growing sample size."""
    if init.alpha != 2:
        raise UnsupportedAlpha("estimation is implemented for alpha = 2 only")
    rng = np.random.default_rng(config.gibbs.seed) if rng is None else rng
    params = init
    res = FitResult(params=init)
    if config.max_iter <= 0:
        res.reason = "max_iter"
        return res
    sampler = GibbsSampler(ops, A, dataset, params)
    profile = KappaProfile(ops, dataset, params.noise.family)
    V = None
    calm = 0
    for p in range(config.max_iter):
        k = config.samples_at(p)
        gcfg = GibbsConfig(samples=k, burnin=config.gibbs.burnin if p == 0 else config.later_burnin,
                           thinning=config.gibbs.thinning, seed=config.gibbs.seed)
        sampler.set_params(params)
        if gal_hazard(params, ops.h) and "hazard" not in " ".join(res.warnings):
            res.warnings.append(f"iteration {p}: min|tau h - 1/2| < {HAZARD_GAP}; E[1/V] clamped at {VINV_CLAMP:g} (hazard)")
        try:
            out = sampler.run(gcfg, V0=V, rng=rng, rb_every=max(1, math.ceil(k / config.rb_max)))
            new, edge = mstep(out.stats, ops, dataset, params, config.kappa_bounds, profile)
            q = rb_q_value(out.rb_stats, new, ops, dataset, profile.log_det_K(new.kappa))
        except (NotPositiveDefinite, BracketFailure, SingularQpar, RankDeficientB) as exc:
            raise type(exc)(f"EM iteration {p}: {exc}") from exc
        if edge:
            res.warnings.append(f"iteration {p}: kappa maximum at the search interval edge ({new.kappa:.6g})")
        V = out.final.V
        change = relative_change(params, new)
        params = new
        res.trace.append(trace_row(p, params, k, q))
        res.q_rb.append(q)
        res.iterations = p + 1
        res.final_state = out.final
        log.info("EM %d: k=%d change=%.3g Q_RB=%.6g kappa=%.5g", p, k, change, q, params.kappa)
        if callback is not None:
            callback(p, params, q)
        calm = calm + 1 if change < config.tol else 0
        if calm >= config.patience:
            res.reason = "converged"
            break
    res.params = params
    return res


def gaussian_start(dataset: Dataset, ops: FemOperators, A, init: ModelParams, config: McemConfig = McemConfig(),
                   rng: np.random.Generator | None = None) -> tuple[ModelParams, FitResult]:
    """Initialize a non-Gaussian fit from a Gaussian-driver fit on the same data.

    EM moves kappa very slowly for GAL and NIG drivers because the variance
    components absorb most of the residual. The Gaussian family has no such
    latent scale, so its fit pins down kappa, beta and sigma_eps quickly. The
    driver scale is then matched so that sigma^2 E[V_i] equals phi^2 h_i at the
    mean cell size, with gamma = mu = 0 and the shape parameter from `init`.

    Returns
    -------
    params : ModelParams
        Starting values for the non-Gaussian fit (equal to the Gaussian fit
        when `init` is Gaussian).
    fit : FitResult
        The Gaussian-stage result.
    """
    nz = init.noise
    phi0 = nz.phi if nz.is_gaussian else nz.sigma * math.sqrt(float(np.mean(prior_mean_V(nz, ops.h) / ops.h)))
    g0 = init.replace(noise=NoiseSpec("gaussian", phi=phi0))
    fit = mcem_fit(dataset, ops, A, g0, config, rng=rng)
    gp = fit.params
    if nz.is_gaussian:
        return gp, fit
    phi = gp.noise.phi
    hbar = float(np.mean(ops.h))
    zeros_g = np.zeros(len(nz.gamma))
    zeros_m = np.zeros(len(nz.mu))
    if nz.family == "gal":
        scale = math.sqrt(1.0 / nz.tau)
        noise = NoiseSpec("gal", tau=nz.tau, sigma=phi * scale, gamma=zeros_g, mu=zeros_m)
    else:
        mean_v = float(prior_mean_V(NoiseSpec("nig", nu=nz.nu, sigma=1.0), np.array([hbar]))[0])
        noise = NoiseSpec("nig", nu=nz.nu, sigma=phi * math.sqrt(hbar / mean_v), gamma=zeros_g, mu=zeros_m)
    return gp.replace(noise=noise), fit
