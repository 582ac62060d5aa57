"""Kriging from Gibbs chains, proper scoring rules and cross-validation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import pdist

from .errors import FoldTooSmall, NonPositiveVariance, PatternNotCovered, TooFewSamples
from .inference import GibbsConfig, GibbsDraw, GibbsSampler, McemConfig, mcem_fit
from .mesh import FemOperators, ObservationMatrix
from .model import Dataset, ModelParams


def _amat(A):
    return A.matrix if isinstance(A, ObservationMatrix) else sp.csr_matrix(A)


@dataclass(eq=False)
class PredictionResult:
    """Latent-scale predictive moments at a set of locations.

    ``var_rb`` adds the spread of the conditional means to the averaged
    conditional variances; ``var_rb_cond`` holds the averaged conditional
    variances alone.
    """

    locations: np.ndarray
    mean_mc: np.ndarray
    mean_rb: np.ndarray
    var_mc: np.ndarray
    var_rb: np.ndarray
    var_rb_cond: np.ndarray
    k: int
    samples: np.ndarray | None = None


class _Welford:
    def __init__(self, m):
        self.k = 0
        self.mean = np.zeros(m)
        self.m2 = np.zeros(m)

    def add(self, x):
        self.k += 1
        d = x - self.mean
        self.mean += d / self.k
        self.m2 += d * (x - self.mean)

    @property
    def var(self):
        return self.m2 / self.k if self.k else np.zeros_like(self.mean)


class KrigingAccumulator:
    """Chain consumer collecting Monte Carlo and Rao-Blackwellized predictions.

    Parameters
    ----------
    Ap : (p x n) observation matrix of the prediction locations.
    mode : {"mc", "rb", "both"}
    keep_samples : store every ``A_p w`` draw (needed for sample-based scores).
    """

    def __init__(self, Ap, mode: str = "both", keep_samples: bool = False):
        self.Ap = _amat(Ap).tocsr()
        if mode not in ("mc", "rb", "both"):
            raise ValueError(f"unknown kriging mode {mode!r}")
        self.mode = mode
        p = self.Ap.shape[0]
        self.mc = _Welford(p)
        self.rb = _Welford(p)
        self.cond = np.zeros(p)
        self.k = 0
        self.samples = [] if keep_samples else None
        coo = self.Ap.tocoo()
        # every (row, node_a, node_b) product a_ra a_rb with node_a <= node_b
        r, c, v = coo.row, coo.col, coo.data
        order = np.argsort(r, kind="stable")
        r, c, v = r[order], c[order], v[order]
        rows, na, nb, coef = [], [], [], []
        ptr = np.searchsorted(r, np.arange(p + 1))
        for i in range(p):
            cs, vs = c[ptr[i]:ptr[i + 1]], v[ptr[i]:ptr[i + 1]]
            for s in range(cs.size):
                for t in range(s, cs.size):
                    rows.append(i)
                    na.append(cs[s])
                    nb.append(cs[t])
                    coef.append(vs[s] * vs[t] * (1.0 if s == t else 2.0))
        self._rows = np.asarray(rows, dtype=np.int64)
        self._na = np.asarray(na, dtype=np.int64)
        self._nb = np.asarray(nb, dtype=np.int64)
        self._coef = np.asarray(coef, dtype=float)
        self._pos = None
        self._symbolic = None

    def _quad_terms(self, draw: GibbsDraw) -> np.ndarray:
        f = draw.factor
        if self._symbolic is not f.symbolic:
            self._symbolic = f.symbolic
            self._pos = f.symbolic.locate(self._na, self._nb)
        p = self.Ap.shape[0]
        if self._rows.size == 0:
            return np.zeros(p)
        if np.all(self._pos >= 0):
            z = f.inverse_values()[self._pos]
            return np.bincount(self._rows, weights=self._coef * z, minlength=p)
        return self._fallback(f)

    def _fallback(self, f) -> np.ndarray:
        out = np.empty(self.Ap.shape[0])
        for i in range(self.Ap.shape[0]):
            a = self.Ap.getrow(i).toarray().ravel()
            out[i] = a @ f.solve(a)
        return out

    def __call__(self, draw: GibbsDraw) -> None:
        self.k += 1
        apw = self.Ap @ draw.w
        if self.mode in ("mc", "both"):
            self.mc.add(apw)
        if self.mode in ("rb", "both"):
            self.rb.add(self.Ap @ draw.mhat)
            self.cond += self._quad_terms(draw)
        if self.samples is not None:
            self.samples.append(apw)

    def result(self, locations=None, offset=None) -> PredictionResult:
        p = self.Ap.shape[0]
        off = np.zeros(p) if offset is None else np.asarray(offset, dtype=float)
        cond = self.cond / max(self.k, 1)
        samples = None
        if self.samples is not None:
            samples = np.array(self.samples).reshape(-1, p) + off
        nan = np.full(p, np.nan)
        has_mc = self.mode in ("mc", "both")
        has_rb = self.mode in ("rb", "both")
        return PredictionResult(
            locations=np.asarray(locations) if locations is not None else np.zeros((p, 0)),
            mean_mc=self.mc.mean + off if has_mc else nan, mean_rb=self.rb.mean + off if has_rb else nan,
            var_mc=self.mc.var if has_mc else nan, var_rb=cond + self.rb.var if has_rb else nan,
            var_rb_cond=cond if has_rb else nan, k=self.k, samples=samples)


def krige(params: ModelParams, ops: FemOperators, A, dataset: Dataset, Ap, config: GibbsConfig,
          mode: str = "both", locations=None, Bp=None, keep_samples: bool = False,
          rng: np.random.Generator | None = None, sampler: GibbsSampler | None = None) -> PredictionResult:
    """Predict ``B_p beta + A_p w`` given the data by running a Gibbs chain."""
    acc = KrigingAccumulator(Ap, mode, keep_samples)
    sampler = sampler or GibbsSampler(ops, A, dataset, params)
    sampler.set_params(params)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    sampler.run(config, rng=rng, consumers=(acc,), rb_every=None)
    offset = None if Bp is None else np.asarray(Bp, dtype=float).reshape(acc.Ap.shape[0], -1) @ params.beta
    return acc.result(locations, offset)


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

def _pair_mean_abs(x_sorted: np.ndarray) -> np.ndarray:
    """Unbiased mean of |X_i - X_j| over pairs i != j, per column of sorted samples."""
    k = x_sorted.shape[0]
    w = 2.0 * np.arange(k) - k + 1.0
    return 2.0 * (w @ x_sorted) / (k * (k - 1.0))


def crps_mc(samples, y) -> float:
    """Sample CRPS averaged over locations.

    ``samples`` is (k draws x m locations); for every location the score is
    ``E|y - Y| - E|Y1 - Y2| / 2`` with the pair term an unbiased U-statistic.
    """
    x = np.asarray(samples, dtype=float)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x = x.reshape(x.shape[0], -1)
    if x.shape[0] < 2:
        raise TooFewSamples("CRPS needs at least two predictive samples")
    if x.shape[1] != y.shape[0]:
        raise ValueError("samples and y disagree on the number of locations")
    e1 = np.mean(np.abs(x - y), axis=0)
    e2 = _pair_mean_abs(np.sort(x, axis=0))
    return float(np.mean(e1 - 0.5 * e2))


def energy_score_mc(samples, y) -> float:
    """Multivariate energy score of joint predictive samples (k x m)."""
    x = np.asarray(samples, dtype=float)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x = x.reshape(x.shape[0], -1)
    if x.shape[0] < 2:
        raise TooFewSamples("the energy score needs at least two predictive samples")
    e1 = np.mean(np.sqrt(np.sum((x - y) ** 2, axis=1)))
    e2 = float(np.mean(pdist(x))) if x.shape[1] > 1 else float(_pair_mean_abs(np.sort(x, axis=0))[0])
    return float(e1 - 0.5 * e2)


@dataclass(eq=False)
class Scores:
    var_rs: float
    mean_r: float
    var_r: float
    mean_abs_r: float
    crps: float = float("nan")
    energy: float = float("nan")

    def as_dict(self) -> dict:
        return {"var_rs": self.var_rs, "mean_r": self.mean_r, "var_r": self.var_r,
                "mean_abs_r": self.mean_abs_r, "crps": self.crps, "energy": self.energy}


def residual_summaries(r, pred_var) -> Scores:
    """Moments of residuals and of residuals standardized by the predictive variance."""
    r = np.asarray(r, dtype=float)
    v = np.asarray(pred_var, dtype=float)
    if np.any(~(v > 0)):
        raise NonPositiveVariance("predictive variances must be positive")
    rs = r / np.sqrt(v)
    return Scores(var_rs=float(np.var(rs)), mean_r=float(np.mean(r)), var_r=float(np.var(r)),
                  mean_abs_r=float(np.mean(np.abs(r))))


def fold_partition(N: int, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold label per observation from a random permutation, sizes differing by at most one."""
    if folds < 2 or N < folds:
        raise FoldTooSmall(f"cannot split {N} observations into {folds} folds")
    perm = rng.permutation(N)
    labels = np.empty(N, dtype=np.int64)
    labels[perm] = np.arange(N) % folds
    return labels


@dataclass(eq=False)
class CrossValResult:
    scores: Scores
    residuals: np.ndarray
    std_residuals: np.ndarray
    fold: np.ndarray
    pred_mean: np.ndarray
    pred_var: np.ndarray


def crossval(dataset: Dataset, ops: FemOperators, A, params: ModelParams, gibbs: GibbsConfig,
             folds: int = 10, seed: int = 0, refit: bool = False, mcem: McemConfig | None = None,
             latent: bool = False) -> CrossValResult:
    """K-fold cross-validation of the predictive distribution.

    Each fold is predicted from the others, using ``params`` as given
    (``refit=False``) or refitted on the training part.  Predictive variances
    and samples are on the y scale (measurement noise included) unless
    ``latent`` is set.
    """
    rng = np.random.default_rng(seed)
    Am = _amat(A).tocsr()
    labels = fold_partition(dataset.N, folds, rng)
    N = dataset.N
    mean = np.empty(N)
    var = np.empty(N)
    crps_sum = 0.0
    energy = []
    for f in range(folds):
        test = np.flatnonzero(labels == f)
        train = np.flatnonzero(labels != f)
        dtr = dataset.subset(train)
        Atr = Am[train]
        p = params
        if refit:
            cfg = mcem or McemConfig(gibbs=gibbs)
            p = mcem_fit(dtr, ops, Atr, params, cfg, rng=rng).params
        res = krige(p, ops, Atr, dtr, Am[test], gibbs, mode="both", Bp=dataset.B[test],
                    keep_samples=True, rng=rng)
        noise_var = 0.0 if latent else p.sigma_eps ** 2
        mean[test] = res.mean_rb
        var[test] = res.var_rb + noise_var
        draws = res.samples
        if not latent:
            draws = draws + p.sigma_eps * rng.standard_normal(draws.shape)
        y = dataset.y[test]
        crps_sum += crps_mc(draws, y) * test.size
        energy.append(energy_score_mc(draws, y))
    r = dataset.y - mean
    sc = residual_summaries(r, var)
    sc.crps = crps_sum / N
    sc.energy = float(np.mean(energy))
    return CrossValResult(sc, r, r / np.sqrt(var), labels, mean, var)
