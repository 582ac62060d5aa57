"""Hierarchical SPDE model: parameters, prior variance laws and simulation.

The latent weights follow::

    K_alpha w = B_gamma g + diag(V) B_mu mu + sigma sqrt(V) Z

and observations ``y = B beta + A w + eps``.  The drift vector ``g`` is
stored with the GAL shape already absorbed (``g = tau * gamma``), which is
the form every estimation formula uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .errors import (DimensionMismatch, InvalidFamily, InvalidParams, InvalidShape,
                     NonPositiveArgument, NonPositiveKappa, UnsupportedAlpha)
from .gig import GigParams, gig_moment, gig_sample
from .mesh import FemOperators, ObservationMatrix, build_K_alpha
from .sparse import chol_factor

FAMILIES = ("gaussian", "gal", "nig")


def _vec(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=float)).copy()


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Driving noise of the SPDE.

    Parameters
    ----------
    family : {"gaussian", "gal", "nig"}
    phi : float
        Noise scale of the Gaussian family.
    tau : float
        GAL shape per unit area.
    nu : float
        NIG shape parameter.
    gamma : array
        Drift coefficients on ``B_gamma`` (shape already absorbed).
    mu : array
        Skewness coefficients on ``B_mu``.
    sigma : float
        Scale of the Gaussian component of the mixture.
    """

    family: str
    phi: float | None = None
    tau: float | None = None
    nu: float | None = None
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(1))
    mu: np.ndarray = field(default_factory=lambda: np.zeros(1))
    sigma: float | None = None

    def __post_init__(self):
        fam = str(self.family).lower()
        if fam not in FAMILIES:
            raise InvalidFamily(f"unknown noise family {self.family!r}")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "gamma", _vec(self.gamma))
        object.__setattr__(self, "mu", _vec(self.mu))
        active = {"gaussian": "phi", "gal": "tau", "nig": "nu"}[fam]
        for name in ("phi", "tau", "nu"):
            v = getattr(self, name)
            if name == active:
                if v is None or not (float(v) > 0 and math.isfinite(float(v))):
                    raise InvalidParams(f"{fam} noise needs a positive {name}")
                object.__setattr__(self, name, float(v))
            elif v is not None:
                raise InvalidParams(f"{name} is not a parameter of the {fam} family")
        if fam == "gaussian":
            if np.any(self.gamma != 0) or np.any(self.mu != 0):
                raise InvalidParams("the Gaussian family has no drift or skewness")
            # sigma mirrors phi so that shared code can use one scale
            object.__setattr__(self, "sigma", self.phi)
        else:
            if self.sigma is None or not float(self.sigma) > 0:
                raise InvalidParams("sigma must be positive")
            object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def is_gaussian(self) -> bool:
        return self.family == "gaussian"

    @property
    def gamma_display(self) -> np.ndarray:
        """Drift in the unabsorbed parameterization (``g / tau`` for GAL)."""
        return self.gamma / self.tau if self.family == "gal" else self.gamma.copy()


@dataclass(frozen=True, eq=False)
class ModelParams:
    kappa: float
    alpha: int
    beta: np.ndarray
    sigma_eps: float
    noise: NoiseSpec

    def __post_init__(self):
        if not float(self.kappa) > 0:
            raise NonPositiveKappa(f"kappa must be positive, got {self.kappa}")
        if self.alpha not in (2, 4):
            raise UnsupportedAlpha(f"alpha must be 2 or 4, got {self.alpha}")
        if not float(self.sigma_eps) > 0:
            raise InvalidParams("sigma_eps must be strictly positive")
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "sigma_eps", float(self.sigma_eps))
        object.__setattr__(self, "beta", _vec(self.beta))

    def smoothness(self, dim: int) -> float:
        """Matérn smoothness ``alpha - d/2`` of the Gaussian limit."""
        return self.alpha - dim / 2.0

    def replace(self, **kw) -> "ModelParams":
        return replace(self, **kw)

    def with_noise(self, **kw) -> "ModelParams":
        return replace(self, noise=replace(self.noise, **kw))


@dataclass(eq=False)
class LatentState:
    w: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        if self.w.shape != self.V.shape:
            raise DimensionMismatch("w and V must have the same length")
        if np.any(~(self.V > 0)):
            raise InvalidParams("variance components must be positive")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations and covariates.

    ``B`` is evaluated at the N observation locations; ``B_gamma`` and
    ``B_mu`` at the n mesh nodes.
    """

    locations: np.ndarray
    y: np.ndarray
    B: np.ndarray
    B_gamma: np.ndarray
    B_mu: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        B = np.asarray(self.B, dtype=float)
        B = B.reshape(-1, 1) if B.ndim == 1 else B
        Bg = np.asarray(self.B_gamma, dtype=float)
        Bg = Bg.reshape(-1, 1) if Bg.ndim == 1 else Bg
        Bm = np.asarray(self.B_mu, dtype=float)
        Bm = Bm.reshape(-1, 1) if Bm.ndim == 1 else Bm
        locs = np.asarray(self.locations, dtype=float)
        locs = locs.reshape(y.shape[0], -1) if locs.size else locs.reshape(0, 1)
        if B.shape[0] != y.shape[0] or locs.shape[0] != y.shape[0]:
            raise DimensionMismatch("B, locations and y need one row per observation")
        if Bg.shape[0] != Bm.shape[0]:
            raise DimensionMismatch("B_gamma and B_mu need one row per mesh node")
        for name, v in (("y", y), ("B", B), ("locations", locs), ("B_gamma", Bg), ("B_mu", Bm)):
            object.__setattr__(self, name, v)

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.B_gamma.shape[0]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.locations[rows], self.y[rows], self.B[rows], self.B_gamma, self.B_mu)


def default_dataset(locations, y, n_nodes: int, B=None) -> Dataset:
    """Intercept-only mean covariates and single all-ones node covariates."""
    y = np.asarray(y, dtype=float).ravel()
    if B is None:
        B = np.ones((y.shape[0], 1))
    ones = np.ones((n_nodes, 1))
    return Dataset(locations, y, B, ones, ones)


def matern_cov(dist, kappa: float, nu: float, phi: float = 1.0, d: int = 2):
    """Matérn covariance of the field solving the SPDE with noise scale ``phi``.

    ``C(r) = 2^(1-nu) phi^2 / ((4 pi)^(d/2) Gamma(nu + d/2) kappa^(2 nu)) (kappa r)^nu K_nu(kappa r)``
    """
    if d not in (1, 2) or not nu > 0 or not kappa > 0 or not phi > 0:
        raise InvalidShape("need d in {1, 2} and positive kappa, nu, phi")
    r = np.asarray(dist, dtype=float)
    if np.any(r < 0):
        raise InvalidShape("distances must be nonnegative")
    logc = ((1.0 - nu) * math.log(2.0) + 2.0 * math.log(phi) - 0.5 * d * math.log(4.0 * math.pi)
            - special.gammaln(nu + 0.5 * d) - 2.0 * nu * math.log(kappa))
    x = kappa * r
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = np.where(x > 0, nu * np.log(np.where(x > 0, x, 1.0))
                        + np.log(special.kve(nu, np.where(x > 0, x, 1.0))) - x, 0.0)
    # x^nu K_nu(x) -> 2^(nu-1) Gamma(nu) as x -> 0
    tail = np.where(x > 0, tail, (nu - 1.0) * math.log(2.0) + special.gammaln(nu))
    out = np.exp(logc + tail)
    return out[()] if out.ndim == 0 else out


def prior_variance_params(noise: NoiseSpec, h) -> GigParams | None:
    """GIG laws of the variance components; ``None`` for the Gaussian family (V = h)."""
    h = np.asarray(h, dtype=float)
    if np.any(~(h > 0)):
        raise NonPositiveArgument("cell areas must be positive")
    if noise.family == "gal":
        return GigParams(noise.tau * h, 2.0, 0.0)
    if noise.family == "nig":
        return GigParams(-0.5, 2.0, noise.nu ** 2 * h)
    if noise.family == "gaussian":
        return None
    raise InvalidFamily(noise.family)


def prior_mean_V(noise: NoiseSpec, h) -> np.ndarray:
    g = prior_variance_params(noise, h)
    return np.array(h, dtype=float) if g is None else np.asarray(gig_moment(g, 1.0), dtype=float)


def sample_prior_V(noise: NoiseSpec, h, rng: np.random.Generator) -> np.ndarray:
    g = prior_variance_params(noise, h)
    return np.array(h, dtype=float) if g is None else gig_sample(g, rng)


def drift(noise: NoiseSpec, B_gamma, B_mu, V):
    """``B_gamma g + diag(V) B_mu mu``; zero for the Gaussian family."""
    n = V.shape[0]
    if noise.is_gaussian:
        return np.zeros(n)
    Bg = np.asarray(B_gamma, dtype=float).reshape(n, -1)
    Bm = np.asarray(B_mu, dtype=float).reshape(n, -1)
    if Bg.shape[1] != noise.gamma.shape[0] or Bm.shape[1] != noise.mu.shape[0]:
        raise DimensionMismatch("covariate columns do not match gamma/mu lengths")
    return Bg @ noise.gamma + V * (Bm @ noise.mu)


def simulate_latent(params: ModelParams, ops: FemOperators, B_gamma, B_mu,
                    rng: np.random.Generator) -> LatentState:
    """Draw (w, V) from the prior: V first, then the Gaussian innovations."""
    n = ops.n
    if np.asarray(B_gamma).shape[0] != n or np.asarray(B_mu).shape[0] != n:
        raise DimensionMismatch("node covariates must have one row per mesh node")
    V = sample_prior_V(params.noise, ops.h, rng)
    z = rng.standard_normal(n)
    rhs = drift(params.noise, B_gamma, B_mu, V) + params.noise.sigma * np.sqrt(V) * z
    Ka = build_K_alpha(ops, params.kappa, params.alpha)
    w = chol_factor(Ka).solve(rhs)
    return LatentState(w, V)


def simulate_observations(params: ModelParams, A, B, w, rng: np.random.Generator) -> np.ndarray:
    Am = A.matrix if isinstance(A, ObservationMatrix) else A
    B = np.asarray(B, dtype=float)
    B = B.reshape(-1, 1) if B.ndim == 1 else B
    w = np.asarray(w, dtype=float)
    if Am.shape[1] != w.shape[0] or B.shape[0] != Am.shape[0] or B.shape[1] != params.beta.shape[0]:
        raise DimensionMismatch("inconsistent A, B, w, beta dimensions")
    eps = params.sigma_eps * rng.standard_normal(Am.shape[0])
    return B @ params.beta + Am @ w + eps
