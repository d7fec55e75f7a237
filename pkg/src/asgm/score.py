"""Score functions: exact Gaussian laws of linear instances and training targets.

For a linear instance ``dX = phi1(t) M X dt + phi2(t) dW`` (per channel,
white noise) and an initial state ``X_0 ~ Normal(x0, s0^2 I)``,

    mean(t) = exp(A(t) M) x0,          A(t) = int_0^t phi1
    cov(t)  = s0^2 exp(A M) exp(A M)^T + int_0^t phi2(s)^2 exp((A(t)-A(s)) M) exp((A(t)-A(s)) M)^T ds.

``M`` is diagonalized once; the covariance is assembled in that eigenbasis
and re-diagonalized with an orthonormal basis, which is what
:class:`GaussianLaw` stores.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import cumulative_simpson

from .dynamics import SdeInstance, laplacian_matrix, laplacian_weights
from .errors import DegenerateVarianceError, InstanceError, UnsupportedFeatureError
from .integrator import (
    RngStream,
    StepperConfig,
    deterministic_flow,
    simulate_paths,
)

log = logging.getLogger(__name__)

SIMPSON_PANELS = 1000
#: modes whose mean factor exp(A(T) mu_k) drops below this are centered in the prior
PRIOR_MODE_CUTOFF = 1e-6
MAX_DENSE_PIXELS = 4096


def simpson_nodes(a: float, b: float, panels: int = SIMPSON_PANELS):
    """Nodes and weights of the composite Simpson rule on ``[a, b]``."""
    s = np.linspace(a, b, 2 * panels + 1)
    w = np.ones_like(s)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return s, w * (b - a) / (6 * panels)


def integrate(f, a: float, b: float, panels: int = SIMPSON_PANELS) -> float:
    if b == a:
        return 0.0
    s, w = simpson_nodes(a, b, panels)
    return float(np.dot(w, np.asarray(f(s), dtype=np.float64) * np.ones_like(s)))


def accumulated_variance(instance: SdeInstance, t: float) -> float:
    """``w(t) = int_0^t phi2(s)^2 ds`` (the per-pixel noise variance of additive instances)."""
    phi2 = _phi2_fn(instance)
    return integrate(lambda s: np.asarray(phi2(s)) ** 2, 0.0, t)


def _phi2_fn(instance):
    if hasattr(instance, "phi2_at"):
        return instance.phi2_at
    return instance.linear_structure((1, 1))[3]


@dataclass
class Diagonalization:
    """``M = V diag(mu) V^{-1}`` with real spectrum."""

    mu: np.ndarray
    V: np.ndarray
    Vinv: np.ndarray


def diagonalize(M: np.ndarray, weights: np.ndarray) -> Diagonalization:
    """Diagonalize ``M`` given weights making ``diag(weights) M`` symmetric."""
    r = np.sqrt(weights)
    S = (r[:, None] * M) / r[None, :]
    S = 0.5 * (S + S.T)
    mu, Q = np.linalg.eigh(S)
    V = Q / r[:, None]
    Vinv = Q.T * r[None, :]
    return Diagonalization(mu, V, Vinv)


@lru_cache(maxsize=16)
def _grid_diagonalization(h: int, w: int) -> Diagonalization:
    return diagonalize(laplacian_matrix(h, w), laplacian_weights(h, w))


@lru_cache(maxsize=16)
def symmetric_laplacian_basis(h: int, w: int):
    """Orthonormal eigenbasis of the symmetric part of the grid drift matrix."""
    L = laplacian_matrix(h, w)
    mu, U = np.linalg.eigh(0.5 * (L + L.T))
    return mu, U


@dataclass
class GaussianLaw:
    """Gaussian law of a field, per channel: ``Normal(mean[c], U diag(var) U^T)``.

    ``basis`` has orthonormal columns shared by all channels; ``drift_eigvals``
    is the spectrum of the drift matrix for linear laws (``None`` otherwise).
    """

    mean: np.ndarray
    basis: np.ndarray
    variances: np.ndarray
    drift_eigvals: np.ndarray | None = None
    t: float | None = None

    @property
    def shape(self):
        return self.mean.shape

    def covariance(self) -> np.ndarray:
        return (self.basis * self.variances) @ self.basis.T

    def coefficients(self, x) -> np.ndarray:
        """Coordinates of ``x - mean`` in the basis, shape ``(..., C, P)``."""
        x = np.asarray(x, dtype=np.float64)
        d = (x - self.mean).reshape(*x.shape[:-2], -1)
        return d @ self.basis

    def score(self, x) -> np.ndarray:
        return analytic_score(self, x)

    def log_density(self, x) -> np.ndarray:
        if np.any(self.variances <= 0):
            raise DegenerateVarianceError("log-density of a degenerate Gaussian")
        z = self.coefficients(x)
        q = np.sum(z * z / self.variances, axis=-1) + np.sum(np.log(2 * np.pi * self.variances))
        return -0.5 * np.sum(q, axis=-1)

    def sample(self, noise) -> np.ndarray:
        """Map standard normal ``noise`` of shape ``(..., C, H, W)`` to draws from the law."""
        z = np.asarray(noise).reshape(*np.shape(noise)[:-2], -1)
        d = (z * np.sqrt(np.maximum(self.variances, 0.0))) @ self.basis.T
        return self.mean + d.reshape(np.shape(noise))


def analytic_score(law: GaussianLaw, x) -> np.ndarray:
    """``-C^{-1} (x - mean)`` evaluated in the law's orthonormal basis."""
    if np.any(law.variances <= 0):
        raise DegenerateVarianceError("score undefined: a mode has zero variance")
    x = np.asarray(x, dtype=np.float64)
    z = law.coefficients(x)
    s = -(z / law.variances) @ law.basis.T
    return s.reshape(x.shape)


class LinearFlow:
    """Exact moments of a linear instance on a fixed grid shape."""

    def __init__(self, instance: SdeInstance, shape, panels: int = SIMPSON_PANELS):
        self.instance = instance
        self.shape = tuple(shape)
        h, w = self.shape[-2:]
        if h * w > MAX_DENSE_PIXELS:
            raise InstanceError(f"grid of {h * w} pixels too large for dense diagonalization")
        M, weights, self.phi1, self.phi2 = instance.linear_structure(self.shape)
        if getattr(instance, "schedule", None) is not None:
            self.diag = _grid_diagonalization(h, w)
        else:
            self.diag = diagonalize(M, weights)
        self.gram = self.diag.Vinv @ self.diag.Vinv.T
        self.panels = panels
        self._cache = {}

    def A(self, t) -> float:
        return integrate(lambda s: _vec(self.phi1, s), 0.0, t, self.panels)

    def _nodes(self, t):
        s, w = simpson_nodes(0.0, t, self.panels)
        a_cum = cumulative_simpson(_vec(self.phi1, s), x=s, initial=0.0)
        return s, w, a_cum

    def mode_kernel(self, t) -> np.ndarray:
        """``K_kl = int_0^t phi2(s)^2 exp((A(t)-A(s)) (mu_k + mu_l)) ds``."""
        if t <= 0:
            n = self.diag.mu.size
            return np.zeros((n, n))
        s, w, a_cum = self._nodes(t)
        a = a_cum[-1] - a_cum
        E = np.exp(np.outer(self.diag.mu, a))
        return (E * (w * _vec(self.phi2, s) ** 2)) @ E.T

    def mean_factor(self, t) -> np.ndarray:
        return np.exp(self.A(t) * self.diag.mu)

    def propagate_mean(self, x0, t) -> np.ndarray:
        x0 = np.asarray(x0, dtype=np.float64)
        f = self.mean_factor(t)
        flat = x0.reshape(*x0.shape[:-2], -1)
        out = ((flat @ self.diag.Vinv.T) * f) @ self.diag.V.T
        return out.reshape(x0.shape)

    def covariance(self, t, initial_var: float = 0.0) -> np.ndarray:
        key = (float(t), float(initial_var))
        if key in self._cache:
            return self._cache[key]
        K = self.mode_kernel(t)
        if initial_var:
            f = self.mean_factor(t)
            K = K + initial_var * np.outer(f, f)
        V = self.diag.V
        C = V @ (K * self.gram) @ V.T
        C = 0.5 * (C + C.T)
        self._cache[key] = C
        return C

    def law(self, x0, t, initial_var: float = 0.0) -> GaussianLaw:
        C = self.covariance(t, initial_var)
        var, U = np.linalg.eigh(C)
        var = np.maximum(var, 0.0)
        return GaussianLaw(self.propagate_mean(x0, t), U, var, self.diag.mu.copy(), float(t))


def _vec(fn, s):
    s = np.asarray(s, dtype=np.float64)
    out = np.asarray(fn(s), dtype=np.float64)
    return out * np.ones_like(s)


def linear_law(instance: SdeInstance, x0, t: float, initial_var: float = 0.0) -> GaussianLaw:
    """Law of ``X_t`` for a linear instance started at ``x0`` (plus optional isotropic spread)."""
    x0 = np.asarray(x0, dtype=np.float64)
    return LinearFlow(instance, x0.shape).law(x0, t, initial_var)


class LinearGaussianScore:
    """Exact score ``s(t, x)`` of a linear instance with Gaussian initial law.

    ``mean0``/``initial_var`` describe ``X_0 ~ Normal(mean0, initial_var I)``;
    ``initial_var = 0`` gives the law conditional on ``X_0 = mean0``.  Laws
    are cached by time.
    """

    kind = "analytic"

    def __init__(self, instance: SdeInstance, mean0, initial_var: float = 0.0):
        self.mean0 = np.asarray(mean0, dtype=np.float64)
        self.initial_var = float(initial_var)
        self.flow = LinearFlow(instance, self.mean0.shape)
        self._laws = {}

    def law(self, t) -> GaussianLaw:
        key = round(float(t), 12)
        if key not in self._laws:
            self._laws[key] = self.flow.law(self.mean0, t, self.initial_var)
        return self._laws[key]

    def __call__(self, t, x):
        return analytic_score(self.law(t), x)


# ---------------------------------------------------------------------------
# conditional Gaussian targets and empirical mixtures


@dataclass
class DsmBatchTarget:
    t: float
    x_t: np.ndarray
    target_score: np.ndarray
    weight: float


def _require_additive(instance):
    if not instance.additive:
        raise UnsupportedFeatureError("conditional Gaussian targets need additive noise")


def conditional_gaussian_target(instance: SdeInstance, x0, t: float, rng: RngStream,
                                cfg: StepperConfig | None = None, noise=None) -> DsmBatchTarget:
    """Draw ``x_t`` around the conditional mean of ``X_t | X_0 = x0`` and its score target.

    Linear instances use the exact law.  Otherwise the mean is the noise-free
    tamed flow of ``x0`` and the covariance is white with variance
    ``w(t) = int_0^t phi2^2``.  ``noise`` overrides the standard normal draw.
    """
    _require_additive(instance)
    x0 = np.asarray(x0, dtype=np.float64)
    z = rng.normal(x0.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    w = accumulated_variance(instance, t)
    if instance.is_linear:
        law = linear_law(instance, x0, t)
        x_t = law.sample(z)
        zc = z.reshape(*z.shape[:-2], -1)
        with np.errstate(divide="ignore", invalid="ignore"):
            target = -(np.where(law.variances > 0, zc / np.sqrt(law.variances), 0.0)) @ law.basis.T
        return DsmBatchTarget(t, x_t, target.reshape(x0.shape), w)
    cfg = cfg or StepperConfig(dt=instance.dt)
    mean = _flow_to(instance, x0, t, cfg)
    sd = math.sqrt(w)
    target = -z / sd if sd > 0 else np.zeros_like(z)
    return DsmBatchTarget(t, mean + sd * z, target, w)


def _flow_to(instance, x0, t, cfg):
    if t <= 0:
        return x0.copy()
    n = max(1, int(round(t / cfg.dt)))
    return deterministic_flow(instance, x0, StepperConfig(dt=t / n, gamma=cfg.gamma, tamed=cfg.tamed),
                              t_end=t, every_step=False)


class FlowTable:
    """Noise-free flows of a fixed set of images on the stepper grid, interpolated in time."""

    def __init__(self, instance: SdeInstance, images, cfg: StepperConfig):
        self.instance = instance
        self.cfg = cfg
        self.images = np.asarray(images, dtype=np.float64)
        self.n_steps = cfg.n_steps(instance.T)
        self.dt = instance.T / self.n_steps
        self.states = deterministic_flow(instance, self.images, cfg)  # (n+1, J, C, H, W)

    def at(self, t) -> np.ndarray:
        u = float(t) / self.dt
        k = min(int(math.floor(u)), self.n_steps - 1)
        frac = u - k
        return (1 - frac) * self.states[k] + frac * self.states[k + 1]


class MixtureScore:
    """Score of the empirical data distribution pushed through the forward process.

    ``p_t = mean_j Normal(m_j(t), C(t))`` where ``m_j`` is the conditional mean
    of training image ``j`` and ``C(t)`` the conditional covariance used by
    :func:`conditional_gaussian_target` (exact for linear instances, white
    ``w(t) I`` otherwise).
    """

    kind = "mixture"

    def __init__(self, instance: SdeInstance, images, cfg: StepperConfig | None = None):
        _require_additive(instance)
        self.instance = instance
        self.images = np.asarray(images, dtype=np.float64)
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ValueError("images must be a nonempty (J, C, H, W) array")
        self.cfg = cfg or StepperConfig(dt=instance.dt)
        self.linear = instance.is_linear
        if self.linear:
            self.flow = LinearFlow(instance, self.images.shape[1:])
        else:
            self.table = FlowTable(instance, self.images, self.cfg)
        self._cache = {}

    def _components(self, t):
        key = round(float(t), 12)
        if key not in self._cache:
            if self.linear:
                means = self.flow.propagate_mean(self.images, t)
                var, U = np.linalg.eigh(self.flow.covariance(t))
            else:
                means = self.table.at(t)
                P = self.images.shape[-1] * self.images.shape[-2]
                var, U = np.full(P, accumulated_variance(self.instance, t)), None
            if np.any(var <= 0):
                raise DegenerateVarianceError(f"mixture score undefined at t={t}")
            flat = means.reshape(*means.shape[:-2], -1)
            proj = flat if U is None else flat @ U
            if len(self._cache) > 512:
                self._cache.clear()
            self._cache[key] = (proj, U, var)
        return self._cache[key]

    def __call__(self, t, x):
        proj, U, var = self._components(t)  # proj: (J, C, P)
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(*x.shape[:-2], -1)
        z = flat if U is None else flat @ U  # (..., C, P)
        d = z[..., None, :, :] - proj  # (..., J, C, P)
        logits = -0.5 * np.sum(d * d / var, axis=(-2, -1))  # (..., J)
        logits -= logits.max(axis=-1, keepdims=True)
        r = np.exp(logits)
        r /= r.sum(axis=-1, keepdims=True)
        mbar = np.einsum("...j,jcp->...cp", r, proj)
        s = (mbar - z) / var
        if U is not None:
            s = s @ U.T
        return s.reshape(x.shape)


# ---------------------------------------------------------------------------
# prior


def prior_law(instance: SdeInstance, calibration, cfg: StepperConfig | None = None,
              seed: int = 0, n_sims: int = 256, initial_var: float = 0.0) -> GaussianLaw:
    """Gaussian law used to initialize the backward sampler.

    Linear instances get the exact law at ``T`` around the propagated mean of
    the calibration images, with modes that have decayed below
    ``PRIOR_MODE_CUTOFF`` centered.  Other instances are fitted from
    ``n_sims`` forward simulations: per-pixel mean and per-mode variance in
    the orthonormal eigenbasis of the symmetrized drift matrix.
    """
    images = np.asarray(calibration, dtype=np.float64)
    if instance.is_linear:
        if images.ndim == 3:
            images = images[None]
        if len(images) == 0:
            raise ValueError("need at least one calibration image to fix the grid shape")
        flow = LinearFlow(instance, images.shape[1:])
        T = instance.T
        f = flow.mean_factor(T)
        xbar = images.mean(axis=0)
        coef = xbar.reshape(*xbar.shape[:-2], -1) @ flow.diag.Vinv.T
        coef = np.where(f >= PRIOR_MODE_CUTOFF, coef * f, 0.0)
        mean = (coef @ flow.diag.V.T).reshape(xbar.shape)
        var, U = np.linalg.eigh(flow.covariance(T, initial_var))
        return GaussianLaw(mean, U, np.maximum(var, 0.0), flow.diag.mu.copy(), T)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("the simulated prior needs a nonempty calibration set")
    cfg = cfg or StepperConfig(dt=instance.dt)
    starts = images[np.arange(n_sims) % len(images)]
    finals = simulate_paths(instance, starts, n_sims, cfg, seed, batched_x0=True)
    mean = finals.mean(axis=0)
    h, w = images.shape[-2:]
    _, U = symmetric_laplacian_basis(h, w)
    coef = (finals - mean).reshape(n_sims, images.shape[1], -1) @ U
    var = np.mean(coef**2, axis=(0, 1)) * n_sims / max(n_sims - 1, 1)
    log.info("simulated prior from %d paths: variance range [%.3g, %.3g]", n_sims, var.min(), var.max())
    return GaussianLaw(mean, U, var, None, instance.T)
