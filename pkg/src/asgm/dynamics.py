"""Spatially discretized drift and diffusion operators.

The drift is the divergence-form anisotropic smoothing
``div(Psi1(t, grad x) grad x)`` on a unit-spaced grid with reflecting
(Neumann) boundaries; the diffusion coefficient is the diagonal operator
``eta -> Psi2(t, grad x) * eta``.  Stencils act on the last two axes of the
state, so batches of fields can be evaluated at once.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import DimensionError, InstanceError, TimeRangeError
from .grid import MIN_SIZE
from .schedules import ISOTROPIC_THRESHOLD, Schedule, psi_from_sq

QUASILINEAR_MULTIPLICATIVE = "quasilinear-multiplicative"
SEMILINEAR_MULTIPLICATIVE = "semilinear-multiplicative"
QUASILINEAR_ADDITIVE = "quasilinear-additive"
LINEAR_ADDITIVE = "linear-additive"

#: finite-difference step for the divergence of the noise covariance
DIVERGENCE_FD_STEP = 1e-4


def classify(schedule: Schedule) -> str:
    """Classify the forward equation by which coefficients see the gradient."""
    iso1 = schedule.psi1.isotropic
    iso2 = schedule.psi2.isotropic
    if iso1 and iso2:
        return LINEAR_ADDITIVE
    if iso2:
        return QUASILINEAR_ADDITIVE
    if iso1:
        return SEMILINEAR_MULTIPLICATIVE
    return QUASILINEAR_MULTIPLICATIVE


def _check_grid(x: np.ndarray):
    if x.ndim < 2 or x.shape[-1] < MIN_SIZE or x.shape[-2] < MIN_SIZE:
        raise DimensionError(f"state needs trailing grid axes of size >= {MIN_SIZE}, got {x.shape}")


@lru_cache(maxsize=64)
def _clamped_index(n: int, offset: int) -> np.ndarray:
    return np.clip(np.arange(n) + offset, 0, n - 1)


def _shift(x: np.ndarray, a: int, b: int) -> np.ndarray:
    """``out[..., i1, i2] = x[..., clamp(i1 + a), clamp(i2 + b)]``."""
    n1, n2 = x.shape[-2:]
    out = x
    if a:
        out = out[..., _clamped_index(n1, a), :]
    if b:
        out = out[..., :, _clamped_index(n2, b)]
    return out


def neumann_laplacian(x) -> np.ndarray:
    """Five-point Laplacian with mirror ghost cells (``x[-1] = x[1]``)."""
    x = np.asarray(x, dtype=np.float64)
    _check_grid(x)
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad, mode="reflect")
    return xp[..., 2:, 1:-1] + xp[..., :-2, 1:-1] + xp[..., 1:-1, 2:] + xp[..., 1:-1, :-2] - 4.0 * x


def laplacian_matrix(height: int, width: int) -> np.ndarray:
    """Dense matrix of :func:`neumann_laplacian` on one ``height x width`` channel."""
    n = height * width
    basis = np.eye(n).reshape(n, height, width)
    return neumann_laplacian(basis).reshape(n, n).T


def laplacian_weights(height: int, width: int) -> np.ndarray:
    """Positive weights ``w`` such that ``diag(w) @ laplacian_matrix`` is symmetric.

    Edge pixels get 1/2 and corners 1/4, undoing the mirror doubling.
    """
    w1 = np.ones(height)
    w1[[0, -1]] = 0.5
    w2 = np.ones(width)
    w2[[0, -1]] = 0.5
    return np.outer(w1, w2).ravel()


def anisotropic_drift(x: np.ndarray, phi: float, lam: float) -> np.ndarray:
    """Drift ``b(x)`` for one time instant with ``Psi1 = phi / sqrt(1 + |p|^2 / lam^2)``.

    Each pixel sums four face fluxes ``Psi1(face gradient) * (neighbor - x)``.
    The face gradient's normal component is a wide difference reaching two
    pixels (clamped at the border); the transverse component is a central
    difference taken on the neighboring line.  Boundary pixels use mirrored
    fluxes whose coefficient is the sum of two ``Psi1`` evaluations.
    """
    if phi == 0.0:
        return np.zeros_like(x)
    if lam > ISOTROPIC_THRESHOLD:
        return phi * neumann_laplacian(x)

    def P(p1, p2):
        return psi_from_sq(phi, lam, p1 * p1 + p2 * p2)

    c = x
    e1, w1 = _shift(x, 1, 0), _shift(x, -1, 0)
    n1, s1 = _shift(x, 0, 1), _shift(x, 0, -1)
    e2, w2 = _shift(x, 2, 0), _shift(x, -2, 0)
    n2, s2 = _shift(x, 0, 2), _shift(x, 0, -2)
    en, es = _shift(x, 1, 1), _shift(x, 1, -1)
    wn, ws = _shift(x, -1, 1), _shift(x, -1, -1)
    zero = np.zeros_like(x)

    # interior formula, evaluated everywhere and overwritten on the boundary
    out = (
        P(e2 - c, en - es) * (e1 - c)
        - P(c - w2, wn - ws) * (c - w1)
        + P(en - wn, n2 - c) * (n1 - c)
        - P(es - ws, c - s2) * (c - s1)
    )

    N1, N2 = x.shape[-2:]
    v = dict(c=c, e1=e1, w1=w1, n1=n1, s1=s1, e2=e2, w2=w2, n2=n2, s2=s2,
             en=en, es=es, wn=wn, ws=ws, zero=zero)

    def region(r, q):
        return {k: a[..., r, q] for k, a in v.items()}

    mid1 = slice(1, N1 - 1)
    mid2 = slice(1, N2 - 1)

    # left edge, corner i2 = 0
    g = region(slice(0, 1), slice(0, 1))
    out[..., 0:1, 0:1] = (
        (P(g["e2"] - g["c"], g["zero"]) + phi) * (g["e1"] - g["c"])
        + (P(g["zero"], g["n2"] - g["c"]) + phi) * (g["n1"] - g["c"])
    )
    # left edge, i2 > 0
    g = region(slice(0, 1), mid2)
    out[..., 0:1, mid2] = (
        (P(g["e2"] - g["c"], g["en"] - g["es"]) + P(g["zero"], g["en"] - g["es"])) * (g["e1"] - g["c"])
        + P(g["zero"], g["n2"] - g["c"]) * (g["n1"] - g["c"])
        - P(g["zero"], g["c"] - g["s2"]) * (g["c"] - g["s1"])
    )
    # top edge, corner i1 = 0.  The transverse argument of the second flux is
    # x_i - x[i1, max(i2, 0)], which is identically zero as written; kept as is.
    g = region(slice(0, 1), slice(N2 - 1, N2))
    out[..., 0:1, N2 - 1 : N2] = (
        (P(g["e2"] - g["c"], g["zero"]) + phi) * (g["e1"] - g["c"])
        + (P(g["zero"], g["c"] - g["c"]) + phi) * (g["s1"] - g["c"])
    )
    # top edge, i1 > 0.  The first flux carries its (x[i1+1] - x_i) factor;
    # without it a constant field would have nonzero drift.
    g = region(mid1, slice(N2 - 1, N2))
    out[..., mid1, N2 - 1 : N2] = (
        P(g["e2"] - g["c"], g["zero"]) * (g["e1"] - g["c"])
        - P(g["c"] - g["w2"], g["zero"]) * (g["c"] - g["w1"])
        + (P(g["es"] - g["ws"], g["zero"]) + P(g["es"] - g["ws"], g["c"] - g["s2"])) * (g["s1"] - g["c"])
    )
    # right edge, corner i2 = N2 - 1 (the x[i1-1, i2+1] neighbor clamps to x[i1-1, i2])
    g = region(slice(N1 - 1, N1), slice(N2 - 1, N2))
    out[..., N1 - 1 : N1, N2 - 1 : N2] = (
        (P(g["c"] - g["w2"], g["zero"]) + phi) * (g["w1"] - g["c"])
        + (P(g["zero"], g["c"] - g["s2"]) + phi) * (g["s1"] - g["c"])
    )
    # right edge, i2 < N2 - 1
    g = region(slice(N1 - 1, N1), mid2)
    out[..., N1 - 1 : N1, mid2] = (
        (P(g["zero"], g["wn"] - g["ws"]) + P(g["c"] - g["w2"], g["wn"] - g["ws"])) * (g["w1"] - g["c"])
        + P(g["zero"], g["n2"] - g["c"]) * (g["n1"] - g["c"])
        - P(g["zero"], g["c"] - g["s2"]) * (g["c"] - g["s1"])
    )
    # bottom edge, corner i1 = N1 - 1
    g = region(slice(N1 - 1, N1), slice(0, 1))
    out[..., N1 - 1 : N1, 0:1] = (
        (P(g["c"] - g["w2"], g["zero"]) + phi) * (g["w1"] - g["c"])
        + (P(g["zero"], g["n2"] - g["c"]) + phi) * (g["n1"] - g["c"])
    )
    # bottom edge, i1 < N1 - 1
    g = region(mid1, slice(0, 1))
    out[..., mid1, 0:1] = (
        P(g["e2"] - g["c"], g["zero"]) * (g["e1"] - g["c"])
        - P(g["c"] - g["w2"], g["zero"]) * (g["c"] - g["w1"])
        + (P(g["en"] - g["wn"], g["n2"] - g["c"]) + P(g["en"] - g["wn"], g["zero"])) * (g["n1"] - g["c"])
    )
    return out


def noise_gradient_sq(x: np.ndarray) -> np.ndarray:
    """Squared norm of the gradient fed to ``Psi2``.

    Central differences in the interior; the component normal to an edge is
    dropped, and corners use the zero vector.
    """
    N1, N2 = x.shape[-2:]
    d1 = _shift(x, 1, 0) - _shift(x, -1, 0)
    d2 = _shift(x, 0, 1) - _shift(x, 0, -1)
    d1[..., 0, :] = 0.0
    d1[..., N1 - 1, :] = 0.0
    d2[..., :, 0] = 0.0
    d2[..., :, N2 - 1] = 0.0
    return d1 * d1 + d2 * d2


def noise_coefficient(x: np.ndarray, phi: float, lam: float) -> np.ndarray:
    """Diagonal of the discretized diffusion coefficient at one time instant."""
    if phi == 0.0:
        return np.zeros_like(x)
    if lam > ISOTROPIC_THRESHOLD:
        return np.full_like(x, phi)
    return psi_from_sq(phi, lam, noise_gradient_sq(x))


class SdeInstance:
    """Interface of a forward SDE ``dX = b(t, X) dt + sigma(t, X) dW``.

    Subclasses provide :meth:`drift` and :meth:`noise_diag`; the diffusion
    coefficient is always diagonal in pixel space.
    """

    T: float = 1.0
    dt: float = 1e-2
    additive: bool = True
    sde_class: str = LINEAR_ADDITIVE

    def __init__(self):
        self.divergence_fd_calls = 0

    def check_time(self, t):
        if not (-1e-12 * self.T <= t <= self.T * (1 + 1e-12)):
            raise TimeRangeError(f"time {t} outside [0, {self.T}]")

    def check_state(self, x):
        pass

    def drift(self, t, x):
        raise NotImplementedError

    def noise_diag(self, t, x):
        raise NotImplementedError

    def apply_diffusion(self, t, x, eta):
        x = np.asarray(x, dtype=np.float64)
        eta = np.asarray(eta, dtype=np.float64)
        if eta.shape != x.shape:
            raise DimensionError(f"noise shape {eta.shape} does not match state shape {x.shape}")
        return self.noise_diag(t, x) * eta

    def sigma_sq_diag(self, t, x):
        """Diagonal of ``Sigma = sigma sigma^*`` (white noise)."""
        s = self.noise_diag(t, x)
        return s * s

    def drift_divergence_term(self, t, x):
        """``tr D_x Sigma(t, x)``: the i-th entry is ``d Sigma_ii / d x_i``."""
        x = np.asarray(x, dtype=np.float64)
        self.check_time(t)
        if self.additive:
            return np.zeros_like(x)
        return self._divergence_fd(t, x)

    def _divergence_fd(self, t, x):
        # Sigma_ii reads only the four nearest neighbors of i, so pixels of one
        # residue class mod 3 in both axes can be perturbed together.
        self.divergence_fd_calls += 1
        h = DIVERGENCE_FD_STEP
        n1, n2 = x.shape[-2:]
        r1 = np.arange(n1)[:, None] % 3
        r2 = np.arange(n2)[None, :] % 3
        out = np.zeros_like(x)
        for a in range(3):
            for b in range(3):
                mask = (r1 == a) & (r2 == b)
                if not mask.any():
                    continue
                up = self.sigma_sq_diag(t, x + h * mask)
                dn = self.sigma_sq_diag(t, x - h * mask)
                out = np.where(mask, (up - dn) / (2 * h), out)
        return out

    def linear_structure(self, shape):
        """Return ``(M, weights, phi1, phi2)`` with ``b(t, x) = phi1(t) M x`` per channel.

        ``sigma(t) = phi2(t)`` and ``diag(weights) @ M`` is symmetric.  Raises
        :class:`InstanceError` for nonlinear instances.
        """
        raise InstanceError(f"{type(self).__name__} is not a linear instance")

    @property
    def is_linear(self) -> bool:
        return self.sde_class == LINEAR_ADDITIVE


def _is_zero(tr) -> bool:
    return tr.kind == "constant" and tr.v_min == 0.0


class SpdeInstance(SdeInstance):
    """Forward process built from a :class:`~asgm.schedules.Schedule` on an image grid."""

    def __init__(self, schedule: Schedule, drift_enabled: bool = True, noise_enabled: bool = True):
        super().__init__()
        schedule.require_white_noise()
        self.schedule = schedule
        self.T = schedule.T
        self.dt = schedule.dt
        self.drift_enabled = drift_enabled
        self.noise_enabled = noise_enabled
        self.psi1 = schedule.psi1
        self.psi2 = schedule.psi2
        self.sde_class = classify(schedule)
        self.additive = (not noise_enabled) or self.psi2.isotropic

    @property
    def is_linear(self) -> bool:
        return ((not self.drift_enabled) or self.psi1.isotropic) and self.additive

    def check_state(self, x):
        x = np.asarray(x)
        if self.drift_enabled and not _is_zero(self.schedule.phi1) or not self.additive:
            _check_grid(x)

    def phi1_at(self, t) -> float:
        return self.psi1.phi_at(t) if self.drift_enabled else 0.0

    def phi2_at(self, t) -> float:
        return self.psi2.phi_at(t) if self.noise_enabled else 0.0

    # Grids smaller than 3x3 are accepted while no stencil is needed
    # (zero diffusivity or isotropic noise), e.g. for toy two-pixel problems.

    def drift(self, t, x):
        x = np.asarray(x, dtype=np.float64)
        self.check_time(t)
        phi = self.phi1_at(t)
        if phi == 0.0:
            return np.zeros_like(x)
        _check_grid(x)
        return anisotropic_drift(x, phi, self.psi1.lam_at(t))

    def noise_diag(self, t, x):
        x = np.asarray(x, dtype=np.float64)
        self.check_time(t)
        phi = self.phi2_at(t)
        if phi == 0.0 or self.psi2.isotropic:
            return np.full_like(x, phi)
        _check_grid(x)
        return noise_coefficient(x, phi, self.psi2.lam_at(t))

    def linear_structure(self, shape):
        if not self.is_linear:
            raise InstanceError(f"instance of class {self.sde_class} is not linear")
        h, w = shape[-2:]
        return laplacian_matrix(h, w), laplacian_weights(h, w), self.phi1_at, self.phi2_at

    def __repr__(self):
        return (f"SpdeInstance({self.schedule.name!r}, class={self.sde_class}, "
                f"drift={self.drift_enabled}, noise={self.noise_enabled})")


class ScalarLinearSde(SdeInstance):
    """Ornstein-Uhlenbeck process ``dX = -a X dt + sigma dW`` applied pixelwise.

    Accepts states of any shape, including a single ``1 x 1 x 1`` pixel.
    """

    def __init__(self, a: float, sigma: float, T: float = 1.0, dt: float = 1e-3):
        super().__init__()
        self.a = float(a)
        self.sigma = float(sigma)
        self.T = float(T)
        self.dt = float(dt)

    def drift(self, t, x):
        self.check_time(t)
        return -self.a * np.asarray(x, dtype=np.float64)

    def noise_diag(self, t, x):
        self.check_time(t)
        return np.full_like(np.asarray(x, dtype=np.float64), self.sigma)

    def linear_structure(self, shape):
        n = int(np.prod(shape[-2:]))
        return -np.eye(n), np.ones(n), (lambda t: self.a), (lambda t: self.sigma)


def drift(instance: SdeInstance, t, x):
    return instance.drift(t, x)


def apply_diffusion(instance: SdeInstance, t, x, eta):
    return instance.apply_diffusion(t, x, eta)


def drift_divergence_term(instance: SdeInstance, t, x):
    return instance.drift_divergence_term(t, x)
