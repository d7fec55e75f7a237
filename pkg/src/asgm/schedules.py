"""Time schedules for diffusivity/intensity and anisotropy coefficients."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import TimeRangeError, UnknownPresetError, UnsupportedFeatureError

INF = math.inf

#: anisotropy values above this are treated as exactly isotropic
ISOTROPIC_THRESHOLD = 1e12

TRANSITION_KINDS = ("constant", "geometric", "power", "exponential-blowup")

_T_SLACK = 1e-12


@dataclass(frozen=True)
class Transition:
    """A scalar function of time on ``[0, T]``.

    ``constant``            ``v_min``
    ``geometric``           ``v_min * (v_max / v_min) ** (t / T)``
    ``power``               ``v_min + (v_max - v_min) * (t / T) ** exponent``
    ``exponential-blowup``  ``v_min * (exp(r T) - 1) / (exp(r (T - t)) - 1)``, with ``r = exponent``
    """

    kind: str
    v_min: float
    v_max: float = INF
    exponent: float = 1.0
    T: float = 2.0

    def __post_init__(self):
        if self.kind not in TRANSITION_KINDS:
            raise ValueError(f"unknown transition kind {self.kind!r}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.kind == "constant":
            if self.v_min < 0:
                raise ValueError("constant transition must be nonnegative")
        elif self.kind == "geometric":
            if not 0 < self.v_min < self.v_max < INF:
                raise ValueError("geometric transition needs 0 < v_min < v_max < inf")
        elif self.kind == "power":
            if not (0 <= self.v_min and self.v_max < INF and self.exponent > 0):
                raise ValueError("power transition needs v_min >= 0, finite v_max, exponent > 0")
        else:
            if not (self.v_min > 0 and self.exponent > 0):
                raise ValueError("exponential-blowup needs v_min > 0 and rate > 0")

    def __call__(self, t):
        return eval_transition(self, t)

    def with_T(self, T: float) -> "Transition":
        return replace(self, T=T)


def constant(value: float, T: float = 2.0) -> Transition:
    return Transition("constant", float(value), T=T)


def geometric(v_min: float, v_max: float, T: float = 2.0) -> Transition:
    return Transition("geometric", float(v_min), float(v_max), T=T)


def power(v_min: float, v_max: float, k: float, T: float = 2.0) -> Transition:
    return Transition("power", float(v_min), float(v_max), float(k), T=T)


def exponential_blowup(v_min: float, rate: float, T: float = 2.0) -> Transition:
    return Transition("exponential-blowup", float(v_min), INF, float(rate), T=T)


def eval_transition(tr: Transition, t):
    """Evaluate ``tr`` at time(s) ``t``; scalar in, float out."""
    t_arr = np.asarray(t, dtype=np.float64)
    T = tr.T
    if np.any(t_arr < -_T_SLACK * T) or np.any(t_arr > T * (1 + _T_SLACK)):
        raise TimeRangeError(f"time {t} outside [0, {T}]")
    s = np.clip(t_arr, 0.0, T)
    if tr.kind == "constant":
        out = np.full_like(s, tr.v_min)
    elif tr.kind == "geometric":
        out = tr.v_min * (tr.v_max / tr.v_min) ** (s / T)
    elif tr.kind == "power":
        out = tr.v_min + (tr.v_max - tr.v_min) * (s / T) ** tr.exponent
    else:
        r = tr.exponent
        denom = np.expm1(r * (T - s))
        with np.errstate(divide="ignore"):
            out = np.where(denom > 0, tr.v_min * math.expm1(r * T) / np.where(denom > 0, denom, 1.0), INF)
    return float(out) if out.ndim == 0 else out


def _value(tr, t) -> float:
    """Evaluate a transition or a bare number (``inf`` for isotropic)."""
    if tr is None:
        return INF
    if isinstance(tr, Transition):
        return eval_transition(tr, t)
    return float(tr)


def psi_from_sq(phi: float, lam: float, p_sq):
    """``phi / sqrt(1 + |p|^2 / lam^2)`` given the squared gradient norm."""
    if phi == 0.0:
        return np.zeros_like(np.asarray(p_sq, dtype=np.float64))
    if lam > ISOTROPIC_THRESHOLD:
        return np.full_like(np.asarray(p_sq, dtype=np.float64), phi)
    return phi / np.sqrt(1.0 + np.asarray(p_sq) / (lam * lam))


@dataclass(frozen=True)
class AnisotropyCoefficient:
    """``Psi(t, p) = phi(t) / sqrt(1 + |p / lambda(t)|^2)``.

    ``lam`` may be a :class:`Transition`, a number, or ``inf``/``None`` for the
    isotropic case, in which ``Psi(t, p) = phi(t)`` for every ``p``.
    """

    phi: Transition
    lam: object = INF

    @property
    def isotropic(self) -> bool:
        return _is_isotropic(self.lam)

    def phi_at(self, t) -> float:
        return _value(self.phi, t)

    def lam_at(self, t) -> float:
        return _value(self.lam, t)

    def __call__(self, t, p):
        return eval_psi(self, t, p)


def eval_psi(coef: AnisotropyCoefficient, t, p):
    """Evaluate ``Psi`` at time ``t`` for gradient(s) ``p`` with trailing axis of length 2."""
    p = np.asarray(p, dtype=np.float64)
    p_sq = np.sum(p * p, axis=-1)
    out = psi_from_sq(coef.phi_at(t), coef.lam_at(t), p_sq)
    return float(out) if np.ndim(out) == 0 else out


def _is_isotropic(lam) -> bool:
    if lam is None:
        return True
    if isinstance(lam, Transition):
        return False
    return float(lam) > ISOTROPIC_THRESHOLD


@dataclass(frozen=True)
class Schedule:
    """Coefficient bundle defining one forward process.

    ``lambda1``/``lambda2`` are a :class:`Transition`, a positive number, or
    ``inf`` for the isotropic case.  ``epsilon`` is the noise correlation
    length; only ``0`` (white noise) is supported by the dynamics.
    """

    phi1: Transition
    phi2: Transition
    lambda1: object = INF
    lambda2: object = INF
    T: float = 2.0
    epsilon: float = 0.0
    dt: float = 1e-2
    name: str = "custom"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.epsilon < 0:
            raise ValueError("correlation length must be nonnegative")
        for tr in (self.phi1, self.phi2, self.lambda1, self.lambda2):
            if isinstance(tr, Transition) and abs(tr.T - self.T) > 1e-12 * self.T:
                raise ValueError("all transitions must share the schedule's terminal time")

    @property
    def psi1(self) -> AnisotropyCoefficient:
        return AnisotropyCoefficient(self.phi1, self.lambda1)

    @property
    def psi2(self) -> AnisotropyCoefficient:
        return AnisotropyCoefficient(self.phi2, self.lambda2)

    def require_white_noise(self):
        if self.epsilon != 0:
            raise UnsupportedFeatureError("correlated noise (epsilon > 0) is not implemented")


PRESETS = ("ve-noise", "aniso-heat", "iso-heat")


def preset_schedule(name: str, image_size: int = 32, T: float = 2.0, dt: float = 1e-2) -> Schedule:
    """Return one of the named forward processes.

    ``image_size`` is ``max(height, width)`` and sets the top of the
    diffusivity ramp, ``phi1_max = 2 * image_size``.
    """
    phi1_max = 2.0 * image_size
    if name == "ve-noise":
        return Schedule(constant(0.0, T), geometric(0.01, 2.0, T), INF, INF, T, 0.0, dt, name)
    if name == "aniso-heat":
        return Schedule(
            geometric(0.5, phi1_max, T),
            geometric(0.01, 2.0, T),
            exponential_blowup(0.025, 0.5, T),
            INF,
            T,
            0.0,
            dt,
            name,
        )
    if name == "iso-heat":
        return Schedule(geometric(0.5, phi1_max, T), geometric(0.01, 0.5, T), INF, INF, T, 0.0, dt, name)
    raise UnknownPresetError(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}")
