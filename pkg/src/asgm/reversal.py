"""Time-reversed dynamics and the predictor-corrector sampler.

With ``s(t, x)`` the score of the forward marginal, the reversed process
``Y_t = X_{T-t}`` has drift

    bbar(t, y) = div Sigma(T-t, y) + Sigma(T-t, y) s(T-t, y) - b(T-t, y),

``Sigma = sigma sigma^T`` (diagonal here), and the same diffusion
coefficient evaluated at ``T - t``.  The predictor is one tamed
Euler-Maruyama step of that equation, the corrector a few unadjusted
Langevin (ULA) steps targeting the marginal at the current time.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, TimeRangeError
from .integrator import (
    PURPOSE_CORRECTOR,
    PURPOSE_PREDICTOR,
    PURPOSE_PRIOR,
    RngStream,
    StepperConfig,
    check_finite,
    map_chunks,
    simulate_paths,
    tamed_drift,
)

log = logging.getLogger(__name__)

DELTA_MIN = 1e-8
DELTA_MAX = 1.0
#: score evaluations never go below this fraction of T (the score degenerates at 0)
SCORE_TIME_FLOOR = 1e-3


@dataclass(frozen=True)
class CorrectorConfig:
    """ULA refinement after each predictor step; ``steps_per_iteration = 0`` disables it."""

    steps_per_iteration: int = 1
    snr: float = 0.16

    def __post_init__(self):
        if self.steps_per_iteration < 0:
            raise ValueError("steps_per_iteration must be nonnegative")
        if not self.snr > 0:
            raise ValueError("snr must be positive")


class BackwardInstance:
    """The reversed process of ``forward`` driven by the score model ``score``.

    ``prior`` is the :class:`~asgm.score.GaussianLaw` used to start
    unconditional sampling.
    """

    def __init__(self, forward, score, cfg: StepperConfig | None = None, prior=None):
        self.forward = forward
        self.score = score
        self.cfg = cfg or StepperConfig(dt=forward.dt)
        self.prior = prior

    @property
    def T(self) -> float:
        return self.forward.T

    def score_at(self, s, y) -> np.ndarray:
        """Score at forward time ``s`` (floored away from 0)."""
        s = max(float(s), SCORE_TIME_FLOOR * self.T)
        out = np.asarray(self.score(s, y), dtype=np.float64)
        if out.shape != np.shape(y):
            raise DimensionError(f"score returned shape {out.shape} for state {np.shape(y)}")
        return out


def _forward_time(bi: BackwardInstance, t) -> float:
    if not (-1e-12 <= t <= bi.T + 1e-12):
        raise TimeRangeError(f"backward time {t} outside [0, {bi.T}]")
    return max(bi.T - t, 0.0)


def backward_drift(bi: BackwardInstance, t, y) -> np.ndarray:
    """Drift of the reversed process at backward time ``t``."""
    if t >= bi.T:
        raise TimeRangeError(f"backward drift needs t < T, got {t}")
    s = _forward_time(bi, t)
    fw = bi.forward
    y = np.asarray(y, dtype=np.float64)
    out = fw.sigma_sq_diag(s, y) * bi.score_at(s, y) - fw.drift(s, y)
    return out + fw.drift_divergence_term(s, y)


def predictor_step(bi: BackwardInstance, t, y, dW, dt: float | None = None) -> np.ndarray:
    """One tamed Euler-Maruyama step of the reversed SDE from backward time ``t``."""
    dt = bi.cfg.dt if dt is None else dt
    y = np.asarray(y, dtype=np.float64)
    if np.shape(dW) != y.shape:
        raise DimensionError(f"increment shape {np.shape(dW)} != state shape {y.shape}")
    s = _forward_time(bi, t)
    b = backward_drift(bi, t, y)
    out = y + tamed_drift(b, dt, bi.cfg) * dt + bi.forward.apply_diffusion(s, y, dW)
    check_finite(out, t + dt)
    return out


def ula_step(score, y, z, delta: float) -> np.ndarray:
    """``y + delta/2 * score + sqrt(delta) * z``."""
    return y + 0.5 * delta * score + math.sqrt(delta) * z


def corrector_delta(score: np.ndarray, z: np.ndarray, snr: float, sample_ndim: int = 3) -> float:
    """Step size ``2 (snr |z| / |s|)^2`` from batch-mean norms, clamped; ``nan`` if ``|s| = 0``.

    Norms are taken per sample over the trailing ``sample_ndim`` axes and
    averaged over the batch.
    """
    axes = tuple(range(score.ndim - sample_ndim, score.ndim))
    sn = float(np.mean(np.sqrt(np.sum(score * score, axis=axes))))
    zn = float(np.mean(np.sqrt(np.sum(z * z, axis=axes))))
    if not sn > 0:
        return math.nan
    return float(np.clip(2.0 * (snr * zn / sn) ** 2, DELTA_MIN, DELTA_MAX))


def corrector_step(bi: BackwardInstance, t, y, noises, cc: CorrectorConfig, sample_ndim: int = 3) -> np.ndarray:
    """``cc.steps_per_iteration`` ULA updates at backward time ``t``.

    ``noises`` yields one standard normal array shaped like ``y`` per update
    (an :class:`RngStream`, a list of arrays, or a callable).  An update is
    skipped when the score vanishes on the whole batch.
    """
    y = np.asarray(y, dtype=np.float64)
    s_time = _forward_time(bi, t)
    for k in range(cc.steps_per_iteration):
        z = _next_noise(noises, k, y.shape)
        s = bi.score_at(s_time, y)
        delta = corrector_delta(s, z, cc.snr, min(sample_ndim, y.ndim))
        if math.isnan(delta):
            log.info("corrector update skipped: zero score norm at t=%g", t)
            continue
        y = ula_step(s, y, z, delta)
        check_finite(y, t)
    return y


def _next_noise(noises, k, shape):
    if isinstance(noises, RngStream):
        return noises.normal(shape)
    if callable(noises):
        return np.asarray(noises(shape)).reshape(shape)
    return np.asarray(noises[k])


class _StreamBatch:
    """One generator per sample, pre-drawn in blocks of steps.

    Successive standard normal draws from one generator do not depend on how
    they are grouped, so the block length (chosen from a memory budget) and
    the chunking of samples never change the numbers.
    """

    def __init__(self, seed, ids, purpose, shape, steps: int, budget: int = 1 << 22):
        self.streams = [RngStream(seed, int(i), purpose) for i in ids]
        self.shape = tuple(shape)
        per_step = max(1, len(self.streams) * int(np.prod(self.shape)))
        self.block = max(1, min(steps, budget // per_step))
        self._buf = None
        self._pos = 0

    def __call__(self, shape=None):
        if self._buf is None or self._pos == len(self._buf):
            self._buf = np.stack([r.normal_block(self.block, self.shape) for r in self.streams], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


def run_backward(bi: BackwardInstance, y, t_start: float, seed: int, cc: CorrectorConfig | None = None,
                 threads: int = 1, chunk: int = 64, stream_offset: int = 0) -> np.ndarray:
    """Integrate the reversed process from backward time ``t_start`` to ``T`` for each state in ``y``.

    Predictor steps run at backward times ``t_start, ..., T - dt``; a
    corrector follows every predictor step, the last one at forward time 0.
    """
    cc = cc or CorrectorConfig()
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        return y.copy()
    span = bi.T - t_start
    n = bi.cfg.n_steps(span) if span > 1e-12 else 0
    dt = span / n if n else bi.cfg.dt
    shape = y.shape[1:]

    def run(a, b):
        ids = range(stream_offset + a, stream_offset + b)
        pred = _StreamBatch(seed, ids, PURPOSE_PREDICTOR, shape, n)
        corr = _StreamBatch(seed, ids, PURPOSE_CORRECTOR, shape, n * cc.steps_per_iteration)
        x = y[a:b].copy()
        for k in range(n):
            x = predictor_step(bi, t_start + k * dt, x, math.sqrt(dt) * pred(), dt)
            if cc.steps_per_iteration:
                x = corrector_step(bi, t_start + (k + 1) * dt, x, corr, cc, len(shape))
        return x

    return np.concatenate(map_chunks(run, len(y), chunk, threads), axis=0)


def sample(bi: BackwardInstance, n: int, seed: int, cc: CorrectorConfig | None = None,
           threads: int = 1, chunk: int = 64, stream_offset: int = 0) -> np.ndarray:
    """Draw ``n`` fields: prior draw at backward time 0, then predictor and corrector steps to ``T``.

    Sample ``i`` uses stream ``stream_offset + i`` for its prior, predictor
    and corrector noise.  Corrector step sizes are set per chunk of samples,
    so output depends on ``chunk`` but never on ``threads``.
    """
    cc = cc or CorrectorConfig()
    if bi.prior is None:
        raise ValueError("sampling needs a prior law")
    shape = bi.prior.shape
    if n == 0:
        return np.zeros((0, *shape))

    z = np.stack([RngStream(seed, stream_offset + i, PURPOSE_PRIOR).normal(shape) for i in range(n)])
    y = bi.prior.sample(z)
    return run_backward(bi, y, 0.0, seed, cc, threads, chunk, stream_offset)


def sdedit(bi: BackwardInstance, guide, t0: float, n: int, seed: int, cc: CorrectorConfig | None = None,
           threads: int = 1, chunk: int = 64, stream_offset: int = 0) -> np.ndarray:
    """Noise ``guide`` with the forward process up to ``t0`` and denoise back to time 0.

    Each output gets its own forward noise, so the ``n`` results differ.
    """
    cc = cc or CorrectorConfig()
    if not 0 < t0 <= bi.T + 1e-12:
        raise TimeRangeError(f"t0 must lie in (0, {bi.T}], got {t0}")
    guide = np.asarray(guide, dtype=np.float64)
    if n == 0:
        return np.zeros((0, *guide.shape))
    noised = simulate_paths(bi.forward, guide, n, bi.cfg, seed, t_end=t0, stream_offset=stream_offset,
                            chunk=chunk, threads=threads)
    return run_backward(bi, noised, bi.T - t0, seed, cc, threads, chunk, stream_offset)
