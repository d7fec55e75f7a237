"""Brownian increments and the tamed explicit Euler-Maruyama stepper."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, DivergenceError
from .grid import save_tensor

#: abort when any state entry exceeds this magnitude
DIVERGENCE_BOUND = 1e6

# stream purposes, so one (seed, stream_id) pair can feed independent uses
PURPOSE_FORWARD = 0
PURPOSE_PRIOR = 1
PURPOSE_PREDICTOR = 2
PURPOSE_CORRECTOR = 3
PURPOSE_TRAINING = 4


@dataclass
class RngStream:
    """Reproducible normal-variate stream keyed by ``(seed, stream_id, purpose)``.

    ``counter`` counts the draws made so far, so two streams with the same
    key and counter produce the same next draw.  Drawing ``k`` blocks at once
    gives the same numbers as ``k`` single draws.
    """

    seed: int
    stream_id: int = 0
    purpose: int = 0
    counter: int = field(default=0, init=False)
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), int(self.purpose)))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def normal(self, shape):
        self.counter += 1
        return self._gen.standard_normal(shape)

    def normal_block(self, count: int, shape):
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        self.counter += count
        return self._gen.standard_normal((count, *shape))

    def uniform(self, size=None):
        return self._gen.random(size)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def brownian_increment(rng: RngStream, shape, dt: float) -> np.ndarray:
    """I.i.d. ``Normal(0, dt)`` entries; advances ``rng`` by one draw."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return math.sqrt(dt) * rng.normal(shape)


@dataclass(frozen=True)
class StepperConfig:
    """Explicit time stepping on a uniform grid.

    ``gamma`` is the taming exponent; ``tamed=False`` gives classical
    Euler-Maruyama.  ``record_every = 0`` records only the endpoints.
    """

    dt: float = 1e-2
    gamma: float = 1.0
    record_every: int = 0
    tamed: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.record_every < 0:
            raise ValueError("record_every must be nonnegative")

    def n_steps(self, duration: float) -> int:
        n = max(1, int(round(duration / self.dt)))
        if abs(n * self.dt - duration) > 1e-6 * max(duration, self.dt):
            raise ValueError(f"duration {duration} is not a whole number of steps of {self.dt}")
        return n


def taming_factor(b: np.ndarray, dt: float, gamma: float) -> np.ndarray:
    """``1 / (1 + dt * |b|^gamma)`` with the Euclidean norm taken per channel."""
    norm = np.sqrt(np.sum(b * b, axis=(-2, -1), keepdims=True))
    return 1.0 / (1.0 + dt * norm**gamma)


def tamed_drift(b: np.ndarray, dt: float, cfg: StepperConfig) -> np.ndarray:
    if not cfg.tamed:
        return b
    return b * taming_factor(b, dt, cfg.gamma)


def check_finite(x: np.ndarray, t: float):
    m = float(np.max(np.abs(x))) if x.size else 0.0
    if not math.isfinite(m) or m > DIVERGENCE_BOUND:
        raise DivergenceError(t, m)


def tamed_em_step(instance, t, x, dW, cfg: StepperConfig, dt: float | None = None) -> np.ndarray:
    """``x + b / (1 + dt |b|^gamma) dt + sigma(t, x) dW``."""
    dt = cfg.dt if dt is None else dt
    x = np.asarray(x, dtype=np.float64)
    if np.shape(dW) != x.shape:
        raise DimensionError(f"increment shape {np.shape(dW)} != state shape {x.shape}")
    b = instance.drift(t, x)
    out = x + tamed_drift(b, dt, cfg) * dt + instance.apply_diffusion(t, x, dW)
    check_finite(out, t + dt)
    return out


@dataclass
class Trajectory:
    times: list
    states: list
    seed: int | None = None
    stream_id: int | None = None

    def __len__(self):
        return len(self.times)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def time_grid(T: float, cfg: StepperConfig) -> np.ndarray:
    n = cfg.n_steps(T)
    return np.linspace(0.0, T, n + 1)


def simulate_forward(instance, x0, cfg: StepperConfig, rng: RngStream | None = None,
                     t_end: float | None = None) -> Trajectory:
    """Simulate one path from ``x0`` on the uniform grid ``{0, dt, ..., t_end}``.

    ``rng = None`` runs the noise-free flow.  States are recorded every
    ``cfg.record_every`` steps plus the final state.
    """
    x = np.array(x0, dtype=np.float64)
    instance.check_state(x)
    t_end = instance.T if t_end is None else t_end
    n = cfg.n_steps(t_end) if t_end > 0 else 0
    dt = t_end / n if n else cfg.dt
    times, states = [0.0], [x.copy()]
    for k in range(n):
        t = k * dt
        if rng is None:
            dW = np.zeros_like(x)
        else:
            dW = brownian_increment(rng, x.shape, dt)
        x = tamed_em_step(instance, t, x, dW, cfg, dt)
        if k == n - 1 or (cfg.record_every and (k + 1) % cfg.record_every == 0):
            times.append((k + 1) * dt)
            states.append(x.copy())
    return Trajectory(times, states,
                      None if rng is None else rng.seed,
                      None if rng is None else rng.stream_id)


def deterministic_flow(instance, x0, cfg: StepperConfig, t_end: float | None = None,
                       every_step: bool = True) -> np.ndarray:
    """Noise-free tamed flow of ``x0`` (any batch shape), returned at every grid time.

    Output has shape ``(n_steps + 1, *x0.shape)``.
    """
    x = np.array(x0, dtype=np.float64)
    t_end = instance.T if t_end is None else t_end
    n = cfg.n_steps(t_end)
    dt = t_end / n
    out = [x.copy()] if every_step else None
    for k in range(n):
        b = instance.drift(k * dt, x)
        x = x + tamed_drift(b, dt, cfg) * dt
        check_finite(x, (k + 1) * dt)
        if every_step:
            out.append(x.copy())
    return np.stack(out) if every_step else x


def _chunks(n: int, size: int):
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def map_chunks(fn, n: int, chunk: int, threads: int = 1):
    """Apply ``fn(start, stop)`` over fixed-size chunks; results returned as a list in chunk order.

    Chunk boundaries do not depend on ``threads``, so outputs are identical
    for every thread count.
    """
    spans = _chunks(n, chunk)
    if threads <= 1 or len(spans) <= 1:
        parts = [fn(a, b) for a, b in spans]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), spans))
    return parts


def simulate_paths(instance, x0, n_paths: int, cfg: StepperConfig, seed: int,
                   t_end: float | None = None, stream_offset: int = 0,
                   chunk: int = 256, threads: int = 1, batched_x0: bool = False) -> np.ndarray:
    """Endpoints of ``n_paths`` independent paths, path ``i`` driven by stream ``stream_offset + i``.

    ``x0`` is one state shared by all paths, or, with ``batched_x0``, an
    array whose leading axis holds one initial state per path.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t_end = instance.T if t_end is None else t_end
    n = cfg.n_steps(t_end)
    dt = t_end / n
    per_path = batched_x0
    if per_path and x0.shape[0] != n_paths:
        raise DimensionError(f"expected {n_paths} initial states, got {x0.shape[0]}")
    shape = x0.shape[1:] if per_path else x0.shape
    if n_paths == 0:
        return np.zeros((0, *shape))

    def run(a, b):
        noise = np.stack([
            RngStream(seed, stream_offset + i, PURPOSE_FORWARD).normal_block(n, shape) for i in range(a, b)
        ], axis=1) * math.sqrt(dt)
        x = np.array(x0[a:b] if per_path else np.broadcast_to(x0, (b - a, *shape)))
        for k in range(n):
            x = tamed_em_step(instance, k * dt, x, noise[k], cfg, dt)
        return x

    return np.concatenate(map_chunks(run, n_paths, chunk, threads), axis=0)


def write_trajectory(traj: Trajectory, out_dir, prefix: str = "state") -> Path:
    """Write one snapshot per recorded state plus ``index.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# time\tfile\tseed\tstream"]
    for k, (t, x) in enumerate(zip(traj.times, traj.states)):
        name = f"{prefix}_{k:05d}.asgm"
        save_tensor(x, out / name)
        lines.append(f"{t:.10g}\t{name}\t{traj.seed}\t{traj.stream_id}")
    index = out / "index.txt"
    index.write_text("\n".join(lines) + "\n")
    return index
