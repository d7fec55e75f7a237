"""A small fully connected score network and its denoising score-matching trainer.

The network maps ``(t, x)`` to a field of the same shape as ``x``:

    h0 = [flatten(x), sin(w t), cos(w t)]
    h1 = silu(W1 h0 + b1),  h2 = silu(W2 h1 + b2)
    out = (W3 h2 + b3) / sqrt(w(t))          (scale_by_std)

where ``w(t)`` is the accumulated noise variance of the forward process.
Gradients are written out by hand (reverse mode through the three layers).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, TrainingDivergedError, UnsupportedFeatureError
from .grid import load_tensor, save_tensor
from .integrator import PURPOSE_TRAINING, RngStream, StepperConfig
from .score import FlowTable, LinearFlow, accumulated_variance

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


def time_features(t, freqs) -> np.ndarray:
    """Sinusoidal features ``[sin(f t), cos(f t)]`` for each frequency; ``t`` of shape ``(B,)``."""
    arg = np.outer(np.atleast_1d(np.asarray(t, dtype=np.float64)), freqs)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _silu(a):
    sig = 1.0 / (1.0 + np.exp(-a))
    return a * sig, sig


def _silu_grad(a, sig):
    return sig * (1.0 + a * (1.0 - sig))


def read_manifest(path) -> dict:
    """Parse a ``key=value`` manifest, ignoring blank lines and ``#`` comments."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


class ScoreNet:
    """Two-hidden-layer perceptron score model for fields of a fixed shape."""

    kind = "learned"

    def __init__(self, field_shape, width: int = 256, n_freqs: int = 8,
                 freq_range=(1.0, 1000.0), seed: int = 0, std_fn=None):
        self.field_shape = tuple(int(s) for s in field_shape)
        self.width = int(width)
        self.freqs = np.geomspace(freq_range[0], freq_range[1], n_freqs)
        self.std_fn = std_fn
        d_in = self.n_pixels + 2 * n_freqs
        rng = np.random.default_rng(seed)

        def dense(n_in, n_out, scale=1.0):
            return rng.standard_normal((n_in, n_out)) * scale / math.sqrt(n_in)

        self.params = {
            "W1": dense(d_in, width),
            "b1": np.zeros(width),
            "W2": dense(width, width),
            "b2": np.zeros(width),
            "W3": dense(width, self.n_pixels, 0.1),
            "b3": np.zeros(self.n_pixels),
        }

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.field_shape))

    def copy(self) -> "ScoreNet":
        other = object.__new__(ScoreNet)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other._scale_cache = {}
        return other

    def _scale(self, t: np.ndarray) -> np.ndarray:
        if self.std_fn is None:
            return np.ones_like(t)
        cache = self.__dict__.setdefault("_scale_cache", {})
        out = np.empty_like(t)
        for k, tt in enumerate(t):
            key = float(tt)
            if key not in cache:
                cache[key] = 1.0 / math.sqrt(max(float(self.std_fn(key)), 1e-300))
            out[k] = cache[key]
        return out

    def forward(self, t, x, keep=False):
        """Batched evaluation; ``t`` has shape ``(B,)`` and ``x`` ``(B, *field_shape)``."""
        p = self.params
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        h0 = np.concatenate([x.reshape(B, -1), time_features(t, self.freqs)], axis=1)
        a1 = h0 @ p["W1"] + p["b1"]
        h1, s1 = _silu(a1)
        a2 = h1 @ p["W2"] + p["b2"]
        h2, s2 = _silu(a2)
        raw = h2 @ p["W3"] + p["b3"]
        scale = self._scale(t)
        out = raw * scale[:, None]
        if keep:
            return out, (h0, a1, h1, s1, a2, h2, s2, scale)
        return out

    def backward(self, cache, grad_out):
        """Parameter gradients given ``d loss / d out`` of shape ``(B, n_pixels)``."""
        p = self.params
        h0, a1, h1, s1, a2, h2, s2, scale = cache
        g_raw = grad_out * scale[:, None]
        grads = {"W3": h2.T @ g_raw, "b3": g_raw.sum(axis=0)}
        g_a2 = (g_raw @ p["W3"].T) * _silu_grad(a2, s2)
        grads["W2"] = h1.T @ g_a2
        grads["b2"] = g_a2.sum(axis=0)
        g_a1 = (g_a2 @ p["W2"].T) * _silu_grad(a1, s1)
        grads["W1"] = h0.T @ g_a1
        grads["b1"] = g_a1.sum(axis=0)
        return grads

    def __call__(self, t, x):
        """Score at time ``t`` (scalar) for one field or a batch of fields."""
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.field_shape
        xb = x.reshape(-1, *self.field_shape)
        out = self.forward(np.full(len(xb), float(t)), xb)
        return out.reshape(x.shape) if not single else out.reshape(self.field_shape)

    # checkpoints -------------------------------------------------------

    def save(self, directory, extra: dict | None = None) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in PARAM_NAMES:
            save_tensor(self.params[name], d / f"{name}.asgm")
        lines = [
            "model=mlp",
            "field_shape=" + ",".join(str(s) for s in self.field_shape),
            "width=%d" % self.width,
            "layers=%d,%d,%d,%d" % (self.params["W1"].shape[0], self.width, self.width, self.n_pixels),
            "time_frequencies=" + ",".join(repr(float(f)) for f in self.freqs),
            "scale_by_std=%d" % (self.std_fn is not None),
        ]
        for key in sorted(extra or {}):
            lines.append(f"config.{key}={extra[key]}")
        path = d / "manifest.txt"
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, directory, std_fn=None) -> "ScoreNet":
        d = Path(directory)
        meta = read_manifest(d / "manifest.txt")
        net = object.__new__(cls)
        net.field_shape = tuple(int(v) for v in meta["field_shape"].split(","))
        net.width = int(meta["width"])
        net.freqs = np.array([float(v) for v in meta["time_frequencies"].split(",")])
        net.std_fn = std_fn if meta.get("scale_by_std") == "1" else None
        net.params = {}
        for name in PARAM_NAMES:
            a = load_tensor(d / f"{name}.asgm")
            net.params[name] = a.reshape(-1) if name.startswith("b") else a[0]
        return net


class GaussianScoreModel:
    """Score model that is linear in ``x``: ``s(t, x) = -(x - m) / (exp(r) + w(t))``.

    ``m`` and ``r`` are learnable per pixel.  This is the exact score family
    of a diagonal Gaussian pushed through pure additive noise with
    accumulated variance ``w(t)``.
    """

    kind = "learned"

    def __init__(self, field_shape, var_fn, mean: float = 0.0, log_var: float = 0.0):
        self.field_shape = tuple(int(s) for s in field_shape)
        self.var_fn = var_fn
        self.params = {"m": np.full(self.n_pixels, float(mean)), "r": np.full(self.n_pixels, float(log_var))}
        self._var_cache = {}

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.field_shape))

    def copy(self) -> "GaussianScoreModel":
        other = GaussianScoreModel(self.field_shape, self.var_fn)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def _w(self, t):
        out = np.empty(len(t))
        for k, tt in enumerate(t):
            key = float(tt)
            if key not in self._var_cache:
                self._var_cache[key] = float(self.var_fn(key))
            out[k] = self._var_cache[key]
        return out

    def forward(self, t, x, keep=False):
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        d = x.reshape(B, -1) - self.params["m"]
        denom = np.exp(self.params["r"]) + self._w(t)[:, None]
        out = -d / denom
        if keep:
            return out, (d, denom)
        return out

    def backward(self, cache, grad_out):
        d, denom = cache
        ev = np.exp(self.params["r"])
        return {
            "m": np.sum(grad_out / denom, axis=0),
            "r": np.sum(grad_out * d * ev / denom**2, axis=0),
        }

    def __call__(self, t, x):
        x = np.asarray(x, dtype=np.float64)
        xb = x.reshape(-1, self.n_pixels)
        return self.forward(np.full(len(xb), float(t)), xb).reshape(x.shape)

    def save(self, directory, extra: dict | None = None) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("m", "r"):
            save_tensor(self.params[name], d / f"{name}.asgm")
        lines = ["model=gaussian", "field_shape=" + ",".join(str(s) for s in self.field_shape)]
        for key in sorted(extra or {}):
            lines.append(f"config.{key}={extra[key]}")
        path = d / "manifest.txt"
        path.write_text("\n".join(lines) + "\n")
        return path


def load_model(directory, var_fn=None):
    """Load a checkpoint written by either model's ``save``; ``var_fn`` is ``t -> w(t)``."""
    d = Path(directory)
    meta = read_manifest(d / "manifest.txt")
    if meta.get("model") == "gaussian":
        shape = tuple(int(v) for v in meta["field_shape"].split(","))
        model = GaussianScoreModel(shape, var_fn)
        for name in ("m", "r"):
            model.params[name] = load_tensor(d / f"{name}.asgm").reshape(-1)
        return model
    return ScoreNet.load(d, std_fn=var_fn)


@dataclass
class TrainerConfig:
    iterations: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    t_min_frac: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    lr_decay: bool = True
    antithetic: bool = True
    log_every: int = 0
    extra: dict = field(default_factory=dict)


class _TargetSampler:
    """Draws ``(t, x_t, target, weight)`` batches from the conditional Gaussian construction.

    Times are drawn uniformly from the stepper grid points in ``[t_min, T]``
    so conditional means and covariances can be precomputed.
    """

    def __init__(self, instance, data: np.ndarray, cfg: StepperConfig, t_min: float):
        if not instance.additive:
            raise UnsupportedFeatureError("DSM training needs an additive-noise instance")
        self.instance = instance
        self.data = data
        n = cfg.n_steps(instance.T)
        self.times = np.linspace(0.0, instance.T, n + 1)
        self.idx = np.nonzero(self.times >= t_min - 1e-12)[0]
        self.w = np.array([accumulated_variance(instance, t) for t in self.times])
        self.mode = "white"
        shape = data.shape[1:]
        phi1 = getattr(instance, "phi1_at", None) or instance.linear_structure(shape)[2]
        if instance.is_linear and any(phi1(t) != 0 for t in self.times):
            self.mode = "linear"
            flow = LinearFlow(instance, shape)
            self.flow = flow
            self.factors = {}
            for k in self.idx:
                var, U = np.linalg.eigh(flow.covariance(self.times[k]))
                self.factors[k] = (U, np.sqrt(np.maximum(var, 0.0)))
        elif not instance.is_linear:
            self.mode = "flow"
            self.table = FlowTable(instance, data, cfg)

    def sample(self, gen: np.random.Generator, batch: int, antithetic: bool = False):
        J = len(self.data)
        half = (batch + 1) // 2 if antithetic else batch
        j = gen.integers(0, J, half)
        k = self.idx[gen.integers(0, len(self.idx), half)]
        z = gen.standard_normal((half, *self.data.shape[1:]))
        if antithetic:
            # mirrored noise: the z-linear part of the gradient noise cancels as w -> 0
            j, k, z = np.concatenate([j, j])[:batch], np.concatenate([k, k])[:batch], np.concatenate([z, -z])[:batch]
        t = self.times[k]
        w = self.w[k]
        if self.mode == "white":
            mean = self.data[j]
        elif self.mode == "flow":
            mean = self.table.states[k, j]
        else:
            mean = np.stack([self.flow.propagate_mean(self.data[jj], tt) for jj, tt in zip(j, t)])
        if self.mode == "linear":
            x_t = np.empty_like(mean)
            target = np.empty_like(mean)
            for b in range(batch):
                U, sd = self.factors[k[b]]
                zb = z[b].reshape(*z.shape[1:-2], -1)
                x_t[b] = mean[b] + ((zb * sd) @ U.T).reshape(z.shape[1:])
                target[b] = (-(zb / sd) @ U.T).reshape(z.shape[1:])
        else:
            sd = np.sqrt(w).reshape(-1, *([1] * (z.ndim - 1)))
            x_t = mean + sd * z
            target = -z / sd
        return t, x_t, target, w


def dsm_loss_and_grads(model: ScoreNet, t, x_t, target, weight):
    """Mean over the batch of ``weight * |model(t, x_t) - target|^2 / n_pixels`` and its gradients."""
    B = x_t.shape[0]
    out, cache = model.forward(t, x_t, keep=True)
    resid = out - target.reshape(B, -1)
    per = weight * np.sum(resid * resid, axis=1) / model.n_pixels
    loss = float(per.mean())
    grad_out = (2.0 / (B * model.n_pixels)) * weight[:, None] * resid
    return loss, model.backward(cache, grad_out)


def train_dsm(model, dataset, instance, tc: TrainerConfig | None = None,
              cfg: StepperConfig | None = None):
    """Fit ``model`` by weighted denoising score matching; returns ``(model, losses)``.

    The weight is ``w(t)``, so the objective is on unit scale.  The model is
    updated in place.
    """
    tc = tc or TrainerConfig()
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim < 2 or len(data) == 0:
        raise DatasetError("training needs a nonempty dataset")
    if tuple(data.shape[1:]) != model.field_shape:
        raise DatasetError(f"dataset fields {data.shape[1:]} do not match model {model.field_shape}")
    losses = []
    if tc.iterations == 0:
        return model, losses
    cfg = cfg or StepperConfig(dt=instance.dt)
    sampler = _TargetSampler(instance, data, cfg, tc.t_min_frac * instance.T)
    gen = RngStream(tc.seed, 0, PURPOSE_TRAINING).generator
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    for it in range(1, tc.iterations + 1):
        t, x_t, target, w = sampler.sample(gen, tc.batch_size, tc.antithetic)
        loss, grads = dsm_loss_and_grads(model, t, x_t, target, w)
        if not math.isfinite(loss):
            raise TrainingDivergedError(it, loss)
        losses.append(loss)
        lr = tc.lr * (0.5 * (1 + math.cos(math.pi * (it - 1) / tc.iterations)) if tc.lr_decay else 1.0)
        for k, g in grads.items():
            if tc.optimizer == "sgd":
                model.params[k] -= lr * g
            else:
                m[k] = tc.beta1 * m[k] + (1 - tc.beta1) * g
                v[k] = tc.beta2 * v[k] + (1 - tc.beta2) * g * g
                mh = m[k] / (1 - tc.beta1**it)
                vh = v[k] / (1 - tc.beta2**it)
                model.params[k] -= lr * mh / (np.sqrt(vh) + 1e-8)
        if tc.log_every and it % tc.log_every == 0:
            log.info("iteration %d: loss %.5f", it, loss)
    return model, losses


def trainer_config_dict(tc: TrainerConfig) -> dict:
    return asdict(tc)
