"""Strict ``key=value`` run configuration.

One setting per line, ``#`` starts a comment, keys are dotted
(``phi1.kind = geometric``).  Every key must appear in :data:`SCHEMA`;
anything else is a :class:`~asgm.errors.ConfigError` raised before any
computation starts.
"""
from __future__ import annotations

import math
from pathlib import Path

from ..errors import ConfigError, UnknownPresetError
from ..schedules import (
    INF,
    PRESETS,
    Schedule,
    Transition,
    constant,
    exponential_blowup,
    geometric,
    power,
    preset_schedule,
)


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise ValueError("nan is not allowed")
    return v


def _opt_float(text: str) -> float:
    """Like :func:`_float`, but an empty value means unset (``nan``)."""
    return math.nan if not text.strip() else _float(text)


def _uint(text: str) -> int:
    v = int(text)
    if v < 0:
        raise ValueError("must be nonnegative")
    return v


def _choice(*options):
    def conv(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return conv


_TRANSITION_KEYS = {}
for _name in ("phi1", "phi2", "lambda1", "lambda2"):
    _TRANSITION_KEYS.update({
        f"{_name}.kind": (_choice("", "inf", "constant", "geometric", "power", "exponential-blowup"), ""),
        f"{_name}.min": (_opt_float, math.nan),
        f"{_name}.max": (_opt_float, math.nan),
        f"{_name}.exponent": (_float, 1.0),
    })

#: key -> (converter, default)
SCHEMA = {
    "preset": (_choice(*PRESETS), "iso-heat"),
    "T": (_float, 2.0),
    "dt": (_float, 1e-2),
    "gamma": (_float, 1.0),
    "tamed": (_bool, True),
    "backward.tamed": (_bool, True),
    "seed": (_uint, 0),
    "threads": (_uint, 1),
    "chunk": (_uint, 64),
    "image_size": (_uint, 0),
    "record_every": (_uint, 0),
    **_TRANSITION_KEYS,
    "data.source": (_choice("shapes", "gaussian", "dir"), "shapes"),
    "data.dir": (str, ""),
    "data.n": (_uint, 200),
    "data.size": (_uint, 32),
    "data.channels": (_uint, 1),
    "data.seed": (_uint, 0),
    "data.var": (_float, 0.1),
    "reference.dir": (str, ""),
    "reference.n": (_uint, 0),
    "score.source": (_choice("checkpoint", "analytic"), "analytic"),
    "checkpoint": (str, ""),
    "train.model": (_choice("mlp", "gaussian"), "mlp"),
    "train.iterations": (_uint, 2000),
    "train.batch_size": (_uint, 128),
    "train.lr": (_float, 1e-3),
    "train.width": (_uint, 256),
    "train.optimizer": (_choice("adam", "sgd"), "adam"),
    "train.scale_by_std": (_bool, True),
    "train.antithetic": (_bool, True),
    "n_samples": (_uint, 16),
    "corrector.steps": (_uint, 1),
    "corrector.snr": (_float, 0.16),
    "prior.file": (str, ""),
    "prior.n_sims": (_uint, 256),
    "prior.initial_var": (_float, -1.0),
    "forward.input": (str, ""),
    "forward.size": (_uint, 64),
    "forward.rows": (str, "all"),
    "forward.lambda_drift": (_float, 0.025),
    "forward.lambda_noise": (_float, 0.1),
    "forward.rate": (_float, 0.5),
    "sdedit.t0": (_float, 0.0),
    "sdedit.k": (_uint, 8),
    "sdedit.kmeans": (_bool, True),
    "sdedit.guide": (str, ""),
    "sdedit.n_guides": (_uint, 4),
    "sdedit.n_per_guide": (_uint, 1),
    "sdedit.compare": (str, ""),
}


class RunConfig(dict):
    """Resolved settings: every schema key present, values converted."""

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key) from None

    def echo(self) -> list[str]:
        """``key=value`` lines in schema order (``threads`` left out: it never changes results)."""
        return [f"{k}={_fmt(self[k])}" for k in SCHEMA if k != "threads"]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def parse_lines(lines, source: str = "<config>") -> dict:
    """Raw ``key -> text`` pairs; unknown or repeated keys and malformed lines are errors."""
    out = {}
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{no}: key {key!r} given twice")
        out[key] = value.strip()
    return out


def build_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Convert raw text values (plus ``overrides``, which win) into a :class:`RunConfig`."""
    merged = dict(raw)
    for k, v in (overrides or {}).items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown key {k!r}")
        merged[k] = v
    cfg = RunConfig({k: default for k, (_, default) in SCHEMA.items()})
    for k, text in merged.items():
        conv = SCHEMA[k][0]
        try:
            cfg[k] = conv(text) if isinstance(text, str) else conv(str(text))
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {exc}") from None
    validate(cfg)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        raw = parse_lines(text.splitlines(), str(p))
    return build_config(raw, overrides)


def validate(cfg: RunConfig):
    if not cfg.T > 0 or not cfg.dt > 0:
        raise ConfigError("T and dt must be positive")
    n = round(cfg.T / cfg.dt)
    if abs(n * cfg.dt - cfg.T) > 1e-9 * cfg.T:
        raise ConfigError(f"T={cfg.T} is not a whole number of steps dt={cfg.dt}")
    if cfg["corrector.snr"] <= 0:
        raise ConfigError("corrector.snr must be positive")
    if cfg.chunk == 0:
        raise ConfigError("chunk must be positive")
    if cfg["data.channels"] not in (1, 3):
        raise ConfigError("data.channels must be 1 or 3")
    t0 = cfg["sdedit.t0"]
    if t0 < 0 or t0 > cfg.T:
        raise ConfigError(f"sdedit.t0 must lie in (0, T]; got {t0}")
    schedule_from_config(cfg, max(cfg.image_size, 1))


def _transition(cfg, name, T, fallback):
    kind = cfg[f"{name}.kind"]
    if not kind:
        return fallback
    if kind == "inf":
        if name.startswith("phi"):
            raise ConfigError(f"{name} cannot be infinite")
        return INF
    lo, hi, ex = cfg[f"{name}.min"], cfg[f"{name}.max"], cfg[f"{name}.exponent"]
    try:
        if kind == "constant":
            return constant(lo, T)
        if kind == "geometric":
            return geometric(lo, hi, T)
        if kind == "power":
            return power(lo, hi, ex, T)
        return exponential_blowup(lo, ex, T)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def schedule_from_config(cfg: RunConfig, image_size: int) -> Schedule:
    """Preset schedule with any ``phi*``/``lambda*`` overrides applied."""
    try:
        base = preset_schedule(cfg.preset, image_size=cfg.image_size or image_size, T=cfg.T, dt=cfg.dt)
    except UnknownPresetError as exc:
        raise ConfigError(str(exc)) from None
    parts = {}
    for name in ("phi1", "phi2", "lambda1", "lambda2"):
        parts[name] = _transition(cfg, name, cfg.T, getattr(base, name))
    custom = any(cfg[f"{n}.kind"] for n in parts)
    return Schedule(parts["phi1"], parts["phi2"], parts["lambda1"], parts["lambda2"], cfg.T, 0.0, cfg.dt,
                    base.name + ("+custom" if custom else ""))


def transition_text(tr) -> str:
    if not isinstance(tr, Transition):
        return "inf" if math.isinf(float(tr)) else repr(float(tr))
    return f"{tr.kind}(min={tr.v_min!r}, max={tr.v_max!r}, exponent={tr.exponent!r})"
