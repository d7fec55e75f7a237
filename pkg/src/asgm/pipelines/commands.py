"""The five end-to-end workflows behind the command-line interface.

Every command takes a resolved :class:`RunConfig` and an output directory,
writes its artifacts plus a ``manifest.txt`` (config echo, seeds, version),
and returns the paths it wrote.
"""
from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np

from .. import __version__
from ..dynamics import SpdeInstance
from ..errors import ConfigError, DatasetError, DivergenceError
from ..evaluation import edge_correlation, mmd_rbf, moments, montage, write_metrics
from ..grid import load_tensor, read_image, save_tensor, write_image
from ..integrator import PURPOSE_FORWARD, RngStream, StepperConfig, simulate_forward, write_trajectory
from ..reversal import BackwardInstance, CorrectorConfig, sample, sdedit
from ..schedules import Schedule, constant, exponential_blowup, geometric
from ..score import GaussianLaw, LinearGaussianScore, MixtureScore, accumulated_variance, prior_law
from ..scorenet import GaussianScoreModel, ScoreNet, TrainerConfig, load_model, train_dsm
from .config import RunConfig, schedule_from_config, transition_text
from .datasets import (
    checkerboard_disk,
    gaussian_dataset,
    gaussian_mean_field,
    kmeans_guide,
    load_image_dir,
    shapes_dataset,
)

log = logging.getLogger(__name__)

#: montage rows: (label, drift, drift anisotropy, noise, noise anisotropy);
#: anisotropy is "iso", "aniso" (constant lambda) or "transition" (blow-up to isotropy)
FORWARD_ROWS = (
    ("no-drift+iso-noise", False, "iso", True, "iso"),
    ("no-drift+aniso-noise", False, "iso", True, "aniso"),
    ("iso-drift+no-noise", True, "iso", False, "iso"),
    ("aniso-drift+no-noise", True, "aniso", False, "iso"),
    ("aniso-drift+aniso-noise", True, "aniso", True, "aniso"),
    ("no-drift+aniso-noise+transition", False, "iso", True, "transition"),
    ("aniso-drift+no-noise+transition", True, "transition", False, "iso"),
    ("aniso-drift+aniso-noise+transition", True, "transition", True, "transition"),
)


# ---------------------------------------------------------------------------
# shared helpers


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> Path:
    lines = [f"command={command}", f"version={__version__}"]
    lines += [f"extra.{k}={v}" for k, v in (extra or {}).items()]
    lines += cfg.echo()
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def stepper(cfg: RunConfig, backward: bool = False) -> StepperConfig:
    tamed = cfg["backward.tamed"] if backward else cfg.tamed
    return StepperConfig(dt=cfg.dt, gamma=cfg.gamma, tamed=tamed, record_every=cfg.record_every)


def load_dataset(cfg: RunConfig, seed_offset: int = 0, n: int | None = None) -> np.ndarray:
    src = cfg["data.source"]
    n = cfg["data.n"] if n is None else n
    seed = cfg["data.seed"] + seed_offset
    if src == "dir":
        if not cfg["data.dir"]:
            raise ConfigError("data.source=dir needs data.dir")
        return load_image_dir(cfg["data.dir"])
    if n == 0:
        raise DatasetError("data.n is 0: empty dataset")
    if src == "gaussian":
        return gaussian_dataset(n, cfg["data.size"], cfg["data.channels"], cfg["data.var"], seed)
    return shapes_dataset(n, cfg["data.size"], cfg["data.channels"], seed)


def reference_set(cfg: RunConfig):
    if cfg["reference.dir"]:
        return load_image_dir(cfg["reference.dir"])
    if cfg["reference.n"] and cfg["data.source"] != "dir":
        return load_dataset(cfg, seed_offset=1_000_003, n=cfg["reference.n"])
    return None


def make_instance(cfg: RunConfig, field_shape) -> SpdeInstance:
    size = max(field_shape[-2:])
    return SpdeInstance(schedule_from_config(cfg, size))


def _variance_fn(instance):
    cache = {}

    def w(t):
        key = float(t)
        if key not in cache:
            cache[key] = accumulated_variance(instance, key)
        return cache[key]

    return w


def build_score(cfg: RunConfig, instance, data: np.ndarray):
    """Score model named by ``score.source``.

    ``analytic`` is the exact Gaussian score when the data are Gaussian and
    the instance is linear, otherwise the score of the empirical data
    distribution pushed through the forward process.
    """
    if cfg["score.source"] == "checkpoint":
        if not cfg.checkpoint:
            raise ConfigError("score.source=checkpoint needs checkpoint=PATH")
        ck = Path(cfg.checkpoint)
        if not (ck / "manifest.txt").exists():
            raise FileNotFoundError(f"no checkpoint manifest in {ck}")
        return load_model(ck, _variance_fn(instance))
    if cfg["data.source"] == "gaussian" and instance.is_linear:
        shape = data.shape[1:]
        return LinearGaussianScore(instance, gaussian_mean_field(shape[-1], shape[0]), cfg["data.var"])
    return MixtureScore(instance, data, stepper(cfg))


def _initial_var(cfg: RunConfig) -> float:
    v = cfg["prior.initial_var"]
    if v >= 0:
        return v
    return cfg["data.var"] if cfg["data.source"] == "gaussian" else 0.0


def save_law(law: GaussianLaw, out: Path, meta: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(law.mean, out / "mean.asgm")
    save_tensor(law.basis, out / "basis.asgm")
    save_tensor(law.variances, out / "variances.asgm")
    lines = [f"{k}={v}" for k, v in meta.items()]
    (out / "prior.txt").write_text("\n".join(lines) + "\n")
    return out


def load_law(directory) -> GaussianLaw:
    d = Path(directory)
    mean = load_tensor(d / "mean.asgm").astype(np.float64)
    basis = load_tensor(d / "basis.asgm")[0].astype(np.float64)
    var = load_tensor(d / "variances.asgm").reshape(-1).astype(np.float64)
    # snapshots are single precision; restore exact orthonormality
    q, r = np.linalg.qr(basis)
    q *= np.sign(np.diag(r))
    return GaussianLaw(mean, q, np.maximum(var, 0.0))


def _prior(cfg: RunConfig, instance, data) -> GaussianLaw:
    if cfg["prior.file"]:
        return load_law(cfg["prior.file"])
    return prior_law(instance, data, stepper(cfg), cfg.seed, cfg["prior.n_sims"], _initial_var(cfg))


def _image_name(field, stem: str) -> str:
    return f"{stem}.{'pgm' if field.shape[0] == 1 else 'ppm'}"


# ---------------------------------------------------------------------------
# forward


def forward_schedule(cfg: RunConfig, row, size: int) -> tuple[Schedule, bool, bool]:
    _, drift_on, drift_kind, noise_on, noise_kind = row
    T = cfg.T
    base = schedule_from_config(cfg, size)
    phi1 = base.phi1 if cfg["phi1.kind"] else geometric(0.5, 2.0 * size, T)
    phi2 = base.phi2 if cfg["phi2.kind"] else geometric(0.01, 2.0, T)

    def lam(kind, value):
        if kind == "iso":
            return math.inf
        if kind == "aniso":
            return constant(value, T)
        return exponential_blowup(value, cfg["forward.rate"], T)

    sch = Schedule(phi1 if drift_on else constant(0.0, T), phi2 if noise_on else constant(0.0, T),
                   lam(drift_kind, cfg["forward.lambda_drift"]), lam(noise_kind, cfg["forward.lambda_noise"]),
                   T, 0.0, cfg.dt, row[0])
    return sch, drift_on, noise_on


def cmd_forward(cfg: RunConfig, out) -> list[Path]:
    """Montage of the forward process variants at ``t = 0, T/4, T/2, 3T/4, T``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg["forward.input"]:
        x0 = read_image(cfg["forward.input"])
    else:
        x0 = checkerboard_disk(cfg["forward.size"])
    size = max(x0.shape[-2:])
    names = [r[0] for r in FORWARD_ROWS]
    wanted = names if cfg["forward.rows"] == "all" else [s.strip() for s in cfg["forward.rows"].split(",")]
    for w in wanted:
        if w not in names:
            raise ConfigError(f"unknown forward row {w!r}")
    n = StepperConfig(dt=cfg.dt).n_steps(cfg.T)
    if n % 4:
        raise ConfigError("forward montage needs T/dt divisible by 4")
    step_cfg = StepperConfig(dt=cfg.dt, gamma=cfg.gamma, tamed=cfg.tamed, record_every=n // 4)
    rows, labels, written = [], [], []
    for idx, row in enumerate(FORWARD_ROWS):
        if row[0] not in wanted:
            continue
        sch, _, _ = forward_schedule(cfg, row, size)
        inst = SpdeInstance(sch)
        rng = RngStream(cfg.seed, idx, PURPOSE_FORWARD)
        try:
            traj = simulate_forward(inst, x0, step_cfg, rng)
        except DivergenceError as exc:
            raise DivergenceError(exc.t, exc.max_abs, f"forward row {row[0]}") from exc
        written.append(write_trajectory(traj, out / "rows" / row[0]))
        rows.append(traj.states)
        labels.append(f"{row[0]}\tphi1={transition_text(sch.phi1)}\tphi2={transition_text(sch.phi2)}"
                      f"\tlambda1={transition_text(sch.lambda1)}\tlambda2={transition_text(sch.lambda2)}")
        log.info("forward row %s done", row[0])
    path = montage(rows, out / _image_name(x0, "montage"), labels)
    times = ", ".join(f"{k * cfg.T / 4:g}" for k in range(5))
    written += [path, path.with_suffix(".txt"),
                write_manifest(out, "forward", cfg, {"times": times, "rows": ",".join(wanted)})]
    return written


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: RunConfig, out) -> list[Path]:
    out = Path(out)
    data = load_dataset(cfg)
    out.mkdir(parents=True, exist_ok=True)
    inst = make_instance(cfg, data.shape[1:])
    shape = data.shape[1:]
    var_fn = _variance_fn(inst)
    if cfg["train.model"] == "gaussian":
        model = GaussianScoreModel(shape, var_fn)
    else:
        model = ScoreNet(shape, width=cfg["train.width"], seed=cfg.seed,
                         std_fn=var_fn if cfg["train.scale_by_std"] else None)
    tc = TrainerConfig(iterations=cfg["train.iterations"], batch_size=cfg["train.batch_size"],
                       lr=cfg["train.lr"], optimizer=cfg["train.optimizer"], seed=cfg.seed,
                       antithetic=cfg["train.antithetic"])
    model, losses = train_dsm(model, data, inst, tc, stepper(cfg))
    ck = out / "checkpoint"
    model.save(ck, {k: v for k, v in cfg.items() if k.startswith("train.")} | {"preset": cfg.preset})
    loss_path = out / "losses.csv"
    with loss_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, f"{v:.10g}"])
    extra = {"n_images": len(data)}
    if losses:
        k = max(1, len(losses) // 10)
        extra["loss_first_window"] = f"{np.mean(losses[:k]):.6g}"
        extra["loss_last_window"] = f"{np.mean(losses[-k:]):.6g}"
    return [ck, loss_path, write_manifest(out, "train", cfg, extra)]


# ---------------------------------------------------------------------------
# prior


def cmd_calibrate_prior(cfg: RunConfig, out) -> list[Path]:
    out = Path(out)
    data = load_dataset(cfg)
    out.mkdir(parents=True, exist_ok=True)
    inst = make_instance(cfg, data.shape[1:])
    law = prior_law(inst, data, stepper(cfg), cfg.seed, cfg["prior.n_sims"], _initial_var(cfg))
    method = "closed-form" if inst.is_linear else f"simulated({cfg['prior.n_sims']} paths)"
    d = save_law(law, out / "prior", {"method": method, "T": repr(cfg.T), "preset": cfg.preset,
                                      "seed": cfg.seed, "n_calibration": len(data)})
    return [d, write_manifest(out, "calibrate-prior", cfg, {"method": method})]


# ---------------------------------------------------------------------------
# sample


def _write_fields(fields, directory: Path, stem: str) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, x in enumerate(fields):
        img = directory / _image_name(x, f"{stem}_{i:04d}")
        if x.shape[0] in (1, 3):
            write_image(x, img)
        save_tensor(x, img.with_suffix(".asgm"))
        paths.append(img)
    return paths


def cmd_sample(cfg: RunConfig, out) -> list[Path]:
    out = Path(out)
    data = load_dataset(cfg)
    out.mkdir(parents=True, exist_ok=True)
    inst = make_instance(cfg, data.shape[1:])
    score = build_score(cfg, inst, data)
    bi = BackwardInstance(inst, score, stepper(cfg, backward=True), _prior(cfg, inst, data))
    cc = CorrectorConfig(cfg["corrector.steps"], cfg["corrector.snr"])
    xs = sample(bi, cfg.n_samples, cfg.seed, cc, threads=cfg.threads, chunk=cfg.chunk)
    written = _write_fields(xs, out / "samples", "sample")
    rows = []
    if len(xs):
        rep = moments(xs, k=8)
        rows.append(("mean_abs_pixel_mean", float(np.abs(rep.mean).mean()), len(xs), cfg.seed))
        for i, ev in enumerate(rep.top_eigenvalues):
            rows.append((f"cov_eig_{i}", float(ev), len(xs), cfg.seed))
    ref = reference_set(cfg)
    if ref is not None and len(xs) >= 2:
        rows.append(("mmd2_rbf_vs_reference", mmd_rbf(xs, ref), len(xs), cfg.seed))
    written.append(write_metrics(rows, out / "metrics.csv"))
    written.append(write_manifest(out, "sample", cfg, {"score": type(score).__name__}))
    return written


# ---------------------------------------------------------------------------
# sdedit


def _guides(cfg: RunConfig):
    if cfg["sdedit.guide"]:
        imgs = read_image(cfg["sdedit.guide"])[None]
    else:
        imgs = shapes_dataset(cfg["sdedit.n_guides"], cfg["data.size"], cfg["data.channels"],
                              cfg["data.seed"] + 7_000_001)
    if cfg["sdedit.kmeans"]:
        imgs = np.stack([kmeans_guide(im, cfg["sdedit.k"], cfg.seed) for im in imgs])
    return imgs


def run_sdedit(cfg: RunConfig, data, guides, out: Path):
    """Edit every guide; returns the list of per-output edge correlations."""
    inst = make_instance(cfg, data.shape[1:])
    score = build_score(cfg, inst, data)
    bi = BackwardInstance(inst, score, stepper(cfg, backward=True))
    cc = CorrectorConfig(cfg["corrector.steps"], cfg["corrector.snr"])
    t0 = cfg["sdedit.t0"] or cfg.T / 2
    m = cfg["sdedit.n_per_guide"]
    results = []
    for g, guide in enumerate(guides):
        ys = sdedit(bi, guide, t0, m, cfg.seed, cc, threads=cfg.threads, chunk=cfg.chunk, stream_offset=g * m)
        _write_fields(ys, out / "outputs", f"guide{g:03d}")
        for j, y in enumerate(ys):
            results.append((g, j, edge_correlation(guide, y)))
    return results, t0


def cmd_sdedit(cfg: RunConfig, out) -> list[Path]:
    """Guided generation from k-means stroke guides, with edge-correlation reports.

    ``sdedit.compare = iso-heat,aniso-heat`` runs every listed preset on the
    same guides and writes ``comparison.csv``.
    """
    out = Path(out)
    data = load_dataset(cfg)
    guides = _guides(cfg)
    if guides.shape[1:] != data.shape[1:]:
        raise DatasetError(f"guide shape {guides.shape[1:]} differs from data shape {data.shape[1:]}")
    out.mkdir(parents=True, exist_ok=True)
    _write_fields(guides, out / "guides", "guide")
    presets = [p.strip() for p in cfg["sdedit.compare"].split(",") if p.strip()] or [cfg.preset]
    summary, written = [], []
    for preset in presets:
        sub = RunConfig(cfg)
        sub["preset"] = preset
        d = out / preset if len(presets) > 1 else out
        d.mkdir(parents=True, exist_ok=True)
        results, t0 = run_sdedit(sub, data, guides, d)
        path = d / "edge_correlation.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["guide", "output", "edge_correlation"])
            for g, j, v in results:
                w.writerow([g, j, f"{v:.10g}"])
        written.append(path)
        summary.append((preset, float(np.mean([r[2] for r in results])), len(results)))
    if len(presets) > 1:
        path = out / "comparison.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["preset", "mean_edge_correlation", "n", "margin_vs_first"])
            for preset, v, k in summary:
                w.writerow([preset, f"{v:.10g}", k, f"{v - summary[0][1]:.10g}"])
        written.append(path)
    note = "unconditional (t0 = T)" if abs(t0 - cfg.T) < 1e-12 else "guided"
    written.append(write_manifest(out, "sdedit", cfg, {"t0": repr(t0), "mode": note}))
    return written


COMMANDS = {
    "forward": cmd_forward,
    "train": cmd_train,
    "sample": cmd_sample,
    "sdedit": cmd_sdedit,
    "calibrate-prior": cmd_calibrate_prior,
}
