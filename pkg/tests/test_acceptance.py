"""Acceptance suite: one printed PASS/FAIL line per criterion, tolerances pinned."""
import csv
import hashlib
import math
import time

import numpy as np
import pytest

from asgm.dynamics import ScalarLinearSde, SpdeInstance, anisotropic_drift, laplacian_matrix, noise_coefficient
from asgm.evaluation import covariance_spectrum, edge_correlation, mmd_permutation_test
from asgm.integrator import StepperConfig, simulate_forward, simulate_paths
from asgm.pipelines.cli import main
from asgm.pipelines.datasets import checkerboard_disk, gaussian_mean_field, shapes_dataset
from asgm.reversal import BackwardInstance, CorrectorConfig, run_backward, sample, ula_step
from asgm.schedules import preset_schedule
from asgm.score import LinearFlow, LinearGaussianScore, accumulated_variance, prior_law
from asgm.scorenet import GaussianScoreModel, ScoreNet, TrainerConfig, dsm_loss_and_grads, train_dsm

from oracles import naive_drift_channel, naive_laplacian_channel, naive_noise_channel


def test_1_stencil_oracle(report):
    start = time.perf_counter()
    g = np.random.default_rng(1)
    worst = 0.0
    for shape in [(3, 3), (5, 7), (8, 8), (17, 13)]:
        for _ in range(50):
            x = g.uniform(-1, 1, shape)
            phi, lam = g.uniform(0.1, 3.0), g.uniform(0.02, 3.0)
            worst = max(worst, np.abs(anisotropic_drift(x[None], phi, lam)[0] - naive_drift_channel(x, phi, lam)).max())
            worst = max(worst, np.abs(noise_coefficient(x[None], phi, lam)[0] - naive_noise_channel(x, phi, lam)).max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 10
    report(1, ok, f"stencil max-abs {worst:.2e} (tol 1e-12), {elapsed:.1f}s")
    assert ok


def test_2_isotropic_limit(report):
    start = time.perf_counter()
    g = np.random.default_rng(2)
    rel = 0.0
    for shape in [(3, 3), (8, 8), (17, 13)]:
        for _ in range(10):
            x = g.uniform(-1, 1, shape)
            ref = 1.7 * naive_laplacian_channel(x)
            got = anisotropic_drift(x[None], 1.7, 1e12)[0]
            rel = max(rel, np.abs(got - ref).max() / np.abs(ref).max())
    ev = np.linalg.eigvals(laplacian_matrix(8, 8)).real
    n_zero = int(np.sum(np.abs(ev) <= 1e-8))
    elapsed = time.perf_counter() - start
    ok = rel <= 1e-6 and ev.max() <= 1e-8 and n_zero == 1 and elapsed < 10
    report(2, ok, f"lambda=1e12 rel {rel:.2e} (tol 1e-6); max eig {ev.max():.1e}, zero modes {n_zero}, {elapsed:.1f}s")
    assert ok


def _endpoint_errors(inst, flow, fields, tamed):
    errs, ratios = [], []
    for x0 in fields:
        ref = flow.propagate_mean(x0, inst.T)
        e = [np.abs(simulate_forward(inst, x0, StepperConfig(dt=dt, tamed=tamed)).final - ref).max()
             for dt in (1e-2, 5e-3)]
        errs.append(e[0])
        ratios.append(e[0] / e[1])
    return np.array(errs), np.array(ratios)


def test_3_linear_forward_law(report):
    start = time.perf_counter()
    inst = SpdeInstance(preset_schedule("iso-heat", image_size=8), noise_enabled=False)
    flow = LinearFlow(inst, (1, 8, 8))
    fields = [np.random.default_rng(seed).uniform(-1, 1, (1, 8, 8)) for seed in range(20)]
    fields += list(shapes_dataset(8, 8, 1, 3)) + [checkerboard_disk(8)]
    errs, ratios = _endpoint_errors(inst, flow, fields, tamed=False)
    tamed_errs, _ = _endpoint_errors(inst, flow, fields, tamed=True)
    elapsed = time.perf_counter() - start
    ok = errs.max() <= 1e-3 and np.all((1.5 <= ratios) & (ratios <= 2.5)) and elapsed < 30
    report(3, ok, f"classical EM endpoint err max {errs.max():.2e} (tol 1e-3) over {len(fields)} fields; "
                  f"halving ratios {ratios.min():.2f}..{ratios.max():.2f} (band 1.5..2.5), {elapsed:.1f}s")
    print(f"INFO 3 (tamed stepper): endpoint err max {tamed_errs.max():.2e}, "
          f"{int(np.sum(tamed_errs > 1e-3))}/{len(fields)} fields above 1e-3")
    assert ok


def test_4_ve_variance(report):
    start = time.perf_counter()
    inst = SpdeInstance(preset_schedule("ve-noise"))
    x0 = np.zeros((1, 8, 8))
    ends = simulate_paths(inst, x0, 10**4, StepperConfig(dt=1e-2), seed=4, chunk=2500)
    w = accumulated_variance(inst, inst.T)
    per_pixel = np.mean(ends**2, axis=0)
    pooled = float(per_pixel.mean() / w - 1)
    elapsed = time.perf_counter() - start
    ok = abs(pooled) < 0.03 and elapsed < 60
    report(4, ok, f"pixel variance rel err {pooled:+.4f} pooled over 64 i.i.d. pixels (tol 0.03); "
                  f"single-pixel worst {np.abs(per_pixel / w - 1).max():.4f}; {elapsed:.1f}s")
    assert ok


def _gaussian_problem(tamed):
    inst = SpdeInstance(preset_schedule("iso-heat", image_size=8))
    m0 = gaussian_mean_field(8, 1)
    score = LinearGaussianScore(inst, m0, 0.1)
    prior = prior_law(inst, m0[None], initial_var=0.1)
    return BackwardInstance(inst, score, StepperConfig(dt=1e-2, tamed=tamed), prior), m0


def _round_trip_metrics(X, m0):
    ref = m0 + math.sqrt(0.1) * np.random.default_rng(105).standard_normal((2000, 1, 8, 8))
    fresh = m0 + math.sqrt(0.1) * np.random.default_rng(106).standard_normal((2000, 1, 8, 8))
    mean_err = float(np.abs(X.mean(axis=0) - m0).max())
    spectrum_rel = float(np.abs(covariance_spectrum(X, 8) / covariance_spectrum(ref, 8) - 1).max())
    stat, null = mmd_permutation_test(X, fresh, 200, seed=0)
    return mean_err, spectrum_rel, stat, float(np.percentile(null, 95))


def test_5_gaussian_round_trip(report):
    start = time.perf_counter()
    bi, m0 = _gaussian_problem(tamed=False)
    X = sample(bi, 2000, seed=5, cc=CorrectorConfig(1), chunk=250)
    mean_err, spectrum_rel, stat, q95 = _round_trip_metrics(X, m0)
    elapsed = time.perf_counter() - start
    ok = mean_err <= 0.05 and spectrum_rel <= 0.15 and stat < q95 and elapsed < 600
    report(5, ok, f"untamed backward: mean err {mean_err:.3f} (tol 0.05), top-8 spectrum rel {spectrum_rel:.3f} "
                  f"(tol 0.15), MMD2 {stat:.2e} {'<' if stat < q95 else '>='} null95 {q95:.2e}, {elapsed:.0f}s")
    assert ok


def test_5_info_tamed_backward(report, capsys):
    bi, m0 = _gaussian_problem(tamed=True)
    X = sample(bi, 2000, seed=5, cc=CorrectorConfig(1), chunk=250)
    mean_err, spectrum_rel, stat, q95 = _round_trip_metrics(X, m0)
    print(f"INFO 5 (tamed backward): mean err {mean_err:.3f}, spectrum rel {spectrum_rel:.3f}, "
          f"MMD2 {stat:.2e} vs null95 {q95:.2e}")


def test_6_scalar_ou_reversal(report):
    start = time.perf_counter()
    n = 10**5
    inst = ScalarLinearSde(1.0, 1.0, T=1.0, dt=1e-3)
    cfg = StepperConfig(dt=1e-3)
    x0 = 1.0 + 0.5 * np.random.default_rng(6).standard_normal((n, 1, 1, 1))
    xT = simulate_paths(inst, x0, n, cfg, seed=6, chunk=4096, batched_x0=True)
    bi = BackwardInstance(inst, LinearGaussianScore(inst, np.ones((1, 1, 1)), 0.25), cfg)
    y = run_backward(bi, xT, 0.0, seed=7, cc=CorrectorConfig(1), chunk=4096, stream_offset=n)
    mean, var = float(y.mean()), float(y.var())
    elapsed = time.perf_counter() - start
    ok = abs(mean - 1.0) <= 0.02 and abs(var / 0.25 - 1) <= 0.05 and elapsed < 120
    report(6, ok, f"recovered mean {mean:.4f} (1 +- 0.02), variance {var:.4f} (0.25 +- 5%), {elapsed:.0f}s")
    assert ok


def _ula_chains(prec, chol, chains, iters, delta, seed, burn=1000):
    g = np.random.default_rng(seed)
    d = prec.shape[0]
    x = g.standard_normal((chains, d)) @ chol.T
    s1 = np.zeros(d)
    s2 = np.zeros(d)
    cinv = np.linalg.inv(chol)
    for k in range(iters):
        x = ula_step(-x @ prec, x, g.standard_normal(x.shape), delta)
        if k >= burn:
            z = x @ cinv.T
            s1 += z.sum(axis=0)
            s2 += (z * z).sum(axis=0)
    m = (iters - burn) * chains
    mean = s1 / m
    return mean, s2 / m - mean**2


def test_7_ula_stationarity(report):
    start = time.perf_counter()
    m1, v1 = _ula_chains(np.eye(1), np.eye(1), 100, 10**5, 0.01, seed=71)
    q, _ = np.linalg.qr(np.random.default_rng(72).standard_normal((16, 16)))
    cov = (q * np.linspace(0.5, 2.0, 16)) @ q.T
    m16, v16 = _ula_chains(np.linalg.inv(cov), np.linalg.cholesky(cov), 20, 10**5, 0.01, seed=73)
    elapsed = time.perf_counter() - start
    ok = (np.abs(m1).max() < 0.05 and np.all((0.9 <= v1) & (v1 <= 1.1))
          and np.abs(m16).max() < 0.05 and np.all((0.9 <= v16) & (v16 <= 1.1)) and elapsed < 60)
    report(7, ok, f"1-D mean {m1[0]:+.3f} var {v1[0]:.3f}; 16-D whitened |mean| max {np.abs(m16).max():.3f}, "
                  f"var {v16.min():.3f}..{v16.max():.3f} (bands |mean|<0.05, var 0.9..1.1), {elapsed:.0f}s")
    assert ok


def _fd_rel_error(model, seed, n_checks=40, h=1e-4):
    g = np.random.default_rng(seed)
    B = 6
    t = g.uniform(0.1, 2.0, B)
    x = g.standard_normal((B, *model.field_shape))
    target = g.standard_normal((B, model.n_pixels))
    w = g.uniform(0.1, 1.0, B)
    _, grads = dsm_loss_and_grads(model, t, x, target, w)
    worst = 0.0
    names = list(model.params)
    for k in range(n_checks):
        name = names[k % len(names)]
        p = model.params[name]
        idx = tuple(g.integers(0, s) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        lp, _ = dsm_loss_and_grads(model, t, x, target, w)
        p[idx] = old - h
        lm, _ = dsm_loss_and_grads(model, t, x, target, w)
        p[idx] = old
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(grads[name][idx] - fd) / max(abs(fd), abs(grads[name][idx]), 1e-6))
    return worst


def test_8_dsm_trainer(report):
    start = time.perf_counter()
    inst = SpdeInstance(preset_schedule("ve-noise"))
    var = lambda t: accumulated_variance(inst, t)
    data = np.random.default_rng(8).standard_normal((4096, 1, 1, 2))
    model = GaussianScoreModel((1, 1, 2), var, log_var=math.log(0.3))
    train_dsm(model, data, inst, TrainerConfig(iterations=2000, batch_size=256, lr=1e-2, seed=8))
    grid = np.linspace(-2, 2, 21)
    X = np.stack(np.meshgrid(grid, grid), axis=-1).reshape(-1, 1, 1, 2)
    rms = {}
    for t in (0.5 * inst.T, inst.T):
        rms[t] = float(np.sqrt(np.mean((model(t, X) + X / (1 + var(t))) ** 2)))
    net = ScoreNet((1, 2, 3), width=32, seed=1, std_fn=var)
    grad_err = max(_fd_rel_error(net, 81), _fd_rel_error(model, 82))
    elapsed = time.perf_counter() - start
    ok = max(rms.values()) <= 0.05 and grad_err <= 1e-3 and elapsed < 300
    report(8, ok, f"score RMS {rms[0.5 * inst.T]:.3f} at T/2, {rms[inst.T]:.3f} at T (tol 0.05); "
                  f"gradient FD rel err {grad_err:.1e} (tol 1e-3), {elapsed:.0f}s")
    assert ok


def test_9_anisotropy_preserves_edges(report):
    start = time.perf_counter()
    x0 = checkerboard_disk(64)
    corr = {}
    schedules = {name: preset_schedule(name, image_size=64) for name in ("aniso-heat", "iso-heat")}
    same_phi = all(schedules["aniso-heat"].phi1(t) == schedules["iso-heat"].phi1(t) for t in np.linspace(0, 2, 9))
    for name, sch in schedules.items():
        inst = SpdeInstance(sch, noise_enabled=False)
        final = simulate_forward(inst, x0, StepperConfig(dt=1e-2), None, t_end=0.5 * sch.T).final
        corr[name] = edge_correlation(x0, final)
    margin = corr["aniso-heat"] - corr["iso-heat"]
    elapsed = time.perf_counter() - start
    ok = same_phi and margin >= 0.05 and elapsed < 60
    report(9, ok, f"edge corr aniso {corr['aniso-heat']:.3f} vs iso {corr['iso-heat']:.3f}, "
                  f"margin {margin:+.3f} (>= 0.05), {elapsed:.1f}s")
    assert ok


def _digest(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


SDEDIT_ARGS = ["sdedit", "--seed", "10", "--set", "data.size=16", "--set", "data.n=200",
               "--set", "sdedit.n_guides=32", "--set", "sdedit.k=8", "--set", "sdedit.compare=iso-heat,aniso-heat"]


def test_10_sdedit_comparison(report, tmp_path):
    start = time.perf_counter()
    rc = main([*SDEDIT_ARGS, "--out", str(tmp_path / "a")])
    rc2 = main([*SDEDIT_ARGS, "--threads", "4", "--out", str(tmp_path / "b")])
    elapsed = time.perf_counter() - start
    rows = {}
    if rc == 0:
        with open(tmp_path / "a" / "comparison.csv") as fh:
            rows = {r["preset"]: float(r["mean_edge_correlation"]) for r in csv.DictReader(fh)}
    same = rc == rc2 == 0 and _digest(tmp_path / "a") == _digest(tmp_path / "b")
    ok = rc == 0 and set(rows) == {"iso-heat", "aniso-heat"} and same and elapsed < 1800
    margin = rows.get("aniso-heat", math.nan) - rows.get("iso-heat", math.nan)
    order = "aniso >= iso" if margin >= 0 else "aniso < iso"
    report(10, ok, f"32 guides: mean edge corr aniso {rows.get('aniso-heat', math.nan):.3f}, "
                   f"iso {rows.get('iso-heat', math.nan):.3f}, margin {margin:+.3f} ({order}, recorded); "
                   f"deterministic across threads: {same}; {elapsed:.0f}s")
    assert ok


CLI_RUNS = {
    "forward": ["forward", "--set", "forward.size=16", "--set", "T=1", "--set", "dt=0.025"],
    "train": ["train", "--set", "data.size=6", "--set", "data.n=32", "--set", "train.iterations=50",
              "--set", "train.width=16", "--set", "preset=aniso-heat"],
    "calibrate-prior": ["calibrate-prior", "--set", "preset=aniso-heat", "--set", "data.size=6",
                        "--set", "data.n=16", "--set", "prior.n_sims=64", "--set", "T=1", "--set", "dt=0.02"],
    "sample": ["sample", "--set", "data.source=gaussian", "--set", "data.size=6", "--set", "n_samples=24",
               "--set", "chunk=8", "--set", "reference.n=24", "--set", "T=1", "--set", "dt=0.02"],
    "sdedit": ["sdedit", "--set", "data.size=8", "--set", "data.n=16", "--set", "sdedit.n_guides=3",
               "--set", "sdedit.n_per_guide=3", "--set", "chunk=2", "--set", "T=1", "--set", "dt=0.02"],
}


def test_11_cli_determinism(report, tmp_path):
    start = time.perf_counter()
    results = {}
    for name, args in CLI_RUNS.items():
        digests = []
        for run, threads in enumerate((1, 1, 4)):
            out = tmp_path / f"{name}-{run}"
            rc = main([*args, "--seed", "11", "--threads", str(threads), "--out", str(out)])
            digests.append(_digest(out) if rc == 0 else None)
        results[name] = digests[0] is not None and digests[0] == digests[1] == digests[2]
    elapsed = time.perf_counter() - start
    ok = all(results.values()) and elapsed < 300
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in results.items())
    report(11, ok, f"re-runs at threads 1, 1, 4: {detail}; {elapsed:.0f}s")
    assert ok
