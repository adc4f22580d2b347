"""Acceptance criteria. Each test prints exactly one PASS/FAIL line and asserts it.

The trained shape-class denoiser comes from the real ``train-denoiser`` command
with its default configuration, so these runs exercise the same path a user would.
"""
import json
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from esmlab import datasets, denoiser, distill, io, splat
from esmlab.datasets import to_latent
from esmlab.denoiser import Condition, GaussianOracle, oracle_eps
from esmlab.diffcore import central_difference, rel_err, value_and_grad
from esmlab.harness import cli
from esmlab.inversion import CoupledState, coupled_exact_reverse, coupled_invert, unmix
from esmlab.schedule import build_schedule, q_sample
from esmlab.splat import PARAM_FIELDS, CameraPose, SplatScene

pytestmark = pytest.mark.acceptance

BUDGET = 1500  # distillation iterations for criteria 6-8
SEEDS = "0,1,2,3,4"
SRC = Path(__file__).resolve().parents[1] / "src"


@pytest.fixture
def report(capsys):
    def emit(n: int, passed: bool, text: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if passed else 'FAIL'}: {text}", flush=True)
    return emit


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def checkpoint(workdir):
    assert run("train-denoiser", "--output-dir", workdir / "train") == 0
    return workdir / "train" / "checkpoint"


@pytest.fixture(scope="module")
def trained(checkpoint):
    model, sched, _ = io.load_denoiser(checkpoint)
    ds = datasets.make_shapes(rng=np.random.default_rng(0))
    return model, sched, ds


def _coupled_relative_error(model, sched, x_s, s, t, rho):
    eps = denoiser.eps_fn(model)
    state = CoupledState.from_latent(x_s, s)
    out, _, _ = coupled_invert(state, t, eps, rho, sched)
    x_int = unmix(out.x, out.x_aux, rho)
    rx, rxa = coupled_exact_reverse(x_int, out.x_aux, t, s, eps, sched)
    num = np.sqrt(np.sum((rx - state.x) ** 2.0) + np.sum((rxa - state.x_aux) ** 2.0))
    return float(num / np.sqrt(2.0 * np.sum(state.x.astype(np.float64) ** 2)))


def test_criterion_1_exact_inversion(trained, report):
    model32, sched, ds = trained
    model64 = model32.astype(np.float64)
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    errs = {np.float64: [], np.float32: []}
    for _ in range(100):
        s = int(rng.integers(0, sched.T))
        t = int(rng.integers(s + 1, sched.T + 1))
        rho = float(1.0 - rng.random())  # (0, 1]
        x0 = ds.data[rng.integers(len(ds))].astype(np.float64)
        x_s = q_sample(x0, s, rng.standard_normal(x0.shape), sched)
        for dtype, m in ((np.float64, model64), (np.float32, model32)):
            err = _coupled_relative_error(m, sched, x_s.astype(dtype), s, t, rho)
            errs[dtype].append(err)
    elapsed = time.perf_counter() - t0
    worst = {k: max(v) for k, v in errs.items()}
    over = sum(e >= 1e-4 for e in errs[np.float32])
    ok = worst[np.float64] < 1e-10 and worst[np.float32] < 1e-4 and elapsed < 30
    report(1, ok, f"coupled round trip on 100 random (s, t, rho) states with the trained denoiser: worst rel err "
                  f"{worst[np.float64]:.2e} (64-bit, < 1e-10), {worst[np.float32]:.2e} (32-bit, < 1e-4; "
                  f"{over}/100 states at or above); "
                  f"{elapsed:.1f}s (< 30s)")
    assert ok


def test_criterion_2_naive_vs_exact_gap(checkpoint, workdir, report):
    t0 = time.perf_counter()
    assert run("roundtrip", "--checkpoint", checkpoint, "--output-dir", workdir / "roundtrip") == 0
    elapsed = time.perf_counter() - t0
    rows = io.read_csv(workdir / "roundtrip" / "roundtrip.csv")
    med = {}
    for d in (25, 50, 150, 200):
        sel = [r for r in rows if int(r["delta_T"]) == d]
        assert len(sel) == 100
        med[d] = (np.median([float(r["naive_err"]) for r in sel]), np.median([float(r["coupled_err"]) for r in sel]))
    gap = med[200][0] / med[200][1]
    naive = [med[d][0] for d in (25, 50, 150, 200)]
    monotone = all(a <= b for a, b in zip(naive, naive[1:]))
    ok = gap >= 10 and monotone and elapsed < 60
    report(2, ok, f"median naive/coupled error at delta_T=200 is {gap:.3g}x (>= 10x); median naive error over "
                  f"delta_T 25/50/150/200 = {', '.join(f'{v:.4f}' for v in naive)} "
                  f"({'nondecreasing' if monotone else 'NOT monotone'}); {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_3_error_identity(report):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst, strict = 0.0, True
    n = 0
    while n < 1000:
        d = float(rng.uniform(1e-3, 20.0))  # covers the delta norms seen in distillation logs
        eta = float(rng.uniform(0.0, d))
        if not 0.0 < eta < d:
            continue
        r = distill.error_identity_check(d, eta)
        worst = max(worst, abs(r.identity_residual))
        strict &= r.eps_esm < r.eps_ism
        n += 1
    inst = distill.error_identity_check(2.0, 0.5)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and strict and inst.eps_ism == 4.0 and inst.eps_esm == 2.5 and elapsed < 1
    report(3, ok, f"1000 random pairs: max |residual| {worst:.2e} (< 1e-12), eps_esm < eps_ism on "
                  f"{'all' if strict else 'NOT all'}; worked instance eps_ism={inst.eps_ism}, eps_esm={inst.eps_esm}; "
                  f"{elapsed * 1000:.0f}ms (< 1s)")
    assert ok


def _render_fd_error(rng):
    side = 16
    n = int(rng.integers(2, 7))
    o = rng.uniform(0.2, 0.9, n)
    sc = SplatScene(rng.uniform(3, 13, (n, 2)), np.log(rng.uniform(1.0, 3.5, (n, 2))), rng.uniform(0, np.pi, n),
                    rng.uniform(0.1, 0.9, (n, 1)), np.log(o) - np.log1p(-o))
    pose = CameraPose(float(rng.uniform(0, 2 * np.pi)), tuple(rng.uniform(-1, 1, 2)), float(rng.uniform(0.8, 1.25)))
    cot = rng.standard_normal((side, side))
    _, cache = splat.render(sc, pose, side)
    grads = splat.render_vjp(sc, cache, cot)
    worst = 0.0
    for name in PARAM_FIELDS:
        def f(v, name=name):
            return float(np.sum(splat.render_image(SplatScene(**{**sc.as_dict(), name: v}), pose, side) * cot))
        worst = max(worst, rel_err(central_difference(f, getattr(sc, name), 1e-5), grads[name]))
    return worst


def _denoiser_fd_error(model, sched, rng, per_param=4):
    x0 = rng.standard_normal((6, model.dim))
    noise = rng.standard_normal((6, model.dim))
    t = rng.integers(1, sched.T + 1, 6)
    labels = rng.integers(0, model.num_classes + 1, 6)

    def loss(params):
        return denoiser.denoising_loss(model, params, x0, t, labels, noise, sched)

    _, grads = value_and_grad(loss, model.params)
    worst = 0.0
    for name in model.params.names():
        v = model.params[name]
        idx = rng.choice(v.size, size=min(per_param, v.size), replace=False)

        def f(arr, name=name):
            return float(loss({**model.params.values, name: arr}).value)
        fd = central_difference(f, v, 1e-6, idx).reshape(-1)[idx]
        worst = max(worst, rel_err(fd, grads[name].reshape(-1)[idx]))
    return worst


def test_criterion_4_gradient_correctness(trained, report):
    model32, sched, _ = trained
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    render_err = max(_render_fd_error(rng) for _ in range(6))
    fresh = denoiser.init_denoiser(4, 32, rng, zero_out=False, dtype=np.float64)
    den_err = max(_denoiser_fd_error(m, sched, rng) for m in (model32.astype(np.float64), fresh))
    elapsed = time.perf_counter() - t0
    ok = render_err < 1e-3 and den_err < 1e-4 and elapsed < 60
    report(4, ok, f"64-bit central differences: renderer VJP worst rel err {render_err:.2e} (< 1e-3) over 6 random "
                  f"scenes/poses; denoiser training gradient worst rel err {den_err:.2e} (< 1e-4) for trained and "
                  f"random weights; {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_5_oracle_calibration(report):
    side, var_d = 16, 0.25
    sched = build_schedule()
    mu = 0.5 * to_latent(datasets.shape_mask("disk", side))
    rng = np.random.default_rng(5)
    ds = datasets.make_gaussian(4096, side, mu, var_d, rng)
    t0 = time.perf_counter()
    model = denoiser.init_denoiser(1, side, np.random.default_rng(0))
    denoiser.train_denoiser(model, ds, sched, 5000, seed=0)
    oracle = GaussianOracle(mu, var_d)
    errs = []
    for _ in range(512):
        t = int(rng.integers(1, sched.T + 1))
        x0 = mu + np.sqrt(var_d) * rng.standard_normal((side, side))
        x_t = q_sample(x0, t, rng.standard_normal((side, side)), sched)
        pred = denoiser.predict_eps(model, x_t.astype(np.float32), t, Condition.label(0))
        errs.append(np.mean((pred - oracle_eps(oracle, x_t, t, sched)) ** 2))
    err = float(np.mean(errs))
    elapsed = time.perf_counter() - t0
    ok = err < 0.05 and elapsed < 300
    report(5, ok, f"5000-step denoiser vs closed-form Gaussian optimum on 512 held-out states: MSE {err:.4f} "
                  f"(< 0.05); {elapsed:.0f}s (< 300s)")
    assert ok


def test_criterion_6_distillation_efficacy(checkpoint, workdir, report):
    out = workdir / "distill"
    t0 = time.perf_counter()
    assert run("distill", "--checkpoint", checkpoint, "--iterations", BUDGET, "--output-dir", out) == 0
    elapsed = time.perf_counter() - t0
    s = json.loads((out / "summary.json").read_text())
    rows = io.read_csv(out / "iterations.csv")
    logged = len(rows) == BUDGET and all(np.isfinite(float(r["eps_ism"])) and np.isfinite(float(r["eps_esm"]))
                                         for r in rows)
    ok = s["mse_reduction"] >= 0.40 and logged and elapsed < 600
    report(6, ok, f"ESM (rho=0.93, delta_S=200, delta_T=50) on the disk class: MSE to class mean "
                  f"{s['initial_mse']:.4f} -> {s['final_mse']:.4f}, reduction {100 * s['mse_reduction']:.1f}% "
                  f"(>= 40%) in {BUDGET} iterations; eps_ism/eps_esm logged on {len(rows)} iterations "
                  f"(mean {s['mean_eps_ism']:.3g} / {s['mean_eps_esm']:.3g}); {elapsed:.0f}s (< 600s)")
    assert ok


def _sweep(checkpoint, out, parameter, values):
    assert run("sweep", "--checkpoint", checkpoint, "--iterations", BUDGET, "--parameter", parameter,
               "--values", values, "--seeds", SEEDS, "--output-dir", out) == 0
    return io.read_csv(out / "aggregate.csv")


def test_criterion_7_sweep_directions(checkpoint, workdir, report):
    t0 = time.perf_counter()
    rho = _sweep(checkpoint, workdir / "sweep_rho", "rho", "0.1,0.3,0.5,0.7,0.9")
    ds_ = _sweep(checkpoint, workdir / "sweep_dS", "delta_S", "50,100,150,200")
    dt_ = _sweep(checkpoint, workdir / "sweep_dT", "delta_T", "25,50,150,200")
    elapsed = time.perf_counter() - t0
    flagged = [a["value"] for a in rho if float(a["value"]) >= 0.7 and a["any_diverged"] == "True"]
    spread = {k: float(np.ptp([float(a["median_final_mse"]) for a in agg])) for k, agg in (("S", ds_), ("T", dt_))}
    ok = not flagged and spread["S"] < spread["T"] and elapsed < 3600
    report(7, ok, f"rho sweep: {'no' if not flagged else flagged} rho >= 0.7 runs flagged divergent "
                  f"(divergent overall: {[a['value'] for a in rho if a['any_diverged'] == 'True'] or 'none'}); "
                  f"5-seed median final-MSE spread delta_S {spread['S']:.5f} vs delta_T {spread['T']:.5f} "
                  f"(need delta_S < delta_T); {elapsed / 60:.1f} min (< 60)")
    assert ok


def test_criterion_8_init_comparison(checkpoint, workdir, report):
    out = workdir / "init_compare"
    t0 = time.perf_counter()
    assert run("init-compare", "--checkpoint", checkpoint, "--iterations", BUDGET, "--init_compare.seeds", SEEDS,
               "--output-dir", out) == 0
    elapsed = time.perf_counter() - t0
    v = json.loads((out / "comparison.json").read_text())
    ok = v["data_fitted_not_worse"] and elapsed < 1800
    report(8, ok, f"5-seed median final MSE: data_fitted {v['median_final_mse_data_fitted']:.5f} vs random "
                  f"{v['median_final_mse_random']:.5f} (need data_fitted <= random); {elapsed / 60:.1f} min (< 30)")
    assert ok


def test_criterion_9_verify_from_fresh_checkout(tmp_path, report):
    clone = tmp_path / "clone"
    shutil.copytree(SRC, clone / "src", ignore=shutil.ignore_patterns("__pycache__", "*.egg-info"))
    env = {**os.environ, "PYTHONPATH": str(clone / "src"), "ESMLAB_OUTPUT_ROOT": str(tmp_path / "out")}
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "esmlab", "verify"], cwd=tmp_path, env=env, capture_output=True,
                          text=True, timeout=600)
    elapsed = time.perf_counter() - t0
    rows = io.read_csv(tmp_path / "out" / "verify" / "verify.csv")
    imported_from_clone = str(clone) in subprocess.run(
        [sys.executable, "-c", "import esmlab; print(esmlab.__file__)"], env=env, capture_output=True,
        text=True).stdout
    passed = sum(r["passed"] == "True" for r in rows)
    ok = proc.returncode == 0 and passed == len(rows) > 0 and imported_from_clone and elapsed < 300
    report(9, ok, f"verify from a fresh copy of the sources: exit {proc.returncode}, {passed}/{len(rows)} properties "
                  f"hold; {elapsed:.1f}s (< 300s)")
    assert ok, proc.stdout + proc.stderr
