"""Self-contained invariant suite behind ``esmlab verify``.

Every check builds its own tiny fixture, measures one quantity and compares it
with a threshold, so the report doubles as a record of the measured values.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .. import denoiser, diffcore as dc, distill, inversion, lora, schedule, splat
from ..denoiser import NULL, Condition
from ..splat import PARAM_FIELDS, CameraPose, SplatScene

REPORT_COLUMNS = ("module", "property", "passed", "measured", "threshold", "detail")
FAULTS = ("mix-sign",)


@dataclass
class Outcome:
    measured: float
    threshold: float
    passed: bool
    detail: str = ""


def below(measured: float, threshold: float, detail: str = "") -> Outcome:
    return Outcome(float(measured), float(threshold), bool(measured < threshold), detail)


CHECKS: list[tuple[str, str, Callable[[], Outcome]]] = []


def check(module: str, name: str):
    def deco(fn):
        CHECKS.append((module, name, fn))
        return fn
    return deco


# -- fixtures ---------------------------------------------------------------------

def _sched():
    return schedule.build_schedule()


def _tiny_model(dtype=np.float64, zero_out=False, seed=7):
    return denoiser.init_denoiser(3, 8, np.random.default_rng(seed), hidden=16, depth=2, temb_dim=8, cemb_dim=4,
                                  zero_out=zero_out, dtype=dtype)


def _scene(rng, n=4, side=12):
    o = rng.uniform(0.2, 0.9, n)
    return SplatScene(rng.uniform(0.2 * side, 0.8 * side, (n, 2)), np.log(rng.uniform(1.0, 0.25 * side, (n, 2))),
                      rng.uniform(0, np.pi, n), rng.uniform(0.1, 0.9, (n, 1)), np.log(o) - np.log1p(-o))


# -- diffcore ---------------------------------------------------------------------

@check("diffcore", "vjp_matches_central_difference")
def _vjp_fd():
    rng = np.random.default_rng(0)
    vals = {"w": rng.standard_normal((5, 4)), "b": rng.standard_normal(5), "x": rng.standard_normal((3, 4))}

    def f(p):
        h = dc.silu(dc.linear(p["x"], p["w"], p["b"]))
        return dc.sum_(dc.square(dc.tanh(h)))

    _, grads = dc.value_and_grad(f, vals)
    worst = 0.0
    for name, v in vals.items():
        def scalar(arr, name=name):
            return float(f({**{k: dc.Var(u) for k, u in vals.items()}, name: dc.Var(arr)}).value)
        worst = max(worst, dc.rel_err(dc.central_difference(scalar, v, 1e-6), grads[name]))
    return below(worst, 1e-6)


@check("diffcore", "adam_rejects_nonfinite_gradient")
def _adam_nan():
    store = dc.ParamStore()
    store.add("p", np.zeros(3))
    store.set_grads({"p": np.array([0.0, np.nan, 0.0])})
    try:
        dc.adam_step(store, 1e-3)
    except dc.NumericError as err:
        return Outcome(0.0, 0.0, "p" in str(err), str(err))
    return Outcome(1.0, 0.0, False, "no error raised")


# -- schedule ---------------------------------------------------------------------

@check("schedule", "alpha_bar_strictly_decreasing_in_unit_interval")
def _alpha_bar():
    ab = _sched().alpha_bar
    ok = ab[0] == 1.0 and np.all(np.diff(ab) < 0) and ab[-1] > 0
    return Outcome(float(ab[-1]), 0.0, bool(ok), "alpha_bar[T]")


@check("schedule", "ddim_transition_inverse_for_fixed_noise")
def _ddim_inverse():
    sched = _sched()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        s, t = sorted(rng.choice(np.arange(0, 1001), 2, replace=False))
        x, e = rng.standard_normal(16), rng.standard_normal(16)
        y = schedule.ddim_transition(x, e, s, t, sched)
        worst = max(worst, dc.rel_err(schedule.ddim_transition(y, e, t, s, sched), x))
    return below(worst, 1e-10)


# -- denoiser ---------------------------------------------------------------------

@check("denoiser", "training_gradient_matches_central_difference")
def _denoiser_fd():
    sched, model = _sched(), _tiny_model()
    rng = np.random.default_rng(2)
    x0, noise = rng.standard_normal((4, 64)), rng.standard_normal((4, 64))
    t, labels = np.array([5, 200, 600, 999]), np.array([0, 1, 2, 3])

    def loss(params):
        return denoiser.denoising_loss(model, params, x0, t, labels, noise, sched)

    _, grads = dc.value_and_grad(loss, model.params)
    worst = 0.0
    for name in model.params.names():
        v = model.params[name]
        idx = rng.choice(v.size, size=min(6, v.size), replace=False)

        def scalar(arr, name=name):
            return float(loss({**model.params.values, name: arr}).value)
        fd = dc.central_difference(scalar, v, 1e-6, idx)
        worst = max(worst, dc.rel_err(fd.reshape(-1)[idx], grads[name].reshape(-1)[idx]))
    return below(worst, 1e-4)


@check("denoiser", "unit_guidance_equals_conditional")
def _guidance():
    model = _tiny_model()
    x = np.random.default_rng(3).standard_normal((8, 8))
    a = denoiser.predict_eps(model, x, 300, Condition.label(1), guidance=1.0)
    b = denoiser.predict_eps(model, x, 300, Condition.label(1), guidance=7.5)
    n = denoiser.predict_eps(model, x, 300, NULL)
    err = dc.rel_err(b, n + 7.5 * (a - n))
    return below(err, 1e-10)


@check("denoiser", "zero_initialized_output")
def _zero_init():
    model = _tiny_model(zero_out=True)
    out = denoiser.predict_eps(model, np.ones((8, 8)), 10, NULL)
    return Outcome(float(np.abs(out).max()), 0.0, bool(np.all(out == 0)))


# -- lora -------------------------------------------------------------------------

@check("lora", "fresh_adapter_is_identity")
def _lora_identity():
    model = _tiny_model()
    ad = lora.init_adapter(model, np.random.default_rng(0), rank=2)
    x = np.random.default_rng(4).standard_normal((8, 8))
    diff = np.abs(lora.predict_eps_lora(model, ad, x, 400) - denoiser.predict_eps(model, x, 400)).max()
    return Outcome(float(diff), 0.0, bool(diff == 0))


@check("lora", "adapter_gradient_matches_central_difference")
def _lora_fd():
    sched, model = _sched(), _tiny_model()
    ad = lora.init_adapter(model, np.random.default_rng(0), rank=2)
    rng = np.random.default_rng(5)
    for name in ad.params.names():
        ad.params.values[name] = 0.3 * rng.standard_normal(ad.params[name].shape)
    x0, tau, noise = rng.standard_normal(64), np.array([50, 700]), rng.standard_normal((2, 64))
    _, grads = lora.lora_loss_and_grad(model, ad, x0, tau, noise, sched)
    worst = 0.0
    for name in ad.params.names():
        v = ad.params[name]
        idx = rng.choice(v.size, size=min(6, v.size), replace=False)

        def scalar(arr, name=name):
            trial = ad.copy()
            trial.params.values[name] = arr
            return float(lora.lora_loss_and_grad(model, trial, x0, tau, noise, sched)[0])
        fd = dc.central_difference(scalar, v, 1e-6, idx)
        worst = max(worst, dc.rel_err(fd.reshape(-1)[idx], grads[name].reshape(-1)[idx]))
    return below(worst, 1e-4)


@check("lora", "base_model_untouched_by_training")
def _lora_frozen():
    sched, model = _sched(), _tiny_model()
    before = dc.fingerprint(model.params)
    ad = lora.init_adapter(model, np.random.default_rng(0), rank=2)
    rng = np.random.default_rng(6)
    for _ in range(3):
        lora.lora_train_step(model, ad, rng.standard_normal(64), sched, 1e-2, rng)
    same = dc.fingerprint(model.params) == before
    return Outcome(0.0 if same else 1.0, 0.0, same)


# -- inversion --------------------------------------------------------------------

@check("inversion", "mixing_identity")
def _mixing_identity():
    rng = np.random.default_rng(8)
    worst = 0.0
    for rho in (0.1, 0.5, 0.93, 1.0):
        a, b = rng.standard_normal(32), rng.standard_normal(32)
        x_t = inversion.mix(a, b, rho)
        worst = max(worst, dc.rel_err(rho * x_t + (1 - rho) * b, a))
        worst = max(worst, dc.rel_err(inversion.unmix(x_t, b, rho), a))
    return below(worst, 1e-12)


@check("inversion", "coupled_round_trip_exact_float64")
def _coupled_exact():
    sched, model = _sched(), _tiny_model()
    eps = denoiser.eps_fn(model)
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(25):
        s = int(rng.integers(0, 900))
        t = int(rng.integers(s + 1, 1001))
        rho = float(rng.uniform(0.05, 1.0))
        worst = max(worst, inversion.coupled_roundtrip_error(rng.standard_normal((8, 8)), s, t, eps, rho, sched))
    return below(worst, 1e-10)


@check("inversion", "coupled_round_trip_float32")
def _coupled_f32():
    sched, model = _sched(), _tiny_model(dtype=np.float32)
    eps = denoiser.eps_fn(model)
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(25):
        s = int(rng.integers(1, 800))
        x = rng.standard_normal((8, 8)).astype(np.float32)
        worst = max(worst, inversion.coupled_roundtrip_error(x, s, s + 200, eps, 0.93, sched))
    return below(worst, 1e-4)


@check("inversion", "naive_round_trip_is_lossy")
def _naive_lossy():
    sched, model = _sched(), _tiny_model()
    eps = denoiser.eps_fn(model)
    x = np.random.default_rng(11).standard_normal((8, 8))
    naive = inversion.naive_roundtrip_error(x, 300, 500, eps, sched)
    coupled = inversion.coupled_roundtrip_error(x, 300, 500, eps, 0.93, sched)
    return Outcome(naive, 10 * coupled, bool(naive > 10 * coupled and naive > 0), "threshold = 10x coupled")


# -- splat ------------------------------------------------------------------------

@check("splat", "render_vjp_matches_central_difference")
def _splat_fd():
    rng = np.random.default_rng(12)
    sc = _scene(rng)
    pose = CameraPose(0.7, (0.5, -0.3), 1.1)
    cot = rng.standard_normal((12, 12))
    _, cache = splat.render(sc, pose, 12)
    grads = splat.render_vjp(sc, cache, cot)
    worst = 0.0
    for name in PARAM_FIELDS:
        arr = getattr(sc, name)

        def scalar(v, name=name):
            trial = SplatScene(**{**sc.as_dict(), name: v})
            return float(np.sum(splat.render_image(trial, pose, 12) * cot))
        worst = max(worst, dc.rel_err(dc.central_difference(scalar, arr, 1e-5), grads[name]))
    return below(worst, 1e-3)


@check("splat", "render_in_unit_range")
def _splat_range():
    rng = np.random.default_rng(13)
    lo, hi = 1.0, 0.0
    for _ in range(10):
        img = splat.render_image(_scene(rng, n=8), side=12)
        lo, hi = min(lo, img.min()), max(hi, img.max())
    return Outcome(float(hi), 1.0, bool(lo >= 0 and hi <= 1), f"min={lo:.3g}")


@check("splat", "transparent_scene_renders_background")
def _splat_transparent():
    sc = _scene(np.random.default_rng(14))
    sc.opacity_logits[:] = -60.0
    m = float(np.abs(splat.render_image(sc, side=12)).max())
    return below(m, 1e-12)


# -- distill ----------------------------------------------------------------------

@check("distill", "error_identity_random_pairs")
def _identity_random():
    rng = np.random.default_rng(15)
    worst, holds = 0.0, True
    for _ in range(1000):
        d = float(rng.uniform(1e-3, 10.0))
        e = float(rng.uniform(0.0, 1.0)) * d
        if e == 0.0:
            continue
        r = distill.error_identity_check(d, e)
        worst = max(worst, abs(r.identity_residual))
        holds &= r.eps_esm < r.eps_ism
    return Outcome(worst, 1e-12, bool(worst < 1e-12 and holds), "and eps_esm < eps_ism on every pair")


@check("distill", "error_identity_worked_instance")
def _identity_instance():
    r = distill.error_identity_check(2.0, 0.5)
    err = abs(r.eps_ism - 4.0) + abs(r.eps_esm - 2.5)
    return below(err, 1e-15, f"eps_ism={r.eps_ism}, eps_esm={r.eps_esm}")


@check("distill", "gradient_scales_with_weight")
def _equivariance():
    sched, model = _sched(), _tiny_model()
    sc = _scene(np.random.default_rng(16), side=8)
    out = []
    for k in (1.0, 2.0):
        cfg = distill.DistillConfig(loss="ism", omega_scale=k)
        out.append(distill.ism_gradient(sc, splat.IDENTITY_POSE, model, sched, cfg, np.random.default_rng(0)).grads)
    err = max(float(np.abs(out[1][n] - 2.0 * out[0][n]).max()) for n in PARAM_FIELDS)
    return Outcome(err, 0.0, err == 0.0)


@check("distill", "loop_replayable_and_model_frozen")
def _loop():
    sched, model = _sched(), _tiny_model()
    sc = _scene(np.random.default_rng(17), side=8)
    before = dc.fingerprint(model.params)
    cfg = distill.DistillConfig(loss="esm", iterations=3, seed=5, lora_rank=2)
    prints = []
    for _ in range(2):
        st, _ = distill.distill_loop(distill.DistillState.fresh(sc, cfg, model), model, sched, cfg)
        prints.append(dc.fingerprint(st.store) + dc.fingerprint(st.adapter.params))
    ok = prints[0] == prints[1] and dc.fingerprint(model.params) == before
    return Outcome(0.0 if ok else 1.0, 0.0, ok)


# -- harness ----------------------------------------------------------------------

@check("harness", "config_rejects_unknown_keys")
def _config_strict():
    from .config import ConfigError, build_config

    try:
        build_config({"distill": {"rho": 0.5, "rhoo": 0.9}})
    except ConfigError as err:
        return Outcome(0.0, 0.0, "rhoo" in str(err), str(err))
    return Outcome(1.0, 0.0, False, "unknown key accepted")


# -- runner -----------------------------------------------------------------------

def _flipped_mix(x_int, x_aux_int, rho):
    return (x_int + (1.0 - rho) * x_aux_int) / rho


@contextlib.contextmanager
def injected(fault: str | None) -> Iterator[None]:
    """Temporarily install a known-bad implementation (mutation smoke test)."""
    if fault is None:
        yield
        return
    if fault != "mix-sign":
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    original = inversion.mix
    inversion.mix = _flipped_mix
    try:
        yield
    finally:
        inversion.mix = original


def run_checks(fault: str | None = None) -> list[dict]:
    rows = []
    with injected(fault), np.errstate(all="ignore"):
        for module, name, fn in CHECKS:
            t0 = time.perf_counter()
            try:
                o = fn()
            except Exception as err:  # a crashing check is a failing check
                o = Outcome(math.nan, math.nan, False, f"{type(err).__name__}: {err}")
            rows.append({"module": module, "property": name, "passed": o.passed, "measured": o.measured,
                         "threshold": o.threshold, "seconds": round(time.perf_counter() - t0, 3),
                         "detail": o.detail})
    return rows
