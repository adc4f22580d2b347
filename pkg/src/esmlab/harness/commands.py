"""Experiment recipes behind the CLI. Each ``cmd_*`` takes a validated RunConfig
and writes its artifacts under one run directory."""
from __future__ import annotations

import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import datasets, denoiser, io, splat
from ..diffcore import NumericError
from ..distill import LOG_COLUMNS, DistillState, distill_loop
from ..inversion import coupled_roundtrip_error, naive_roundtrip_error
from ..schedule import build_schedule, q_sample
from .config import ConfigError, DatasetSpec, RunConfig, resolve_output

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "mse", "sharpness")
ROUNDTRIP_COLUMNS = ("delta_T", "state", "s", "t", "naive_err", "coupled_err")
SWEEP_COLUMNS = ("parameter", "value", "seed", "initial_mse", "final_mse", "last_mse", "sharpness", "diverged",
                 "error")
INIT_COLUMNS = ("seed", "init", "initial_mse", "final_mse", "last_mse", "sharpness", "diverged", "error")


# -- shared helpers ---------------------------------------------------------------

def sharpness(image: np.ndarray) -> float:
    """Mean magnitude of first-order pixel differences along both axes."""
    img = np.asarray(image, dtype=np.float64)
    dx = np.abs(np.diff(img, axis=1)).ravel()
    dy = np.abs(np.diff(img, axis=0)).ravel()
    return float(np.concatenate([dx, dy]).mean())


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def build_dataset(spec: DatasetSpec) -> datasets.ToyDataset:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "shapes":
        return datasets.make_shapes(spec.n_per_class, spec.side, rng=rng)
    if spec.kind == "gaussian":
        return datasets.make_gaussian(spec.n, spec.side, spec.mean, spec.var_d, rng=rng)
    return datasets.load_npz(spec.path)


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_checkpoint(cfg: RunConfig):
    """(model, schedule, dataset) for commands that consume a trained denoiser."""
    if cfg.checkpoint is None:
        raise ConfigError("this command needs --checkpoint")
    path = Path(cfg.checkpoint)
    if not (path / "manifest.json").is_file():
        raise ConfigError(f"no checkpoint at {path}")
    model, sched, man = io.load_denoiser(path)
    spec = DatasetSpec.model_validate(man.get("extra", {}).get("dataset", cfg.dataset.model_dump()))
    return model, sched, build_dataset(spec)


# -- train-denoiser ---------------------------------------------------------------

def cmd_train_denoiser(cfg: RunConfig) -> Path:
    dataset = build_dataset(cfg.dataset)
    sched = build_schedule(**cfg.schedule.model_dump())
    ms, ts = cfg.model, cfg.train
    model = denoiser.init_denoiser(dataset.num_classes, dataset.side, np.random.default_rng([cfg.seed, 0]),
                                   T=sched.T, hidden=ms.hidden, depth=ms.depth, temb_dim=ms.temb_dim,
                                   cemb_dim=ms.cemb_dim, dtype=np.dtype(ms.dtype))
    _, curve = denoiser.train_denoiser(model, dataset, sched, ts.steps, lr=ts.lr, cond_drop_prob=ts.cond_drop_prob,
                                       batch_size=ts.batch_size, rng=np.random.default_rng([cfg.seed, 1]),
                                       seed=cfg.seed, log_every=max(1, ts.steps // 20))
    out = _fresh_dir(resolve_output(cfg, f"train-denoiser-seed{cfg.seed}"))
    (out / "config.json").write_text(cfg.to_json())
    io.save_checkpoint(out / "checkpoint", model, sched, hparams={**ts.model_dump(), "seed": cfg.seed},
                       extra={"dataset": cfg.dataset.model_dump()})
    io.write_csv(out / "loss_curve.csv", ({"step": i, "loss": v} for i, v in enumerate(curve)), ("step", "loss"))
    window = max(1, min(50, len(curve) // 10 or 1))
    sm = denoiser.smooth(curve, window)
    summary = {"steps": ts.steps, "initial_loss": float(sm[0]) if len(sm) else math.nan,
               "final_loss": float(sm[-1]) if len(sm) else math.nan, "smoothing_window": window}
    _write_json(out / "summary.json", summary)
    io.save_png(out / "class_means.png",
                io.contact_sheet([dataset.class_mean_image(k) for k in range(dataset.num_classes)]))
    log.info("checkpoint written to %s (loss %.4f -> %.4f)", out / "checkpoint",
             summary["initial_loss"], summary["final_loss"])
    return out


# -- roundtrip --------------------------------------------------------------------

def cmd_roundtrip(cfg: RunConfig) -> Path:
    model, sched, dataset = load_checkpoint(cfg)
    rs = cfg.roundtrip
    model = model.astype(np.dtype(rs.dtype))
    eps = denoiser.eps_fn(model)
    rng = np.random.default_rng([cfg.seed, 3])
    s_max = sched.T - max(rs.delta_T)
    states = []
    for i in range(rs.n_states):
        x0 = dataset.data[rng.integers(len(dataset))].astype(model.dtype)
        s = int(rng.integers(1, s_max + 1))
        noise = rng.standard_normal(x0.shape).astype(model.dtype)
        states.append((s, q_sample(x0, s, noise, sched).astype(model.dtype)))
    rows, summary = [], []
    for d in rs.delta_T:
        naive, coupled = [], []
        for i, (s, x_s) in enumerate(states):
            n_err = naive_roundtrip_error(x_s, s, s + d, eps, sched)
            c_err = coupled_roundtrip_error(x_s, s, s + d, eps, rs.rho, sched)
            rows.append({"delta_T": d, "state": i, "s": s, "t": s + d, "naive_err": n_err, "coupled_err": c_err})
            naive.append(n_err)
            coupled.append(c_err)
        summary.append({"delta_T": d, "median_naive_err": float(np.median(naive)),
                        "median_coupled_err": float(np.median(coupled)), "max_coupled_err": float(np.max(coupled)),
                        "gap_ratio": float(np.median(naive) / max(np.median(coupled), 1e-300))})
    out = _fresh_dir(resolve_output(cfg, f"roundtrip-seed{cfg.seed}"))
    (out / "config.json").write_text(cfg.to_json())
    io.write_csv(out / "roundtrip.csv", rows, ROUNDTRIP_COLUMNS)
    io.write_csv(out / "summary.csv", summary, tuple(summary[0]))
    return out


# -- distill ----------------------------------------------------------------------

def _save_snapshot(path: Path, state: DistillState) -> None:
    io.save_checkpoint(path, adapter=state.adapter, scene=state.store,
                       extra={"iteration": state.iteration, "rng_state": state.rng.bit_generator.state})


def _load_snapshot(path: Path) -> DistillState:
    if not (path / "manifest.json").is_file():
        raise ConfigError(f"no snapshot to resume from at {path}")
    man = io.load_manifest(path)
    rng = np.random.default_rng()
    rng.bit_generator.state = man["extra"]["rng_state"]
    return DistillState(io.load_scene_store(path), io.load_adapter(path), rng, int(man["extra"]["iteration"]))


def summarize_run(run_dir: Path, final_image: np.ndarray, target: np.ndarray, final_window: int) -> dict:
    metrics = io.read_csv(run_dir / "metrics.csv")
    rows = io.read_csv(run_dir / "iterations.csv") if (run_dir / "iterations.csv").exists() else []
    initial = float(metrics[0]["mse"])
    evals = [float(r["mse"]) for r in metrics[1:]]
    final = float(np.mean(evals[-final_window:])) if evals else initial
    e_ism = np.array([float(r["eps_ism"]) for r in rows])
    e_esm = np.array([float(r["eps_esm"]) for r in rows])
    blank = mse(np.zeros_like(target), target)
    return {
        "iterations": len(rows),
        "initial_mse": initial,
        "final_mse": final,
        "last_mse": float(metrics[-1]["mse"]),
        "mse_reduction": 1.0 - final / initial if initial > 0 else math.nan,
        "blank_mse": blank,
        "sharpness": sharpness(final_image),
        "target_sharpness": sharpness(target),
        "mean_eps_ism": float(e_ism.mean()) if len(rows) else math.nan,
        "mean_eps_esm": float(e_esm.mean()) if len(rows) else math.nan,
        "frac_esm_below_ism": float(np.mean(e_esm < e_ism)) if len(rows) else math.nan,
        "diverged": bool(not math.isfinite(final) or final > blank),
    }


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def run_distill(cfg: RunConfig, run_dir: Path, model, sched, dataset, resume: bool = False) -> dict:
    """One distillation run in ``run_dir``; snapshots allow ``resume``."""
    ds = cfg.distill
    dcfg = ds.to_config(cfg.seed)
    dcfg.validate(sched.T)
    if not 0 <= dcfg.target_label < dataset.num_classes:
        raise ConfigError(f"distill.target_label {dcfg.target_label} outside the checkpoint's "
                          f"{dataset.num_classes} classes")
    target = dataset.class_mean_image(dcfg.target_label)
    side = model.side
    snap = run_dir / "snapshot"
    if resume:
        state = _load_snapshot(snap)
    else:
        _fresh_dir(run_dir)
        scene = splat.init_scene(cfg.scene.init, cfg.scene.n_splats, np.random.default_rng([cfg.seed, 2]),
                                 side=side, target=target)
        state = DistillState.fresh(scene, dcfg, model)
        first = splat.render_image(state.scene, side=side)
        io.save_png(run_dir / "initial.png", first)
        io.save_png(run_dir / "target.png", target)
        io.write_csv(run_dir / "metrics.csv", [{"step": 0, "mse": mse(first, target), "sharpness": sharpness(first)}],
                     METRIC_COLUMNS)
        io.write_csv(run_dir / "iterations.csv", [], LOG_COLUMNS)
    (run_dir / ("config.json" if not resume else f"config.resume-{state.iteration}.json")).write_text(cfg.to_json())

    while state.iteration < dcfg.iterations:
        stop = min(dcfg.iterations, (state.iteration // ds.snapshot_every + 1) * ds.snapshot_every)
        rows, metric_rows = [], []

        def on_iteration(st, row):
            rows.append(row)
            if st.iteration % ds.eval_every == 0:
                img = splat.render_image(st.scene, side=side)
                metric_rows.append({"step": st.iteration, "mse": mse(img, target), "sharpness": sharpness(img)})

        try:
            state, _ = distill_loop(state, model, sched, replace(dcfg, iterations=stop), on_iteration=on_iteration)
        finally:
            io.append_csv(run_dir / "iterations.csv", rows, LOG_COLUMNS)
            io.append_csv(run_dir / "metrics.csv", metric_rows, METRIC_COLUMNS)
        _save_snapshot(snap, state)
    if not snap.exists():
        _save_snapshot(snap, state)

    final = splat.render_image(state.scene, side=side)
    io.save_png(run_dir / "final.png", final)
    io.save_png(run_dir / "contact_sheet.png",
                io.contact_sheet([_read_png(run_dir / "initial.png"), final, target]))
    summary = summarize_run(run_dir, final, target, ds.final_window)
    summary.update(loss=ds.loss, seed=cfg.seed, init=cfg.scene.init)
    _write_json(run_dir / "summary.json", summary)
    return summary


def cmd_distill(cfg: RunConfig) -> Path:
    model, sched, dataset = load_checkpoint(cfg)
    if cfg.resume is not None:
        out = Path(cfg.resume)
        summary = run_distill(cfg, out, model, sched, dataset, resume=True)
    else:
        out = resolve_output(cfg, f"distill-{cfg.distill.loss}-seed{cfg.seed}")
        summary = run_distill(cfg, out, model, sched, dataset)
    log.info("mean eps_esm %.6g vs mean eps_ism %.6g (eps_esm < eps_ism on %.1f%% of iterations)",
             summary["mean_eps_esm"], summary["mean_eps_ism"], 100 * summary["frac_esm_below_ism"])
    log.info("render MSE to class mean: %.5f -> %.5f", summary["initial_mse"], summary["final_mse"])
    return out


# -- sweep ------------------------------------------------------------------------

def _guarded_run(args) -> dict:
    cfg, run_dir = args
    try:
        model, sched, dataset = load_checkpoint(cfg)
        s = run_distill(cfg, run_dir, model, sched, dataset)
        s["error"] = ""
    except (NumericError, FloatingPointError, ValueError) as err:
        s = {"initial_mse": math.nan, "final_mse": math.nan, "last_mse": math.nan, "sharpness": math.nan,
             "diverged": True, "error": f"{type(err).__name__}: {err}"}
        log.warning("run %s failed: %s", run_dir, s["error"])
    return s


def _run_all(jobs: list, workers: int) -> list[dict]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_guarded_run, jobs))
    return [_guarded_run(j) for j in jobs]


def _final_or_blank(run_dir: Path, side: int) -> np.ndarray:
    f = run_dir / "final.png"
    return _read_png(f) if f.exists() else np.zeros((side, side))


def cmd_sweep(cfg: RunConfig) -> Path:
    model, _, _ = load_checkpoint(cfg)
    sw = cfg.sweep
    out = _fresh_dir(resolve_output(cfg, f"sweep-{sw.parameter}-seed{cfg.seed}"))
    (out / "config.json").write_text(cfg.to_json())
    jobs, keys = [], []
    for value in sw.typed_values():
        for seed in sw.seeds:
            run_cfg = cfg.replace(**{f"distill.{sw.parameter}": value, "seed": seed, "output_dir": None})
            jobs.append((run_cfg, out / f"{sw.parameter}={value}" / f"seed{seed}"))
            keys.append((value, seed))
    results = _run_all(jobs, sw.workers)
    rows = [{"parameter": sw.parameter, "value": v, "seed": s, **r} for (v, s), r in zip(keys, results)]
    io.write_csv(out / "summary.csv", rows, SWEEP_COLUMNS)
    agg = []
    for value in sw.typed_values():
        runs = [r for r in rows if r["value"] == value]
        agg.append({"parameter": sw.parameter, "value": value, "runs": len(runs),
                    "median_final_mse": float(np.median([r["final_mse"] for r in runs])),
                    "median_sharpness": float(np.median([r["sharpness"] for r in runs])),
                    "any_diverged": any(r["diverged"] for r in runs)})
    io.write_csv(out / "aggregate.csv", agg, tuple(agg[0]))
    medians = [a["median_final_mse"] for a in agg]
    _write_json(out / "spread.json", {"parameter": sw.parameter, "final_mse_spread": float(np.ptp(medians))})
    io.save_png(out / "contact_sheet.png",
                io.contact_sheet([_final_or_blank(out / f"{sw.parameter}={v}" / f"seed{sw.seeds[0]}", model.side)
                                  for v in sw.typed_values()]))
    return out


# -- init-compare -----------------------------------------------------------------

def cmd_init_compare(cfg: RunConfig) -> Path:
    model, _, dataset = load_checkpoint(cfg)
    seeds = cfg.init_compare.seeds
    out = _fresh_dir(resolve_output(cfg, f"init-compare-seed{cfg.seed}"))
    (out / "config.json").write_text(cfg.to_json())
    modes = ("random", "data_fitted")
    jobs, keys = [], []
    for seed in seeds:
        for mode in modes:
            jobs.append((cfg.replace(**{"scene.init": mode, "seed": seed, "output_dir": None}),
                         out / mode / f"seed{seed}"))
            keys.append((seed, mode))
    results = _run_all(jobs, cfg.sweep.workers)
    rows = [{"seed": s, "init": m, **r} for (s, m), r in zip(keys, results)]
    io.write_csv(out / "summary.csv", rows, INIT_COLUMNS)
    med = {m: float(np.median([r["final_mse"] for r in rows if r["init"] == m])) for m in modes}
    verdict = {"median_final_mse_random": med["random"], "median_final_mse_data_fitted": med["data_fitted"],
               "data_fitted_not_worse": bool(med["data_fitted"] <= med["random"]), "seeds": list(seeds)}
    _write_json(out / "comparison.json", verdict)
    target = dataset.class_mean_image(cfg.distill.target_label)
    tiles = []
    for seed in seeds:
        tiles += [_final_or_blank(out / m / f"seed{seed}", model.side) for m in modes] + [target]
    io.save_png(out / "contact_sheet.png", io.contact_sheet(tiles, cols=3))
    log.info("median final MSE: random %.5f, data_fitted %.5f", med["random"], med["data_fitted"])
    return out
