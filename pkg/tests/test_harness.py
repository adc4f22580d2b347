import json
from pathlib import Path

import numpy as np
import pytest

from esmlab import distill, io
from esmlab.diffcore import fingerprint
from esmlab.harness import cli, commands, verify
from esmlab.harness.config import (OUTPUT_ROOT_ENV, SCHEMA_VERSION, ConfigError, RunConfig, build_config,
                                   load_config)

TINY = ["--dataset.n_per_class", "12", "--dataset.side", "16", "--model.hidden", "32", "--model.depth", "2",
        "--model.temb_dim", "16", "--model.cemb_dim", "8", "--train.steps", "150", "--train.batch_size", "16"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def files_of(directory: Path) -> dict[str, bytes]:
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="session")
def ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train-denoiser", *TINY, "--output-dir", out / "run") == 0
    return out / "run" / "checkpoint"


def distill_args(ckpt, out, *extra):
    return ["distill", "--checkpoint", ckpt, "--output-dir", out, "--scene.n_splats", "6", "--iterations", "6",
            "--distill.eval_every", "2", "--distill.final_window", "2", "--distill.delta_S", "100", *extra]


# -- config -----------------------------------------------------------------------

def test_defaults_and_schema_version():
    cfg = RunConfig()
    assert cfg.schema_version == SCHEMA_VERSION == 1
    assert (cfg.distill.rho, cfg.distill.delta_S, cfg.distill.delta_T, cfg.distill.iterations) == (0.93, 200, 50, 5000)
    assert cfg.roundtrip.delta_T == [25, 50, 150, 200]
    assert cfg.sweep.values == [0.1, 0.3, 0.5, 0.7, 0.9]
    assert cfg.distill.to_config(3) == distill.DistillConfig(seed=3)


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"distill": {"rhoo": 0.5}}, {"schema_version": 2},
                                 {"distill": {"rho": 0}}, {"distill": {"loss": "vsd"}},
                                 {"distill": {"t_max": 1200}}, {"sweep": {"parameter": "delta_S", "values": [1.5]}},
                                 {"dataset": {"kind": "npz"}}, {"model": {"temb_dim": 7}},
                                 {"schedule": {"beta_start": 0.1, "beta_end": 0.01}}])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        build_config(bad)


def test_error_names_the_offending_key():
    with pytest.raises(ConfigError, match=r"distill\.rhoo"):
        build_config({"distill": {"rhoo": 0.5}})


def test_json_round_trip_and_input_untouched(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 4, "distill": {"rho": 0.5}}))
    before = f.read_bytes()
    cfg = load_config(f, {"distill.delta_T": "150"})
    assert f.read_bytes() == before
    assert (cfg.seed, cfg.distill.rho, cfg.distill.delta_T) == (4, 0.5, 150)
    again = build_config(json.loads(cfg.to_json()))
    assert again == cfg


def test_replace_revalidates():
    cfg = RunConfig()
    assert cfg.replace(**{"distill.rho": 0.3}).distill.rho == 0.3
    assert cfg.distill.rho == 0.93
    with pytest.raises(ConfigError):
        cfg.replace(**{"distill.rho": 3.0})


def test_missing_or_broken_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


# -- train-denoiser ---------------------------------------------------------------

def test_missing_dataset_is_config_error_and_writes_nothing(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    code = run("train-denoiser", "--dataset.kind", "npz", "--dataset.path", tmp_path / "missing.npz")
    assert code == 1
    assert not (tmp_path / "root").exists()


def test_unknown_flag_is_config_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run("distill", "--distill.rhoo", "1")
    assert exc.value.code == 1


def test_training_is_byte_reproducible(ckpt, tmp_path):
    assert run("train-denoiser", *TINY, "--output-dir", tmp_path / "again") == 0
    assert files_of(tmp_path / "again" / "checkpoint") == files_of(ckpt)
    first = (ckpt.parent / "loss_curve.csv").read_bytes()
    assert (tmp_path / "again" / "loss_curve.csv").read_bytes() == first


def test_training_reduces_loss(ckpt):
    s = json.loads((ckpt.parent / "summary.json").read_text())
    assert s["final_loss"] < s["initial_loss"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_exits_numeric(tmp_path):
    code = run("train-denoiser", *TINY, "--train.lr", "1e30", "--output-dir", tmp_path / "div")
    assert code == 2


def test_npz_dataset(tmp_path):
    imgs = np.random.default_rng(0).uniform(0, 1, (10, 8, 8)).astype(np.float32)
    np.savez(tmp_path / "d.npz", images=imgs, labels=np.arange(10) % 2)
    code = run("train-denoiser", "--dataset.kind", "npz", "--dataset.path", tmp_path / "d.npz", "--model.hidden", 8,
               "--model.depth", 1, "--train.steps", 3, "--train.batch_size", 4, "--output-dir", tmp_path / "o")
    assert code == 0
    man = io.load_manifest(tmp_path / "o" / "checkpoint")
    assert man["model"]["num_classes"] == 2 and man["model"]["side"] == 8


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert run("train-denoiser", *TINY, "--train.steps", "2", "--output-dir", "rel") == 0
    assert (tmp_path / "rel" / "checkpoint" / "manifest.json").is_file()


# -- roundtrip --------------------------------------------------------------------

def test_roundtrip_columns_and_properties(ckpt, tmp_path):
    assert run("roundtrip", "--checkpoint", ckpt, "--roundtrip.n_states", "20", "--output-dir", tmp_path) == 0
    rows = io.read_csv(tmp_path / "roundtrip.csv")
    assert list(rows[0]) == list(commands.ROUNDTRIP_COLUMNS)
    assert len(rows) == 4 * 20
    assert max(float(r["coupled_err"]) for r in rows) < 1e-4
    assert min(float(r["naive_err"]) for r in rows) > 0
    med = [float(r["median_naive_err"]) for r in io.read_csv(tmp_path / "summary.csv")]
    assert med == sorted(med)


def test_roundtrip_missing_checkpoint(tmp_path):
    assert run("roundtrip", "--checkpoint", tmp_path / "none", "--output-dir", tmp_path / "o") == 1
    assert not (tmp_path / "o").exists()


# -- distill ----------------------------------------------------------------------

@pytest.mark.parametrize("loss", ["sds", "ism", "esm"])
def test_distill_accepts_each_loss(loss, ckpt, tmp_path):
    assert run(*distill_args(ckpt, tmp_path, "--loss", loss)) == 0
    for f in ("iterations.csv", "metrics.csv", "summary.json", "initial.png", "final.png", "target.png",
              "contact_sheet.png", "config.json", "snapshot/manifest.json"):
        assert (tmp_path / f).is_file(), f
    rows = io.read_csv(tmp_path / "iterations.csv")
    assert [int(r["iteration"]) for r in rows] == list(range(6))
    assert {r["loss_variant"] for r in rows} == {loss}
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["mean_eps_esm"] == pytest.approx(np.mean([float(r["eps_esm"]) for r in rows]))
    assert s["mean_eps_ism"] == pytest.approx(np.mean([float(r["eps_ism"]) for r in rows]))


def test_distill_rejects_unknown_loss(ckpt, tmp_path):
    assert run(*distill_args(ckpt, tmp_path / "x", "--loss", "vsd")) == 1


def test_distill_replayable_and_checkpoint_untouched(ckpt, tmp_path):
    before = files_of(ckpt)
    run(*distill_args(ckpt, tmp_path / "a"))
    run(*distill_args(ckpt, tmp_path / "b"))
    for name in ("iterations.csv", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert files_of(ckpt) == before


def test_resume_continues_numbering(ckpt, tmp_path):
    run(*distill_args(ckpt, tmp_path / "whole"))
    run(*distill_args(ckpt, tmp_path / "part", "--iterations", "4", "--distill.snapshot_every", "4"))
    assert run("distill", "--resume", tmp_path / "part", "--iterations", "6") == 0
    rows = io.read_csv(tmp_path / "part" / "iterations.csv")
    assert [int(r["iteration"]) for r in rows] == list(range(6))
    for name in ("iterations.csv", "metrics.csv", "summary.json"):
        assert (tmp_path / "part" / name).read_bytes() == (tmp_path / "whole" / name).read_bytes()


def test_resume_without_snapshot(ckpt, tmp_path):
    assert run("distill", "--checkpoint", ckpt, "--resume", tmp_path) == 1


def test_nan_gradient_exits_numeric(ckpt, tmp_path, monkeypatch):
    monkeypatch.setattr(distill, "predict", lambda model, x, *a, **k: np.full(np.shape(x), np.nan))
    assert run(*distill_args(ckpt, tmp_path, "--loss", "ism")) == 2


def test_zero_iterations(ckpt, tmp_path):
    assert run(*distill_args(ckpt, tmp_path, "--iterations", "0")) == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["iterations"] == 0 and s["final_mse"] == s["initial_mse"]


# -- sweep / init-compare ---------------------------------------------------------

def test_singleton_sweep_matches_distill(ckpt, tmp_path):
    run(*distill_args(ckpt, tmp_path / "single", "--distill.rho", "0.5"))
    args = distill_args(ckpt, tmp_path / "sweep")
    args[0] = "sweep"
    assert run(*args, "--parameter", "rho", "--values", "0.5") == 0
    sub = tmp_path / "sweep" / "rho=0.5" / "seed0"
    for name in ("iterations.csv", "metrics.csv", "summary.json"):
        assert (sub / name).read_bytes() == (tmp_path / "single" / name).read_bytes()
    rows = io.read_csv(tmp_path / "sweep" / "summary.csv")
    assert len(rows) == 1 and rows[0]["diverged"] == "False"
    assert (tmp_path / "sweep" / "contact_sheet.png").is_file()


def test_sweep_records_failures_and_continues(ckpt, tmp_path, monkeypatch):
    real = commands.run_distill

    def flaky(cfg, *a, **k):
        if cfg.distill.delta_T == 25:
            raise distill.NumericError("boom")
        return real(cfg, *a, **k)

    monkeypatch.setattr(commands, "run_distill", flaky)
    args = distill_args(ckpt, tmp_path)
    args[0] = "sweep"
    assert run(*args, "--parameter", "delta_T", "--values", "25,150") == 0
    rows = io.read_csv(tmp_path / "summary.csv")
    assert [r["value"] for r in rows] == ["25", "150"]
    assert rows[0]["diverged"] == "True" and "boom" in rows[0]["error"]
    assert rows[1]["diverged"] == "False" and rows[1]["error"] == ""
    agg = io.read_csv(tmp_path / "aggregate.csv")
    assert [a["any_diverged"] for a in agg] == ["True", "False"]


def test_sweep_median_over_seeds(ckpt, tmp_path):
    args = distill_args(ckpt, tmp_path)
    args[0] = "sweep"
    assert run(*args, "--parameter", "delta_S", "--values", "50,100", "--seeds", "0,1,2") == 0
    rows = io.read_csv(tmp_path / "summary.csv")
    agg = io.read_csv(tmp_path / "aggregate.csv")
    for a in agg:
        vals = [float(r["final_mse"]) for r in rows if r["value"] == a["value"]]
        assert len(vals) == 3 and float(a["median_final_mse"]) == np.median(vals)
    spread = json.loads((tmp_path / "spread.json").read_text())["final_mse_spread"]
    assert spread == pytest.approx(np.ptp([float(a["median_final_mse"]) for a in agg]))


def test_init_compare_pairs_runs(ckpt, tmp_path):
    args = distill_args(ckpt, tmp_path)
    args[0] = "init-compare"
    assert run(*args, "--init_compare.seeds", "0,1") == 0
    rows = io.read_csv(tmp_path / "summary.csv")
    assert [(r["seed"], r["init"]) for r in rows] == [("0", "random"), ("0", "data_fitted"),
                                                     ("1", "random"), ("1", "data_fitted")]
    for seed in (0, 1):
        ts = [[r["t"] for r in io.read_csv(tmp_path / m / f"seed{seed}" / "iterations.csv")]
              for m in ("random", "data_fitted")]
        assert ts[0] == ts[1]
    verdict = json.loads((tmp_path / "comparison.json").read_text())
    meds = {m: np.median([float(r["final_mse"]) for r in rows if r["init"] == m]) for m in ("random", "data_fitted")}
    assert verdict["median_final_mse_random"] == meds["random"]
    assert verdict["data_fitted_not_worse"] == (meds["data_fitted"] <= meds["random"])
    assert (tmp_path / "contact_sheet.png").is_file()


def test_divergence_flag_definition(tmp_path):
    target = np.full((4, 4), 0.5)
    io.write_csv(tmp_path / "metrics.csv", [{"step": 0, "mse": 0.3, "sharpness": 0}, {"step": 1, "mse": 0.3,
                                                                                     "sharpness": 0}],
                 commands.METRIC_COLUMNS)
    io.write_csv(tmp_path / "iterations.csv", [], distill.LOG_COLUMNS)
    s = commands.summarize_run(tmp_path, np.zeros((4, 4)), target, 1)
    assert s["blank_mse"] == 0.25 and s["diverged"]


def test_sharpness_metric():
    assert commands.sharpness(np.ones((5, 5))) == 0.0
    img = np.zeros((2, 2))
    img[0, 0] = 1.0
    assert commands.sharpness(img) == 0.5


# -- verify -----------------------------------------------------------------------

def test_verify_passes_and_reports_csv(tmp_path, capsys):
    assert run("verify", "--output-dir", tmp_path) == 0
    rows = io.read_csv(tmp_path / "verify.csv")
    assert list(rows[0]) == list(verify.REPORT_COLUMNS)
    assert len(rows) == len(verify.CHECKS) and all(r["passed"] == "True" for r in rows)
    assert {r["module"] for r in rows} >= {"diffcore", "schedule", "denoiser", "lora", "inversion", "splat",
                                           "distill", "harness"}


def test_verify_catches_flipped_mixing_sign(tmp_path, capsys):
    assert run("verify", "--output-dir", tmp_path, "--inject-fault", "mix-sign") == 3
    failed = {r["property"] for r in io.read_csv(tmp_path / "verify.csv") if r["passed"] == "False"}
    assert "mixing_identity" in failed
    assert "FAIL  inversion.mixing_identity" in capsys.readouterr().out
    from esmlab import inversion
    assert inversion.mix.__name__ == "mix"


def test_verify_report_is_replayable(tmp_path):
    run("verify", "--output-dir", tmp_path / "a")
    run("verify", "--output-dir", tmp_path / "b")
    assert (tmp_path / "a" / "verify.csv").read_bytes() == (tmp_path / "b" / "verify.csv").read_bytes()
