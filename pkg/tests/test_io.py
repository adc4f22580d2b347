import json

import numpy as np
import pytest
from PIL import Image

from esmlab import io, lora, splat
from esmlab.diffcore import adam_step, fingerprint


def test_checkpoint_round_trip(random_model, sched, tmp_path):
    io.save_checkpoint(tmp_path / "ck", random_model, sched, hparams={"lr": 1e-3}, extra={"note": "x"})
    model, s2, man = io.load_denoiser(tmp_path / "ck")
    assert fingerprint(model.params) == fingerprint(random_model.params.astype(np.float32))
    assert s2.to_dict() == sched.to_dict()
    assert np.array_equal(s2.alpha_bar, sched.alpha_bar)
    assert man["hyperparameters"] == {"lr": 1e-3} and man["extra"] == {"note": "x"}
    assert model.spec() == random_model.spec()


def test_checkpoint_is_byte_deterministic(random_model, sched, tmp_path):
    for d in ("a", "b"):
        io.save_checkpoint(tmp_path / d, random_model, sched)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_blobs_are_little_endian_float32(random_model, sched, tmp_path):
    io.save_checkpoint(tmp_path, random_model, sched)
    man = json.loads((tmp_path / "manifest.json").read_text())
    entry = man["namespaces"]["denoiser"]["out.b"]
    raw = np.frombuffer((tmp_path / entry["file"]).read_bytes(), dtype="<f4")
    np.testing.assert_array_equal(raw, random_model.params["out.b"].astype(np.float32).ravel())


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        io.load_manifest(tmp_path / "nothing")


def test_adapter_and_scene_with_optimizer_state(random_model, tmp_path):
    model = random_model.astype(np.float32)
    ad = lora.init_adapter(model, np.random.default_rng(0), rank=3)
    rng = np.random.default_rng(1)
    ad.params.set_grads({n: rng.standard_normal(ad.params[n].shape).astype(np.float32) for n in ad.params.names()})
    adam_step(ad.params, 1e-3)
    scene = splat.init_scene("random", 5, rng, side=8)
    from esmlab.distill import scene_store
    store = scene_store(scene)
    store.set_grads({n: np.ones_like(store[n]) for n in store.names()})
    adam_step(store, 1e-2)
    io.save_checkpoint(tmp_path, adapter=ad, scene=store)
    ad2, st2 = io.load_adapter(tmp_path), io.load_scene_store(tmp_path)
    assert fingerprint(ad2.params) == fingerprint(ad.params)
    assert (ad2.layers, ad2.rank, ad2.scale, ad2.params.step) == (ad.layers, ad.rank, ad.scale, 1)
    assert fingerprint(st2) == fingerprint(store) and st2.step == 1
    for n in store.names():
        for a, b in zip(store.moments[n], st2.moments[n]):
            np.testing.assert_array_equal(a, b)


def test_no_adapter_loads_as_none(random_model, sched, tmp_path):
    io.save_checkpoint(tmp_path, random_model, sched)
    assert io.load_adapter(tmp_path) is None


def test_png_is_8bit_grayscale(tmp_path):
    img = np.linspace(-0.5, 1.5, 64).reshape(8, 8)
    io.save_png(tmp_path / "a.png", img)
    with Image.open(tmp_path / "a.png") as im:
        assert im.mode == "L" and im.size == (8, 8)
        data = np.asarray(im)
    assert data.min() == 0 and data.max() == 255
    io.save_png(tmp_path / "c.png", np.zeros((4, 4, 3)))
    with Image.open(tmp_path / "c.png") as im:
        assert im.mode == "RGB"


def test_contact_sheet_layout():
    sheet = io.contact_sheet([np.zeros((4, 4))] * 5, cols=2, pad=1)
    assert sheet.shape == (3 * 5 + 1, 2 * 5 + 1)
    with pytest.raises(ValueError):
        io.contact_sheet([])


def test_csv_header_quoting_and_exact_floats(tmp_path):
    rows = [{"a": 0.1 + 0.2, "b": 'say "hi", twice', "c": np.int64(3)}, {"a": np.float32(1.5), "b": "", "c": 4}]
    io.write_csv(tmp_path / "x.csv", rows, ("a", "b", "c"))
    text = (tmp_path / "x.csv").read_text()
    assert text.splitlines()[0] == "a,b,c"
    assert '"say ""hi"", twice"' in text
    back = io.read_csv(tmp_path / "x.csv")
    assert float(back[0]["a"]) == 0.1 + 0.2 and back[0]["b"] == 'say "hi", twice' and back[1]["c"] == "4"


def test_append_csv_writes_header_once(tmp_path):
    for k in range(3):
        io.append_csv(tmp_path / "y.csv", [{"k": k}], ("k",))
    assert (tmp_path / "y.csv").read_text().splitlines() == ["k", "0", "1", "2"]
