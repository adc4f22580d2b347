"""Checkpoints (JSON manifest + little-endian float32 blobs), PNG and CSV output."""
from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .denoiser import DenoiserModel
from .diffcore import ParamStore
from .lora import LoraAdapter
from .schedule import NoiseSchedule
from .splat import PARAM_FIELDS, SplatScene

FORMAT_VERSION = 1
_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


def _blob_name(namespace: str, name: str) -> str:
    return _SAFE.sub("_", f"{namespace}.{name}") + ".f32"


def write_tensors(directory: Path, namespace: str, tensors: Mapping[str, np.ndarray]) -> dict:
    entries = {}
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        fname = _blob_name(namespace, name)
        (directory / fname).write_bytes(arr.tobytes())
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    return entries


def read_tensors(directory: Path, entries: Mapping[str, dict]) -> dict[str, np.ndarray]:
    out = {}
    for name, e in entries.items():
        raw = np.frombuffer((directory / e["file"]).read_bytes(), dtype="<f4")
        out[name] = raw.reshape(e["shape"]).astype(np.float32)
    return out


def _moment_tensors(store: ParamStore) -> dict[str, np.ndarray]:
    out = {}
    for name, (m, v) in store.moments.items():
        out[f"{name}.m"] = m
        out[f"{name}.v"] = v
    return out


def _restore_moments(store: ParamStore, tensors: Mapping[str, np.ndarray]) -> None:
    for name in store.names():
        if f"{name}.m" in tensors:
            store.moments[name] = (tensors[f"{name}.m"], tensors[f"{name}.v"])


def save_checkpoint(path, model: DenoiserModel | None = None, sched: NoiseSchedule | None = None,
                    adapter: LoraAdapter | None = None, scene: ParamStore | SplatScene | None = None,
                    hparams: Mapping | None = None, extra: Mapping | None = None) -> Path:
    """Write a checkpoint directory; the manifest is deterministic for fixed inputs."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"format_version": FORMAT_VERSION, "namespaces": {}}
    if sched is not None:
        manifest["schedule"] = sched.to_dict()
    if hparams is not None:
        manifest["hyperparameters"] = dict(hparams)
    if model is not None:
        manifest["model"] = model.spec()
        manifest["namespaces"]["denoiser"] = write_tensors(path, "denoiser", model.params.values)
    if adapter is not None:
        manifest["lora"] = {"layers": list(adapter.layers), "rank": adapter.rank, "scale": adapter.scale,
                            "step": adapter.params.step}
        manifest["namespaces"]["lora"] = write_tensors(path, "lora", adapter.params.values)
        manifest["namespaces"]["lora_adam"] = write_tensors(path, "lora_adam", _moment_tensors(adapter.params))
    if scene is not None:
        store = scene if isinstance(scene, ParamStore) else None
        values = store.values if store is not None else scene.as_dict()
        manifest["namespaces"]["scene"] = write_tensors(path, "scene", values)
        if store is not None:
            manifest["scene_step"] = store.step
            manifest["namespaces"]["scene_adam"] = write_tensors(path, "scene_adam", _moment_tensors(store))
    if extra is not None:
        manifest["extra"] = dict(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    f = path / "manifest.json"
    if not f.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {f}")
    return json.loads(f.read_text())


def load_denoiser(path) -> tuple[DenoiserModel, NoiseSchedule, dict]:
    path = Path(path)
    man = load_manifest(path)
    spec = man["model"]
    store = ParamStore()
    for name, v in read_tensors(path, man["namespaces"]["denoiser"]).items():
        store.add(name, v)
    model = DenoiserModel(store, spec["num_classes"], spec["side"], spec["T"], spec["hidden"], spec["depth"],
                          spec["temb_dim"], spec["cemb_dim"], dict(man.get("hyperparameters", {})))
    return model, NoiseSchedule.from_dict(man["schedule"]), man


def load_adapter(path) -> LoraAdapter | None:
    path = Path(path)
    man = load_manifest(path)
    if "lora" not in man:
        return None
    store = ParamStore(step=man["lora"].get("step", 0))
    for name, v in read_tensors(path, man["namespaces"]["lora"]).items():
        store.add(name, v)
    _restore_moments(store, read_tensors(path, man["namespaces"].get("lora_adam", {})))
    return LoraAdapter(store, tuple(man["lora"]["layers"]), man["lora"]["rank"], man["lora"]["scale"])


def load_scene_store(path) -> ParamStore:
    path = Path(path)
    man = load_manifest(path)
    tensors = read_tensors(path, man["namespaces"]["scene"])
    store = ParamStore(step=man.get("scene_step", 0))
    for name in PARAM_FIELDS:
        store.add(name, tensors[name])
    _restore_moments(store, read_tensors(path, man["namespaces"].get("scene_adam", {})))
    return store


def save_png(path, image: np.ndarray) -> Path:
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L" if data.ndim == 2 else "RGB").save(path)
    return Path(path)


def contact_sheet(images: Iterable[np.ndarray], cols: int | None = None, pad: int = 2) -> np.ndarray:
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("contact sheet needs at least one image")
    h, w = images[0].shape[:2]
    cols = cols or len(images)
    rows = -(-len(images) // cols)
    sheet = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad) + images[0].shape[2:])
    for k, im in enumerate(images):
        r, c = divmod(k, cols)
        sheet[pad + r * (h + pad): pad + r * (h + pad) + h, pad + c * (w + pad): pad + c * (w + pad) + w] = im
    return sheet


def write_csv(path, rows: Iterable[Mapping], columns: Iterable[str]) -> Path:
    columns = list(columns)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in columns})
    return Path(path)


def append_csv(path, rows: Iterable[Mapping], columns: Iterable[str]) -> None:
    columns = list(columns)
    new = not Path(path).exists()
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in columns})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
