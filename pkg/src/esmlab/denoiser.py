"""Conditional MLP noise predictor, classifier-free blending, and the
closed-form optimal denoiser for Gaussian data."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, NumericError, ParamStore
from .schedule import NoiseSchedule, q_sample_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Condition:
    kind: str = "null"
    label_id: int | None = None

    @classmethod
    def null(cls) -> "Condition":
        return cls("null", None)

    @classmethod
    def label(cls, label_id: int) -> "Condition":
        return cls("label", int(label_id))


NULL = Condition.null()


def timestep_embedding(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal features of t / T, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(100.0), half))
    ang = t[:, None] * freqs[None, :] * np.pi
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserModel:
    params: ParamStore
    num_classes: int
    side: int
    T: int = 1000
    hidden: int = 256
    depth: int = 3
    temb_dim: int = 64
    cemb_dim: int = 32
    hparams: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.side * self.side

    @property
    def null_id(self) -> int:
        return self.num_classes

    @property
    def dtype(self):
        return self.params["out.w"].dtype

    def layer_names(self) -> list[str]:
        return [f"l{i}" for i in range(self.depth)] + ["out"]

    def astype(self, dtype) -> "DenoiserModel":
        return DenoiserModel(self.params.astype(dtype), self.num_classes, self.side, self.T,
                             self.hidden, self.depth, self.temb_dim, self.cemb_dim, dict(self.hparams))

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.params.copy(), self.num_classes, self.side, self.T,
                             self.hidden, self.depth, self.temb_dim, self.cemb_dim, dict(self.hparams))

    def spec(self) -> dict:
        return {"num_classes": self.num_classes, "side": self.side, "T": self.T, "hidden": self.hidden,
                "depth": self.depth, "temb_dim": self.temb_dim, "cemb_dim": self.cemb_dim}


def init_denoiser(num_classes: int, side: int, rng: np.random.Generator, T: int = 1000, hidden: int = 256,
                  depth: int = 3, temb_dim: int = 64, cemb_dim: int = 32, zero_out: bool = True,
                  dtype=np.float32) -> DenoiserModel:
    """Fresh MLP; the output layer starts at zero unless ``zero_out`` is False."""
    if depth < 1:
        raise ContractError("depth must be >= 1")
    p = ParamStore()
    p.add("class_emb", rng.standard_normal((num_classes + 1, cemb_dim)).astype(dtype))
    fan_in = side * side + temb_dim + cemb_dim
    for i in range(depth):
        # time features are re-injected into every hidden layer
        n_in = fan_in if i == 0 else hidden + temb_dim
        p.add(f"l{i}.w", (rng.standard_normal((hidden, n_in)) / np.sqrt(n_in)).astype(dtype))
        p.add(f"l{i}.b", np.zeros(hidden, dtype=dtype))
    out_w = rng.standard_normal((side * side, hidden)) / np.sqrt(hidden)
    p.add("out.w", (np.zeros_like(out_w) if zero_out else out_w).astype(dtype))
    p.add("out.b", np.zeros(side * side, dtype=dtype))
    # time-dependent per-pixel gain on the input; part of the zero-initialized head
    p.add("skip.w", np.zeros((side * side, temb_dim), dtype=dtype))
    return DenoiserModel(p, num_classes, side, T, hidden, depth, temb_dim, cemb_dim)


def _layer(h, params, name, adapter):
    y = dc.linear(h, params[f"{name}.w"], params[f"{name}.b"])
    if adapter is not None and name in adapter.layers:
        a, b = adapter.params[f"{name}.A"], adapter.params[f"{name}.B"]
        y = y + dc.linear(dc.linear(h, a), b) * adapter.scale
    return y


def forward(model: DenoiserModel, params: Mapping, x, t, labels, adapter=None) -> dc.Var:
    """Tape-recorded forward pass on flat inputs.

    ``params`` maps names to arrays or Vars so callers choose what to
    differentiate; ``adapter`` optionally carries LoRA factors (see lora.py).
    """
    x = dc._wrap(x)
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    temb = timestep_embedding(t, model.temb_dim, model.T).astype(x.value.dtype)
    cemb = dc.take_rows(params["class_emb"], np.broadcast_to(np.asarray(labels), (B,)))
    h = dc.concat([x, temb, cemb], axis=1)
    for i in range(model.depth):
        if i > 0:
            h = dc.concat([h, temb], axis=1)
        h = dc.silu(_layer(h, params, f"l{i}", adapter))
    return _layer(h, params, "out", adapter) + x * dc.linear(temb, params["skip.w"])


def _eps_raw(model: DenoiserModel, x: np.ndarray, t, label_ids, adapter=None) -> np.ndarray:
    shape = x.shape
    flat = x.reshape(-1, model.dim).astype(model.dtype, copy=False)
    with dc.no_grad():
        out = forward(model, model.params.values, flat, t, label_ids, adapter).value
    return out.reshape(shape)


def _check_timestep(t, T):
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise ContractError(f"denoiser timestep must lie in [1, {T}], got {t}")


def predict_eps(model: DenoiserModel, x: np.ndarray, t, c: Condition = NULL, guidance: float = 1.0,
                adapter=None) -> np.ndarray:
    """Noise estimate for latent(s) ``x`` of shape (side, side) or (B, side, side).

    For a label condition and guidance g != 1 the conditional and null
    branches are blended as e_null + g (e_cond - e_null).
    """
    _check_timestep(t, model.T)
    if c.kind == "label":
        if not 0 <= c.label_id < model.num_classes:
            raise ContractError(f"label {c.label_id} out of range")
        e_c = _eps_raw(model, x, t, c.label_id, adapter)
        if guidance == 1.0:
            return e_c
        e_n = _eps_raw(model, x, t, model.null_id, adapter)
        return e_n + guidance * (e_c - e_n)
    return _eps_raw(model, x, t, model.null_id, adapter)


def predict(model, x: np.ndarray, t, c: Condition = NULL, guidance: float = 1.0, adapter=None) -> np.ndarray:
    """Dispatch to the MLP or to any object exposing ``predict(x, t, c, guidance)``."""
    if isinstance(model, DenoiserModel):
        return predict_eps(model, x, t, c, guidance, adapter)
    if adapter is not None:
        raise ContractError("adapters need a DenoiserModel base")
    return model.predict(x, t, c, guidance)


def eps_fn(model, c: Condition = NULL, guidance: float = 1.0, adapter=None):
    """Bind a predictor to a condition: returns f(x, t) -> eps."""
    return lambda x, t: predict(model, x, t, c, guidance, adapter)


@dataclass(frozen=True)
class GaussianOracle:
    mu: np.ndarray
    var_d: float

    def __post_init__(self):
        if not self.var_d > 0:
            raise ContractError("var_d must be positive")


def oracle_eps(oracle: GaussianOracle, x: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Posterior-mean noise for data ~ N(mu, var_d I); affine in x."""
    if int(t) < 1:
        raise ContractError("oracle timestep must be >= 1")
    ab = sched.alpha_bar[int(t)]
    mu = np.asarray(oracle.mu)
    out = np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * mu) / (ab * oracle.var_d + 1.0 - ab)
    return out.astype(np.result_type(x, np.float32), copy=False)


def oracle_fn(oracle: GaussianOracle, sched: NoiseSchedule):
    return lambda x, t: oracle_eps(oracle, x, t, sched)


@dataclass
class OracleModel:
    """Analytic conditional predictor: one Gaussian oracle per label and one for the null condition."""

    sched: NoiseSchedule
    null: GaussianOracle
    by_label: dict[int, GaussianOracle]
    side: int
    dtype: type = np.float64

    def predict(self, x, t, c: Condition = NULL, guidance: float = 1.0) -> np.ndarray:
        e_null = oracle_eps(self.null, x, t, self.sched)
        if c.kind != "label":
            return e_null
        e_c = oracle_eps(self.by_label[c.label_id], x, t, self.sched)
        return e_c if guidance == 1.0 else e_null + guidance * (e_c - e_null)


def denoising_loss(model: DenoiserModel, params: Mapping, x0, t, labels, noise, sched: NoiseSchedule,
                   adapter=None) -> dc.Var:
    """Mean squared error between predicted and true noise on flat latents."""
    xt = q_sample_batch(x0, t, noise, sched)
    pred = forward(model, params, xt, t, labels, adapter)
    return dc.mean(dc.square(pred - noise))


def smooth(curve, window: int = 50) -> np.ndarray:
    curve = np.asarray(curve, dtype=np.float64)
    if len(curve) == 0:
        return curve
    w = max(1, min(window, len(curve)))
    c = np.cumsum(np.insert(curve, 0, 0.0))
    return (c[w:] - c[:-w]) / w


def train_denoiser(model: DenoiserModel, dataset, sched: NoiseSchedule, steps: int, lr: float = 1e-3,
                   cond_drop_prob: float = 0.1, batch_size: int = 64, rng: np.random.Generator | None = None,
                   seed: int | None = None, log_every: int = 0):
    """Denoising score matching on ``dataset``; returns (model, loss curve).

    Mutates ``model.params`` in place.
    """
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    if not 0.0 <= cond_drop_prob <= 1.0:
        raise ContractError("cond_drop_prob must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(seed)
    data = dataset.data.reshape(len(dataset), -1).astype(model.dtype)
    labels = np.asarray(dataset.labels)
    curve: list[float] = []
    for step in range(steps):
        idx = rng.integers(0, len(data), size=batch_size)
        x0 = data[idx]
        t = rng.integers(1, sched.T + 1, size=batch_size)
        noise = rng.standard_normal(x0.shape).astype(model.dtype)
        lab = np.where(rng.random(batch_size) < cond_drop_prob, model.null_id, labels[idx])
        loss, grads = dc.value_and_grad(
            lambda p: denoising_loss(model, p, x0, t, lab, noise, sched), model.params)
        if not np.isfinite(loss):
            raise NumericError(f"denoiser training diverged at step {step} (seed={seed})")
        model.params.set_grads(grads)
        dc.adam_step(model.params, lr)
        curve.append(loss)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, loss)
    return model, curve
