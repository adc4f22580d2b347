"""Low-rank adapter over the denoiser's linear layers, and its online update."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .denoiser import NULL, Condition, DenoiserModel, denoising_loss, predict_eps
from .diffcore import ContractError, NumericError, ParamStore
from .schedule import NoiseSchedule


@dataclass
class LoraAdapter:
    """Per-layer factors A (rank x in) and B (out x rank); W_eff = W + scale * B @ A."""

    params: ParamStore
    layers: tuple[str, ...]
    rank: int
    scale: float = 1.0

    def delta(self, layer: str) -> np.ndarray:
        return self.scale * self.params[f"{layer}.B"] @ self.params[f"{layer}.A"]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.params.copy(), self.layers, self.rank, self.scale)

    def astype(self, dtype) -> "LoraAdapter":
        return LoraAdapter(self.params.astype(dtype), self.layers, self.rank, self.scale)


def init_adapter(base: DenoiserModel, rng: np.random.Generator, rank: int = 4, scale: float = 1.0,
                 layers=None) -> LoraAdapter:
    """A ~ N(0, 1/in), B = 0, so the adapted predictor starts equal to the base."""
    layers = tuple(base.layer_names() if layers is None else layers)
    p = ParamStore()
    for name in layers:
        out_dim, in_dim = base.params[f"{name}.w"].shape
        if not 1 <= rank < min(in_dim, out_dim):
            raise ContractError(f"rank {rank} incompatible with layer {name} of shape {(out_dim, in_dim)}")
        p.add(f"{name}.A", (rng.standard_normal((rank, in_dim)) / np.sqrt(in_dim)).astype(base.dtype))
        p.add(f"{name}.B", np.zeros((out_dim, rank), dtype=base.dtype))
    return LoraAdapter(p, layers, rank, scale)


def check_compatible(base: DenoiserModel, adapter: LoraAdapter) -> None:
    for name in adapter.layers:
        w = base.params[f"{name}.w"]
        a, b = adapter.params[f"{name}.A"], adapter.params[f"{name}.B"]
        if a.shape[1] != w.shape[1] or b.shape[0] != w.shape[0] or a.shape[0] != b.shape[1]:
            raise ContractError(f"adapter factors for {name} do not match weight {w.shape}")


def predict_eps_lora(base: DenoiserModel, adapter: LoraAdapter, x: np.ndarray, t, c: Condition = NULL) -> np.ndarray:
    check_compatible(base, adapter)
    return predict_eps(base, x, t, c, 1.0, adapter)


def lora_eps_fn(base: DenoiserModel, adapter: LoraAdapter, c: Condition = NULL):
    return lambda x, t: predict_eps_lora(base, adapter, x, t, c)


class _Bound:
    """Adapter view whose factors are tape Vars, so the forward pass differentiates them."""

    def __init__(self, adapter: LoraAdapter, leaves):
        self.layers, self.scale, self.params = adapter.layers, adapter.scale, leaves


def lora_loss_and_grad(base: DenoiserModel, adapter: LoraAdapter, x0: np.ndarray, tau, noise,
                       sched: NoiseSchedule, label: int | None = None):
    """Denoising loss of the adapted model on ``x0`` at fixed (tau, noise); grads w.r.t. A, B only."""
    flat = np.asarray(x0, dtype=base.dtype).reshape(-1, base.dim)
    tau = np.atleast_1d(tau)
    flat = np.broadcast_to(flat, (len(tau), base.dim))
    noise = np.asarray(noise, dtype=base.dtype).reshape(len(tau), base.dim)
    lab = base.null_id if label is None else label
    return dc.value_and_grad(
        lambda leaves: denoising_loss(base, base.params.values, flat, tau, lab, noise, sched,
                                      adapter=_Bound(adapter, leaves)),
        adapter.params)


def lora_train_step(base: DenoiserModel, adapter: LoraAdapter, x0_render: np.ndarray, sched: NoiseSchedule,
                    lr: float, rng: np.random.Generator, batch_size: int = 1) -> tuple[LoraAdapter, float]:
    """One Adam step on the adapter's factors; the base model is never written."""
    tau = rng.integers(1, sched.T + 1, size=batch_size)
    noise = rng.standard_normal((batch_size, base.dim))
    loss, grads = lora_loss_and_grad(base, adapter, x0_render, tau, noise, sched)
    if not np.isfinite(loss):
        raise NumericError(f"LoRA loss is non-finite (tau={tau.tolist()})")
    adapter.params.set_grads(grads)
    dc.adam_step(adapter.params, lr)
    return adapter, loss
