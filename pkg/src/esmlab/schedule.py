"""Discrete noise schedule and the deterministic DDIM transitions built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ContractError, Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficient tables indexed by absolute timestep; ``alpha_bar[0] == 1``.

    ``beta``, ``alpha`` and ``sigma`` carry a leading unused slot at index 0 so
    that every table is addressed by the same timestep.
    """

    T: int
    beta_start: float
    beta_end: float
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def sqrt_ab(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[t]))

    def sqrt_1m_ab(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return build_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]), d.get("kind", "linear"))


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2,
                   kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ContractError(f"unsupported schedule kind {kind!r}")
    if T < 2:
        raise ContractError("T must be at least 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ContractError("need 0 < beta_start <= beta_end < 1")
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # DDPM-equivalent variance; sigma[0] stays 0.
    sigma = np.zeros(T + 1, dtype=np.float64)
    sigma[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), kind, beta, alpha, alpha_bar, sigma)


def _check_t(t: int, sched: NoiseSchedule, lo: int = 0) -> int:
    t = int(t)
    if not lo <= t <= sched.T:
        raise ContractError(f"timestep {t} outside [{lo}, {sched.T}]")
    return t


def q_sample(x0: Tensor, t: int, noise: Tensor, sched: NoiseSchedule) -> Tensor:
    """Forward marginal sqrt(ab_t) x0 + sqrt(1 - ab_t) noise; identity at t = 0."""
    t = _check_t(t, sched)
    if t == 0:
        return x0
    if np.shape(noise) != np.shape(x0):
        raise ContractError("noise and x0 must share a shape")
    dt = np.result_type(x0, noise)
    return (sched.sqrt_ab(t) * x0 + sched.sqrt_1m_ab(t) * noise).astype(dt, copy=False)


def q_sample_batch(x0: Tensor, t: np.ndarray, noise: Tensor, sched: NoiseSchedule) -> Tensor:
    """Row-wise q_sample for a batch with per-row timesteps."""
    ab = sched.alpha_bar[np.asarray(t)].reshape(-1, *([1] * (x0.ndim - 1)))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(x0.dtype, copy=False)


def ddim_transition(x: Tensor, eps: Tensor, t_from: int, t_to: int, sched: NoiseSchedule) -> Tensor:
    """Deterministic DDIM map between any two timesteps for a fixed noise estimate."""
    a_from, a_to = sched.alpha_bar[t_from], sched.alpha_bar[t_to]
    x0_pred = (x - np.sqrt(1.0 - a_from) * eps) / np.sqrt(a_from)
    out = np.sqrt(a_to) * x0_pred + np.sqrt(1.0 - a_to) * eps
    return out.astype(np.result_type(x, eps), copy=False)


def ddim_generation_step(x_t: Tensor, eps: Tensor, t: int, s: int, sched: NoiseSchedule) -> Tensor:
    """Denoising step t -> s (sigma = 0)."""
    t, s = _check_t(t, sched), _check_t(s, sched)
    if not s < t:
        raise ContractError(f"generation needs s < t, got s={s}, t={t}")
    return ddim_transition(x_t, eps, t, s, sched)


def ddim_inversion_transition(x_s: Tensor, eps: Tensor, s: int, t: int, sched: NoiseSchedule) -> Tensor:
    """Noising step s -> t for a caller-supplied noise estimate."""
    s, t = _check_t(s, sched), _check_t(t, sched)
    if not s < t:
        raise ContractError(f"inversion needs s < t, got s={s}, t={t}")
    return ddim_transition(x_s, eps, s, t, sched)


def ddpm_sigma_sq(sched: NoiseSchedule, t: int) -> float:
    """(1 - alpha_t)(1 - ab_{t-1}) / (1 - ab_t), the DDPM-equivalent variance."""
    t = _check_t(t, sched, lo=1)
    return float((1.0 - sched.alpha[t]) * (1.0 - sched.alpha_bar[t - 1]) / (1.0 - sched.alpha_bar[t]))
