"""Naive multi-step DDIM inversion and the coupled, exactly invertible interval step."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffcore import ContractError
from .schedule import NoiseSchedule, ddim_generation_step, ddim_inversion_transition

EpsFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class CoupledState:
    x: np.ndarray
    x_aux: np.ndarray
    t: int

    def __post_init__(self):
        if np.shape(self.x) != np.shape(self.x_aux):
            raise ContractError("coupled pair must share a shape")

    @classmethod
    def from_latent(cls, x: np.ndarray, t: int) -> "CoupledState":
        return cls(x, np.array(x, copy=True), int(t))


@dataclass
class InversionTrace:
    timesteps: list[int] = field(default_factory=list)
    latents: list[np.ndarray] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)
    reconstruction_error: float = float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "timestep", "error"])
            for i, ts in enumerate(self.timesteps):
                err = self.errors[i] if i < len(self.errors) else ""
                w.writerow([i, ts, err])


def inversion_timesteps(s: int, delta_s: int) -> list[int]:
    """0 < delta_s < 2 delta_s < ... <= s, with a final partial step landing on s."""
    steps = list(range(delta_s, s + 1, delta_s))
    if s > 0 and (not steps or steps[-1] != s):
        steps.append(s)
    return steps


def naive_invert(x0: np.ndarray, s: int, delta_s: int, eps_fn: EpsFn, sched: NoiseSchedule,
                 keep_latents: bool = False) -> tuple[np.ndarray, InversionTrace]:
    """DDIM inversion 0 -> s under the linear approximation eps(x_prev, t_next)."""
    if s < 0 or s > sched.T:
        raise ContractError(f"s={s} outside [0, {sched.T}]")
    if delta_s < 1:
        raise ContractError("delta_s must be >= 1")
    trace = InversionTrace()
    x, prev = x0, 0
    for ts in inversion_timesteps(s, delta_s):
        x = ddim_inversion_transition(x, eps_fn(x, ts), prev, ts, sched)
        trace.timesteps.append(ts)
        if keep_latents:
            trace.latents.append(x)
        prev = ts
    return x, trace


def interval_step(x_s: np.ndarray, s: int, t: int, eps_fn: EpsFn, sched: NoiseSchedule) -> np.ndarray:
    """Naive single-step s -> t with the noise evaluated at (x_s, s)."""
    return ddim_inversion_transition(x_s, eps_fn(x_s, max(s, 1)), s, t, sched)


def fine_reference(x_s: np.ndarray, s: int, t: int, eps_fn: EpsFn, sched: NoiseSchedule) -> np.ndarray:
    """One transition per timestep from s to t, noise read at the current latent."""
    x = x_s
    for k in range(s, t):
        x = ddim_inversion_transition(x, eps_fn(x, max(k, 1)), k, k + 1, sched)
    return x


def _check_rho(rho: float) -> None:
    if not 0.0 < rho <= 1.0:
        raise ContractError(f"rho must lie in (0, 1], got {rho}")


def mix(x_int: np.ndarray, x_aux_int: np.ndarray, rho: float) -> np.ndarray:
    """x_t = (x_int - (1 - rho) x'_int) / rho."""
    _check_rho(rho)
    return (x_int - (1.0 - rho) * x_aux_int) / rho


def unmix(x_t: np.ndarray, x_aux_int: np.ndarray, rho: float) -> np.ndarray:
    """Inverse of ``mix``: x_int = rho x_t + (1 - rho) x'_int."""
    _check_rho(rho)
    return rho * x_t + (1.0 - rho) * x_aux_int


def coupled_invert(state: CoupledState, t: int, eps_fn: EpsFn, rho: float, sched: NoiseSchedule):
    """Advance the pair (x_s, x'_s) to t, each half-step reading its partner.

    Returns (CoupledState(x_t, x'_int, t), x_int, x'_int). The denoiser is
    queried at timestep s for both half-steps.
    """
    _check_rho(rho)
    s = state.t
    if not s < t:
        raise ContractError(f"coupled inversion needs s < t, got s={s}, t={t}")
    s_eval = max(s, 1)
    x_aux_int = ddim_inversion_transition(state.x_aux, eps_fn(state.x, s_eval), s, t, sched)
    x_int = ddim_inversion_transition(state.x, eps_fn(x_aux_int, s_eval), s, t, sched)
    x_t = mix(x_int, x_aux_int, rho)
    return CoupledState(x_t, x_aux_int, t), x_int, x_aux_int


def coupled_exact_reverse(x_int: np.ndarray, x_aux_int: np.ndarray, t: int, s: int, eps_fn: EpsFn,
                          sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Undo ``coupled_invert`` in reverse order of its half-steps."""
    if not s < t:
        raise ContractError(f"reverse needs s < t, got s={s}, t={t}")
    s_eval = max(s, 1)
    x_s = ddim_generation_step(x_int, eps_fn(x_aux_int, s_eval), t, s, sched)
    x_aux_s = ddim_generation_step(x_aux_int, eps_fn(x_s, s_eval), t, s, sched)
    return x_s, x_aux_s


def coupled_roundtrip_error(x_s: np.ndarray, s: int, t: int, eps_fn: EpsFn, rho: float,
                            sched: NoiseSchedule, x_aux_s: np.ndarray | None = None) -> float:
    """Relative error of coupled_invert followed by its exact reverse (through mix/unmix)."""
    state = CoupledState(x_s, x_s.copy() if x_aux_s is None else x_aux_s, s)
    out, _, _ = coupled_invert(state, t, eps_fn, rho, sched)
    x_int = unmix(out.x, out.x_aux, rho)
    rx, rxa = coupled_exact_reverse(x_int, out.x_aux, t, s, eps_fn, sched)
    num = np.sqrt(np.sum((rx - state.x) ** 2) + np.sum((rxa - state.x_aux) ** 2))
    den = np.sqrt(np.sum(state.x ** 2) + np.sum(state.x_aux ** 2))
    return float(num / den)


def naive_roundtrip_error(x_s: np.ndarray, s: int, t: int, eps_fn: EpsFn, sched: NoiseSchedule) -> float:
    """Relative error of the naive interval step s -> t followed by DDIM generation t -> s."""
    x_t = interval_step(x_s, s, t, eps_fn, sched)
    back = ddim_generation_step(x_t, eps_fn(x_t, t), t, s, sched)
    return float(np.linalg.norm(back - x_s) / np.linalg.norm(x_s))
