from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels, 1-indexed in the API (``t`` in ``1..T``)."""

    beta: np.ndarray
    alpha_hat: np.ndarray
    alpha: np.ndarray
    beta_tilde: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 1 or np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("betas must be a non-empty sequence in (0, 1)")
        alpha_hat = 1.0 - beta
        alpha = np.cumprod(alpha_hat)
        beta_tilde = beta.copy()
        beta_tilde[1:] = (1.0 - alpha[:-1]) / (1.0 - alpha[1:]) * beta[1:]
        return cls(beta, alpha_hat, alpha, beta_tilde)

    def at(self, t: int) -> tuple[float, float, float, float]:
        """(beta_t, alpha_hat_t, alpha_t, beta_tilde_t) for 1-based ``t``."""
        if not 1 <= t <= self.T:
            raise ValueError(f"diffusion step {t} outside [1, {self.T}]")
        i = t - 1
        return float(self.beta[i]), float(self.alpha_hat[i]), float(self.alpha[i]), float(self.beta_tilde[i])


def build_schedule(T: int = 50, beta_min: float = 1e-4, beta_max: float = 0.5) -> NoiseSchedule:
    """Quadratic schedule: betas linear in sqrt-space between the endpoints."""
    if not (0 < beta_min < beta_max < 1) or T < 1:
        raise ValueError(f"need T >= 1 and 0 < beta_min < beta_max < 1 (got {T}, {beta_min}, {beta_max})")
    if T == 1:
        return NoiseSchedule.from_betas([beta_min])
    beta = np.linspace(beta_min ** 0.5, beta_max ** 0.5, T) ** 2
    return NoiseSchedule.from_betas(beta)


def forward_noise(v0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(alpha_t) v0 + sqrt(1 - alpha_t) eps``; ``t`` may be an int or per-batch array."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"diffusion step outside [1, {sched.T}]")
    a = sched.alpha[t_arr - 1]
    if t_arr.ndim:
        a = a.reshape((-1,) + (1,) * (np.ndim(v0) - 1))
    return np.sqrt(a) * v0 + np.sqrt(1.0 - a) * eps


def reverse_step(v_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule,
                 z: np.ndarray | None = None) -> np.ndarray:
    """One ancestral step ``v_t -> v_{t-1}``; no noise is added at ``t == 1``."""
    beta, alpha_hat, alpha, beta_tilde = sched.at(t)
    mu = (v_t - beta / np.sqrt(1.0 - alpha) * eps_hat) / np.sqrt(alpha_hat)
    if t > 1 and z is not None:
        return mu + np.sqrt(beta_tilde) * z
    return mu
