"""Diffusion noise schedule, forward process, DDIM stepping and inversion.

Schedule tables are kept in float64 so the cumulative products stay accurate;
per-step coefficients are cast to the latent dtype on use.  Timesteps follow
the convention alpha_bar[0] = 1, i.e. t = 0 is the identity and t runs 0..T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import save_cvt1


@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray       # (T,), betas[i] is beta_{i+1} in 1-based step notation
    alphas: np.ndarray      # (T,), 1 - betas
    alpha_bars: np.ndarray  # (T+1,), alpha_bars[t] = prod_{s<=t}(1 - beta_s), alpha_bars[0] = 1

    def save(self, path) -> None:
        """Serialize the derived tables as one CVT1 tensor (row 0 betas padded, row 1 alpha_bars)."""
        table = np.zeros((2, self.T + 1), dtype=np.float64)
        table[0, 1:] = self.betas
        table[1] = self.alpha_bars
        save_cvt1(path, table)


@dataclass
class StepPlan:
    """Ordered (t, t_prev) pairs covering T down to 0."""

    pairs: list = field(default_factory=list)

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("step plan must be nonempty")
        ts = [t for t, _ in self.pairs] + [self.pairs[-1][1]]
        if any(a <= b for a, b in zip(ts[:-1], ts[1:])):
            raise ValueError("step plan timesteps must be strictly decreasing")
        if self.pairs[-1][1] != 0:
            raise ValueError("step plan must end at t_prev = 0")
        for (_, prev), (t, _) in zip(self.pairs[:-1], self.pairs[1:]):
            if prev != t:
                raise ValueError("step plan pairs must chain contiguously")

    def __len__(self):
        return len(self.pairs)

    def reversed_pairs(self):
        return list(reversed(self.pairs))


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def make_step_plan(T: int, steps: int) -> StepPlan:
    """Evenly spaced DDIM plan with `steps` update pairs from T to 0."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must be in 1..T, got {steps} for T={T}")
    ts = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))[::-1]
    return StepPlan(pairs=list(zip(ts[:-1].tolist(), ts[1:].tolist())))


def _coeffs(s: NoiseSchedule, t: int, dtype):
    ab = s.alpha_bars[t]
    return dtype.type(np.sqrt(ab)), dtype.type(np.sqrt(1.0 - ab))


def forward_marginal(z0: np.ndarray, t: int, noise: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal of the forward process: sqrt(ab_t) z0 + sqrt(1-ab_t) noise."""
    if not (0 <= t <= s.T):
        raise ValueError(f"t must be in 0..{s.T}, got {t}")
    if z0.shape != noise.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {noise.shape}")
    ca, cb = _coeffs(s, t, z0.dtype)
    return ca * z0 + cb * noise


def ddim_step(z_t: np.ndarray, eps_pred: np.ndarray, t: int, t_prev: int, s: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from t to t_prev."""
    if not (t > t_prev >= 0):
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ca_t, cb_t = _coeffs(s, t, z_t.dtype)
    ca_p, cb_p = _coeffs(s, t_prev, z_t.dtype)
    x0_hat = (z_t - cb_t * eps_pred) / ca_t
    return ca_p * x0_hat + cb_p * eps_pred


def ddim_invert_step(z_prev: np.ndarray, eps_pred: np.ndarray, t: int, t_prev: int, s: NoiseSchedule) -> np.ndarray:
    """Exact algebraic inverse of ddim_step for the same eps_pred."""
    if not (t > t_prev >= 0):
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ca_t, cb_t = _coeffs(s, t, z_prev.dtype)
    ca_p, cb_p = _coeffs(s, t_prev, z_prev.dtype)
    x0_hat = (z_prev - cb_p * eps_pred) / ca_p
    return ca_t * x0_hat + cb_t * eps_pred


def ddim_invert(z0: np.ndarray, denoiser, s: NoiseSchedule, plan: StepPlan, text=None) -> np.ndarray:
    """Map a clean latent to its noise-level code by running the plan in reverse.

    `denoiser(latent, t, text)` predicts eps at the latent's current noise
    level t_prev; the usual DDIM-inversion approximation reuses it for the
    t_prev -> t ascent.
    """
    z = z0
    for t, t_prev in plan.reversed_pairs():
        eps = denoiser(z, t_prev, text)
        if eps.shape != z.shape:
            raise ValueError(f"denoiser returned shape {eps.shape}, expected {z.shape}")
        z = ddim_invert_step(z, eps, t, t_prev, s)
    return z
