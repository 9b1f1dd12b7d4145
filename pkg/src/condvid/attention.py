"""Temporal attention variants with frame-index planning and cost accounting.

Token layout is (F, S, d_in): F frames, S spatial tokens per frame.  Queries
always come from the query frame; keys and values are gathered from the
frames the sampling plan selects, concatenated along the token axis.  The
sparse bi-directional variant ("sbist") gathers every `gap`-th frame of the
whole clip, so its key/value set is the same for every query frame.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng, gaussian_noise, matmul, softmax_lastdim

MODES = ("self", "sparse_causal", "sbist", "dense")

# Query rows processed per matmul/softmax batch; purely a memory bound, the
# per-row results are identical for any chunk size.
_QUERY_CHUNK = 1024


def sbist_frame_indices(F: int, gap: int) -> list[int]:
    """0-based anchor frames {j*gap : j = 0..floor((F-1)/gap)}."""
    if F < 1:
        raise ValueError("F must be >= 1")
    if gap < 1:
        raise ValueError("gap must be >= 1")
    return list(range(0, F, gap))


@dataclass
class FrameSamplingPlan:
    mode: str
    frames: int
    gap: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.gap < 1:
            raise ValueError("gap must be >= 1")

    def kv_indices(self, i: int) -> list[int]:
        """Ordered key/value frame list for query frame i (duplicates removed)."""
        if not (0 <= i < self.frames):
            raise ValueError(f"query frame {i} out of range 0..{self.frames - 1}")
        if self.mode == "self":
            return [i]
        if self.mode == "sparse_causal":
            return sorted({0, max(i - 1, 0)})
        if self.mode == "sbist":
            return sbist_frame_indices(self.frames, self.gap)
        return list(range(self.frames))

    @property
    def kv_frames(self) -> int:
        """Key/value frame count (taken at the last query frame, the widest case)."""
        return len(self.kv_indices(self.frames - 1))


@dataclass
class AttentionWeights:
    w_q: np.ndarray  # (d_in, d)
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w.ndim != 2 or not np.all(np.isfinite(w)):
                raise ValueError(f"{name} must be a finite 2-d matrix")
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape):
            raise ValueError("projection matrices must share one shape")

    @property
    def d(self) -> int:
        return self.w_q.shape[1]


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    out = np.empty((q.shape[0], v.shape[1]), dtype=q.dtype)
    for lo in range(0, q.shape[0], _QUERY_CHUNK):
        hi = min(lo + _QUERY_CHUNK, q.shape[0])
        scores = matmul(q[lo:hi], k.T) * scale
        out[lo:hi] = matmul(softmax_lastdim(scores), v)
    return out


def temporal_attention(z: np.ndarray, w: AttentionWeights, plan: FrameSamplingPlan) -> np.ndarray:
    """Softmax(Q K^T / sqrt(d)) V with K, V gathered per the sampling plan.

    z: (F, S, d_in) tokens; returns (F, S, d).
    """
    if z.ndim != 3:
        raise ValueError(f"expected (F, S, d_in) tokens, got shape {z.shape}")
    F, S, d_in = z.shape
    if plan.frames != F:
        raise ValueError(f"plan covers {plan.frames} frames but tokens have {F}")
    if d_in != w.w_q.shape[0]:
        raise ValueError(f"token dim {d_in} does not match projection input {w.w_q.shape[0]}")
    scale = 1.0 / np.sqrt(w.d)
    q = matmul(z, w.w_q.astype(z.dtype))
    k = matmul(z, w.w_k.astype(z.dtype))
    v = matmul(z, w.w_v.astype(z.dtype))
    out = np.empty((F, S, w.d), dtype=z.dtype)
    cache_key = None
    kk = vv = None
    for i in range(F):
        idx = plan.kv_indices(i)
        key = tuple(idx)
        if key != cache_key:
            kk = k[idx].reshape(len(idx) * S, w.d)
            vv = v[idx].reshape(len(idx) * S, w.d)
            cache_key = key
        out[i] = _attend(q[i], kk, vv, scale)
    return out


@dataclass
class CostAccount:
    mode: str
    frames: int
    tokens: int
    dim: int
    kv_frames: int
    score_flops: int
    wall_time_s: float | None = None


def cost_account(plan: FrameSamplingPlan, S: int, d: int) -> CostAccount:
    """Analytic footprint of one attention call; wall time is filled by the benchmark."""
    kv = plan.kv_frames
    flops = plan.frames * S * (kv * S) * d * 2
    return CostAccount(plan.mode, plan.frames, S, d, kv, flops)


def run_cost_benchmark(modes=MODES, F: int = 24, S: int = 4096, d: int = 4,
                       gap: int = 3, seed: int = 0, repeats: int = 1) -> list[CostAccount]:
    """Time each attention mode on one random token batch; returns rows ordered as given."""
    rng = SeededRng(seed)
    z = gaussian_noise((F, S, d), rng, dtype=np.float32)
    w = AttentionWeights(
        w_q=gaussian_noise((d, d), rng.derive("wq"), np.float32) / np.sqrt(d),
        w_k=gaussian_noise((d, d), rng.derive("wk"), np.float32) / np.sqrt(d),
        w_v=gaussian_noise((d, d), rng.derive("wv"), np.float32) / np.sqrt(d),
    )
    rows = []
    for mode in modes:
        plan = FrameSamplingPlan(mode=mode, frames=F, gap=gap)
        acct = cost_account(plan, S, d)
        best = None
        for _ in range(repeats):
            t0 = time.perf_counter()
            temporal_attention(z, w, plan)
            dt = time.perf_counter() - t0
            best = dt if best is None else min(best, dt)
        acct.wall_time_s = best
        rows.append(acct)
    return rows


def write_benchmark_csv(path, rows: list[CostAccount]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "F", "S", "d", "kv_frames", "score_flops", "wall_time_s"])
        for r in rows:
            writer.writerow([r.mode, r.frames, r.tokens, r.dim, r.kv_frames, r.score_flops,
                             "" if r.wall_time_s is None else f"{r.wall_time_s:.6f}"])
