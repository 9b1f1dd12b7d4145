"""Frame-consistency metric, condition-accuracy proxy, and the ablation harness.

The consistency embedder is pluggable; the default is a deliberately simple
grayscale grid so reported numbers are stable across machines.  Condition
accuracy is a mask-IoU proxy computed against the known synthetic condition.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .attention import FrameSamplingPlan, CostAccount, cost_account
from .sampler import GenerationRequest, ModelSet, generate
from .schedule import NoiseSchedule


class GrayscaleGridEmbedder:
    """Downsample to an NxN grayscale grid, flatten, normalize to unit length."""

    def __init__(self, grid: int = 8):
        self.grid = grid

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) frame, got {frame.shape}")
        g = frame.astype(np.float64).mean(axis=2)
        h, w = g.shape
        ys = (np.arange(self.grid + 1) * h) // self.grid
        xs = (np.arange(self.grid + 1) * w) // self.grid
        cells = np.add.reduceat(np.add.reduceat(g, ys[:-1], axis=0), xs[:-1], axis=1)
        areas = np.outer(np.diff(ys), np.diff(xs))
        v = (cells / areas).ravel()
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            e = np.zeros_like(v)
            e[0] = 1.0
            return e
        return v / norm


def frame_consistency(video: np.ndarray, embedder=None) -> float:
    """Mean cosine similarity between embeddings of consecutive frames."""
    if video.shape[0] < 2:
        raise ValueError("frame consistency needs at least 2 frames")
    embedder = embedder or GrayscaleGridEmbedder()
    embs = np.stack([embedder(f) for f in video])
    sims = np.sum(embs[:-1] * embs[1:], axis=1)
    norms = np.linalg.norm(embs[:-1], axis=1) * np.linalg.norm(embs[1:], axis=1)
    sims = np.clip(sims / np.maximum(norms, 1e-12), -1.0, 1.0)
    return float(sims.mean())


def condition_accuracy_iou(video: np.ndarray, masks: np.ndarray, threshold: float = 0.25) -> float:
    """Foreground = pixels deviating from the per-frame median color; IoU vs mask.

    video: (F, H, W, 3) uint8 or float in [0, 1]; masks: (F, H, W) boolean-ish.
    """
    if video.shape[0] != masks.shape[0]:
        raise ValueError(f"{video.shape[0]} video frames vs {masks.shape[0]} mask frames")
    masks = masks.astype(bool)
    if not masks.any():
        raise ValueError("every condition mask is empty")
    frames = video.astype(np.float64)
    if video.dtype == np.uint8:
        frames = frames / 255.0
    ious = []
    for f in range(frames.shape[0]):
        med = np.median(frames[f].reshape(-1, 3), axis=0)
        dev = np.abs(frames[f] - med[None, None]).max(axis=2)
        pred = dev > threshold
        union = (pred | masks[f]).sum()
        ious.append(1.0 if union == 0 else (pred & masks[f]).sum() / union)
    return float(np.mean(ious))


@dataclass
class MetricReport:
    attention_mode: str
    control_mode: str
    frame_consistency: float
    condition_iou: float
    cost: CostAccount
    fc_per_seed: list
    iou_per_seed: list


def run_ablation(models: ModelSet, sched: NoiseSchedule, condition_scenes,
                 seeds, attention_modes=("self", "sparse_causal", "sbist", "dense"),
                 control_modes=("2d", "3d"), steps: int = 25, guidance: float = 5.0,
                 gap: int = 3, eps_c_scale: float = 1.0, embedder=None,
                 progress=None) -> list[MetricReport]:
    """Generate under every (attention, control) cell with shared seed/condition pairs."""
    if not condition_scenes:
        raise ValueError("need at least one condition scene")
    cfg = models.unet.cfg
    F = condition_scenes[0].masks.shape[0]
    S = cfg.latent_size ** 2
    reports = []
    for mode in attention_modes:
        for control in control_modes:
            fcs, ious, wall = [], [], []
            for j, seed in enumerate(seeds):
                sc = condition_scenes[j % len(condition_scenes)]
                req = GenerationRequest(
                    condition=sc.masks[..., None].astype(np.float32),
                    text=sc.caption, seed_b=seed, seed_c=seed + 104729,
                    steps=steps, guidance_scale=guidance, attention_mode=mode,
                    gap=gap, control_mode=control, eps_c_scale=eps_c_scale)
                t0 = time.perf_counter()
                res = generate(req, models, sched)
                wall.append(time.perf_counter() - t0)
                fcs.append(frame_consistency(res.frames, embedder))
                ious.append(condition_accuracy_iou(res.frames, sc.masks))
                if progress:
                    progress(mode, control, seed, fcs[-1], ious[-1])
            acct = cost_account(FrameSamplingPlan(mode=mode, frames=F, gap=gap), S, cfg.channels[0])
            acct.wall_time_s = float(np.mean(wall))
            reports.append(MetricReport(
                attention_mode=mode, control_mode=control,
                frame_consistency=float(np.mean(fcs)), condition_iou=float(np.mean(ious)),
                cost=acct, fc_per_seed=fcs, iou_per_seed=ious))
    return reports


def ablation_csv(path, reports: list[MetricReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["attention_mode", "control_mode", "frame_consistency", "condition_iou",
                    "kv_frames", "score_flops", "mean_wall_time_s"])
        for r in reports:
            w.writerow([r.attention_mode, r.control_mode, f"{r.frame_consistency:.6f}",
                        f"{r.condition_iou:.6f}", r.cost.kv_frames, r.cost.score_flops,
                        f"{r.cost.wall_time_s:.3f}"])


def ablation_table(reports: list[MetricReport]) -> str:
    lines = [f"{'attention':>14} {'control':>8} {'FC':>8} {'IoU':>8} {'kv':>4} {'time(s)':>8}"]
    for r in reports:
        lines.append(f"{r.attention_mode:>14} {r.control_mode:>8} "
                     f"{r.frame_consistency:8.4f} {r.condition_iou:8.4f} "
                     f"{r.cost.kv_frames:4d} {r.cost.wall_time_s:8.2f}")
    return "\n".join(lines)
