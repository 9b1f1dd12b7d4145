"""Noise construction with the frame-sharing constraints and the generation loop.

Two independent noise streams drive a generation: the background stream
(seed_b) fills the initial latent with one frame of noise replicated across
all frames, and the condition stream (seed_c) adds one shared noise frame to
the encoded condition.  The streams never read each other's counters, so
changing one seed leaves the other stream's draws untouched.  Alternatively
the initial latent can come from DDIM-inverting a reference scenery video.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import FrameSamplingPlan
from .network import (ControlBranch, ControlResiduals, ImageModel, LatentCodec,
                      VideoModel, encode_condition, encode_text, inflate_2d_to_3d,
                      unet_denoise)
from .numerics import SeededRng, gaussian_noise
from .schedule import NoiseSchedule, StepPlan, ddim_invert, ddim_step, make_step_plan


@dataclass
class GenerationRequest:
    condition: np.ndarray                 # (F, H, W, K) per-frame raster
    text: str = ""
    reference_video: np.ndarray | None = None  # (F, H, W, 3) float in [0, 1]
    seed_b: int = 0
    seed_c: int = 1
    steps: int = 50
    guidance_scale: float = 7.5
    attention_mode: str = "sbist"
    gap: int = 3
    background_mode: str = "noise"        # "noise" | "inverted"
    control_mode: str = "3d"              # "3d" | "2d"
    eps_c_scale: float = 1.0
    invert_with_text: bool = False

    def __post_init__(self):
        if self.background_mode not in ("noise", "inverted"):
            raise ValueError(f"unknown background_mode {self.background_mode!r}")
        if self.background_mode == "inverted" and self.reference_video is None:
            raise ValueError("background_mode 'inverted' requires a reference video")
        if self.control_mode not in ("3d", "2d", "off"):
            raise ValueError(f"unknown control_mode {self.control_mode!r}")

    @property
    def frames(self) -> int:
        return self.condition.shape[0]


@dataclass
class BackgroundLatent:
    z_T: np.ndarray
    provenance: str  # "epsilon_b" | "inverted"


@dataclass
class ModelSet:
    unet: ImageModel
    branch: ControlBranch
    codec: LatentCodec


@dataclass
class GenerationResult:
    frames: np.ndarray                    # (F, H, W, 3) uint8
    latents: np.ndarray                   # final clean latents
    background: BackgroundLatent


def make_background_noise(seed_b: int, frame_count: int, latent_shape, dtype=np.float32) -> BackgroundLatent:
    """One frame of standard normal noise replicated bit-for-bit across all frames."""
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    rng = SeededRng(seed_b)
    one = gaussian_noise(latent_shape, rng, dtype)
    z = np.broadcast_to(one, (frame_count,) + tuple(latent_shape)).copy()
    return BackgroundLatent(z_T=z, provenance="epsilon_b")


def make_condition_input(cond: np.ndarray, seed_c: int, branch: ControlBranch,
                         eps_scale: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Encoded condition plus one shared noise frame: eps_c + E_c(cond)."""
    enc = encode_condition(branch, cond).astype(dtype)
    rng = SeededRng(seed_c)
    eps_c = gaussian_noise(enc.shape[1:], rng, dtype) * dtype(eps_scale)
    return enc + eps_c[None]


def _cfg_eps(video: VideoModel, z, t, text_cond, text_uncond, residuals, w: float):
    """Classifier-free guidance; the unconditional pass uses no control residuals."""
    eps_c = unet_denoise(video, z, t, text_cond, residuals)
    if w == 1.0:
        return eps_c
    eps_u = unet_denoise(video, z, t, text_uncond, None)
    return eps_u + z.dtype.type(w) * (eps_c - eps_u)


def invert_reference(video_frames: np.ndarray, models: ModelSet, sched: NoiseSchedule,
                     plan_pairs: StepPlan, attn_plan: FrameSamplingPlan,
                     text: str = "", dtype=np.float32) -> np.ndarray:
    """Encode a pixel video and DDIM-invert it through the bare UNet branch."""
    z0 = models.codec.encode(video_frames, dtype=dtype)
    video = inflate_2d_to_3d(models.unet, attn_plan)
    emb = encode_text(text, models.unet.cfg.text_dim, models.unet.cfg.max_text_tokens, dtype)
    denoiser = lambda z, t, txt: unet_denoise(video, z, t, txt)
    return ddim_invert(z0, denoiser, sched, plan_pairs, emb)


def generate(req: GenerationRequest, models: ModelSet, sched: NoiseSchedule) -> GenerationResult:
    cfg = models.unet.cfg
    dtype = cfg.np_dtype
    F = req.frames
    attn_plan = FrameSamplingPlan(mode=req.attention_mode, frames=F, gap=req.gap)
    video = inflate_2d_to_3d(models.unet, attn_plan)
    step_plan = make_step_plan(sched.T, req.steps)

    if req.background_mode == "inverted":
        z_T = invert_reference(req.reference_video, models, sched, step_plan, attn_plan,
                               text=req.text if req.invert_with_text else "", dtype=dtype)
        background = BackgroundLatent(z_T=z_T, provenance="inverted")
    else:
        background = make_background_noise(req.seed_b, F, cfg.latent_shape(1)[1:], dtype)
        z_T = background.z_T

    c_cond = make_condition_input(req.condition, req.seed_c, models.branch,
                                  eps_scale=req.eps_c_scale, dtype=dtype)
    text_cond = encode_text(req.text, cfg.text_dim, cfg.max_text_tokens, dtype)
    text_uncond = encode_text("", cfg.text_dim, cfg.max_text_tokens, dtype)
    branch_plan = attn_plan if req.control_mode == "3d" else None

    z = z_T
    for t, t_prev in step_plan.pairs:
        residuals = None
        if req.control_mode != "off":
            residuals = models.branch.forward(c_cond, t, text_cond, plan=branch_plan)
        eps = _cfg_eps(video, z, t, text_cond, text_uncond, residuals, req.guidance_scale)
        z = ddim_step(z, eps, t, t_prev, sched)

    frames = np.clip(models.codec.decode(z), 0.0, 1.0)
    frames = np.round(frames * 255.0).astype(np.uint8)
    return GenerationResult(frames=frames, latents=z, background=background)
