"""Synthetic moving-shapes dataset and toy 2D training.

Training is strictly frame-wise: the denoiser and the control branch never
see two frames of the same scene together, so all temporal behaviour of the
inflated video model comes from the inflation itself, not from training.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .fileio import read_pgm, read_ppm, write_pgm, write_ppm
from .network import (ControlBranch, ImageModel, LatentCodec, ModelConfig,
                      encode_text)
from .numerics import SeededRng, gaussian_noise
from .schedule import NoiseSchedule


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"loss became non-finite at step {step}: {loss}")
        self.step = step


_PALETTE = [
    ("red", (0.90, 0.15, 0.15)),
    ("green", (0.15, 0.80, 0.20)),
    ("blue", (0.20, 0.30, 0.90)),
    ("yellow", (0.92, 0.88, 0.15)),
    ("magenta", (0.85, 0.20, 0.80)),
    ("cyan", (0.15, 0.80, 0.85)),
]

_BG_TONES = [
    ((0.12, 0.12, 0.25), (0.55, 0.60, 0.75)),
    ((0.25, 0.15, 0.10), (0.75, 0.60, 0.45)),
    ((0.10, 0.22, 0.12), (0.55, 0.72, 0.55)),
    ((0.18, 0.18, 0.18), (0.70, 0.70, 0.70)),
]


@dataclass
class SceneConfig:
    size: int = 128
    frames: int = 8
    min_half: int = 10     # half-extent of the shape in pixels
    max_half: int = 18
    max_speed: int = 5     # per-axis pixels per frame, integer
    bg_drift: float = 0.06


@dataclass
class SyntheticScene:
    frames: np.ndarray   # (F, H, W, 3) float32 in [0, 1]
    masks: np.ndarray    # (F, H, W) uint8 in {0, 1}
    caption: str
    velocity: tuple = (0, 0)


def _direction_name(vx, vy):
    if abs(vx) >= abs(vy):
        return "right" if vx >= 0 else "left"
    return "down" if vy >= 0 else "up"


def _render_background(cfg: SceneConfig, tone, angle, phase):
    h = w = cfg.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    proj = (xx * np.cos(angle) + yy * np.sin(angle)) / cfg.size
    s = 0.5 + 0.5 * np.sin(2.0 * np.pi * (proj + phase))
    a = np.asarray(tone[0])
    b = np.asarray(tone[1])
    return (a[None, None] + s[..., None] * (b - a)[None, None]).astype(np.float32)


def _shape_mask(cfg: SceneConfig, kind, cx, cy, half):
    yy, xx = np.mgrid[0:cfg.size, 0:cfg.size]
    if kind == "square":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= half ** 2


def gen_moving_shapes(n: int, cfg: SceneConfig, rng: SeededRng) -> list[SyntheticScene]:
    """Scenes of one colored shape translating linearly over a drifting gradient."""
    scenes = []
    for _ in range(n):
        kind = rng.choice(["square", "circle"])
        color_name, color = _PALETTE[rng.randint(0, len(_PALETTE))]
        half = rng.randint(cfg.min_half, cfg.max_half + 1)
        vx = rng.randint(-cfg.max_speed, cfg.max_speed + 1)
        vy = rng.randint(-cfg.max_speed, cfg.max_speed + 1)
        span_x = (cfg.frames - 1) * vx
        span_y = (cfg.frames - 1) * vy
        # keep the whole trajectory inside the frame so masks never clip
        lo_x = half + 1 + max(0, -span_x)
        hi_x = cfg.size - half - 1 - max(0, span_x)
        lo_y = half + 1 + max(0, -span_y)
        hi_y = cfg.size - half - 1 - max(0, span_y)
        cx = rng.randint(lo_x, max(hi_x, lo_x + 1))
        cy = rng.randint(lo_y, max(hi_y, lo_y + 1))
        tone = _BG_TONES[rng.randint(0, len(_BG_TONES))]
        angle = rng.uniform(1)[0] * np.pi
        phase0 = rng.uniform(1)[0]

        frames = np.empty((cfg.frames, cfg.size, cfg.size, 3), dtype=np.float32)
        masks = np.empty((cfg.frames, cfg.size, cfg.size), dtype=np.uint8)
        for f in range(cfg.frames):
            bg = _render_background(cfg, tone, angle, phase0 + f * cfg.bg_drift)
            m = _shape_mask(cfg, kind, cx + f * vx, cy + f * vy, half)
            frame = bg.copy()
            frame[m] = color
            frames[f] = frame
            masks[f] = m.astype(np.uint8)
        caption = f"a {color_name} {kind} moving {_direction_name(vx, vy)}"
        scenes.append(SyntheticScene(frames=frames, masks=masks, caption=caption,
                                     velocity=(vx, vy)))
    return scenes


def save_scenes(root, scenes: list[SyntheticScene]) -> None:
    for i, sc in enumerate(scenes):
        d = os.path.join(root, f"scene_{i:04d}")
        os.makedirs(d, exist_ok=True)
        for f in range(sc.frames.shape[0]):
            write_ppm(os.path.join(d, f"frame_{f:04d}.ppm"),
                      np.round(sc.frames[f] * 255.0).astype(np.uint8))
            write_pgm(os.path.join(d, f"mask_{f:04d}.pgm"), sc.masks[f] * 255)
        with open(os.path.join(d, "caption.txt"), "w") as fh:
            fh.write(sc.caption + "\n")


def load_scenes(root) -> list[SyntheticScene]:
    scenes = []
    for name in sorted(os.listdir(root)):
        d = os.path.join(root, name)
        if not (name.startswith("scene_") and os.path.isdir(d)):
            continue
        fr = sorted(x for x in os.listdir(d) if x.startswith("frame_"))
        frames = np.stack([read_ppm(os.path.join(d, x)) for x in fr]).astype(np.float32) / 255.0
        mk = sorted(x for x in os.listdir(d) if x.startswith("mask_"))
        masks = (np.stack([read_pgm(os.path.join(d, x)) for x in mk]) > 127).astype(np.uint8)
        with open(os.path.join(d, "caption.txt")) as fh:
            caption = fh.read().strip()
        scenes.append(SyntheticScene(frames=frames, masks=masks, caption=caption))
    if not scenes:
        raise FileNotFoundError(f"no scene_* directories under {root}")
    return scenes


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 0

    def __post_init__(self):
        if min(self.steps, self.batch_size) < 1 or self.lr <= 0:
            raise ValueError("steps, batch_size and lr must be positive")


class Adam:
    def __init__(self, model, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.entries = [(path, mod, name) for path, mod, name in model.named_params()]
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p: np.zeros_like(getattr(mod, n)) for p, mod, n in self.entries}
        self.v = {p: np.zeros_like(getattr(mod, n)) for p, mod, n in self.entries}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for path, mod, name in self.entries:
            g = mod.grads.get(name)
            if g is None:
                continue
            p = getattr(mod, name)
            m = self.m[path]
            v = self.v[path]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)).astype(p.dtype)


@dataclass
class FrameDataset:
    """Flattened per-frame training set in latent space."""

    latents: np.ndarray   # (M, C, h, w)
    masks: np.ndarray     # (M, H, W, 1) float
    texts: np.ndarray     # (M, L, text_dim)

    @classmethod
    def from_scenes(cls, scenes, codec: LatentCodec, cfg: ModelConfig):
        lat, masks, texts = [], [], []
        maxlen = 0
        embs = []
        for sc in scenes:
            lat.append(codec.encode(sc.frames, dtype=cfg.np_dtype))
            masks.append(sc.masks[..., None].astype(cfg.np_dtype))
            e = encode_text(sc.caption, cfg.text_dim, cfg.max_text_tokens, cfg.np_dtype)
            embs.append(e)
            maxlen = max(maxlen, e.shape[0])
        pad_row = encode_text("", cfg.text_dim, cfg.max_text_tokens, cfg.np_dtype)[0]
        for sc, e in zip(scenes, embs):
            if e.shape[0] < maxlen:
                pad = np.tile(pad_row, (maxlen - e.shape[0], 1))
                e = np.concatenate([e, pad], axis=0)
            texts.append(np.repeat(e[None], sc.frames.shape[0], axis=0))
        return cls(latents=np.concatenate(lat), masks=np.concatenate(masks),
                   texts=np.concatenate(texts))

    def __len__(self):
        return self.latents.shape[0]


def _noisy_batch(ds: FrameDataset, sched: NoiseSchedule, rng: SeededRng, batch_size, dtype):
    idx = rng.randint(0, len(ds), size=(batch_size,))
    t = rng.randint(1, sched.T + 1, size=(batch_size,))
    z0 = ds.latents[idx]
    noise = gaussian_noise(z0.shape, rng, dtype)
    ca = np.sqrt(sched.alpha_bars[t]).astype(dtype)[:, None, None, None]
    cb = np.sqrt(1.0 - sched.alpha_bars[t]).astype(dtype)[:, None, None, None]
    return idx, t, ca * z0 + cb * noise, noise


def train_image_denoiser(scenes, model_cfg: ModelConfig, train_cfg: TrainConfig,
                         sched: NoiseSchedule, codec: LatentCodec | None = None,
                         log_every: int = 0):
    """Frame-wise epsilon-prediction MSE training of the 2D denoiser."""
    codec = codec or LatentCodec(model_cfg.patch, model_cfg.latent_channels)
    ds = FrameDataset.from_scenes(scenes, codec, model_cfg)
    dtype = model_cfg.np_dtype
    model = ImageModel(model_cfg, seed=train_cfg.seed)
    opt = Adam(model, train_cfg.lr)
    rng = SeededRng(train_cfg.seed).derive("train2d")
    losses = []
    for step in range(train_cfg.steps):
        idx, t, z_t, noise = _noisy_batch(ds, sched, rng, train_cfg.batch_size, dtype)
        eps = model.forward(z_t, t, ds.texts[idx])
        diff = eps - noise
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        losses.append(loss)
        model.zero_grad()
        model.backward((2.0 / diff.size * diff).astype(dtype))
        opt.step()
        if log_every and step % log_every == 0:
            print(f"  step {step:5d}  loss {loss:.4f}")
    return model, losses


def train_control_branch(scenes, unet: ImageModel, train_cfg: TrainConfig,
                         sched: NoiseSchedule, codec: LatentCodec | None = None,
                         log_every: int = 0):
    """Clone encoder/middle from the frozen denoiser and train the branch frame-wise.

    The branch input mirrors the sampling-time construction: an independent
    noise frame plus the stem encoding of the condition mask.
    """
    cfg = unet.cfg
    codec = codec or LatentCodec(cfg.patch, cfg.latent_channels)
    ds = FrameDataset.from_scenes(scenes, codec, cfg)
    dtype = cfg.np_dtype
    branch = ControlBranch(cfg, seed=train_cfg.seed + 1).clone_from(unet)
    opt = Adam(branch, train_cfg.lr)
    rng = SeededRng(train_cfg.seed).derive("train_ctrl")
    losses = []
    for step in range(train_cfg.steps):
        idx, t, z_t, noise = _noisy_batch(ds, sched, rng, train_cfg.batch_size, dtype)
        text = ds.texts[idx]
        enc = branch.stem_forward(ds.masks[idx])
        c_cond = enc + gaussian_noise(enc.shape, rng, dtype)
        residuals = branch.forward(c_cond, t, text, plan=None)
        eps = unet.forward(z_t, t, text, residuals)
        diff = eps - noise
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        losses.append(loss)
        branch.zero_grad()
        unet.zero_grad()  # gradients pass through but are never applied
        _, d_res = unet.backward((2.0 / diff.size * diff).astype(dtype))
        dc = branch.backward(d_res)
        branch.stem_backward(dc)
        opt.step()
        if log_every and step % log_every == 0:
            print(f"  step {step:5d}  loss {loss:.4f}")
    return branch, losses


def eval_denoise_loss(unet: ImageModel, ds: FrameDataset, sched: NoiseSchedule,
                      seed: int, n_batches: int = 8, batch_size: int = 8):
    """Deterministic held-out epsilon-MSE under fixed draws."""
    rng = SeededRng(seed).derive("eval")
    dtype = unet.cfg.np_dtype
    total = 0.0
    for _ in range(n_batches):
        idx, t, z_t, noise = _noisy_batch(ds, sched, rng, batch_size, dtype)
        eps = unet.forward(z_t, t, ds.texts[idx])
        total += float(np.mean((eps.astype(np.float64) - noise) ** 2))
    return total / n_batches


def gradient_check(model, loss_and_backward, loss_only, n_probes: int, seed: int,
                   h: float = 1e-4):
    """Central-difference check of hand-written gradients on random parameter probes.

    Returns a list of (path, analytic, numeric, rel_err).  Callers supply
    closures over a fixed batch; parameters must be float64.
    """
    model.zero_grad()
    loss_and_backward()
    grads = model.grad_arrays()
    entries = [(p, mod, n) for p, mod, n in model.named_params()]
    rng = SeededRng(seed).derive("gradcheck")
    results = []
    for _ in range(n_probes):
        path, mod, name = entries[rng.randint(0, len(entries))]
        arr = getattr(mod, name)
        i = rng.randint(0, arr.size)
        orig = arr.flat[i]
        arr.flat[i] = orig + h
        lp = loss_only()
        arr.flat[i] = orig - h
        lm = loss_only()
        arr.flat[i] = orig
        numeric = (lp - lm) / (2.0 * h)
        g = grads.get(path)
        analytic = 0.0 if g is None else float(g.flat[i])
        denom = max(abs(analytic), abs(numeric))
        rel = 0.0 if denom < 1e-8 else abs(analytic - numeric) / denom
        results.append((path, analytic, numeric, rel))
    return results
