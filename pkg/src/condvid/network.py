"""Toy latent denoiser, control branch, codec and encoders.

The 2D denoiser is a two-level UNet whose basic block runs, in order:
residual conv block, self-attention, cross-attention with the text
embedding, feed-forward.  Inflating it to video keeps every weight array
(by reference) and only rewires convolutions to act per frame and
self-attention to gather key/value tokens across frames via a
FrameSamplingPlan.  The control branch is a clone of the encoder and middle
blocks plus a strided condition stem and zero-initialized output
projections, so a fresh branch leaves the denoiser untouched.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .attention import AttentionWeights, FrameSamplingPlan, temporal_attention
from .layers import (Conv2d, GroupNorm, Linear, Module, silu, silu_grad,
                     softmax_backward, timestep_embedding, upsample_nearest2x,
                     upsample_nearest2x_backward)
from .numerics import SeededRng, fnv1a64, gaussian_noise, load_cvt1, save_cvt1, softmax_lastdim

_TEXT_TABLE_SEED = 0x7E57AB1E
_TEXT_VOCAB = 256
_CODEC_SEED = 0x0DEC0DE


@dataclass
class ModelConfig:
    image_size: int = 128
    patch: int = 4
    latent_channels: int = 4
    channels: tuple = (16, 32)
    temb_dim: int = 32
    text_dim: int = 16
    groups: int = 4
    ff_mult: int = 2
    cond_channels: int = 1
    max_text_tokens: int = 16
    dtype: str = "f32"

    @property
    def latent_size(self) -> int:
        return self.image_size // self.patch

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    def latent_shape(self, frames: int) -> tuple:
        return (frames, self.latent_channels, self.latent_size, self.latent_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


def config_hash(cfg_dict: dict) -> str:
    return hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:16]


# --- text encoder (deterministic stub) ----------------------------------------

_text_tables: dict = {}


def _text_table(dim: int, max_tokens: int):
    key = (dim, max_tokens)
    if key not in _text_tables:
        rng = SeededRng(_TEXT_TABLE_SEED)
        table = gaussian_noise((_TEXT_VOCAB, dim), rng.derive(f"tok{dim}"), np.float64)
        pos = gaussian_noise((max_tokens, dim), rng.derive(f"pos{dim}"), np.float64) * 0.5
        _text_tables[key] = (table, pos)
    return _text_tables[key]


def encode_text(s: str, dim: int = 16, max_tokens: int = 16, dtype=np.float32) -> np.ndarray:
    """Hash-bucket token embeddings plus a positional term; index 0 is padding."""
    table, pos = _text_table(dim, max_tokens)
    tokens = s.split()[:max_tokens]
    if not tokens:
        idxs = [0]
    else:
        idxs = [1 + fnv1a64(t.encode("utf-8")) % (_TEXT_VOCAB - 1) for t in tokens]
    emb = table[idxs] + pos[: len(idxs)]
    return emb.astype(dtype)


# --- fixed orthogonal patch codec ---------------------------------------------


class LatentCodec:
    """Frame-wise map between RGB space and the latent grid.

    The projection matrix has orthonormal rows whose first row is the patch
    DC component, so flat patches round-trip exactly and encode(decode(z))
    is the identity.  It is a fixed (untrained) transform.
    """

    def __init__(self, patch: int = 4, channels: int = 4, scale: float = 0.25,
                 seed: int = _CODEC_SEED):
        self.patch = patch
        self.channels = channels
        self.scale = scale
        n = patch * patch * 3
        if channels > n:
            raise ValueError(f"latent channels {channels} exceed patch dim {n}")
        dc = np.ones((n, 1)) / np.sqrt(n)
        g = gaussian_noise((n, n), SeededRng(seed), np.float64)
        q, _ = np.linalg.qr(np.concatenate([dc, g], axis=1))
        self.proj = np.ascontiguousarray(q[:, :channels].T)  # (C, n), rows orthonormal

    def encode(self, frames: np.ndarray, dtype=np.float32) -> np.ndarray:
        """(F, H, W, 3) pixels in [0, 1] -> (F, C, h, w) latents."""
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"expected (F, H, W, 3) frames, got {frames.shape}")
        F, H, W, _ = frames.shape
        p = self.patch
        if H % p or W % p:
            raise ValueError(f"frame size {H}x{W} not divisible by patch {p}")
        h, w = H // p, W // p
        x = frames.astype(np.float64) * 2.0 - 1.0
        cols = x.reshape(F, h, p, w, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(F, h * w, p * p * 3)
        z = (cols @ self.proj.T) * self.scale
        return np.ascontiguousarray(z.reshape(F, h, w, self.channels).transpose(0, 3, 1, 2)).astype(dtype)

    def decode(self, z: np.ndarray) -> np.ndarray:
        """(F, C, h, w) latents -> (F, H, W, 3) pixels (unclipped floats)."""
        if z.ndim != 4 or z.shape[1] != self.channels:
            raise ValueError(f"expected (F, {self.channels}, h, w) latents, got {z.shape}")
        F, C, h, w = z.shape
        p = self.patch
        cols = z.astype(np.float64).transpose(0, 2, 3, 1).reshape(F, h * w, C)
        x = (cols / self.scale) @ self.proj
        x = x.reshape(F, h, w, p, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(F, h * p, w * p, 3)
        return ((x + 1.0) / 2.0).astype(np.float32)


def decode_to_uint8(codec: LatentCodec, z: np.ndarray) -> np.ndarray:
    x = np.clip(codec.decode(z), 0.0, 1.0)
    return np.round(x * 255.0).astype(np.uint8)


# --- blocks --------------------------------------------------------------------


class ResConvBlock(Module):
    def __init__(self, c, temb_dim, groups, rng, dtype):
        super().__init__()
        self.add_child("gn1", GroupNorm(c, groups, dtype=dtype))
        self.add_child("conv1", Conv2d(c, c, 3, rng=rng.derive("conv1"), dtype=dtype))
        self.add_child("temb_lin", Linear(temb_dim, c, rng=rng.derive("temb"), dtype=dtype))
        self.add_child("gn2", GroupNorm(c, groups, dtype=dtype))
        self.add_child("conv2", Conv2d(c, c, 3, rng=rng.derive("conv2"), dtype=dtype))

    def forward(self, x, temb):
        a1 = self.gn1.forward(x)
        h1 = self.conv1.forward(silu(a1))
        tb = self.temb_lin.forward(silu(temb))
        h2 = h1 + tb[:, :, None, None]
        a2 = self.gn2.forward(h2)
        h3 = self.conv2.forward(silu(a2))
        self._cache = (a1, a2, temb)
        return x + h3

    def backward(self, dout):
        a1, a2, temb = self._cache
        ds2 = self.conv2.backward(dout)
        dh2 = self.gn2.backward(ds2 * silu_grad(a2))
        dta = self.temb_lin.backward(dh2.sum(axis=(2, 3)))
        dtemb = dta * silu_grad(temb)
        ds1 = self.conv1.backward(dh2)
        dx = self.gn1.backward(ds1 * silu_grad(a1)) + dout
        return dx, dtemb


class SelfAttentionBlock(Module):
    """Residual single-head attention; video mode gathers KV frames per plan."""

    def __init__(self, c, groups, rng, dtype):
        super().__init__()
        self.c = c
        self.add_child("norm", GroupNorm(c, groups, dtype=dtype))
        std = np.sqrt(1.0 / c)
        for name in ("wq", "wk", "wv", "wo"):
            self.add_param(name, gaussian_noise((c, c), rng.derive(name), dtype) * dtype(std))
        self.add_param("bo", np.zeros(c, dtype=dtype))

    def weights(self) -> AttentionWeights:
        return AttentionWeights(w_q=self.wq, w_k=self.wk, w_v=self.wv)

    def forward(self, x, plan: FrameSamplingPlan | None = None):
        N, C, H, W = x.shape
        t = self.norm.forward(x)
        tok = np.ascontiguousarray(t.reshape(N, C, H * W).transpose(0, 2, 1))
        if plan is not None:
            o = temporal_attention(tok, self.weights(), plan)
            self._cache = None
        else:
            scale = 1.0 / np.sqrt(C)
            q, k, v = tok @ self.wq, tok @ self.wk, tok @ self.wv
            p = softmax_lastdim(np.matmul(q, k.transpose(0, 2, 1)) * scale)
            o = np.matmul(p, v)
            self._cache = (tok, q, k, v, p, o, x.shape)
        y = o @ self.wo + self.bo
        return x + np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(N, C, H, W)

    def backward(self, dout):
        if self._cache is None:
            raise RuntimeError("no backward pass through video-mode attention")
        tok, q, k, v, p, o, xshape = self._cache
        N, C, H, W = xshape
        scale = 1.0 / np.sqrt(C)
        dy = np.ascontiguousarray(dout.reshape(N, C, H * W).transpose(0, 2, 1))
        self._acc("wo", o.reshape(-1, C).T @ dy.reshape(-1, C))
        self._acc("bo", dy.sum(axis=(0, 1)))
        do = dy @ self.wo.T
        dp = np.matmul(do, v.transpose(0, 2, 1))
        dv = np.matmul(p.transpose(0, 2, 1), do)
        ds = softmax_backward(dp, p) * scale
        dq = np.matmul(ds, k)
        dk = np.matmul(ds.transpose(0, 2, 1), q)
        tf = tok.reshape(-1, C)
        self._acc("wq", tf.T @ dq.reshape(-1, C))
        self._acc("wk", tf.T @ dk.reshape(-1, C))
        self._acc("wv", tf.T @ dv.reshape(-1, C))
        dtok = dq @ self.wq.T + dk @ self.wk.T + dv @ self.wv.T
        dt = np.ascontiguousarray(dtok.transpose(0, 2, 1)).reshape(N, C, H, W)
        return self.norm.backward(dt) + dout


class CrossAttentionBlock(Module):
    def __init__(self, c, text_dim, groups, rng, dtype):
        super().__init__()
        self.c, self.text_dim = c, text_dim
        self.add_child("norm", GroupNorm(c, groups, dtype=dtype))
        self.add_param("wq", gaussian_noise((c, c), rng.derive("wq"), dtype) * dtype(np.sqrt(1.0 / c)))
        self.add_param("wk", gaussian_noise((text_dim, c), rng.derive("wk"), dtype) * dtype(np.sqrt(1.0 / text_dim)))
        self.add_param("wv", gaussian_noise((text_dim, c), rng.derive("wv"), dtype) * dtype(np.sqrt(1.0 / text_dim)))
        self.add_param("wo", gaussian_noise((c, c), rng.derive("wo"), dtype) * dtype(np.sqrt(1.0 / c)))
        self.add_param("bo", np.zeros(c, dtype=dtype))

    def forward(self, x, text):
        # text: (N, L, text_dim)
        N, C, H, W = x.shape
        t = self.norm.forward(x)
        tok = np.ascontiguousarray(t.reshape(N, C, H * W).transpose(0, 2, 1))
        scale = 1.0 / np.sqrt(C)
        q = tok @ self.wq
        k = text @ self.wk
        v = text @ self.wv
        p = softmax_lastdim(np.matmul(q, k.transpose(0, 2, 1)) * scale)
        o = np.matmul(p, v)
        y = o @ self.wo + self.bo
        self._cache = (tok, text, q, k, v, p, o, x.shape)
        return x + np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(N, C, H, W)

    def backward(self, dout):
        tok, text, q, k, v, p, o, xshape = self._cache
        N, C, H, W = xshape
        scale = 1.0 / np.sqrt(C)
        dy = np.ascontiguousarray(dout.reshape(N, C, H * W).transpose(0, 2, 1))
        self._acc("wo", o.reshape(-1, C).T @ dy.reshape(-1, C))
        self._acc("bo", dy.sum(axis=(0, 1)))
        do = dy @ self.wo.T
        dp = np.matmul(do, v.transpose(0, 2, 1))
        dv = np.matmul(p.transpose(0, 2, 1), do)
        ds = softmax_backward(dp, p) * scale
        dq = np.matmul(ds, k)
        dk = np.matmul(ds.transpose(0, 2, 1), q)
        textf = text.reshape(-1, self.text_dim)
        self._acc("wq", tok.reshape(-1, C).T @ dq.reshape(-1, C))
        self._acc("wk", textf.T @ dk.reshape(-1, C))
        self._acc("wv", textf.T @ dv.reshape(-1, C))
        dtok = dq @ self.wq.T
        dt = np.ascontiguousarray(dtok.transpose(0, 2, 1)).reshape(N, C, H, W)
        return self.norm.backward(dt) + dout


class FeedForward(Module):
    def __init__(self, c, mult, groups, rng, dtype):
        super().__init__()
        self.c = c
        self.add_child("norm", GroupNorm(c, groups, dtype=dtype))
        self.add_child("lin1", Linear(c, c * mult, rng=rng.derive("lin1"),
                                      scale=np.sqrt(2.0 / c), dtype=dtype))
        self.add_child("lin2", Linear(c * mult, c, rng=rng.derive("lin2"),
                                      scale=np.sqrt(1.0 / (c * mult)), dtype=dtype))

    def forward(self, x):
        N, C, H, W = x.shape
        t = self.norm.forward(x)
        tok = np.ascontiguousarray(t.reshape(N, C, H * W).transpose(0, 2, 1))
        h = self.lin1.forward(tok)
        y = self.lin2.forward(silu(h))
        self._cache = (h, x.shape)
        return x + np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(N, C, H, W)

    def backward(self, dout):
        h, xshape = self._cache
        N, C, H, W = xshape
        dy = np.ascontiguousarray(dout.reshape(N, C, H * W).transpose(0, 2, 1))
        da = self.lin2.backward(dy)
        dtok = self.lin1.backward(da * silu_grad(h))
        dt = np.ascontiguousarray(dtok.transpose(0, 2, 1)).reshape(N, C, H, W)
        return self.norm.backward(dt) + dout


class BasicBlock(Module):
    """Conv block, then self-attention, cross-attention, feed-forward."""

    def __init__(self, c, temb_dim, text_dim, groups, ff_mult, rng, dtype):
        super().__init__()
        self.add_child("res", ResConvBlock(c, temb_dim, groups, rng.derive("res"), dtype))
        self.add_child("attn", SelfAttentionBlock(c, groups, rng.derive("attn"), dtype))
        self.add_child("cross", CrossAttentionBlock(c, text_dim, groups, rng.derive("cross"), dtype))
        self.add_child("ff", FeedForward(c, ff_mult, groups, rng.derive("ff"), dtype))

    def forward(self, x, temb, text, plan=None):
        h = self.res.forward(x, temb)
        h = self.attn.forward(h, plan)
        h = self.cross.forward(h, text)
        return self.ff.forward(h)

    def backward(self, dout):
        d = self.ff.backward(dout)
        d = self.cross.backward(d)
        d = self.attn.backward(d)
        return self.res.backward(d)


@dataclass
class ControlResiduals:
    """One feature map per skip connection plus one for the middle block."""

    skips: list
    mid: np.ndarray

    def shapes(self):
        return [s.shape for s in self.skips] + [self.mid.shape]

    @classmethod
    def zeros_like(cls, other: "ControlResiduals") -> "ControlResiduals":
        return cls(skips=[np.zeros_like(s) for s in other.skips], mid=np.zeros_like(other.mid))


def _broadcast_text(text, n, dtype):
    text = np.asarray(text, dtype=dtype)
    if text.ndim == 2:
        text = np.broadcast_to(text, (n,) + text.shape)
    if text.ndim != 3 or text.shape[0] != n:
        raise ValueError(f"text embedding batch {text.shape} does not match batch {n}")
    return np.ascontiguousarray(text)


class ImageModel(Module):
    """Two-level UNet epsilon-predictor over latents."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.np_dtype
        c1, c2 = cfg.channels
        rng = SeededRng(seed)
        lc = cfg.latent_channels
        self.add_child("temb_lin1", Linear(cfg.temb_dim, cfg.temb_dim, rng=rng.derive("t1"), dtype=dtype))
        self.add_child("temb_lin2", Linear(cfg.temb_dim, cfg.temb_dim, rng=rng.derive("t2"), dtype=dtype))
        self.add_child("conv_in", Conv2d(lc, c1, 3, rng=rng.derive("conv_in"), dtype=dtype))
        blk = lambda c, name: BasicBlock(c, cfg.temb_dim, cfg.text_dim, cfg.groups,
                                         cfg.ff_mult, rng.derive(name), dtype)
        self.add_child("enc1", blk(c1, "enc1"))
        self.add_child("down", Conv2d(c1, c2, 3, stride=2, rng=rng.derive("down"), dtype=dtype))
        self.add_child("enc2", blk(c2, "enc2"))
        self.add_child("mid", blk(c2, "mid"))
        self.add_child("fuse2", Conv2d(c2 * 2, c2, 3, rng=rng.derive("fuse2"), dtype=dtype))
        self.add_child("dec2", blk(c2, "dec2"))
        self.add_child("up_conv", Conv2d(c2, c1, 3, rng=rng.derive("up"), dtype=dtype))
        self.add_child("fuse1", Conv2d(c1 * 2, c1, 3, rng=rng.derive("fuse1"), dtype=dtype))
        self.add_child("dec1", blk(c1, "dec1"))
        self.add_child("out_norm", GroupNorm(c1, cfg.groups, dtype=dtype))
        self.add_child("out_conv", Conv2d(c1, lc, 3, init="zero", dtype=dtype))

    def _temb(self, t, n):
        dtype = self.cfg.np_dtype
        t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (n,))
        raw = timestep_embedding(t, self.cfg.temb_dim, dtype)
        e1 = self.temb_lin1.forward(raw)
        self._temb_cache = e1
        return self.temb_lin2.forward(silu(e1))

    def _temb_backward(self, dtemb):
        e1 = self._temb_cache
        de1 = self.temb_lin2.backward(dtemb) * silu_grad(e1)
        self.temb_lin1.backward(de1)

    def forward(self, x, t, text, residuals: ControlResiduals | None = None, plan=None):
        n = x.shape[0]
        c1, c2 = self.cfg.channels
        text = _broadcast_text(text, n, self.cfg.np_dtype)
        temb = self._temb(t, n)
        h0 = self.conv_in.forward(x)
        h1 = self.enc1.forward(h0, temb, text, plan)
        h2 = self.down.forward(h1)
        h3 = self.enc2.forward(h2, temb, text, plan)
        hm = self.mid.forward(h3, temb, text, plan)
        if residuals is not None:
            expect = [h1.shape, h3.shape]
            got = [s.shape for s in residuals.skips]
            if got != expect or residuals.mid.shape != hm.shape:
                raise ValueError(f"control residual shapes {got + [residuals.mid.shape]} "
                                 f"do not match injection points {expect + [hm.shape]}")
            s1 = h1 + residuals.skips[0]
            s2 = h3 + residuals.skips[1]
            m = hm + residuals.mid
        else:
            s1, s2, m = h1, h3, hm
        f2 = self.fuse2.forward(np.concatenate([m, s2], axis=1))
        d2 = self.dec2.forward(f2, temb, text, plan)
        uc = self.up_conv.forward(upsample_nearest2x(d2))
        f1 = self.fuse1.forward(np.concatenate([uc, s1], axis=1))
        d1 = self.dec1.forward(f1, temb, text, plan)
        on = self.out_norm.forward(d1)
        self._out_cache = (on, residuals is not None)
        return self.out_conv.forward(silu(on))

    def backward(self, deps):
        """Returns (dx, d_residuals); d_residuals is None when forward had none."""
        on, had_res = self._out_cache
        c1, c2 = self.cfg.channels
        don = self.out_conv.backward(deps) * silu_grad(on)
        dd1 = self.out_norm.backward(don)
        df1, dtemb = self.dec1.backward(dd1)
        dc1 = self.fuse1.backward(df1)
        duc, ds1 = dc1[:, :c1], dc1[:, c1:]
        dd2 = upsample_nearest2x_backward(self.up_conv.backward(duc))
        df2, dt = self.dec2.backward(dd2)
        dtemb += dt
        dc2 = self.fuse2.backward(df2)
        dm, ds2 = dc2[:, :c2], dc2[:, c2:]
        d_res = ControlResiduals(skips=[ds1.copy(), ds2.copy()], mid=dm.copy()) if had_res else None
        dh3, dt = self.mid.backward(dm)
        dh3 += ds2
        dh2, dt2 = self.enc2.backward(dh3)
        dh1 = self.down.backward(dh2) + ds1
        dh0, dt1 = self.enc1.backward(dh1)
        dx = self.conv_in.backward(dh0)
        self._temb_backward(dtemb + dt + dt2 + dt1)
        return dx, d_res

    def denoise(self, x, t, text, residuals=None):
        return self.forward(x, t, text, residuals, plan=None)


class VideoModel:
    """Inflated denoiser: shares every weight with the source ImageModel.

    Convolutions and norms act per frame (the frame axis is the batch axis);
    self-attention runs temporal_attention with the sampling plan.
    """

    def __init__(self, unet: ImageModel, plan: FrameSamplingPlan):
        self.unet = unet
        self.plan = plan
        self.cfg = unet.cfg

    def denoise(self, z, t, text, residuals: ControlResiduals | None = None):
        if z.shape[0] != self.plan.frames:
            raise ValueError(f"latent has {z.shape[0]} frames, plan covers {self.plan.frames}")
        return self.unet.forward(z, t, text, residuals, plan=self.plan)


def inflate_2d_to_3d(m: ImageModel, plan: FrameSamplingPlan) -> VideoModel:
    return VideoModel(m, plan)


def unet_denoise(model, z_t, t, text, residuals: ControlResiduals | None = None):
    return model.denoise(z_t, t, text, residuals)


class ControlBranch(Module):
    """Clone of the denoiser's encoder/middle plus condition stem and zero projections."""

    def __init__(self, cfg: ModelConfig, seed: int = 1):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.np_dtype
        c1, c2 = cfg.channels
        lc = cfg.latent_channels
        rng = SeededRng(seed)
        n_down = int(np.log2(cfg.patch))
        if 2 ** n_down != cfg.patch:
            raise ValueError(f"patch must be a power of two, got {cfg.patch}")
        chans = [cfg.cond_channels] + [8] * (n_down - 1) + [lc]
        self._stem_n = n_down
        for i in range(n_down):
            self.add_child(f"stem{i}", Conv2d(chans[i], chans[i + 1], 3, stride=2, bias=False,
                                              rng=rng.derive(f"stem{i}"), dtype=dtype))
        self.add_child("temb_lin1", Linear(cfg.temb_dim, cfg.temb_dim, rng=rng.derive("t1"), dtype=dtype))
        self.add_child("temb_lin2", Linear(cfg.temb_dim, cfg.temb_dim, rng=rng.derive("t2"), dtype=dtype))
        self.add_child("conv_in", Conv2d(lc, c1, 3, rng=rng.derive("conv_in"), dtype=dtype))
        blk = lambda c, name: BasicBlock(c, cfg.temb_dim, cfg.text_dim, cfg.groups,
                                         cfg.ff_mult, rng.derive(name), dtype)
        self.add_child("enc1", blk(c1, "enc1"))
        self.add_child("down", Conv2d(c1, c2, 3, stride=2, rng=rng.derive("down"), dtype=dtype))
        self.add_child("enc2", blk(c2, "enc2"))
        self.add_child("mid", blk(c2, "mid"))
        self.add_child("zp1", Conv2d(c1, c1, 1, init="zero", dtype=dtype))
        self.add_child("zp2", Conv2d(c2, c2, 1, init="zero", dtype=dtype))
        self.add_child("zpm", Conv2d(c2, c2, 1, init="zero", dtype=dtype))

    _CLONED = ("temb_lin1", "temb_lin2", "conv_in", "enc1", "down", "enc2", "mid")

    def clone_from(self, unet: ImageModel) -> "ControlBranch":
        src = dict(unet.param_arrays())
        for name in self._CLONED:
            for path, mod, attr in getattr(self, name).named_params(name + "."):
                setattr(mod, attr, src[path].copy())
        return self

    def stem_forward(self, cond_frames: np.ndarray) -> np.ndarray:
        """(F, H, W, K) condition raster -> (F, C, h, w) latent-resolution encoding."""
        if cond_frames.ndim != 4 or cond_frames.shape[-1] != self.cfg.cond_channels:
            raise ValueError(f"expected (F, H, W, {self.cfg.cond_channels}) condition, "
                             f"got {cond_frames.shape}")
        h = np.ascontiguousarray(cond_frames.transpose(0, 3, 1, 2)).astype(self.cfg.np_dtype)
        self._stem_cache = []
        for i in range(self._stem_n):
            h = getattr(self, f"stem{i}").forward(h)
            if i < self._stem_n - 1:
                self._stem_cache.append(h)
                h = silu(h)
        return h

    def stem_backward(self, dout):
        for i in reversed(range(self._stem_n)):
            if i < self._stem_n - 1:
                dout = dout * silu_grad(self._stem_cache[i])
            dout = getattr(self, f"stem{i}").backward(dout)
        return dout

    def _temb(self, t, n):
        t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (n,))
        raw = timestep_embedding(t, self.cfg.temb_dim, self.cfg.np_dtype)
        e1 = self.temb_lin1.forward(raw)
        self._temb_cache = e1
        return self.temb_lin2.forward(silu(e1))

    def forward(self, c_cond, t, text, plan=None) -> ControlResiduals:
        if c_cond.ndim != 4 or c_cond.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected latent-resolution condition, got {c_cond.shape}")
        n = c_cond.shape[0]
        text = _broadcast_text(text, n, self.cfg.np_dtype)
        temb = self._temb(t, n)
        h0 = self.conv_in.forward(c_cond)
        h1 = self.enc1.forward(h0, temb, text, plan)
        h2 = self.down.forward(h1)
        h3 = self.enc2.forward(h2, temb, text, plan)
        hm = self.mid.forward(h3, temb, text, plan)
        return ControlResiduals(skips=[self.zp1.forward(h1), self.zp2.forward(h3)],
                                mid=self.zpm.forward(hm))

    def backward(self, d_res: ControlResiduals):
        """Backprop residual gradients through the branch body; returns d(c_cond)."""
        dhm = self.zpm.backward(d_res.mid)
        dh3 = self.zp2.backward(d_res.skips[1])
        dh1 = self.zp1.backward(d_res.skips[0])
        d3, dtemb = self.mid.backward(dhm)
        dh3 = dh3 + d3
        dh2, dt = self.enc2.backward(dh3)
        dtemb += dt
        dh1 = dh1 + self.down.backward(dh2)
        dh0, dt = self.enc1.backward(dh1)
        dtemb += dt
        dc = self.conv_in.backward(dh0)
        e1 = self._temb_cache
        de1 = self.temb_lin2.backward(dtemb) * silu_grad(e1)
        self.temb_lin1.backward(de1)
        return dc


def encode_condition(branch: ControlBranch, cond_frames: np.ndarray) -> np.ndarray:
    return branch.stem_forward(cond_frames)


def control_forward(branch: ControlBranch, c_cond, t, text, plan=None) -> ControlResiduals:
    return branch.forward(c_cond, t, text, plan)


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(ckpt_dir, models: dict, config: dict) -> None:
    """Write one CVT1 file per tensor plus a JSON manifest."""
    os.makedirs(ckpt_dir, exist_ok=True)
    manifest = {"format": "condvid-checkpoint-v1", "config": config,
                "config_hash": config_hash(config), "tensors": {}}
    for model_name, model in models.items():
        for path, arr in model.param_arrays():
            full = f"{model_name}.{path}"
            fname = full + ".cvt1"
            save_cvt1(os.path.join(ckpt_dir, fname), arr)
            manifest["tensors"][full] = {
                "file": fname, "shape": list(arr.shape),
                "dtype": "f64" if arr.dtype == np.float64 else "f32",
            }
    with open(os.path.join(ckpt_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_checkpoint(ckpt_dir):
    """Returns (manifest, {model_name: {param_path: array}})."""
    path = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    with open(path) as f:
        manifest = json.load(f)
    states: dict = {}
    for full, meta in manifest["tensors"].items():
        model_name, param = full.split(".", 1)
        states.setdefault(model_name, {})[param] = load_cvt1(os.path.join(ckpt_dir, meta["file"]))
    return manifest, states
