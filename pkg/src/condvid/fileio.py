"""Binary PPM/PGM frame files and dataset/video directory layouts.

PPM (P6) and PGM (P5) are used everywhere because they are bit-exact:
golden tests compare output files byte for byte.
"""

from __future__ import annotations

import os
import re

import numpy as np


def write_ppm(path, frame: np.ndarray) -> None:
    """frame: (H, W, 3) uint8."""
    if frame.ndim != 3 or frame.shape[2] != 3 or frame.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 frame, got {frame.shape} {frame.dtype}")
    h, w = frame.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(frame).tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    """mask: (H, W) uint8."""
    if mask.ndim != 2 or mask.dtype != np.uint8:
        raise ValueError(f"expected (H, W) uint8 mask, got {mask.shape} {mask.dtype}")
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(mask).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    # header: magic, whitespace-separated width/height/maxval, single whitespace, payload
    m = re.match(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m or m.group(1) != magic:
        raise ValueError(f"{path}: not a {magic.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    payload = data[m.end():m.end() + w * h * channels]
    if len(payload) != w * h * channels:
        raise ValueError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def write_frames(out_dir, frames: np.ndarray) -> list[str]:
    """Write (F, H, W, 3) uint8 frames as frame_%04d.ppm; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = os.path.join(out_dir, f"frame_{i:04d}.ppm")
        write_ppm(p, frame)
        paths.append(p)
    return paths


def read_frames(video_dir) -> np.ndarray:
    """Read all frame_*.ppm files of a directory in index order."""
    names = sorted(n for n in os.listdir(video_dir)
                   if n.startswith("frame_") and n.endswith(".ppm"))
    if not names:
        raise FileNotFoundError(f"no frame_*.ppm files in {video_dir}")
    return np.stack([read_ppm(os.path.join(video_dir, n)) for n in names])


def read_masks(mask_dir) -> np.ndarray:
    names = sorted(n for n in os.listdir(mask_dir)
                   if n.startswith("mask_") and n.endswith(".pgm"))
    if not names:
        raise FileNotFoundError(f"no mask_*.pgm files in {mask_dir}")
    return np.stack([read_pgm(os.path.join(mask_dir, n)) for n in names])
