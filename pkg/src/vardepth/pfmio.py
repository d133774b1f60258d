"""File formats: PFM depth maps, PNG images, and the paired dataset layout.

A dataset directory holds three parallel subdirectories, indexed by a
zero-padded number: rgb/NNNN.png (8-bit color), depth/NNNN.pfm (grayscale
portable float map, little-endian), mask/NNNN.png (8-bit, 0 or 255). The
same layout ingests externally converted data.
"""

from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image

from .errors import IOFormatError, ShapeError

# PFM -------------------------------------------------------------------------

def save_pfm(path: str, data: np.ndarray) -> None:
    """Grayscale PFM, scale -1.0 (little-endian), rows bottom-up per the format."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim != 2:
        raise ShapeError(f"save_pfm expects (H, W), got {a.shape}")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(a[::-1].astype("<f4").tobytes())


def load_pfm(path: str) -> np.ndarray:
    """Read a grayscale PFM written by save_pfm (or any little-endian Pf file)."""
    with open(path, "rb") as f:
        blob = f.read()
    try:
        header, rest = blob.split(b"\n", 1)
        if header.strip() != b"Pf":
            raise IOFormatError(f"{path}: not a grayscale PFM (header {header!r})")
        dims, rest = rest.split(b"\n", 1)
        m = re.fullmatch(rb"\s*(\d+)\s+(\d+)\s*", dims)
        if not m:
            raise IOFormatError(f"{path}: malformed PFM dimensions {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        scale_line, payload = rest.split(b"\n", 1)
        scale = float(scale_line)
    except IOFormatError:
        raise
    except (ValueError, IndexError) as exc:
        raise IOFormatError(f"{path}: malformed PFM header") from exc
    if scale >= 0:
        raise IOFormatError(f"{path}: big-endian PFM not supported (scale {scale})")
    expect = w * h * 4
    if len(payload) < expect:
        raise IOFormatError(
            f"{path}: truncated PFM payload ({len(payload)} of {expect} bytes)"
        )
    a = np.frombuffer(payload[:expect], dtype="<f4").reshape(h, w)
    return np.ascontiguousarray(a[::-1])


# PNG -------------------------------------------------------------------------

def save_rgb_png(path: str, rgb: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] -> 8-bit color PNG."""
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ShapeError(f"save_rgb_png expects (3, H, W), got {a.shape}")
    u8 = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path)


def load_rgb_png(path: str) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise IOFormatError(f"{path}: unreadable PNG ({exc})") from exc
    a = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(a.transpose(2, 0, 1))


def save_mask_png(path: str, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeError(f"save_mask_png expects (H, W), got {m.shape}")
    Image.fromarray(np.where(m.astype(bool), 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask_png(path: str) -> np.ndarray:
    try:
        img = Image.open(path).convert("L")
    except Exception as exc:
        raise IOFormatError(f"{path}: unreadable PNG ({exc})") from exc
    return np.asarray(img) >= 128


def save_gray16_png(path: str, values: np.ndarray) -> tuple[float, float]:
    """(H, W) floats -> 16-bit grayscale PNG, affine-stretched to the full range.

    Returns the (lo, hi) of the stretch so the caller can record it.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"save_gray16_png expects (H, W), got {a.shape}")
    lo, hi = float(a.min()), float(a.max())
    spread = hi - lo if hi > lo else 1.0
    u16 = np.round((a - lo) / spread * 65535.0).astype(np.uint16)
    Image.fromarray(u16).save(path)
    return lo, hi


# Compact viridis-style ramp for inspection images.
_RAMP = np.array([
    (0.267, 0.005, 0.329), (0.283, 0.141, 0.458), (0.254, 0.265, 0.530),
    (0.207, 0.372, 0.553), (0.164, 0.471, 0.558), (0.128, 0.567, 0.551),
    (0.135, 0.659, 0.518), (0.267, 0.749, 0.441), (0.478, 0.821, 0.318),
    (0.741, 0.873, 0.150), (0.993, 0.906, 0.144),
])


def save_colormap_png(path: str, values: np.ndarray) -> None:
    """(H, W) floats -> color-ramp PNG normalized over the value range."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"save_colormap_png expects (H, W), got {a.shape}")
    lo, hi = float(a.min()), float(a.max())
    t = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    x = t * (len(_RAMP) - 1)
    i = np.clip(x.astype(int), 0, len(_RAMP) - 2)
    frac = x - i
    color = _RAMP[i] * (1.0 - frac[..., None]) + _RAMP[i + 1] * frac[..., None]
    u8 = np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


# Dataset directory layout ------------------------------------------------------

def sample_paths(root: str, index: int) -> tuple[str, str, str]:
    name = f"{index:04d}"
    return (os.path.join(root, "rgb", name + ".png"),
            os.path.join(root, "depth", name + ".pfm"),
            os.path.join(root, "mask", name + ".png"))


def save_sample(root: str, index: int, rgb: np.ndarray, depth: np.ndarray,
                mask: np.ndarray) -> None:
    rgb_p, depth_p, mask_p = sample_paths(root, index)
    save_rgb_png(rgb_p, rgb)
    save_pfm(depth_p, depth)
    save_mask_png(mask_p, mask)


def load_sample(root: str, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb_p, depth_p, mask_p = sample_paths(root, index)
    for p in (rgb_p, depth_p, mask_p):
        if not os.path.isfile(p):
            raise IOFormatError(f"missing dataset file: {p}")
    rgb = load_rgb_png(rgb_p)
    depth = load_pfm(depth_p)
    mask = load_mask_png(mask_p)
    if depth.shape != rgb.shape[1:] or mask.shape != rgb.shape[1:]:
        raise IOFormatError(
            f"sample {index:04d}: rgb {rgb.shape[1:]}, depth {depth.shape}, "
            f"mask {mask.shape} disagree"
        )
    return rgb, depth, mask


def init_dataset_dir(root: str) -> None:
    for sub in ("rgb", "depth", "mask"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)


def list_indices(root: str) -> list[int]:
    """Sample indices present in a dataset directory (by the rgb listing)."""
    rgb_dir = os.path.join(root, "rgb")
    if not os.path.isdir(rgb_dir):
        return []
    out = []
    for name in sorted(os.listdir(rgb_dir)):
        m = re.fullmatch(r"(\d{4})\.png", name)
        if m:
            out.append(int(m.group(1)))
    return out
