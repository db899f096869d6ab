"""Random flips and affine warps with bilinear sampling.

Transforms act on pixel-centre coordinates relative to the image centre
``((W-1)/2, (H-1)/2)``, x to the right and y down.  A positive rotation turns
the picture counter-clockwise on screen, the same direction as ``np.rot90``.
Source pixels that fall outside the image read as 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import RngStream


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rotation: float = 15.0  # degrees, symmetric range
    translation: float = 0.10  # fraction of each extent, symmetric
    scale: tuple[float, float] = (0.9, 1.1)
    shear: float = 10.0  # degrees, symmetric

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(flip_prob=0.0, rotation=0.0, translation=0.0, scale=(1.0, 1.0), shear=0.0)


def affine_matrix(shape: tuple[int, int], *, flip: bool = False, angle: float = 0.0, tx: float = 0.0,
                  ty: float = 0.0, scale: float = 1.0, shear: float = 0.0) -> np.ndarray:
    """3x3 forward map from source to destination pixel coordinates.

    Order: horizontal flip, scale, shear (x += tan(shear) * y), rotation,
    translation by (tx, ty) pixels; all about the image centre.
    """
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    to_centre = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    back = np.array([[1.0, 0, cx + tx], [0, 1.0, cy + ty], [0, 0, 1.0]])
    flip_m = np.diag([-1.0 if flip else 1.0, 1.0, 1.0])
    scale_m = np.diag([scale, scale, 1.0])
    shear_m = np.array([[1.0, math.tan(math.radians(shear)), 0], [0, 1.0, 0], [0, 0, 1.0]])
    a = math.radians(angle)
    c, s = _exact_cos_sin(a)
    rot_m = np.array([[c, s, 0], [-s, c, 0], [0, 0, 1.0]])
    return back @ rot_m @ shear_m @ scale_m @ flip_m @ to_centre


def _exact_cos_sin(a: float) -> tuple[float, float]:
    # quarter turns land exactly on the pixel grid
    quarters = a / (math.pi / 2)
    if abs(quarters - round(quarters)) < 1e-12:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(round(quarters)) % 4]
    return math.cos(a), math.sin(a)


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``image`` (C, H, W) at float coordinates; outside reads 0."""
    c, h, w = image.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0).astype(image.dtype)
    fy = (ys - y0).astype(image.dtype)
    out = np.zeros((c,) + xs.shape, dtype=image.dtype)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            weight = np.where(ok, wx * wy, 0).astype(image.dtype)
            vals = image[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += weight * vals
    return out


def warp(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a forward 3x3 affine map to ``image`` (C, H, W) by inverse sampling."""
    _, h, w = image.shape
    inv = np.linalg.inv(matrix)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    # snap values that are integers up to rounding so exact grid maps stay exact
    sx = np.where(np.abs(sx - np.round(sx)) < 1e-9, np.round(sx), sx)
    sy = np.where(np.abs(sy - np.round(sy)) < 1e-9, np.round(sy), sy)
    return bilinear_sample(image, sx, sy)


def sample_params(config: AugmentConfig, shape: tuple[int, int], rng: RngStream) -> dict:
    h, w = shape
    # draws are made unconditionally so the stream position never depends on the config
    u = rng.uniform(size=6)
    return {
        "flip": bool(u[0] < config.flip_prob),
        "angle": (2 * u[1] - 1) * config.rotation,
        "tx": (2 * u[2] - 1) * config.translation * w,
        "ty": (2 * u[3] - 1) * config.translation * h,
        "scale": config.scale[0] + u[4] * (config.scale[1] - config.scale[0]),
        "shear": (2 * u[5] - 1) * config.shear,
    }


def augment(image: np.ndarray, config: AugmentConfig, rng: RngStream) -> np.ndarray:
    """One random flip + affine draw applied to ``image`` (C, H, W); shape is preserved."""
    params = sample_params(config, image.shape[1:], rng)
    out = warp(image, affine_matrix(image.shape[1:], **params))
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize (C, H, W) to ``size`` with pixel-centre alignment and edge clamping."""
    _, h, w = image.shape
    oh, ow = size
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(image, gx, gy)
