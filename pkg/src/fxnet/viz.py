"""Filter visualization: top activating images and back-projection to pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import BackwardRule, Conv2D
from .model import Model
from .pnm import write_pgm, write_ppm

METHODS = {rule.value: rule for rule in BackwardRule}
OVERLAY_ALPHA = 0.6


@dataclass
class ActivationRecord:
    image_id: str
    layer: str
    filter: int
    score: float


@dataclass
class SaliencyMap:
    image_id: str
    layer: str
    filter: int
    method: str
    attribution: np.ndarray  # (H, W), signed


def activation_tap(model: Model, layer: str) -> str:
    """Name of the post-ReLU output whose maps are the filter activations of conv ``layer``."""
    if not isinstance(model[layer], Conv2D):
        raise ValueError(f"{layer!r} is not a convolutional layer")
    return f"{layer}_relu"


def _check_filter(model: Model, layer: str, j: int) -> None:
    activation_tap(model, layer)
    count = model[layer].out_channels
    if not 0 <= j < count:
        raise ValueError(f"filter {j} out of range; {layer} has {count} filters")


def filter_scores(model: Model, images: np.ndarray, layer: str, batch: int = 64) -> np.ndarray:
    """(N, J) spatial maxima of every filter's post-ReLU map."""
    tap = activation_tap(model, layer)
    out = []
    for s in range(0, len(images), batch):
        maps = model.forward(images[s:s + batch], upto=tap)
        out.append(maps.reshape(maps.shape[0], maps.shape[1], -1).max(axis=-1))
    return np.concatenate(out) if out else np.zeros((0, model[layer].out_channels))


def rank_top(scores: np.ndarray, ids: list[str], n: int) -> list[int]:
    """Indices of the top ``n`` scores, ties broken by ascending id."""
    order = sorted(range(len(ids)), key=lambda i: (-float(scores[i]), ids[i]))
    return order[:n]


def top_activations(model: Model, dataset, layer: str, j: int, n: int) -> list[ActivationRecord]:
    _check_filter(model, layer, j)
    if n < 0:
        raise ValueError("N must be non-negative")
    if n == 0:
        return []
    scores = filter_scores(model, dataset.pixels, layer)[:, j]
    return [ActivationRecord(dataset.ids[i], layer, j, float(scores[i])) for i in rank_top(scores, dataset.ids, n)]


def project_back(model: Model, image: np.ndarray, layer: str, j: int, method: str = "guided",
                 start: str = "onehot", image_id: str = "", record: dict | None = None) -> SaliencyMap:
    """Back-project filter ``j`` of conv ``layer`` onto the input pixels.

    The backward pass starts at the filter's post-ReLU map with every other
    channel zeroed.  ``start="onehot"`` keeps a single 1 at the map's
    spatial argmax; ``start="map"`` keeps the whole activation map.  ReLUs on
    the way down follow ``method`` (``backprop``, ``deconvnet``, ``guided``).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    if start not in ("onehot", "map"):
        raise ValueError(f"start must be 'onehot' or 'map', got {start!r}")
    _check_filter(model, layer, j)
    tap = activation_tap(model, layer)
    x = np.asarray(image, dtype=model.dtype)
    if x.ndim == 3:
        x = x[None]
    acts = model.forward(x, upto=tap, record=record)
    seed = np.zeros_like(acts)
    fmap = acts[0, j]
    if start == "onehot":
        y, xcol = np.unravel_index(np.argmax(fmap), fmap.shape)
        seed[0, j, y, xcol] = 1.0
    else:
        seed[0, j] = fmap
    grads = {} if record is not None else None
    g = model.backward(seed, start=tap, rule=METHODS[method], record=grads)
    if record is not None:
        record["grads"] = grads
    return SaliencyMap(image_id, layer, j, method, g[0].sum(axis=0))


def normalize_bytes(values: np.ndarray) -> np.ndarray:
    """Min-max scale ``|values|`` to 0..255.

    A constant map has no range: all-zero renders 0, any other constant
    renders mid-gray 128.
    """
    a = np.abs(np.asarray(values, dtype=np.float64))
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full(a.shape, 0 if hi == 0 else 128, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render(saliency: SaliencyMap, base_image: np.ndarray | None, out_path, style: str = "gray") -> None:
    """``gray`` writes a P5 map of the attribution; ``overlay`` writes a P6 with
    the base image as luminance and the attribution blended into red."""
    attr = saliency.attribution
    if style == "gray":
        write_pgm(out_path, normalize_bytes(attr))
        return
    if style != "overlay":
        raise ValueError(f"style must be 'gray' or 'overlay', got {style!r}")
    base = np.asarray(base_image, dtype=np.float64)
    if base.ndim == 3:
        base = base.mean(axis=0)
    if base.shape != attr.shape:
        raise ValueError(f"base image {base.shape} and attribution {attr.shape} differ in shape")
    heat = normalize_bytes(attr) / 255.0
    rgb = np.empty(base.shape + (3,))
    rgb[..., 0] = (1 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * heat
    rgb[..., 1] = (1 - OVERLAY_ALPHA) * base
    rgb[..., 2] = (1 - OVERLAY_ALPHA) * base
    write_ppm(out_path, np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8))
