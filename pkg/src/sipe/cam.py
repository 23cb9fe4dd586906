"""Class activation maps, max-normalization and background estimation.

All functions accept a leading batch axis or not; channels are always axis -3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

ALPHA = 0.5
NORM_EPS = 1e-5

GENERAL = "general-CAM"
SPECIFIC = "IS-CAM"


@dataclass
class LocMaps:
    """Background map at channel 0, foreground classes at channels 1..K."""

    maps: Tensor
    kind: str

    def __post_init__(self):
        if self.kind not in (GENERAL, SPECIFIC):
            raise ValueError(f"unknown map kind {self.kind!r}")

    @property
    def num_classes(self) -> int:
        return self.maps.shape[-3] - 1


def scores(semantic: Tensor, classifier: Tensor) -> Tensor:
    """Per-pixel class scores theta_k . f(j), before any rectification."""
    *lead, c, h, w = semantic.shape
    k, cw = classifier.shape
    if c != cw:
        raise T.ShapeError(f"classifier {classifier.shape} does not match feature channels {semantic.shape}")
    flat = semantic.reshape(tuple(lead) + (c, h * w))
    return T.matmul(classifier, flat).reshape(tuple(lead) + (k, h, w))


def raw_cam(semantic: Tensor, classifier: Tensor) -> Tensor:
    return T.relu(scores(semantic, classifier))


def normalize(raw: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Divide each channel by its spatial max; the max is treated as a constant."""
    peak = raw.data.max(axis=(-2, -1), keepdims=True)
    return T.div(raw, np.maximum(peak, eps))


def background(foreground: Tensor, alpha: float = ALPHA) -> Tensor:
    """alpha * (1 - max_k M_k), kept as a single channel."""
    if foreground.shape[-3] == 0:
        raise ValueError("background estimation needs at least one foreground channel")
    top = foreground.max(axis=-3, keepdims=True)
    return T.mul(T.sub(1.0, top), alpha)


def logits(score_map: Tensor) -> Tensor:
    """Spatial mean of the unrectified score maps."""
    return score_map.mean(axis=(-2, -1))


def assemble(bg: Tensor, fg: Tensor, kind: str = GENERAL) -> LocMaps:
    return LocMaps(T.concat([bg, fg], axis=-3), kind)


def label_mask(y) -> np.ndarray:
    """Broadcastable [.., K, 1, 1] mask from a multi-hot label array."""
    y = np.asarray(y, dtype=np.float64)
    return y.reshape(y.shape + (1, 1))


def general_cam(semantic: Tensor, classifier: Tensor, y) -> tuple[LocMaps, Tensor]:
    """General CAM stack for the labelled classes, plus classification logits.

    Channels of classes absent from ``y`` are zeroed before the background is
    estimated, so only present classes compete with it.
    """
    s = scores(semantic, classifier)
    fg = T.mul(normalize(T.relu(s)), label_mask(y))
    return assemble(background(fg), fg), logits(s)
