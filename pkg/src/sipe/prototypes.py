"""Image-specific prototypes and the image-specific CAM built from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cam
from . import tensor as T
from .tensor import Tensor

COS_EPS = 1e-12


@dataclass
class Prototypes:
    vectors: Tensor  # [..., K+1, C]; rows of invalid classes are zero
    valid: np.ndarray  # [..., K+1] bool


def seed_weights(seeds: np.ndarray, y, maps: np.ndarray | None = None, background: bool = True):
    """Averaging weights [..., K+1, HW] and validity flags for each prototype.

    A labelled class without any seed pixel falls back to the single pixel
    where its localization map peaks; this needs ``maps``.
    """
    seeds = np.asarray(seeds, dtype=np.float64)
    y = np.asarray(y)
    *lead, k1, h, w = seeds.shape
    flat = seeds.reshape(tuple(lead) + (k1, h * w))
    valid = np.concatenate([np.full(tuple(lead) + (1,), background), y > 0], axis=-1)
    counts = flat.sum(axis=-1)
    weights = np.where(counts[..., None] > 0, flat / np.maximum(counts, 1.0)[..., None], 0.0)

    empty = valid & (counts == 0)
    if empty.any():
        if maps is None:
            raise ValueError("empty seed region and no maps given for the fallback")
        mflat = np.asarray(maps).reshape(tuple(lead) + (k1, h * w))
        for idx in zip(*np.nonzero(empty)):
            weights[idx] = 0.0
            weights[idx + (int(np.argmax(mflat[idx])),)] = 1.0
    weights = weights * valid[..., None]
    return weights, valid


def extract(features: Tensor, seeds: np.ndarray, y, maps: np.ndarray | None = None,
            background: bool = True) -> Prototypes:
    """Masked mean of ``features`` over each class's seed pixels.

    Gradient reaches ``features``; the seeds are constants.
    """
    *lead, c, h, w = features.shape
    weights, valid = seed_weights(seeds, y, maps, background)
    flat = features.reshape(tuple(lead) + (c, h * w))
    vectors = T.matmul(weights, T.transpose(flat, tuple(range(len(lead))) + (len(lead) + 1, len(lead))))
    return Prototypes(vectors, valid)


def unit(x: Tensor, axis: int) -> Tensor:
    """x / ||x|| along ``axis``; vectors shorter than the guard map to zero."""
    norm = T.l2norm(x, axis=axis, keepdims=True, eps=COS_EPS)
    live = (norm.data >= COS_EPS).astype(np.float64)
    return T.mul(T.div(x, T.clamp_min(norm, COS_EPS)), live)


def iscam(features: Tensor, protos: Prototypes, alpha: float = cam.ALPHA) -> cam.LocMaps:
    """Rectified cosine between every pixel feature and every valid prototype.

    Without a background prototype the background channel is estimated from
    the foreground channels the same way as for the general CAM.
    """
    *lead, c, h, w = features.shape
    k1 = protos.vectors.shape[-2]
    pix = unit(features.reshape(tuple(lead) + (c, h * w)), axis=-2)
    cen = unit(protos.vectors, axis=-1)
    act = T.relu(T.matmul(cen, pix)).reshape(tuple(lead) + (k1, h, w))
    act = T.mul(act, protos.valid[..., None, None].astype(np.float64))
    if protos.valid[..., 0].all():
        return cam.LocMaps(act, cam.SPECIFIC)
    fg = T.take(act, np.arange(1, k1), axis=-3)
    return cam.assemble(cam.background(fg, alpha), fg, cam.SPECIFIC)
