"""Structure-aware seed locating.

Each pixel's structure map (its rectified cosine correlation with every other
pixel of the semantic feature) is compared against every candidate class map
with a soft IoU; the pixel is seeded with the best-matching class. Seeds are
hard assignments and carry no gradient, so everything here is plain NumPy.
"""

from __future__ import annotations

import numpy as np

COS_EPS = 1e-12


def _unit_pixels(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """[C,H,W] -> ([HW,C] unit vectors with zero rows for null pixels, norms)."""
    c = features.shape[0]
    flat = features.reshape(c, -1).T
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    live = norms >= COS_EPS
    unit = np.where(live[:, None], flat / np.where(live, norms, 1.0)[:, None], 0.0)
    return unit, norms


def structure_maps(features: np.ndarray) -> np.ndarray:
    """All structure maps at once: row i is S^i over the flattened grid."""
    unit, norms = _unit_pixels(np.asarray(features, dtype=np.float64))
    s = np.clip(unit @ unit.T, 0.0, 1.0)
    live = norms >= COS_EPS
    idx = np.flatnonzero(live)
    s[idx, idx] = 1.0
    return s


def structure_map(i: int, features: np.ndarray) -> np.ndarray:
    """S^i reshaped to the feature grid."""
    h, w = features.shape[-2:]
    return structure_maps(features)[i].reshape(h, w)


def _check_unit_range(name: str, arr: np.ndarray) -> None:
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got range [{arr.min()}, {arr.max()}]")


def structure_similarity(structure: np.ndarray, cam: np.ndarray) -> float:
    """Soft IoU between one structure map and one class map."""
    s = np.asarray(structure, dtype=np.float64)
    m = np.asarray(cam, dtype=np.float64)
    _check_unit_range("structure map", s)
    _check_unit_range("class map", m)
    inter = np.sum(m * s)
    union = np.sum(m + s - m * s)
    return float(inter / union) if union > 0 else 0.0


def candidate_classes(y) -> np.ndarray:
    """Channel indices allowed to receive seeds: background plus labelled classes."""
    y = np.asarray(y)
    present = np.flatnonzero(y > 0) + 1
    if present.size == 0:
        raise ValueError("image has no foreground label; cannot locate seeds")
    return np.concatenate([[0], present])


def similarities(features: np.ndarray, maps: np.ndarray, channels: np.ndarray) -> np.ndarray:
    """[len(channels), HW] soft IoU of every pixel's structure map with each channel."""
    maps = np.asarray(maps, dtype=np.float64)
    _check_unit_range("localization maps", maps)
    s = structure_maps(features)
    m = maps[channels].reshape(len(channels), -1)
    inter = m @ s.T  # [k, i] = sum_j M_k(j) S^i(j)
    union = m.sum(axis=1)[:, None] + s.sum(axis=1)[None, :] - inter
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, 0.0)


def locate(features: np.ndarray, maps: np.ndarray, y) -> np.ndarray:
    """One-hot seed mask [K+1,H,W] for one image.

    ``features`` is the semantic feature [C,H,W], ``maps`` the general CAM
    stack [K+1,H,W] and ``y`` the multi-hot label over K classes. Ties go to
    the lowest channel index, so background wins exact ties.
    """
    features = np.asarray(features, dtype=np.float64)
    maps = np.asarray(maps, dtype=np.float64)
    k1, h, w = maps.shape
    if features.shape[-2:] != (h, w):
        raise ValueError(f"feature grid {features.shape[-2:]} does not match map grid {(h, w)}")
    channels = candidate_classes(y)
    sim = similarities(features, maps, channels)
    winner = channels[np.argmax(sim, axis=0)]
    seeds = np.zeros((k1, h * w))
    seeds[winner, np.arange(h * w)] = 1.0
    return seeds.reshape(k1, h, w)


def locate_batch(features: np.ndarray, maps: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.stack([locate(f, m, y) for f, m, y in zip(features, maps, labels)])
