"""Synthetic multi-label shapes with pixel ground truth.

Every sample draws from its own Philox-4x64 stream keyed by ``(seed, index)``,
so a sample depends only on those two numbers and can be generated in any
order or in parallel.

Each shape has a plain coloured body and a small marker patch with a
class-specific stripe texture. The marker is the easiest cue for a classifier,
which is what makes plain class activation maps cover only part of an object.
"""

from __future__ import annotations

import colorsys
import csv
import os
from dataclasses import dataclass

import numpy as np

from . import pnm

SHAPES = ("circle", "square", "triangle", "cross", "ring")
NUM_CLASSES = len(SHAPES)
SIZE = 64
MIN_PIXELS = 16
IGNORE = 255

# adjacent classes overlap in body hue once jitter is applied
HUE_BASE = (0.00, 0.07, 0.14, 0.21, 0.28)
HUE_JITTER = 0.05
RADIUS = (9.0, 15.0)
# stripe direction (dy, dx) and period of each class's marker texture
MARKER_STRIPES = ((0, 1, 3), (1, 0, 3), (1, 1, 4), (1, -1, 4), (0, 1, 6))


@dataclass
class Dataset:
    images: np.ndarray  # [N,3,H,W] float64 in [0,1], multiples of 1/255
    labels: np.ndarray  # [N,K] int {0,1}
    masks: np.ndarray | None  # [N,H,W] uint8, 0 = background, k = class k
    names: list[str]

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        masks = None if self.masks is None else self.masks[idx]
        return Dataset(self.images[idx], self.labels[idx], masks, [self.names[i] for i in idx])


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, index]))


def shape_mask(kind: str, cy: float, cx: float, r: float, size: int = SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dx * dx + dy * dy < r * r
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) < 0.85 * r
    if kind == "triangle":
        # apex up, base at +0.8r
        top = dy > -r
        bottom = dy < 0.8 * r
        side = np.abs(dx) < (dy + r) * (1.0 / 1.8)
        return top & bottom & side
    if kind == "cross":
        arm = r / 3.0
        return ((np.abs(dx) < arm) & (np.abs(dy) < r)) | ((np.abs(dy) < arm) & (np.abs(dx) < r))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 < r * r) & (d2 > (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def stripes(cls: int, size: int = SIZE) -> np.ndarray:
    dy, dx, period = MARKER_STRIPES[cls]
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy * dy + xx * dx) % period) < (period / 2)


def _background(rng: np.random.Generator) -> np.ndarray:
    tones = []
    for _ in range(2):
        hue = rng.uniform(0.5, 0.85)
        tones.append(colorsys.hsv_to_rgb(hue, rng.uniform(0.1, 0.35), rng.uniform(0.3, 0.7)))
    coarse = rng.random((9, 9))
    yy = np.linspace(0, 8, SIZE)
    iy = np.clip(yy.astype(int), 0, 7)
    fy = yy - iy
    rows = coarse[iy] * (1 - fy)[:, None] + coarse[iy + 1] * fy[:, None]
    field = rows[:, iy] * (1 - fy)[None, :] + rows[:, iy + 1] * fy[None, :]
    pick = field > np.median(field)
    img = np.where(pick[None], np.array(tones[0])[:, None, None], np.array(tones[1])[:, None, None])
    return img + rng.uniform(-0.03, 0.03, size=img.shape)


def _place(rng: np.random.Generator, placed: list[tuple[float, float, float]]):
    for _ in range(50):
        r = rng.uniform(*RADIUS)
        cy, cx = rng.uniform(r, SIZE - r, size=2)
        if all(np.hypot(cy - py, cx - px) > 0.8 * (r + pr) for py, px, pr in placed):
            return cy, cx, r
    return cy, cx, r


def generate_sample(seed: int, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(image [3,H,W] in [0,1], label [K], mask [H,W]) for one sample."""
    rng = sample_rng(seed, index)
    img = _background(rng)
    mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
    placed: list[tuple[float, float, float]] = []
    for _ in range(int(rng.integers(1, 4))):
        cls = int(rng.integers(0, NUM_CLASSES))
        cy, cx, r = _place(rng, placed)
        placed.append((cy, cx, r))
        body = shape_mask(SHAPES[cls], cy, cx, r)
        hue = (HUE_BASE[cls] + rng.uniform(-HUE_JITTER, HUE_JITTER)) % 1.0
        color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 0.9), rng.uniform(0.75, 0.95)))
        img = np.where(body[None], color[:, None, None] + rng.uniform(-0.02, 0.02, size=img.shape), img)

        # marker: the part of the body inside a small disk around a body pixel
        ys, xs = np.nonzero(body)
        pick = int(rng.integers(0, len(ys)))
        marker = body & shape_mask("circle", ys[pick] + 0.5, xs[pick] + 0.5, 0.45 * r)
        texture = np.where(stripes(cls), 1.0, 0.0)
        img = np.where(marker[None], texture[None], img)
        mask[body] = cls + 1

    label = np.array([int((mask == k + 1).sum() >= MIN_PIXELS) for k in range(NUM_CLASSES)])
    if not label.any():  # every shape occluded below the pixel floor; keep the largest
        counts = [(mask == k + 1).sum() for k in range(NUM_CLASSES)]
        label[int(np.argmax(counts))] = 1
        mask[(mask > 0) & (mask != int(np.argmax(counts)) + 1)] = 0
    # labels must agree with the mask, so drop sub-threshold remnants
    for k in range(NUM_CLASSES):
        if not label[k]:
            mask[mask == k + 1] = 0
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img, label, mask


def generate(n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError(f"sample count must be at least 1, got {n}")
    items = [generate_sample(seed, i) for i in range(n)]
    return Dataset(
        np.stack([it[0] for it in items]),
        np.stack([it[1] for it in items]),
        np.stack([it[2] for it in items]),
        [f"{i:05d}" for i in range(n)],
    )


# ---------------------------------------------------------------------------
# on-disk layout: images/NAME.ppm, masks/NAME.pgm, labels.csv (file,labels)
# ---------------------------------------------------------------------------


def encode_labels(y) -> str:
    bits = sum(1 << k for k, v in enumerate(y) if v)
    return f"0b{bits:0{len(y)}b}"


def decode_labels(text: str, num_classes: int = NUM_CLASSES) -> np.ndarray:
    bits = int(text, 0)
    if bits >> num_classes:
        raise ValueError(f"label bitmask {text!r} has bits beyond {num_classes} classes")
    return np.array([(bits >> k) & 1 for k in range(num_classes)])


def save(dataset: Dataset, root) -> None:
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    if dataset.masks is not None:
        os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    rows = []
    for i, name in enumerate(dataset.names):
        rgb = np.round(dataset.images[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        pnm.write(os.path.join(root, "images", f"{name}.ppm"), rgb)
        if dataset.masks is not None:
            pnm.write(os.path.join(root, "masks", f"{name}.pgm"), dataset.masks[i].astype(np.uint8))
        rows.append(f"{name}.ppm,{encode_labels(dataset.labels[i])}\n")
    pnm.write_atomic(os.path.join(root, "labels.csv"), ("file,labels\n" + "".join(rows)).encode())


def load(root, num_classes: int = NUM_CLASSES) -> Dataset:
    """Read a dataset directory; masks are optional and all-or-nothing."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    csv_path = os.path.join(root, "labels.csv")
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["file", "labels"]:
            raise ValueError(f"{csv_path}: expected header 'file,labels', got {header}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ValueError(f"{csv_path}: line {lineno}: expected 2 fields, got {len(row)}")
            entries.append((row[0], decode_labels(row[1], num_classes)))

    images, labels, masks, names = [], [], [], []
    have_masks = True
    for fname, y in entries:
        rgb = pnm.read(os.path.join(root, "images", fname))
        if rgb.ndim != 3:
            raise ValueError(f"{fname}: expected a colour (P6) image")
        images.append(rgb.transpose(2, 0, 1).astype(np.float64) / 255.0)
        labels.append(y)
        name = os.path.splitext(fname)[0]
        names.append(name)
        mask_path = os.path.join(root, "masks", f"{name}.pgm")
        if have_masks and os.path.exists(mask_path):
            masks.append(pnm.read(mask_path))
        else:
            have_masks = False
    return Dataset(
        np.stack(images),
        np.stack(labels),
        np.stack(masks) if have_masks and masks else None,
        names,
    )
