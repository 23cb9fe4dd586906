"""Analytic gradients of the full training loss against central differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone, train
from . import tensor as T
from .backbone import BackboneConfig, Params

TOY_CONFIG = BackboneConfig(num_classes=2, widths=(3, 4, 5, 6), strides=(1, 2, 1, 1), lateral=2)
STEP = 1e-5
TOLERANCE = 1e-4
# below this magnitude differences are compared absolutely
FLOOR = 1e-6
# consistency terms closer than this to |.|'s kink make central differences meaningless
KINK_MARGIN = 1e-3
MAX_DRAWS = 100


@dataclass
class GroupError:
    name: str
    max_rel: float
    max_abs_grad: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return np.abs(analytic - numeric) / scale


def kink_distance(out: train.Outputs, labels: np.ndarray) -> float:
    """Smallest |M - M~| over the entries the consistency loss sums.

    Entries where both stacks are zero in a foreground channel are skipped:
    both sides are locally constant there.
    """
    weights = train.gsc_weights(labels).reshape(len(labels), -1)
    gap = np.abs(out.general.maps.data - out.specific.maps.data)
    dead = (out.general.maps.data == 0) & (out.specific.maps.data == 0)
    dead[:, 0] = False
    live = (weights[:, :, None, None] > 0) & ~dead
    return float(gap[live].min()) if live.any() else np.inf


def toy_problem(seed: int, options: train.ModelOptions = train.ModelOptions()):
    """Params, images [2,3,8,8] and labels for a small, nondegenerate instance.

    Images are redrawn from the same stream until no consistency term sits
    within KINK_MARGIN of the |.| kink; a class whose only seed pixel is its
    CAM peak puts both maps at exactly 1 there.
    """
    rng = np.random.Generator(np.random.Philox(key=[seed, 7]))
    params = backbone.init(seed, TOY_CONFIG)
    arrays = {
        k: v + rng.normal(0.0, 0.1, v.shape) if k.endswith(".bias") else v.copy()
        for k, v in params.arrays().items()
    }
    labels = np.array([[1, 0], [1, 1]])
    for _ in range(MAX_DRAWS):
        images = rng.random((2, 3, 8, 8))
        if not options.gsc:
            break
        detached = Params(TOY_CONFIG, {k: T.Tensor(v) for k, v in arrays.items()})
        if kink_distance(train.run(images, labels, detached, options), labels) > KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"no kink-free toy instance for seed {seed} in {MAX_DRAWS} draws")
    return arrays, images, labels


def check(seed: int = 0, options: train.ModelOptions = train.ModelOptions(), step: float = STEP) -> list[GroupError]:
    """Per-parameter-group worst relative error of the gradient of L_total.

    Quantities the loss treats as constants (CAM peaks, seed masks) are
    recorded at the base point and replayed for every perturbed evaluation.
    """
    arrays, images, labels = toy_problem(seed, options)
    params = Params.from_arrays(TOY_CONFIG, arrays)
    total, _, _, out = train.total_loss(images, labels, params, options)
    grads = dict(zip(params.names(), T.grad(total, params.values())))

    def loss_at(name, value):
        perturbed = dict(arrays)
        perturbed[name] = value
        p = Params.from_arrays(TOY_CONFIG, perturbed)
        return train.total_loss(images, labels, p, options, frozen=dict(out.frozen))[0].item()

    report = []
    for name, base in arrays.items():
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            hi = base.copy()
            lo = base.copy()
            hi[idx] += step
            lo[idx] -= step
            numeric[idx] = (loss_at(name, hi) - loss_at(name, lo)) / (2 * step)
        err = relative_error(grads[name], numeric)
        report.append(GroupError(name, float(err.max()), float(np.abs(grads[name]).max())))
    return report
