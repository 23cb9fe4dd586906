"""Losses, the full forward pipeline, and the momentum-SGD training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone, cam, prototypes, seeds
from . import tensor as T
from .backbone import BackboneConfig, Params
from .tensor import Tensor

log = logging.getLogger(__name__)

INPUT_MEAN = 0.5


@dataclass(frozen=True)
class ModelOptions:
    """Which parts of the method are switched on."""

    ipe: bool = True
    gsc: bool = True
    feature: str = "hierarchical"
    bpm: bool = True
    # when set, losses on the hierarchical feature train only the lateral kernels
    detach_lateral: bool = False

    def __post_init__(self):
        if self.feature not in ("hierarchical", "semantic"):
            raise ValueError(f"feature must be 'hierarchical' or 'semantic', got {self.feature!r}")
        if self.gsc and not self.ipe:
            raise ValueError("the consistency loss needs image-specific maps (ipe)")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 16
    lr_backbone: float = 0.1
    lr_new: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    seed: int = 0
    flip: bool = True
    # epochs trained on the classification loss alone before GSC switches on,
    # capped at epochs - 1 so short runs still see the consistency loss
    gsc_warmup: int = 4

    def __post_init__(self):
        if self.lr_backbone <= 0 or self.lr_new <= 0:
            raise ValueError("learning rates must be positive")
        if self.power <= 0:
            raise ValueError("poly power must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be at least 1")
        if self.gsc_warmup < 0:
            raise ValueError("gsc warm-up must be non-negative")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cls_loss(logits: Tensor, y) -> Tensor:
    """Multi-label soft margin loss, averaged over classes and then over the batch."""
    y = np.asarray(y, dtype=np.float64)
    if logits.shape != y.shape:
        raise T.ShapeError(f"logits {logits.shape} and labels {y.shape} differ")
    # -log sigma(z) = softplus(-z), -log(1 - sigma(z)) = softplus(z)
    per = T.add(T.mul(T.softplus(T.mul(logits, -1.0)), y), T.mul(T.softplus(logits), 1.0 - y))
    return per.mean()


def gsc_weights(y) -> np.ndarray:
    """[..., K+1] channel weights: background and labelled classes."""
    y = np.asarray(y, dtype=np.float64)
    return np.concatenate([np.ones(y.shape[:-1] + (1,)), (y > 0).astype(np.float64)], axis=-1)


def gsc_loss(general: cam.LocMaps, specific: cam.LocMaps, y) -> Tensor:
    """Mean absolute difference over background + labelled channels and all pixels."""
    if general.kind == specific.kind:
        raise ValueError(f"consistency loss compares different map kinds, got {general.kind} twice")
    a, b = general.maps, specific.maps
    if a.shape != b.shape:
        raise T.ShapeError(f"map stacks differ in shape: {a.shape} vs {b.shape}")
    w = gsc_weights(y)
    h, wd = a.shape[-2:]
    diff = T.absolute(T.sub(a, b)).sum(axis=(-2, -1))  # [..., K+1]
    per_image = T.mul(diff, w / (h * wd * w.sum(axis=-1, keepdims=True))).sum(axis=-1)
    return per_image.mean()


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class Outputs:
    logits: Tensor
    general: cam.LocMaps
    specific: cam.LocMaps | None
    seeds: np.ndarray | None
    features: backbone.FeatureBundle
    # values treated as constants by the gradient; replaying them makes the
    # forward pass a smooth function that finite differences can check
    frozen: dict = field(default_factory=dict)


def run(images, y, params: Params, options: ModelOptions = ModelOptions(), frozen: dict | None = None) -> Outputs:
    """Forward through backbone, CAM, seeds, prototypes and IS-CAM for a batch."""
    images = T.as_tensor(np.asarray(T.as_tensor(images).data) - INPUT_MEAN)
    y = np.asarray(y, dtype=np.float64)
    feats = backbone.forward(images, params, options.detach_lateral)
    s = cam.scores(feats.semantic, params["classifier.weight"])
    raw = T.relu(s)
    rec = {} if frozen is None else frozen
    if "peak" not in rec:
        rec["peak"] = np.maximum(raw.data.max(axis=(-2, -1), keepdims=True), cam.NORM_EPS)
    fg = T.mul(T.div(raw, rec["peak"]), cam.label_mask(y))
    general = cam.assemble(cam.background(fg), fg)
    logits = cam.logits(s)
    if not options.ipe:
        return Outputs(logits, general, None, None, feats, rec)

    if "seeds" not in rec:
        single = images.ndim == 3
        f = feats.semantic.data
        m = general.maps.data
        rec["seeds"] = seeds.locate(f, m, y) if single else seeds.locate_batch(f, m, y)
        rec["maps"] = general.maps.data
    source = feats.hierarchical if options.feature == "hierarchical" else feats.semantic
    protos = prototypes.extract(source, rec["seeds"], y, rec["maps"], background=options.bpm)
    specific = prototypes.iscam(source, protos)
    return Outputs(logits, general, specific, rec["seeds"], feats, rec)


def total_loss(images, y, params: Params, options: ModelOptions = ModelOptions(), frozen: dict | None = None):
    """Returns (L_total, L_cls, L_gsc, outputs); L_gsc is None when disabled."""
    out = run(images, y, params, options, frozen)
    l_cls = cls_loss(out.logits, y)
    if not options.gsc:
        return l_cls, l_cls, None, out
    l_gsc = gsc_loss(out.general, out.specific, y)
    return T.add(l_cls, l_gsc), l_cls, l_gsc, out


def loss_and_grads(images, y, params: Params, options: ModelOptions = ModelOptions()):
    total, l_cls, l_gsc, out = total_loss(images, y, params, options)
    grads = T.grad(total, params.values())
    return total, l_cls, l_gsc, dict(zip(params.names(), grads))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    return base * (1.0 - step / total) ** power


@dataclass
class OptimState:
    momentum: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Params) -> OptimState:
        return cls({k: np.zeros(v.shape) for k, v in params.tensors.items()})


def group_lr(name: str, config: TrainConfig) -> float:
    return config.lr_backbone if backbone.is_backbone_param(name) else config.lr_new


def step(params: Params, grads: dict[str, np.ndarray], state: OptimState, config: TrainConfig,
         total_steps: int) -> Params:
    """One momentum-SGD update with weight decay and the poly schedule."""
    scale = (1.0 - state.step / total_steps) ** config.power
    new = {}
    for name, p in params.tensors.items():
        g = grads[name] + config.weight_decay * p.data
        buf = config.momentum * state.momentum[name] + g
        state.momentum[name] = buf
        new[name] = Tensor(p.data - group_lr(name, config) * scale * buf, requires_grad=True)
    state.step += 1
    return Params(params.config, new)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def train(images: np.ndarray, labels: np.ndarray, options: ModelOptions = ModelOptions(),
          config: TrainConfig = TrainConfig(), backbone_config: BackboneConfig | None = None,
          log_file=None, on_epoch=None) -> Params:
    """Train from a fresh initialization; fully determined by ``config.seed``."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    bcfg = backbone_config or BackboneConfig(num_classes=labels.shape[1])
    params = backbone.init(config.seed, bcfg)
    state = OptimState.zeros(params)
    rng = np.random.Generator(np.random.Philox(key=[config.seed, 1]))
    per_epoch = -(-len(images) // config.batch_size)
    total_steps = per_epoch * config.epochs

    warmup = min(config.gsc_warmup, config.epochs - 1)
    for epoch in range(config.epochs):
        epoch_options = replace(options, gsc=False) if epoch < warmup else options
        for idx in batches(len(images), config.batch_size, rng):
            x = images[idx]
            if config.flip:
                flips = rng.random(len(idx)) < 0.5
                x = np.where(flips[:, None, None, None], x[..., ::-1], x)
            total, l_cls, l_gsc, grads = loss_and_grads(x, labels[idx], params, epoch_options)
            lr = config.lr_new * (1.0 - state.step / total_steps) ** config.power
            gsc_val = l_gsc.item() if l_gsc is not None else 0.0
            if log_file is not None:
                log_file.write(f"{state.step}, {lr:.6g}, {l_cls.item():.6f}, {gsc_val:.6f}, {total.item():.6f}\n")
            params = step(params, grads, state, config, total_steps)
        log.info("epoch %d done, last loss %.4f", epoch + 1, total.item())
        if on_epoch is not None:
            on_epoch(epoch + 1, params)
    return params


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)
