"""Four-stage convolutional feature extractor with a hierarchical side branch."""

from __future__ import annotations

import io
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    num_classes: int = 5
    widths: tuple[int, ...] = (16, 32, 64, 128)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    lateral: int = 16
    in_channels: int = 3

    def __post_init__(self):
        if len(self.widths) != 4 or len(self.strides) != 4:
            raise ValueError("backbone needs exactly four stages")
        if min(self.widths) < 1 or self.lateral < 1 or self.num_classes < 1:
            raise ValueError("channel widths must be positive")

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def hier_channels(self) -> int:
        return 4 * self.lateral


# names of parameters trained at the reduced backbone learning rate
def is_backbone_param(name: str) -> bool:
    return name.startswith("stage")


@dataclass
class Params:
    """Named, ordered parameter tensors. Order is fixed by :func:`param_shapes`."""

    config: BackboneConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: BackboneConfig, arrays: dict[str, np.ndarray]) -> Params:
        expected = param_shapes(config)
        if list(arrays) != list(expected):
            raise ValueError(f"parameter names {list(arrays)} do not match {list(expected)}")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} does not match expected {shape}")
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})


def param_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = config.in_channels
    for i, cout in enumerate(config.widths, start=1):
        shapes[f"stage{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"stage{i}.bias"] = (cout,)
        cin = cout
    for i, cout in enumerate(config.widths, start=1):
        shapes[f"lateral{i}.weight"] = (config.lateral, cout, 1, 1)
    shapes["classifier.weight"] = (config.num_classes, config.widths[-1])
    return shapes


def init_bound(fan_in: int) -> float:
    """Kaiming-uniform bound for a ReLU network: sqrt(6 / fan_in)."""
    return math.sqrt(6.0 / fan_in)


def init(seed: int, config: BackboneConfig | None = None) -> Params:
    config = config or BackboneConfig()
    rng = np.random.Generator(np.random.Philox(key=seed))
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = init_bound(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return Params.from_arrays(config, arrays)


@dataclass
class FeatureBundle:
    semantic: Tensor  # [N, C_s, H, W]
    hierarchical: Tensor  # [N, C_h, H, W]
    stages: list[Tensor]


def forward(images: Tensor, params: Params, detach_lateral: bool = False) -> FeatureBundle:
    """Run ``images`` ([N,3,H,W] or [3,H,W]) through the four stages.

    With ``detach_lateral`` the hierarchical branch sees the stage outputs as
    constants, so losses on the hierarchical feature train only the lateral
    kernels.
    """
    cfg = params.config
    single = images.ndim == 3
    if single:
        images = images.reshape((1,) + images.shape)
    h0, w0 = images.shape[-2:]
    s = cfg.total_stride
    if h0 % s or w0 % s:
        raise ValueError(f"input size {h0}x{w0} is not divisible by the total stride {s}")
    if images.shape[1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {images.shape[1]}")

    stages = []
    h = images
    for i, stride in enumerate(cfg.strides, start=1):
        h = T.conv2d(h, params[f"stage{i}.weight"], stride=stride, pad=1)
        h = T.relu(h + params[f"stage{i}.bias"].reshape(1, -1, 1, 1))
        stages.append(h)

    semantic = stages[-1]
    fh, fw = semantic.shape[-2:]
    laterals = [
        T.resize_bilinear(T.conv2d(st.detach() if detach_lateral else st, params[f"lateral{i}.weight"]), fh, fw)
        for i, st in enumerate(stages, start=1)
    ]
    hierarchical = T.concat(laterals, axis=1)
    if single:
        semantic = semantic.reshape(semantic.shape[1:])
        hierarchical = hierarchical.reshape(hierarchical.shape[1:])
    return FeatureBundle(semantic, hierarchical, stages)


# ---------------------------------------------------------------------------
# checkpoints: text manifest, blank line, then one TNSR record per parameter
# ---------------------------------------------------------------------------

_HEADER = "SIPE-CHECKPOINT 1"


def save_checkpoint(path, params: Params, extra: dict[str, str] | None = None) -> None:
    cfg = params.config
    lines = [
        _HEADER,
        f"num_classes={cfg.num_classes}",
        f"widths={','.join(map(str, cfg.widths))}",
        f"strides={','.join(map(str, cfg.strides))}",
        f"lateral={cfg.lateral}",
        f"in_channels={cfg.in_channels}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"meta.{k}={v}")
    lines += [f"param={name}" for name in params.names()]
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    with os.fdopen(fd, "wb") as f:
        f.write(("\n".join(lines) + "\n\n").encode())
        for name in params.names():
            T.write_tensor(f, params[name])
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Params, dict[str, str]]:
    with open(path, "rb") as f:
        raw = f.read()
    split = raw.find(b"\n\n")
    if split < 0 or not raw.startswith(_HEADER.encode()):
        raise ValueError(f"{path}: not a checkpoint file")
    header = raw[:split].decode().splitlines()[1:]
    fields: dict[str, str] = {}
    names, meta = [], {}
    for line in header:
        key, _, value = line.partition("=")
        if key == "param":
            names.append(value)
        elif key.startswith("meta."):
            meta[key[5:]] = value
        else:
            fields[key] = value
    config = BackboneConfig(
        num_classes=int(fields["num_classes"]),
        widths=tuple(int(v) for v in fields["widths"].split(",")),
        strides=tuple(int(v) for v in fields["strides"].split(",")),
        lateral=int(fields["lateral"]),
        in_channels=int(fields["in_channels"]),
    )
    buf = io.BytesIO(raw[split + 2 :])
    arrays = {}
    for name in names:
        try:
            arrays[name] = T.read_tensor(buf)
        except ValueError as exc:
            raise ValueError(f"{path}: parameter {name}: {exc}") from None
    return Params.from_arrays(config, arrays), meta
