"""Residual backbone with per-block feature taps, projectors and training heads."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError, SnapshotError
from .numerics import nn as F
from .numerics.checkpoint import config_hash, load_container, save_container
from .numerics.ops import add
from .numerics.rng import stream
from .numerics.tensor import Tensor


class Module:
    """Named parameters (trainable tensors) and buffers (running statistics)."""

    def named_params(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_params(f"{prefix}{name}."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    out.update(m.named_params(f"{prefix}{name}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, value in vars(self).items():
            if isinstance(value, Module):
                out.update(value.named_buffers(f"{prefix}{name}."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    out.update(m.named_buffers(f"{prefix}{name}.{i}."))
        for name in getattr(self, "_buffer_names", ()):
            out[prefix + name] = getattr(self, name)
        return out

    def params(self) -> List[Tensor]:
        return list(self.named_params().values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, v.data) for k, v in self.named_params().items())
        out.update(self.named_buffers())
        return out

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.params():
            p.requires_grad = flag
        return self


class Conv(Module):
    def __init__(self, cin, cout, k, stride, padding, rng):
        self.weight = Tensor(F.he_uniform((cout, cin, k, k), cin * k * k, rng), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return F.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels):
        self.scale = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x, mode="train", update_stats=True):
        return F.batch_norm(x, self.scale, self.shift, mode, self.running_mean, self.running_var, update_stats)


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True):
        self.weight = Tensor(F.he_uniform((din, dout), din, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x):
        return F.linear(x, self.weight, self.bias)


@dataclass
class BackboneConfig:
    channels: Tuple[int, ...] = (16, 32, 64, 128)
    strides: Tuple[int, ...] = (1, 2, 2, 2)
    input_size: int = 32
    in_channels: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if not self.channels or len(self.channels) != len(self.strides):
            raise ConfigError(f"channels {self.channels} and strides {self.strides} must have equal nonzero length")
        if any(c <= 0 for c in self.channels) or any(s <= 0 for s in self.strides):
            raise ConfigError("channels and strides must be positive")
        size = self.input_size
        for s in self.strides:
            size = (size - 1) // s + 1
        if size < 1:
            raise ConfigError("input too small for the configured strides")

    @property
    def block_count(self) -> int:
        return len(self.channels)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def tap_shapes(self) -> List[Tuple[int, int, int]]:
        """``(C, H, W)`` of each block output."""
        out, size = [], self.input_size
        for c, s in zip(self.channels, self.strides):
            size = (size - 1) // s + 1
            out.append((c, size, size))
        return out

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class ResidualBlock(Module):
    """conv3x3-BN-ReLU-conv3x3-BN plus identity or 1x1-conv-BN shortcut, ReLU after the sum."""

    def __init__(self, cin, cout, stride, seed, prefix):
        self.conv1 = Conv(cin, cout, 3, stride, 1, stream(seed, "init", prefix + "conv1"))
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv(cout, cout, 3, 1, 1, stream(seed, "init", prefix + "conv2"))
        self.bn2 = BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.short = Conv(cin, cout, 1, stride, 0, stream(seed, "init", prefix + "short"))
            self.short_bn = BatchNorm(cout)
        else:
            self.short = None
            self.short_bn = None

    def __call__(self, x, mode="train", update_stats=True):
        h = F.relu(self.bn1(self.conv1(x), mode, update_stats))
        h = self.bn2(self.conv2(h), mode, update_stats)
        sc = x if self.short is None else self.short_bn(self.short(x), mode, update_stats)
        return F.relu(add(h, sc))


@dataclass
class BlockFeatures:
    taps: List[Tensor]
    final_vec: Tensor


class Backbone(Module):
    def __init__(self, config: BackboneConfig, seed: int):
        self.config = config
        self.seed = seed
        blocks = []
        cin = config.in_channels
        for i, (c, s) in enumerate(zip(config.channels, config.strides)):
            blocks.append(ResidualBlock(cin, c, s, seed, f"block{i + 1}."))
            cin = c
        self.blocks = blocks

    def forward_block(self, index: int, x: Tensor, mode="train", update_stats=True) -> Tensor:
        """Run block ``index`` (0-based) alone."""
        return self.blocks[index](x, mode, update_stats)

    def forward_with_taps(self, x, mode="train", update_stats=True) -> BlockFeatures:
        x = x if isinstance(x, Tensor) else Tensor(x)
        c, h, w = self.config.in_channels, self.config.input_size, self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise ShapeError(f"backbone expects [B,{c},{h},{w}], got {x.shape}")
        taps = []
        for block in self.blocks:
            x = block(x, mode, update_stats)
            taps.append(x)
        return BlockFeatures(taps, F.global_avg_pool(x))

    def __call__(self, x, mode="train", update_stats=True) -> Tensor:
        return self.forward_with_taps(x, mode, update_stats).final_vec


def build_backbone(config: BackboneConfig, seed: int) -> Backbone:
    return Backbone(config, seed)


class Projector(Module):
    """1x1 conv (stride = spatial ratio) + BN + ReLU aligning a student tap to a teacher tap."""

    def __init__(self, student_shape, teacher_shape, seed, name="proj"):
        cs, hs, ws = student_shape
        ct, ht, wt = teacher_shape
        if hs % ht or ws % wt or hs // ht != ws // wt:
            raise ConfigError(f"cannot align {hs}x{ws} to {ht}x{wt} with an integer stride")
        self.stride = hs // ht
        self.student_shape = tuple(student_shape)
        self.teacher_shape = tuple(teacher_shape)
        self.conv = Conv(cs, ct, 1, self.stride, 0, stream(seed, "init", name))
        self.bn = BatchNorm(ct)

    def __call__(self, x, mode="train", update_stats=True):
        return F.relu(self.bn(self.conv(x), mode, update_stats))


def build_projector(student_tap_shape, teacher_tap_shape, seed, name="proj") -> Projector:
    return Projector(student_tap_shape, teacher_tap_shape, seed, name)


class ProjectionHead(Module):
    """linear -> ReLU -> linear embedding head used only during training."""

    def __init__(self, in_dim, hidden=128, out_dim=32, seed=0, name="head"):
        self.fc1 = Linear(in_dim, hidden, stream(seed, "init", name + ".fc1"))
        self.fc2 = Linear(hidden, out_dim, stream(seed, "init", name + ".fc2"))

    def __call__(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class Predictor(Module):
    def __init__(self, dim, seed=0, identity=False):
        self.fc = Linear(dim, dim, stream(seed, "init", "predictor"))
        if identity:
            self.fc.weight.data = np.eye(dim, dtype=np.float32)

    def __call__(self, z):
        return self.fc(z)


def projection_head(in_dim, hidden=128, out_dim=32, seed=0) -> ProjectionHead:
    return ProjectionHead(in_dim, hidden, out_dim, seed)


def byol_predictor(dim, seed=0, identity=False) -> Predictor:
    return Predictor(dim, seed, identity)


# --- snapshots ----------------------------------------------------------------


@dataclass
class ParamSnapshot:
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    iteration: Optional[int] = None

    def signature(self):
        return [(k, v.shape) for k, v in self.arrays.items()]

    def __eq__(self, other):
        if not isinstance(other, ParamSnapshot) or self.signature() != other.signature():
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays.values(), other.arrays.values()))


def snapshot_params(net: Module, iteration: Optional[int] = None) -> ParamSnapshot:
    return ParamSnapshot(OrderedDict((k, np.array(v, copy=True)) for k, v in net.state().items()), iteration)


def load_snapshot(net: Module, snap: ParamSnapshot) -> None:
    params = net.named_params()
    buffers = net.named_buffers()
    names = list(params) + list(buffers)
    if names != list(snap.arrays):
        raise SnapshotError("snapshot parameter names do not match the network")
    for k, p in params.items():
        if p.shape != snap.arrays[k].shape:
            raise SnapshotError(f"shape mismatch for {k}: {p.shape} vs {snap.arrays[k].shape}")
    for k, b in buffers.items():
        if b.shape != snap.arrays[k].shape:
            raise SnapshotError(f"shape mismatch for {k}: {b.shape} vs {snap.arrays[k].shape}")
    for k, p in params.items():
        p.data = np.array(snap.arrays[k], copy=True)
    for k, b in buffers.items():
        b[...] = snap.arrays[k]


def clone_backbone(net: Backbone) -> Backbone:
    twin = Backbone(net.config, net.seed)
    load_snapshot(twin, snapshot_params(net))
    return twin


# --- checkpoint files -----------------------------------------------------------


def save_checkpoint(path, modules: Dict[str, Module], config: BackboneConfig, seed: int, extra: dict = None):
    arrays = OrderedDict()
    for mname, m in modules.items():
        for k, v in m.state().items():
            arrays[f"{mname}/{k}"] = v
    cfg = config.to_dict()
    header = {"kind": "checkpoint", "backbone": cfg, "backbone_hash": config_hash(cfg), "seed": int(seed)}
    if extra:
        header["extra"] = extra
    save_container(path, arrays, header)


def load_checkpoint(path) -> Tuple[Dict[str, "OrderedDict[str, np.ndarray]"], dict]:
    arrays, header = load_container(path)
    grouped: Dict[str, OrderedDict] = {}
    for key, arr in arrays.items():
        mname, _, rest = key.partition("/")
        grouped.setdefault(mname, OrderedDict())[rest] = arr
    return grouped, header


def load_backbone(path, name="backbone") -> Tuple[Backbone, dict]:
    grouped, header = load_checkpoint(path)
    cfg = header["backbone"]
    config = BackboneConfig(tuple(cfg["channels"]), tuple(cfg["strides"]), cfg["input_size"], cfg["in_channels"])
    net = Backbone(config, header["seed"])
    if name not in grouped:
        raise SnapshotError(f"checkpoint {path} holds no module named {name!r}")
    load_snapshot(net, ParamSnapshot(grouped[name]))
    return net, header
