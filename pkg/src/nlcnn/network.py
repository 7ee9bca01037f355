"""Fast ResNet-34 speaker embedder with optional inserted blocks.

Layout (input ``N x 1 x 40 x T``)::

    conv1     3x3, 16, stride (2,1)   -> 16 x 20 x T
    conv2_x   3 basic blocks, 16      -> 16 x 20 x T
    conv3_x   3 basic blocks, 32, /2  -> 32 x 10 x T/2
    conv4_x   3 basic blocks, 64, /2  -> 64 x 5 x T/4
    conv5_x   3 basic blocks, 128     -> 128 x 5 x T/4
    SAP                               -> 128
    fc        128 -> 512

Downsampling stages first trim an odd-length axis by one frame so that every
halving is an integer floor. Inserted blocks (non-local or plain 3x3
depth controls) sit after a given residual block of a stage and start out as
the identity map.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .nonlocal_block import NonLocalBlockParams, Variant, nonlocal_forward
from .tensor import DimensionError, Tensor

STAGE_NAMES = ("conv2_x", "conv3_x", "conv4_x", "conv5_x")
N_MELS = 40


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class StageSpec:
    name: str
    channels: int
    num_blocks: int = 3
    stride: Tuple[int, int] = (1, 1)


class InsertKind(str, enum.Enum):
    NONLOCAL = "nonlocal"
    PLAIN_CONV = "plain_conv"


@dataclass(frozen=True)
class Insertion:
    stage: str
    after_block: int  # 1-based residual block index within the stage
    kind: InsertKind
    variant: Optional[Variant] = None

    @property
    def key(self) -> str:
        return f"{self.stage}.{self.after_block}"


def table1_stages() -> Tuple[StageSpec, ...]:
    return (StageSpec("conv2_x", 16, 3, (1, 1)),
            StageSpec("conv3_x", 32, 3, (2, 2)),
            StageSpec("conv4_x", 64, 3, (2, 2)),
            StageSpec("conv5_x", 128, 3, (1, 1)))


@dataclass(frozen=True)
class ModelSpec:
    stages: Tuple[StageSpec, ...] = field(default_factory=table1_stages)
    insertions: Tuple[Insertion, ...] = ()
    embedding_dim: int = 512
    conv1_channels: int = 16

    def validate(self) -> "ModelSpec":
        by_name = {s.name: s for s in self.stages}
        seen = set()
        for ins in self.insertions:
            stage = by_name.get(ins.stage)
            if stage is None:
                raise ConfigurationError(f"insertion into unknown stage {ins.stage!r}")
            if not 1 <= ins.after_block <= stage.num_blocks:
                raise ConfigurationError(
                    f"{ins.stage} has blocks 1..{stage.num_blocks}; cannot insert after block {ins.after_block}")
            if ins.key in seen:
                raise ConfigurationError(f"slot {ins.key} receives more than one inserted block")
            seen.add(ins.key)
            if ins.kind is InsertKind.NONLOCAL and ins.variant is None:
                raise ConfigurationError(f"non-local insertion at {ins.key} lacks a variant")
        return self


# ---------------------------------------------------------------------------
# presets

_PLACEMENTS = {
    "nlcnn-1": (("conv4_x", 3),),
    "var1": (("conv2_x", 3), ("conv3_x", 2), ("conv3_x", 3)),
    "var2": (("conv3_x", 3), ("conv4_x", 2), ("conv4_x", 3)),
    "var3": (("conv4_x", 3), ("conv5_x", 2), ("conv5_x", 3)),
    "nlcnn-6": tuple((s, b) for s in ("conv3_x", "conv4_x") for b in (1, 2, 3)),
}
_PLACEMENTS["nlcnn-3"] = _PLACEMENTS["var2"]

PRESET_NAMES = ("baseline", "baseline-3", "baseline-6", "nlcnn-1", "nlcnn-3", "nlcnn-6",
                "var1", "var2", "var3")


def preset_spec(name: str, variant=Variant.TIME_FREQUENCY) -> ModelSpec:
    variant = Variant.parse(variant)
    name = name.strip().lower()
    if name == "baseline":
        return ModelSpec()
    if name in ("baseline-3", "baseline-6"):
        slots = _PLACEMENTS["nlcnn-3" if name == "baseline-3" else "nlcnn-6"]
        return ModelSpec(insertions=tuple(Insertion(s, b, InsertKind.PLAIN_CONV) for s, b in slots)).validate()
    if name in _PLACEMENTS:
        return ModelSpec(insertions=tuple(Insertion(s, b, InsertKind.NONLOCAL, variant)
                                          for s, b in _PLACEMENTS[name])).validate()
    raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


def preset_specs(variant=Variant.TIME_FREQUENCY) -> Dict[str, ModelSpec]:
    return {name: preset_spec(name, variant) for name in PRESET_NAMES}


# ---------------------------------------------------------------------------
# modules


class Module:
    """Container that names its parameters, buffers and children by attribute."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_child(self, name: str, module: "Module") -> None:
        self._children[name] = module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


class _Init:
    """Per-parameter random streams keyed by (seed, parameter name), so a
    parameter's initial value does not depend on which other blocks exist."""

    def __init__(self, seed: int, dtype):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def normal(self, name: str, shape, std: float) -> Tensor:
        return Tensor(self.rng(name).normal(0.0, std, size=shape).astype(self.dtype), requires_grad=True)

    def uniform(self, name: str, shape, bound: float) -> Tensor:
        return Tensor(self.rng(name).uniform(-bound, bound, size=shape).astype(self.dtype), requires_grad=True)

    def constant(self, shape, value: float) -> Tensor:
        return Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, init: _Init, name: str, c_in: int, c_out: int, k: int,
                 stride=(1, 1), padding=(0, 0)):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = init.normal(f"{name}.weight", (c_out, c_in, k, k), np.sqrt(2.0 / (c_in * k * k)))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.stride, self.padding, layout="NHWC")


class BatchNorm2d(Module):
    def __init__(self, init: _Init, channels: int, gamma: float = 1.0):
        super().__init__()
        self.gamma = init.constant((channels,), gamma)
        self.beta = init.constant((channels,), 0.0)
        self.state = F.BatchNormState.fresh(channels, init.dtype)
        self._buffers["running_mean"] = self.state.running_mean
        self._buffers["running_var"] = self.state.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.state, self.training, layout="NHWC")


class BasicBlock(Module):
    """conv3x3-bn-relu-conv3x3-bn plus identity (or 1x1 projection) shortcut."""

    def __init__(self, init: _Init, name: str, c_in: int, c_out: int, stride=(1, 1)):
        super().__init__()
        self.conv1 = Conv2d(init, f"{name}.conv1", c_in, c_out, 3, stride, (1, 1))
        self.bn1 = BatchNorm2d(init, c_out)
        self.conv2 = Conv2d(init, f"{name}.conv2", c_out, c_out, 3, (1, 1), (1, 1))
        self.bn2 = BatchNorm2d(init, c_out)
        self.shortcut = None
        if tuple(stride) != (1, 1) or c_in != c_out:
            self.shortcut = Conv2d(init, f"{name}.shortcut.conv", c_in, c_out, 1, stride)
            self.shortcut_bn = BatchNorm2d(init, c_out)

    def __call__(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return F.relu(F.add(out, skip))


class PlainConvInsert(Module):
    """Depth control: ``x + relu(bn(conv3x3(x)))`` with bn gamma starting at zero."""

    def __init__(self, init: _Init, name: str, channels: int):
        super().__init__()
        self.conv = Conv2d(init, f"{name}.conv", channels, channels, 3, (1, 1), (1, 1))
        self.bn = BatchNorm2d(init, channels, gamma=0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return F.add(x, F.relu(self.bn(self.conv(x))))


class NonLocalInsert(Module):
    def __init__(self, init: _Init, name: str, channels: int, variant: Variant):
        super().__init__()
        p = NonLocalBlockParams.initialize(channels, variant, init.rng(name), dtype=init.dtype)
        self.params = p
        self.theta_w, self.phi_w, self.g_w, self.z_w = p.theta_w, p.phi_w, p.g_w, p.z_w

    def __call__(self, x: Tensor) -> Tensor:
        return nonlocal_forward(self.params, x, channels_last=True)


class Stage(Module):
    def __init__(self, init: _Init, spec: StageSpec, c_in: int):
        super().__init__()
        self.spec = spec
        self.blocks = []
        for b in range(spec.num_blocks):
            block = BasicBlock(init, f"{spec.name}.block{b + 1}", c_in if b == 0 else spec.channels,
                               spec.channels, spec.stride if b == 0 else (1, 1))
            self.add_child(f"block{b + 1}", block)
            self.blocks.append(block)


class Linear(Module):
    def __init__(self, init: _Init, name: str, c_in: int, c_out: int):
        super().__init__()
        bound = 1.0 / np.sqrt(c_in)
        self.weight = init.uniform(f"{name}.weight", (c_in, c_out), bound)
        self.bias = init.uniform(f"{name}.bias", (c_out,), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class SelfAttentivePooling(Module):
    """Mean over frequency, then softmax attention over time frames."""

    def __init__(self, init: _Init, channels: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = channels if hidden is None else hidden
        bound = 1.0 / np.sqrt(channels)
        self.weight = init.uniform("sap.weight", (channels, hidden), bound)
        self.bias = init.uniform("sap.bias", (hidden,), bound)
        self.context = init.normal("sap.context", (hidden, 1), np.sqrt(2.0 / (hidden + 1)))

    def attention(self, frames: Tensor) -> Tensor:
        """Weights over time for N x T' x C frame vectors; returns N x T'."""
        h = F.tanh(F.linear(frames, self.weight, self.bias))
        scores = F.linear(h, self.context)
        return F.softmax(F.reshape(scores, scores.shape[:2]), axis=1)

    def __call__(self, features: Tensor) -> Tensor:
        """Pool N x C x F x T' features to N x C."""
        if features.ndim != 4 or features.shape[3] < 1:
            raise DimensionError(f"SAP expects N x C x F x T' with T' >= 1, got {features.shape}")
        return self.pool_channels_last(F.permute(features, (0, 2, 3, 1)))

    def pool_channels_last(self, features: Tensor) -> Tensor:
        N, _, T, C = features.shape
        frames = F.mean(features, axis=1)  # N x T' x C
        alpha = self.attention(frames)
        pooled = F.matmul(F.reshape(alpha, (N, 1, T)), frames)
        return F.reshape(pooled, (N, C))


class SpeakerEmbedder(Module):
    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        super().__init__()
        spec.validate()
        init = _Init(seed, dtype)
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "seed", int(seed))
        object.__setattr__(self, "dtype", np.dtype(dtype))
        c = spec.conv1_channels
        self.conv1 = Conv2d(init, "conv1", 1, c, 3, (2, 1), (1, 1))
        self.bn1 = BatchNorm2d(init, c)
        self.stages: List[Stage] = []
        for st in spec.stages:
            stage = Stage(init, st, c)
            self.add_child(st.name, stage)
            self.stages.append(stage)
            c = st.channels
        inserted = Module()
        plain = Module()
        self.inserted: Dict[str, Module] = {}
        widths = {st.name: st.channels for st in spec.stages}
        for ins in spec.insertions:
            if ins.kind is InsertKind.NONLOCAL:
                mod = NonLocalInsert(init, f"nl.{ins.key}", widths[ins.stage], ins.variant)
                inserted.add_child(ins.key, mod)
            else:
                mod = PlainConvInsert(init, f"plain.{ins.key}", widths[ins.stage])
                plain.add_child(ins.key, mod)
            self.inserted[ins.key] = mod
        self.add_child("nl", inserted)
        self.add_child("plain", plain)
        self.sap = SelfAttentivePooling(init, c)
        self.fc = Linear(init, "fc", c, spec.embedding_dim)

    def _backbone(self, x: Tensor, trace: Optional[Dict[str, tuple]] = None) -> Tensor:
        """N x 1 x 40 x T input -> channels-last N x 5 x T/4 x 128 features."""
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != N_MELS:
            raise DimensionError(f"expected N x 1 x {N_MELS} x T input, got {x.shape}")
        if x.shape[3] < 4:
            raise DimensionError(f"need at least 4 frames, got {x.shape[3]}")
        N, _, H, T = x.shape
        out = F.reshape(x, (N, H, T, 1))  # single channel: NCHW -> NHWC is a reshape
        out = F.relu(self.bn1(self.conv1(out)))
        if trace is not None:
            trace["conv1"] = _nchw(out.shape)
        for stage in self.stages:
            out = _trim_for_stride(out, stage.spec.stride)
            for b, block in enumerate(stage.blocks, start=1):
                out = block(out)
                extra = self.inserted.get(f"{stage.spec.name}.{b}")
                if extra is not None:
                    out = extra(out)
            if trace is not None:
                trace[stage.spec.name] = _nchw(out.shape)
        return out

    def forward_features(self, x: Tensor, trace: Optional[Dict[str, tuple]] = None) -> Tensor:
        """N x 1 x 40 x T -> N x 128 x 5 x T/4; ``trace`` collects stage output shapes."""
        return F.permute(self._backbone(x, trace), (0, 3, 1, 2))

    def embed(self, x: Tensor) -> Tensor:
        return self.fc(self.sap.pool_channels_last(self._backbone(x)))

    __call__ = embed


def _nchw(shape) -> tuple:
    return (shape[0], shape[3], shape[1], shape[2])


def _trim_for_stride(x: Tensor, stride) -> Tensor:
    for axis, s in ((1, stride[0]), (2, stride[1])):
        if s == 2 and x.shape[axis] % 2:
            x = F.slice_axis(x, axis, 0, x.shape[axis] - 1)
    return x


def build_model(spec, seed: int = 0, dtype=np.float32, variant=Variant.TIME_FREQUENCY) -> SpeakerEmbedder:
    """Instantiate a :class:`ModelSpec` (or a preset name) with seeded weights."""
    if isinstance(spec, str):
        spec = preset_spec(spec, variant)
    return SpeakerEmbedder(spec, seed, dtype)


def forward_features(model: SpeakerEmbedder, lfbe: Tensor) -> Tensor:
    return model.forward_features(lfbe)


def sap_pool(model: SpeakerEmbedder, features: Tensor) -> Tensor:
    return model.sap(features)


def embed(model: SpeakerEmbedder, lfbe: Tensor) -> Tensor:
    return model.embed(lfbe)


def count_parameters(model: SpeakerEmbedder) -> int:
    """Trainable scalars of the embedder (batchnorm affine included, running
    statistics and loss heads excluded)."""
    return int(sum(p.size for p in model.parameters()))


def insertion_parameter_count(ins: Insertion, channels: int) -> int:
    """Closed-form size of one inserted block at the given width."""
    if ins.kind is InsertKind.NONLOCAL:
        return 4 * channels * channels
    return 9 * channels * channels + 2 * channels


def stage_output_shapes(T: int, spec: Optional[ModelSpec] = None) -> Dict[str, Tuple[int, int, int]]:
    """Expected C x H x W after conv1 and each stage for a 40 x T input."""
    spec = spec or ModelSpec()
    h, w = N_MELS // 2, T
    shapes = {"conv1": (spec.conv1_channels, h, w)}
    for st in spec.stages:
        h, w = h // st.stride[0], w // st.stride[1]
        shapes[st.name] = (st.channels, h, w)
    return shapes
