"""UNet-family segmentation models with explicit weight containers.

Architectures are described declaratively by :class:`ModelSpec` and
materialised as :class:`WeightSet` values: ordered, named float32
tensors treated as immutable.  The forward pass is a pure function of
(spec, weights, input), which keeps weight averaging, snapshotting and
serialisation trivial compared to stateful module objects.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .seeding import spec_init_rng

LogitMap = torch.Tensor
"""Per-pixel unnormalised class scores, shape (batch, num_classes, height, width)."""

_DTYPE_TAG_FLOAT32 = 0
_HASH_BYTES = 32


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one encoder/decoder segmentation network.

    ``encoder_filters`` lists the output width of each encoder stage
    (two 3x3 convs followed by 2x2 max pooling); ``decoder_filters``
    mirrors it for the upsampling path.  ``bottleneck_filters`` of
    ``None`` means twice the last encoder width.
    """

    in_channels: int
    num_classes: int
    encoder_filters: tuple[int, ...]
    decoder_filters: tuple[int, ...]
    kernel_size: int = 3
    bottleneck_filters: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_filters", tuple(int(f) for f in self.encoder_filters))
        object.__setattr__(self, "decoder_filters", tuple(int(f) for f in self.decoder_filters))
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.encoder_filters:
            raise ValueError("encoder_filters must not be empty")
        if len(self.encoder_filters) != len(self.decoder_filters):
            raise ValueError(
                f"encoder/decoder stage counts differ: {len(self.encoder_filters)} vs "
                f"{len(self.decoder_filters)}"
            )
        for label, widths in (("encoder", self.encoder_filters), ("decoder", self.decoder_filters)):
            for w in widths:
                if w < 1:
                    raise ValueError(f"{label} filter widths must be >= 1, got {w}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.bottleneck_filters is not None and self.bottleneck_filters < 1:
            raise ValueError(f"bottleneck_filters must be >= 1, got {self.bottleneck_filters}")

    @property
    def num_stages(self) -> int:
        return len(self.encoder_filters)

    @property
    def bottleneck_width(self) -> int:
        if self.bottleneck_filters is not None:
            return self.bottleneck_filters
        return 2 * self.encoder_filters[-1]

    @property
    def downsample_factor(self) -> int:
        """Inputs must have spatial dims divisible by this."""
        return 2 ** self.num_stages

    def canonical_string(self) -> str:
        return "|".join(
            [
                f"in={self.in_channels}",
                f"classes={self.num_classes}",
                "enc=" + ",".join(str(f) for f in self.encoder_filters),
                "dec=" + ",".join(str(f) for f in self.decoder_filters),
                f"k={self.kernel_size}",
                f"bottleneck={self.bottleneck_width}",
            ]
        )

    def content_hash(self) -> bytes:
        """sha256 digest of the canonical description; stamped into weight files."""
        return hashlib.sha256(self.canonical_string().encode("utf-8")).digest()


def default_teacher_spec(num_classes: int = 30, in_channels: int = 3) -> ModelSpec:
    """Four-stage network sized at roughly 17M parameters.

    The 384-wide bottleneck (rather than the doubling rule's 1024)
    keeps the total in the intended budget for a 30-class head.
    """
    return ModelSpec(
        in_channels=in_channels,
        num_classes=num_classes,
        encoder_filters=(64, 128, 256, 512),
        decoder_filters=(512, 256, 128, 64),
        kernel_size=3,
        bottleneck_filters=384,
    )


def default_student_spec(num_classes: int = 30, in_channels: int = 3) -> ModelSpec:
    """Two-stage compact network, ~119K parameters at a 30-class head."""
    return ModelSpec(
        in_channels=in_channels,
        num_classes=num_classes,
        encoder_filters=(16, 32),
        decoder_filters=(32, 16),
        kernel_size=3,
    )


@dataclass(frozen=True)
class _ConvPlan:
    name: str
    in_channels: int
    out_channels: int
    kernel: int


def _conv_plans(spec: ModelSpec) -> list[_ConvPlan]:
    """Every convolution in the network, in forward order.

    Tensor names, shapes and ordering are a pure function of the spec;
    init, forward, counting and serialisation all walk this plan.
    """
    k = spec.kernel_size
    plans: list[_ConvPlan] = []
    channels = spec.in_channels
    for i, width in enumerate(spec.encoder_filters):
        plans.append(_ConvPlan(f"encoder{i}.conv0", channels, width, k))
        plans.append(_ConvPlan(f"encoder{i}.conv1", width, width, k))
        channels = width
    bottleneck = spec.bottleneck_width
    plans.append(_ConvPlan("bottleneck.conv0", channels, bottleneck, k))
    plans.append(_ConvPlan("bottleneck.conv1", bottleneck, bottleneck, k))
    channels = bottleneck
    for j, width in enumerate(spec.decoder_filters):
        skip = spec.encoder_filters[spec.num_stages - 1 - j]
        plans.append(_ConvPlan(f"decoder{j}.conv0", channels + skip, width, k))
        plans.append(_ConvPlan(f"decoder{j}.conv1", width, width, k))
        channels = width
    plans.append(_ConvPlan("head", channels, spec.num_classes, 1))
    return plans


@dataclass(frozen=True)
class WeightSet:
    """Ordered named weight tensors for one :class:`ModelSpec`.

    Treated as an immutable value: every operation in this package
    returns a new WeightSet and never writes through the tensors, so
    snapshots can be shared (e.g. broadcast to clients) without copies.
    """

    spec: ModelSpec
    entries: tuple[tuple[str, torch.Tensor], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple((str(n), t) for n, t in self.entries))
        seen: set[str] = set()
        for name, tensor in self.entries:
            if name in seen:
                raise ValueError(f"duplicate weight name {name!r}")
            seen.add(name)
            if not isinstance(tensor, torch.Tensor):
                raise TypeError(f"entry {name!r} is not a tensor")
            if not bool(torch.isfinite(tensor).all()):
                raise ValueError(f"non-finite values in weight tensor {name!r}")

    def __iter__(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.entries)

    def as_dict(self) -> dict[str, torch.Tensor]:
        return dict(self.entries)

    def map_tensors(self, fn: Callable[[str, torch.Tensor], torch.Tensor]) -> "WeightSet":
        return WeightSet(self.spec, tuple((name, fn(name, t)) for name, t in self.entries))


def same_structure(a: WeightSet, b: WeightSet) -> bool:
    return (
        a.spec == b.spec
        and a.names() == b.names()
        and all(x.shape == y.shape for (_, x), (_, y) in zip(a.entries, b.entries))
    )


def weights_equal(a: WeightSet, b: WeightSet) -> bool:
    """Bitwise equality of two weight containers."""
    return same_structure(a, b) and all(
        torch.equal(x, y) for (_, x), (_, y) in zip(a.entries, b.entries)
    )


def initialize_weights(spec: ModelSpec, seed: int = 0) -> WeightSet:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Reproducible: identical (spec, seed) pairs produce identical
    WeightSets on any platform.
    """
    rng = spec_init_rng(seed, spec.content_hash())
    entries: list[tuple[str, torch.Tensor]] = []
    for plan in _conv_plans(spec):
        fan_in = plan.in_channels * plan.kernel * plan.kernel
        bound = 1.0 / math.sqrt(fan_in)
        weight_shape = (plan.out_channels, plan.in_channels, plan.kernel, plan.kernel)
        weight = rng.uniform(-bound, bound, size=weight_shape).astype(np.float32)
        bias = rng.uniform(-bound, bound, size=(plan.out_channels,)).astype(np.float32)
        entries.append((f"{plan.name}.weight", torch.from_numpy(weight)))
        entries.append((f"{plan.name}.bias", torch.from_numpy(bias)))
    return WeightSet(spec, tuple(entries))


def build_teacher(spec: ModelSpec, seed: int = 0) -> WeightSet:
    """Fresh teacher weights for ``spec`` (see :func:`default_teacher_spec`)."""
    return initialize_weights(spec, seed)


def build_student(spec: ModelSpec, seed: int = 0) -> WeightSet:
    """Fresh student weights for ``spec`` (see :func:`default_student_spec`)."""
    return initialize_weights(spec, seed)


def count_parameters(weights: WeightSet) -> int:
    return sum(int(t.numel()) for _, t in weights.entries)


def forward(weights: WeightSet, batch: torch.Tensor) -> LogitMap:
    """Run the network on a batch; differentiable in weights and input."""
    return forward_logits(weights.spec, weights.as_dict(), batch)


def forward_logits(
    spec: ModelSpec, params: Mapping[str, torch.Tensor], batch: torch.Tensor
) -> LogitMap:
    """Forward pass from a plain name->tensor mapping.

    Accepts any float dtype (training uses float32, gradient checks
    float64) and never mutates ``params``.
    """
    if batch.ndim != 4:
        raise ValueError(
            f"expected input of shape (batch, channels, height, width), got {tuple(batch.shape)}"
        )
    _, channels, height, width = batch.shape
    if channels != spec.in_channels:
        raise ValueError(f"input has {channels} channels, spec expects {spec.in_channels}")
    factor = spec.downsample_factor
    if height % factor != 0:
        raise ValueError(f"input height {height} not divisible by {factor}")
    if width % factor != 0:
        raise ValueError(f"input width {width} not divisible by {factor}")

    pad = spec.kernel_size // 2

    def conv(x: torch.Tensor, name: str, padding: int) -> torch.Tensor:
        return F.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=padding)

    x = batch
    skips: list[torch.Tensor] = []
    for i in range(spec.num_stages):
        x = F.relu(conv(x, f"encoder{i}.conv0", pad))
        x = F.relu(conv(x, f"encoder{i}.conv1", pad))
        skips.append(x)
        x = F.max_pool2d(x, kernel_size=2)
    x = F.relu(conv(x, "bottleneck.conv0", pad))
    x = F.relu(conv(x, "bottleneck.conv1", pad))
    for j in range(spec.num_stages):
        x = F.interpolate(x, scale_factor=2.0, mode="nearest")
        x = torch.cat([x, skips[spec.num_stages - 1 - j]], dim=1)
        x = F.relu(conv(x, f"decoder{j}.conv0", pad))
        x = F.relu(conv(x, f"decoder{j}.conv1", pad))
    return conv(x, "head", 0)


def serialized_size(weights: WeightSet) -> int:
    """Exact byte length of :func:`weight_set_to_bytes` output.

    Computed arithmetically so communication ledgers never need to
    materialise the container.
    """
    size = _HASH_BYTES + 4
    for name, tensor in weights.entries:
        size += 4 + len(name.encode("utf-8")) + 1 + 1 + 4 * tensor.ndim + 4 * int(tensor.numel())
    return size


def weight_set_to_bytes(weights: WeightSet) -> bytes:
    """Serialise to the binary container format.

    Layout: spec sha256 (32 bytes), u32 entry count, then per entry a
    u32 name length, the utf-8 name, u8 dtype tag (0 = float32), u8
    rank, u32 per-dim sizes, and the little-endian float32 payload.
    """
    out = bytearray()
    out += weights.spec.content_hash()
    out += struct.pack("<I", len(weights.entries))
    for name, tensor in weights.entries:
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<BB", _DTYPE_TAG_FLOAT32, tensor.ndim)
        out += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        array = tensor.detach().cpu().numpy()
        if array.dtype != np.float32:
            raise ValueError(f"tensor {name!r} has dtype {array.dtype}, container stores float32")
        out += np.ascontiguousarray(array, dtype="<f4").tobytes()
    return bytes(out)


def weight_set_from_bytes(data: bytes, spec: ModelSpec) -> WeightSet:
    """Parse a container produced by :func:`weight_set_to_bytes`.

    The embedded spec hash must match ``spec``: loading weights into a
    structurally different model is an error, not a silent reshape.
    """
    view = memoryview(data)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise ValueError("truncated weight container")
        chunk = view[offset : offset + n]
        offset += n
        return chunk

    stored_hash = bytes(take(_HASH_BYTES))
    expected = spec.content_hash()
    if stored_hash != expected:
        raise ValueError(
            "weight container does not match the given spec "
            f"(stored hash {stored_hash.hex()[:12]}..., spec hash {expected.hex()[:12]}...)"
        )
    (count,) = struct.unpack("<I", take(4))
    entries: list[tuple[str, torch.Tensor]] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        dtype_tag, rank = struct.unpack("<BB", take(2))
        if dtype_tag != _DTYPE_TAG_FLOAT32:
            raise ValueError(f"unsupported dtype tag {dtype_tag} for entry {name!r}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        numel = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(4 * numel)
        array = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        entries.append((name, torch.from_numpy(array)))
    if offset != len(view):
        raise ValueError(f"{len(view) - offset} trailing bytes after last entry")
    loaded = WeightSet(spec, tuple(entries))
    _check_layout(loaded)
    return loaded


def _check_layout(weights: WeightSet) -> None:
    """Verify names and shapes follow from the spec's conv plan."""
    expected: list[tuple[str, tuple[int, ...]]] = []
    for plan in _conv_plans(weights.spec):
        expected.append(
            (f"{plan.name}.weight", (plan.out_channels, plan.in_channels, plan.kernel, plan.kernel))
        )
        expected.append((f"{plan.name}.bias", (plan.out_channels,)))
    actual = [(name, tuple(t.shape)) for name, t in weights.entries]
    if actual != expected:
        raise ValueError("weight container layout does not match the spec's conv plan")


def save_weights(weights: WeightSet, path: str | Path) -> None:
    Path(path).write_bytes(weight_set_to_bytes(weights))


def load_weights(path: str | Path, spec: ModelSpec) -> WeightSet:
    return weight_set_from_bytes(Path(path).read_bytes(), spec)
