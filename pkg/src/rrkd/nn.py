"""Network building blocks: BN-ReLU-Conv units with per-use BN banks, residual
application, transition convolutions, the wide-residual teacher, He
initialization and parameter accounting."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Parameter, Tensor

TEACHER_WIDTHS = (32, 64, 128)
STUDENT_WIDTHS = (16, 32, 64)


def he_init(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal with variance 2 / fan_in.

    fan_in is C*Kh*Kw for an O x C x Kh x Kw kernel and D for a D x K linear weight.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
    elif len(shape) == 2:
        fan_in = shape[0]
    else:
        raise ShapeError(f"he_init: unsupported weight shape {shape}")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Block:
    """Minimal container protocol: trainable parameters plus BN running statistics."""

    def parameters(self) -> Iterator[Parameter]:
        return iter(())

    def buffers(self) -> Iterator[Tuple[str, ops.BNStats]]:
        return iter(())


class BatchNorm(Block):
    def __init__(self, channels: int, name: str, dtype=np.float32):
        self.name = name
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.stats = ops.BNStats(channels, dtype=dtype)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self.stats, train)

    def parameters(self):
        yield self.gamma
        yield self.beta

    def buffers(self):
        yield self.name, self.stats


class BRCUnit(Block):
    """BatchNorm -> ReLU -> 3x3 Conv with one kernel shared by every use.

    ``bn_bank[k]`` holds the BN affine parameters and running statistics for
    the k-th use of the unit, so depth-specific normalization survives tying.
    """

    def __init__(self, channels: int, uses: int, name: str, rng: np.random.Generator,
                 dtype=np.float32, kernel: Optional[Parameter] = None):
        if uses < 1:
            raise ValueError(f"BRCUnit {name!r} needs at least one use, got {uses}")
        self.name = name
        self.channels = channels
        self.kernel = kernel if kernel is not None else Parameter(
            he_init((channels, channels, 3, 3), rng, dtype), f"{name}.kernel")
        self.bn_bank = [BatchNorm(channels, f"{name}.bn{k}", dtype) for k in range(uses)]

    @property
    def uses(self) -> int:
        return len(self.bn_bank)

    def parameters(self):
        yield self.kernel
        for bn in self.bn_bank:
            yield from bn.parameters()

    def buffers(self):
        for bn in self.bn_bank:
            yield from bn.buffers()


def brc_forward(unit: BRCUnit, x: Tensor, timestep: int, train: bool = True) -> Tensor:
    if not 0 <= timestep < len(unit.bn_bank):
        raise IndexError(f"{unit.name}: timestep {timestep} outside BN bank of size {len(unit.bn_bank)}")
    h = ops.relu(unit.bn_bank[timestep](x, train))
    return ops.conv2d(h, unit.kernel, stride=1, pad=1)


def residual_step(body: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    """``body(x) + x``."""
    y = body(x)
    if y.shape != x.shape:
        raise ShapeError(f"residual_step: body changed shape {x.shape} -> {y.shape}")
    return ops.add(y, x)


class TransitionConv(Block):
    """BN -> ReLU -> 3x3 stride-2 conv between groups of different width and scale."""

    def __init__(self, c_in: int, c_out: int, name: str, rng, dtype=np.float32):
        self.name = name
        self.bn = BatchNorm(c_in, f"{name}.bn", dtype)
        self.kernel = Parameter(he_init((c_out, c_in, 3, 3), rng, dtype), f"{name}.kernel")

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ops.conv2d(ops.relu(self.bn(x, train)), self.kernel, stride=2, pad=1)

    def parameters(self):
        yield from self.bn.parameters()
        yield self.kernel

    def buffers(self):
        yield from self.bn.buffers()


class Linear(Block):
    def __init__(self, d_in: int, d_out: int, name: str, rng, dtype=np.float32):
        self.weight = Parameter(he_init((d_in, d_out), rng, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out, dtype=dtype), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def parameters(self):
        yield self.weight
        yield self.bias


class PreActBlock(Block):
    """Pre-activation wide-residual block; downsampling blocks use a 1x1 projection shortcut."""

    def __init__(self, c_in: int, c_out: int, stride: int, name: str, rng, dtype=np.float32):
        self.stride = stride
        self.bn1 = BatchNorm(c_in, f"{name}.bn1", dtype)
        self.conv1 = Parameter(he_init((c_out, c_in, 3, 3), rng, dtype), f"{name}.conv1")
        self.bn2 = BatchNorm(c_out, f"{name}.bn2", dtype)
        self.conv2 = Parameter(he_init((c_out, c_out, 3, 3), rng, dtype), f"{name}.conv2")
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Parameter(he_init((c_out, c_in, 1, 1), rng, dtype), f"{name}.shortcut")

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        pre = ops.relu(self.bn1(x, train))
        h = ops.conv2d(pre, self.conv1, stride=self.stride, pad=1)
        h = ops.conv2d(ops.relu(self.bn2(h, train)), self.conv2, stride=1, pad=1)
        skip = x if self.shortcut is None else ops.conv2d(pre, self.shortcut, stride=self.stride)
        return ops.add(h, skip)

    def parameters(self):
        yield from self.bn1.parameters()
        yield self.conv1
        yield from self.bn2.parameters()
        yield self.conv2
        if self.shortcut is not None:
            yield self.shortcut

    def buffers(self):
        yield from self.bn1.buffers()
        yield from self.bn2.buffers()


@dataclass
class ArchSpec:
    """Topology of a teacher (plain residual) or student (weight-tied) network."""

    role: str = "student"
    stem_channels: int = 16
    group_widths: Tuple[int, ...] = STUDENT_WIDTHS
    blocks_per_group: int = 3
    variant: int = 1
    n: int = 3
    num_classes: int = 10
    in_channels: int = 3

    def __post_init__(self):
        self.group_widths = tuple(int(w) for w in self.group_widths)
        if self.role not in ("teacher", "student"):
            raise ValueError(f"ArchSpec.role must be 'teacher' or 'student', got {self.role!r}")
        if not self.group_widths or min(self.group_widths) < 1:
            raise ValueError(f"invalid group widths {self.group_widths}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if self.role == "student":
            if self.variant not in (1, 2, 3):
                raise ValueError(f"student variant must be 1, 2 or 3, got {self.variant}")
            if self.n < 1:
                raise ValueError(f"recurrence steps must be >= 1, got {self.n}")
            if self.stem_channels != self.group_widths[0]:
                raise ShapeError(f"student stem width {self.stem_channels} must equal the first group "
                                 f"width {self.group_widths[0]} (recurrent units keep channel count)")
        elif self.blocks_per_group < 1:
            raise ValueError(f"blocks_per_group must be >= 1, got {self.blocks_per_group}")

    @classmethod
    def teacher(cls, num_classes=10, widths=TEACHER_WIDTHS, blocks_per_group=3, stem_channels=None):
        widths = tuple(widths)
        return cls(role="teacher", stem_channels=stem_channels or widths[0], group_widths=widths,
                   blocks_per_group=blocks_per_group, num_classes=num_classes)

    @classmethod
    def student(cls, variant=1, n=3, num_classes=10, widths=STUDENT_WIDTHS):
        widths = tuple(widths)
        return cls(role="student", stem_channels=widths[0], group_widths=widths,
                   variant=variant, n=n, num_classes=num_classes)

    def halved(self, variant=1, n=3) -> "ArchSpec":
        """Student architecture at half this teacher's width."""
        if any(w % 2 for w in self.group_widths):
            raise ShapeError(f"teacher widths {self.group_widths} cannot be halved exactly")
        return ArchSpec.student(variant, n, self.num_classes, tuple(w // 2 for w in self.group_widths))


def check_pair(student: ArchSpec, teacher: ArchSpec):
    """Student groups must be exactly half as wide as the teacher's."""
    if len(student.group_widths) != len(teacher.group_widths):
        raise ShapeError(f"group count mismatch: student {len(student.group_widths)} vs "
                         f"teacher {len(teacher.group_widths)}")
    if any(2 * s != t for s, t in zip(student.group_widths, teacher.group_widths)):
        raise ShapeError(f"student widths {student.group_widths} are not half of teacher widths "
                         f"{teacher.group_widths}")
    if student.num_classes != teacher.num_classes:
        raise ShapeError(f"class count mismatch: student {student.num_classes} vs teacher {teacher.num_classes}")


class Network:
    """Shared plumbing for teacher and student: registry, state, freezing."""

    arch: ArchSpec
    blocks: List[Block]

    def parameters(self) -> List[Parameter]:
        params = [p for b in self.blocks for p in b.parameters()]
        seen = set()
        for p in params:
            if p.name in seen:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            seen.add(p.name)
        return params

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def buffers(self) -> List[Tuple[str, ops.BNStats]]:
        return [kv for b in self.blocks for kv in b.buffers()]

    def freeze(self):
        for p in self.parameters():
            p.freeze()
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((p.name, p.data) for p in self.parameters())
        for name, stats in self.buffers():
            state[f"{name}.running_mean"] = stats.mean
            state[f"{name}.running_var"] = stats.var
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        expected = self.state_dict()
        missing = [k for k in expected if k not in state]
        if missing:
            raise KeyError(f"state is missing entries: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        if strict:
            extra = [k for k in state if k not in expected and not k.startswith("input.")]
            if extra:
                raise KeyError(f"unexpected state entries: {extra[:5]}")
        for p in self.parameters():
            arr = np.asarray(state[p.name])
            if arr.shape != p.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {arr.shape} vs model shape {p.shape}")
            p.data[...] = arr
        for name, stats in self.buffers():
            stats.mean = np.array(state[f"{name}.running_mean"], dtype=stats.dtype)
            stats.var = np.array(state[f"{name}.running_var"], dtype=stats.dtype)
            stats.initialized = True

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.trainable_parameters())

    def __call__(self, x, train: bool = True):
        return self.forward(x, train)


class TeacherNetwork(Network):
    """Pre-activation wide residual network; no weight tying."""

    def __init__(self, arch: ArchSpec, rng: np.random.Generator, dtype=np.float32):
        if arch.role != "teacher":
            raise ValueError("TeacherNetwork needs a teacher ArchSpec")
        self.arch = arch
        self.stem = _StemConv(arch.in_channels, arch.stem_channels, "stem", rng, dtype)
        self.groups: List[List[PreActBlock]] = []
        c_in = arch.stem_channels
        for g, width in enumerate(arch.group_widths):
            group = []
            for b in range(arch.blocks_per_group):
                stride = 2 if (g > 0 and b == 0) else 1
                group.append(PreActBlock(c_in, width, stride, f"group{g + 1}.block{b + 1}", rng, dtype))
                c_in = width
            self.groups.append(group)
        self.final_bn = BatchNorm(c_in, "final.bn", dtype)
        self.head = Linear(c_in, arch.num_classes, "head", rng, dtype)
        self.blocks = [self.stem] + [b for grp in self.groups for b in grp] + [self.final_bn, self.head]

    def forward(self, x: Tensor, train: bool = True):
        """Return (logits, [end-of-group activations])."""
        h = self.stem(x)
        acts = []
        for group in self.groups:
            for block in group:
                h = block(h, train)
            acts.append(h)
        h = ops.relu(self.final_bn(h, train))
        return self.head(ops.global_avg_pool(h)), acts


class _StemConv(Block):
    def __init__(self, c_in, c_out, name, rng, dtype):
        self.kernel = Parameter(he_init((c_out, c_in, 3, 3), rng, dtype), f"{name}.kernel")

    def __call__(self, x):
        return ops.conv2d(x, self.kernel, stride=1, pad=1)

    def parameters(self):
        yield self.kernel


# ------------------------------------------------------------- accounting


@dataclass
class LayerCount:
    name: str
    shape: Tuple[int, ...]
    count: int
    shared_by: int = 1


@dataclass
class ParamReport:
    total: int
    by_layer: List[LayerCount] = field(default_factory=list)

    @property
    def conv_total(self) -> int:
        return sum(r.count for r in self.by_layer if len(r.shape) == 4)

    @property
    def bn_total(self) -> int:
        return sum(r.count for r in self.by_layer if r.name.endswith((".gamma", ".beta")))


def count_parameters(arch: ArchSpec) -> ParamReport:
    """Count trainable scalars from the architecture description alone, without building a network.

    BN running statistics are not trainable and are excluded.
    """
    rows: List[LayerCount] = []

    def conv(name, o, i, k, shared=1):
        rows.append(LayerCount(name, (o, i, k, k), o * i * k * k, shared))

    def bn(name, c):
        rows.append(LayerCount(f"{name}.gamma", (c,), c))
        rows.append(LayerCount(f"{name}.beta", (c,), c))

    widths = arch.group_widths
    conv("stem.kernel", arch.stem_channels, arch.in_channels, 3)
    if arch.role == "student":
        from .recurrence import make_schedule

        uses = make_schedule(arch.variant, arch.n).uses()
        for g, w in enumerate(widths):
            if g > 0:
                name = f"transition{g}"
                bn(f"{name}.bn", widths[g - 1])
                conv(f"{name}.kernel", w, widths[g - 1], 3)
            for unit_id, k in uses.items():
                conv(f"group{g + 1}.{unit_id}.kernel", w, w, 3, shared=k)
                for t in range(k):
                    bn(f"group{g + 1}.{unit_id}.bn{t}", w)
        bn("final.bn", widths[-1])
        last = widths[-1]
    else:
        c_in = arch.stem_channels
        for g, w in enumerate(widths):
            for b in range(arch.blocks_per_group):
                name = f"group{g + 1}.block{b + 1}"
                stride = 2 if (g > 0 and b == 0) else 1
                bn(f"{name}.bn1", c_in)
                conv(f"{name}.conv1", w, c_in, 3)
                bn(f"{name}.bn2", w)
                conv(f"{name}.conv2", w, w, 3)
                if stride != 1 or c_in != w:
                    conv(f"{name}.shortcut", w, c_in, 1)
                c_in = w
        bn("final.bn", c_in)
        last = c_in
    rows.append(LayerCount("head.weight", (last, arch.num_classes), last * arch.num_classes))
    rows.append(LayerCount("head.bias", (arch.num_classes,), arch.num_classes))
    return ParamReport(sum(r.count for r in rows), rows)
