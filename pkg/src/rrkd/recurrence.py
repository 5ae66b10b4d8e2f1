"""Weight-tying schedules and the recurrent student network.

A schedule lists, in application order, which unit runs at each timestep and
which entry of that unit's BN bank it uses:

* variant 1 (interleaved): A B A B ... A, so A runs n+1 times and B n times
* variant 2 (sequential):  A x n followed by B x n
* variant 3 (collapsed):   A x n

Every application is wrapped in its own identity skip, x(t) = BRC(x(t-1)) + x(t-1).
"""

from __future__ import annotations

import copy
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import ops
from .errors import ShapeError
from .nn import (ArchSpec, BatchNorm, BRCUnit, Linear, Network, TeacherNetwork, TransitionConv,
                 _StemConv, brc_forward, residual_step)
from .tensor import Parameter, Tensor

VARIANT_NAMES = {1: "interleaved", 2: "sequential", 3: "collapsed"}


@dataclass(frozen=True)
class TyingSchedule:
    variant: int
    n: int
    entries: Tuple[Tuple[str, int], ...]

    def __len__(self):
        return len(self.entries)

    def units(self) -> List[str]:
        return [u for u, _ in self.entries]

    def uses(self) -> Dict[str, int]:
        """Number of applications per unit id, in first-appearance order."""
        return dict(Counter(self.units()))

    def timeline(self) -> str:
        return " ".join(self.units())


def make_schedule(variant: int, n: int) -> TyingSchedule:
    if variant not in (1, 2, 3):
        raise ValueError(f"unknown tying variant {variant!r} (expected 1, 2 or 3)")
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"recurrence steps must be an integer >= 1, got {n!r}")
    n = int(n)
    if variant == 1:
        units = ["A", "B"] * n + ["A"]
    elif variant == 2:
        units = ["A"] * n + ["B"] * n
    else:
        units = ["A"] * n
    seen: Counter = Counter()
    entries = []
    for u in units:
        entries.append((u, seen[u]))
        seen[u] += 1
    return TyingSchedule(variant, n, tuple(entries))


def unroll_group(units: Mapping[str, BRCUnit], schedule: TyingSchedule, x: Tensor,
                 train: bool = True) -> Tensor:
    """Fold residual BRC applications over the schedule, recording each on the tape."""
    for unit in units.values():
        if x.ndim != 4 or x.shape[1] != unit.channels:
            raise ShapeError(f"unroll_group: input {x.shape} does not match unit {unit.name!r} "
                             f"width {unit.channels}")
    for unit_id, bank_index in schedule.entries:
        unit = units[unit_id]
        x = residual_step(lambda h, u=unit, k=bank_index: brc_forward(u, h, k, train), x)
    return x


class StudentNetwork(Network):
    """stem -> [tied group, transition]* -> tied group -> BN-ReLU -> global pool -> linear."""

    def __init__(self, arch: ArchSpec, rng: np.random.Generator, dtype=np.float32):
        if arch.role != "student":
            raise ValueError("StudentNetwork needs a student ArchSpec")
        self.arch = arch
        self.schedule = make_schedule(arch.variant, arch.n)
        uses = self.schedule.uses()
        self.stem = _StemConv(arch.in_channels, arch.stem_channels, "stem", rng, dtype)
        self.transitions: List[TransitionConv] = []
        self.groups: List[Dict[str, BRCUnit]] = []
        self.schedules: List[TyingSchedule] = []
        self.blocks = [self.stem]
        for g, width in enumerate(arch.group_widths):
            if g > 0:
                t = TransitionConv(arch.group_widths[g - 1], width, f"transition{g}", rng, dtype)
                self.transitions.append(t)
                self.blocks.append(t)
            units = {u: BRCUnit(width, k, f"group{g + 1}.{u}", rng, dtype) for u, k in uses.items()}
            self.groups.append(units)
            self.schedules.append(self.schedule)
            self.blocks.extend(units.values())
        self.final_bn = BatchNorm(arch.group_widths[-1], "final.bn", dtype)
        self.head = Linear(arch.group_widths[-1], arch.num_classes, "head", rng, dtype)
        self.blocks.extend([self.final_bn, self.head])

    def forward(self, x: Tensor, train: bool = True):
        """Return (logits, [end-of-group activations])."""
        h = self.stem(x)
        acts = []
        for g, (units, schedule) in enumerate(zip(self.groups, self.schedules)):
            if g > 0:
                h = self.transitions[g - 1](h, train)
            h = unroll_group(units, schedule, h, train)
            acts.append(h)
        h = ops.relu(self.final_bn(h, train))
        return self.head(ops.global_avg_pool(h)), acts

    def shared_kernels(self) -> Dict[str, Parameter]:
        return {u.kernel.name: u.kernel for units in self.groups for u in units.values()}


def untie(student: StudentNetwork) -> Tuple[StudentNetwork, Dict[str, List[str]]]:
    """Deep copy of ``student`` where every application owns a private kernel copy.

    Returns the clone and a map from each tied kernel name to the names of its
    per-application copies. Forward values match the tied network exactly.
    """
    clone = copy.deepcopy(student)
    copies: Dict[str, List[str]] = {}
    new_blocks = [b for b in clone.blocks if not isinstance(b, BRCUnit)]
    tail = new_blocks[-2:]
    new_blocks = new_blocks[:-2]
    for g, (units, schedule) in enumerate(zip(clone.groups, clone.schedules)):
        new_units: Dict[str, BRCUnit] = {}
        entries = []
        for unit_id, k in schedule.entries:
            tied = units[unit_id]
            new_id = f"{unit_id}{k}"
            kernel = Parameter(tied.kernel.data.copy(), f"{tied.name}.use{k}.kernel")
            unit = BRCUnit.__new__(BRCUnit)
            unit.name = f"{tied.name}.use{k}"
            unit.channels = tied.channels
            unit.kernel = kernel
            unit.bn_bank = [tied.bn_bank[k]]
            new_units[new_id] = unit
            entries.append((new_id, 0))
            copies.setdefault(tied.kernel.name, []).append(kernel.name)
        clone.groups[g] = new_units
        clone.schedules[g] = TyingSchedule(schedule.variant, schedule.n, tuple(entries))
        new_blocks.extend(new_units.values())
    new_blocks.extend(tail)
    clone.blocks = new_blocks
    return clone, copies


def build_student(arch: ArchSpec, seed: int = 0, dtype=np.float32,
                  rng: Optional[np.random.Generator] = None) -> StudentNetwork:
    return StudentNetwork(arch, rng if rng is not None else np.random.default_rng(seed), dtype)


def build_teacher(arch: ArchSpec, seed: int = 0, dtype=np.float32,
                  rng: Optional[np.random.Generator] = None) -> TeacherNetwork:
    return TeacherNetwork(arch, rng if rng is not None else np.random.default_rng(seed), dtype)
