"""Attention-map similarity between student and teacher, and the combined loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from . import ops
from .errors import ShapeError
from .tensor import Tensor, detach

DEFAULT_PAIR_WEIGHT = 1000.0


def attention_map(acts: Tensor) -> Tensor:
    """Channel-summed squared activations, flattened to N x (H*W) and L2-normalized per sample."""
    if acts.ndim != 4 or 0 in acts.shape:
        raise ShapeError(f"attention_map: expected a non-empty N x C x H x W map, got {acts.shape}")
    return ops.l2_normalize(ops.sum_channels(ops.square(acts)))


@dataclass
class LayerPairSet:
    """(student activation index, teacher activation index) sites for the similarity loss."""

    pairs: List[Tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


@dataclass
class LossConfig:
    lam: Optional[float] = None

    def weight(self, num_pairs: int) -> float:
        """Trade-off weight; defaults to 1000 / |K|."""
        if self.lam is not None:
            if self.lam < 0:
                raise ValueError(f"lambda must be >= 0, got {self.lam}")
            return float(self.lam)
        return DEFAULT_PAIR_WEIGHT / max(num_pairs, 1)


def default_layer_pairs(student, teacher) -> LayerPairSet:
    """Pair the end of student group g with the end of teacher group g."""
    gs, gt = len(student.arch.group_widths), len(teacher.arch.group_widths)
    if gs != gt:
        raise ShapeError(f"default_layer_pairs: student has {gs} groups, teacher has {gt}")
    return LayerPairSet([(g, g) for g in range(gs)])


def at_loss(student_acts: Sequence[Tensor], teacher_acts: Sequence[Tensor],
            pairs: LayerPairSet) -> Tensor:
    """Sum over pairs of squared distances between attention maps, averaged over the batch.

    Teacher activations are detached: no gradient flows into the teacher.
    """
    total = None
    batch = None
    for i, j in pairs:
        s, t = student_acts[i], teacher_acts[j]
        if s.ndim != 4 or t.ndim != 4 or s.shape[0] != t.shape[0] or s.shape[2:] != t.shape[2:]:
            raise ShapeError(f"at_loss: pair ({i}, {j}) is not spatially compatible: "
                             f"student {s.shape} vs teacher {t.shape}")
        batch = s.shape[0]
        diff = ops.sub(attention_map(s), attention_map(detach(t)))
        term = ops.sum_all(ops.square(diff))
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ValueError("at_loss: empty layer pair set")
    return ops.scale(total, 1.0 / batch)


def total_loss(logits: Tensor, labels, student_acts, teacher_acts, pairs: LayerPairSet,
               cfg: LossConfig) -> Tensor:
    """Classification loss plus the weighted attention similarity loss."""
    cls = ops.softmax_cross_entropy(logits, labels)
    lam = cfg.weight(len(pairs))
    if lam == 0:
        return cls
    return ops.add(cls, ops.scale(at_loss(student_acts, teacher_acts, pairs), lam))
