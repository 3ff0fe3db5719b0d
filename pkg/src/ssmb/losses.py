"""Cosine contrastive, teacher-student identity and load-balance losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .block import RoutingStats
from .tensor import Tensor


class ZeroNormError(ValueError):
    """An embedding with zero L2 norm was passed to a cosine comparison."""


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.0
    gamma: float = 0.5
    alpha: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not -1.0 <= self.margin <= 1.0:
            raise ValueError("margin must lie in [-1, 1]")


def cosine_sim(a, b) -> Tensor:
    """Row-wise cosine similarity (a scalar for 1-D inputs)."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b, dtype=a.dtype)
    if np.any(np.sum(a.data * a.data, axis=-1) == 0) or np.any(np.sum(b.data * b.data, axis=-1) == 0):
        raise ZeroNormError("cosine similarity of a zero vector is undefined")
    dot = T.sum(a * b, axis=-1)
    na = T.sqrt(T.sum(a * a, axis=-1))
    nb = T.sqrt(T.sum(b * b, axis=-1))
    return dot / (na * nb)


def contrastive_loss(e_s, e_t, y, margin: float = 0.0) -> Tensor:
    """Mean of ``y·(1 − cos) + (1 − y)·max(0, cos − m)`` over pairs."""
    cos = cosine_sim(e_s, e_t)
    y = Tensor(np.asarray(y), dtype=cos.dtype)
    return T.mean(y * (1.0 - cos) + (1.0 - y) * T.relu(cos - margin))


def tsi_loss(e_teacher, e_student) -> Tensor:
    """Mean cosine mismatch between frozen teacher and student embeddings."""
    if isinstance(e_teacher, Tensor):
        e_teacher = e_teacher.detach()
    return T.mean(1.0 - cosine_sim(e_teacher, e_student))


def load_balance_loss(stats: list[RoutingStats], num_experts: int | None = None) -> Tensor:
    """``N · Σ f_i · P_i`` per block, averaged over blocks."""
    if not stats:
        raise ValueError("load balance loss needs at least one block's statistics")
    per_block = []
    for st in stats:
        n = num_experts or len(st.dispatch)
        f = Tensor(st.dispatch, dtype=st.mean_prob.dtype)
        per_block.append(T.reshape(n * T.sum(f * st.mean_prob), (1,)))
    return T.mean(T.concat(per_block))


def combine(l_c, l_tsi, l_b, config: LossConfig):
    """``(1 − γ)·L_C + γ·L_TSI + α·L_b``; works on tensors and plain floats."""
    return (1.0 - config.gamma) * l_c + config.gamma * l_tsi + config.alpha * l_b


def total_loss(e_s, e_t, e_teacher_s, y, stats, config: LossConfig = LossConfig()) -> Tensor:
    return combine(
        contrastive_loss(e_s, e_t, y, config.margin),
        tsi_loss(e_teacher_s, e_s),
        load_balance_loss(stats),
        config,
    )
