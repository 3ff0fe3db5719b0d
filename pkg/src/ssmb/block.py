"""Switch style modulation block.

Per-sample channel statistics feed a softmax router; the top-1 expert (a single
affine map, identity-initialized) turns the statistics into new shift/scale
values that re-style the instance-normalized feature map, with a residual.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

GATE_SCALED = "gate-scaled"
VALUE_PRESERVING = "value-preserving"
GATE_MODES = (GATE_SCALED, VALUE_PRESERVING)


@dataclass(frozen=True)
class SSMBConfig:
    channels: int
    num_experts: int = 4
    gate_mode: str = GATE_SCALED
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.channels < 1 or self.num_experts < 1:
            raise ValueError("channels and num_experts must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")


@dataclass
class RoutingStats:
    """Routing summary of one block over one batch.

    ``dispatch`` (f) is the fraction of samples sent to each expert and is a
    plain array; ``mean_prob`` (P) stays on the tape so the balance loss can
    push gradient into the router.
    """

    dispatch: np.ndarray
    mean_prob: Tensor
    batch_size: int
    winners: np.ndarray = field(repr=False)


class SSMBBlock:
    def __init__(self, config: SSMBConfig, router_weight, router_bias, expert_weights, expert_biases):
        self.config = config
        self.router_weight = router_weight
        self.router_bias = router_bias
        self.expert_weights = list(expert_weights)
        self.expert_biases = list(expert_biases)

    @classmethod
    def create(cls, config: SSMBConfig, rng: np.random.Generator, dtype=None) -> "SSMBBlock":
        dtype = dtype or T.get_default_dtype()
        d, n = 2 * config.channels, config.num_experts
        return cls(
            config,
            Tensor(rng.uniform(-1e-3, 1e-3, size=(d, n)), requires_grad=True, dtype=dtype),
            Tensor(np.zeros(n), requires_grad=True, dtype=dtype),
            [Tensor(np.eye(d), requires_grad=True, dtype=dtype) for _ in range(n)],
            [Tensor(np.zeros(d), requires_grad=True, dtype=dtype) for _ in range(n)],
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"router.weight": self.router_weight, "router.bias": self.router_bias}
        for i, (w, b) in enumerate(zip(self.expert_weights, self.expert_biases)):
            out[f"expert.{i}.weight"] = w
            out[f"expert.{i}.bias"] = b
        return out

    def __call__(self, features: Tensor) -> tuple[Tensor, RoutingStats]:
        return ssmb_forward(self, features)


def channel_stats(features: Tensor, eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Per-sample, per-channel spatial mean and stabilized population std."""
    mu = T.mean(features, axis=(2, 3))
    centered = features - T.reshape(mu, mu.shape + (1, 1))
    var = T.mean(centered * centered, axis=(2, 3))
    return mu, T.sqrt(var + eps)


def route(block: SSMBBlock, router_input: Tensor) -> tuple[Tensor, np.ndarray, Tensor]:
    """Softmax router with switch (top-1) selection; ties go to the lowest index."""
    probs = T.softmax(router_input @ block.router_weight + block.router_bias, axis=1)
    winner = np.argmax(probs.data, axis=1)
    gate = probs[np.arange(len(winner)), winner]
    return probs, winner, gate


def expert_modulation_params(
    block: SSMBBlock, router_input: Tensor, winner: np.ndarray, gate: Tensor
) -> tuple[Tensor, Tensor]:
    """Run each sample through its own winning expert and split into (shift, scale)."""
    c = block.config.channels
    parts, order = [], []
    for i, (w, b) in enumerate(zip(block.expert_weights, block.expert_biases)):
        idx = np.flatnonzero(winner == i)
        if idx.size == 0:
            continue
        parts.append(router_input[idx] @ T.transpose(w) + b)
        order.append(idx)
    raw = T.concat(parts, axis=0)
    # undo the grouping so rows line up with samples again
    raw = raw[np.argsort(np.concatenate(order), kind="stable")]

    g = T.reshape(gate, (-1, 1))
    if block.config.gate_mode == GATE_SCALED:
        factor = g
    else:
        factor = g / g.detach()
    return raw[:, :c] * factor, raw[:, c:] * factor


def collect_routing_stats(winners: np.ndarray, probs: Tensor) -> RoutingStats:
    winners = np.asarray(winners)
    b, n = probs.shape
    if b < 1:
        raise ValueError("routing statistics need at least one sample")
    dispatch = np.bincount(winners, minlength=n).astype(probs.dtype) / b
    return RoutingStats(dispatch, T.mean(probs, axis=0), b, winners)


def ssmb_forward(block: SSMBBlock, features: Tensor) -> tuple[Tensor, RoutingStats]:
    n, c = features.shape[:2]
    if c != block.config.channels:
        raise T.ShapeError(f"block expects {block.config.channels} channels, got {c}")
    mu, sigma = channel_stats(features, block.config.epsilon)
    router_input = T.concat([mu, sigma], axis=1)
    probs, winner, gate = route(block, router_input)
    mu_s, sigma_s = expert_modulation_params(block, router_input, winner, gate)

    def spatial(t):
        return T.reshape(t, (n, c, 1, 1))

    normed = (features - spatial(mu)) / spatial(sigma)
    out = 0.5 * (spatial(sigma_s) * normed + spatial(mu_s) + features)
    return out, collect_routing_stats(winner, probs)
