"""Small convolutional embedding network used as the frozen teacher/student trunk."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .block import GATE_SCALED, RoutingStats, SSMBBlock, SSMBConfig, ssmb_forward
from .tensor import Tensor

log = logging.getLogger(__name__)

NUM_SLOTS = 3


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 3
    image_size: int = 32
    stage_channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    embedding_dim: int = 64
    num_pretrain_classes: int = 0

    def __post_init__(self):
        if len(self.stage_channels) != NUM_SLOTS:
            raise ValueError(f"backbone needs exactly {NUM_SLOTS} stages")
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if self.image_size % (2**NUM_SLOTS):
            raise ValueError("image_size must survive three 2×2 poolings")

    @property
    def flat_features(self) -> int:
        side = self.image_size // 2**NUM_SLOTS
        return self.stage_channels[-1] * side * side


@dataclass
class ModelState:
    config: BackboneConfig
    params: dict[str, Tensor]
    frozen: dict[str, bool]
    slots: list[SSMBBlock | None] = field(default_factory=lambda: [None] * NUM_SLOTS)

    @property
    def plan(self) -> list[str]:
        """Layer sequence executed for every input, whatever its modality."""
        steps = []
        for s in range(NUM_SLOTS):
            steps += [f"conv{s}", "relu"]
            if self.slots[s] is not None:
                steps.append(f"ssmb{s}")
            steps.append("pool")
        return steps + ["flatten", "fc"]

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not self.frozen[k]}

    def attach_ssmb(self, slot: int, block: SSMBBlock) -> None:
        self.slots[slot] = block
        for name, p in block.named_parameters().items():
            key = f"ssmb.{slot}.{name}"
            self.params[key] = p
            self.frozen[key] = False

    def freeze_backbone(self) -> None:
        """Freeze everything that is not owned by an SSMB block."""
        for k in self.frozen:
            self.frozen[k] = not k.startswith("ssmb.")
            self.params[k].requires_grad = not self.frozen[k]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ModelState":
        return state_from_arrays(self.config, self.arrays(), self.gate_modes(), dict(self.frozen))

    def astype(self, dtype) -> "ModelState":
        arrays = {k: v.astype(dtype) for k, v in self.arrays().items()}
        return state_from_arrays(self.config, arrays, self.gate_modes(), dict(self.frozen))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def gate_modes(self) -> list[str | None]:
        return [b.config.gate_mode if b is not None else None for b in self.slots]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_backbone(config: BackboneConfig = BackboneConfig(), seed: int = 0, dtype=None) -> ModelState:
    dtype = dtype or T.get_default_dtype()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    c_in, k = config.input_channels, config.kernel
    for s, c_out in enumerate(config.stage_channels):
        fan_in = c_in * k * k
        params[f"conv{s}.weight"] = Tensor(_he_uniform(rng, (c_out, c_in, k, k), fan_in), True, dtype)
        params[f"conv{s}.bias"] = Tensor(np.zeros(c_out), True, dtype)
        c_in = c_out
    d = config.embedding_dim
    params["fc.weight"] = Tensor(_he_uniform(rng, (config.flat_features, d), config.flat_features), True, dtype)
    params["fc.bias"] = Tensor(np.zeros(d), True, dtype)
    return ModelState(config, params, {name: False for name in params})


def state_from_arrays(config, arrays, gate_modes=None, frozen=None) -> ModelState:
    """Rebuild a ModelState (with SSMB slots) from a flat name → array map."""
    params = {k: Tensor(v.copy(), requires_grad=True, dtype=v.dtype) for k, v in arrays.items()}
    frozen = frozen or {k: False for k in params}
    model = ModelState(config, {}, {})
    for k, p in params.items():
        if not k.startswith("ssmb."):
            model.params[k] = p
            model.frozen[k] = frozen.get(k, False)
            p.requires_grad = not model.frozen[k]
    gate_modes = gate_modes or [None] * NUM_SLOTS
    for s in range(NUM_SLOTS):
        prefix = f"ssmb.{s}."
        if f"{prefix}router.weight" not in params:
            continue
        rw = params[f"{prefix}router.weight"]
        n = rw.shape[1]
        block = SSMBBlock(
            SSMBConfig(rw.shape[0] // 2, n, gate_modes[s] or GATE_SCALED),
            rw,
            params[f"{prefix}router.bias"],
            [params[f"{prefix}expert.{i}.weight"] for i in range(n)],
            [params[f"{prefix}expert.{i}.bias"] for i in range(n)],
        )
        model.attach_ssmb(s, block)
        for name, p in block.named_parameters().items():
            model.frozen[prefix + name] = frozen.get(prefix + name, False)
            p.requires_grad = not model.frozen[prefix + name]
    return model


def add_ssmb_blocks(model: ModelState, num_experts: int, gate_mode: str, seed: int) -> ModelState:
    """Populate every slot with a fresh identity-initialized block and freeze the trunk."""
    rng = np.random.default_rng(seed)
    for s, c in enumerate(model.config.stage_channels):
        dtype = model.params[f"conv{s}.weight"].dtype
        model.attach_ssmb(s, SSMBBlock.create(SSMBConfig(c, num_experts, gate_mode), rng, dtype))
    model.freeze_backbone()
    return model


def replicate_channels(image: np.ndarray) -> np.ndarray:
    """1×H×W (or H×W) single-channel image → 3×H×W with identical channels."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] != 1:
        raise T.ShapeError(f"expected a single-channel image, got shape {image.shape}")
    return np.repeat(image, 3, axis=0)


def forward_features(
    model: ModelState, images, trace: list | None = None
) -> tuple[Tensor, list[RoutingStats]]:
    """Embed a batch and return the per-block routing statistics alongside."""
    cfg = model.config
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=model.params["fc.weight"].dtype)
    expected = (cfg.input_channels, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise T.ShapeError(f"expected N×{'×'.join(map(str, expected))} images, got {x.shape}")
    p = model.params
    stats: list[RoutingStats] = []
    for step in model.plan:
        if step.startswith("conv"):
            x = T.conv2d(x, p[f"{step}.weight"], p[f"{step}.bias"], stride=1, padding=cfg.kernel // 2)
        elif step == "relu":
            x = T.relu(x)
        elif step.startswith("ssmb"):
            x, st = ssmb_forward(model.slots[int(step[4:])], x)
            stats.append(st)
        elif step == "pool":
            x = T.max_pool2d(x, 2)
        elif step == "flatten":
            x = T.reshape(x, (x.shape[0], -1))
        elif step == "fc":
            x = x @ p["fc.weight"] + p["fc.bias"]
        if trace is not None:
            trace.append((step, tuple(stats[-1].winners.tolist())) if step.startswith("ssmb") else (step,))
    return x, stats


def forward_embed(model: ModelState, images, trace: list | None = None) -> Tensor:
    return forward_features(model, images, trace)[0]


def embed_numpy(model: ModelState, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Inference helper: embeddings as a plain array, no graph recorded."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            out.append(forward_embed(model, images[i : i + batch]).data)
    if not out:
        return np.zeros((0, model.config.embedding_dim), dtype=model.params["fc.weight"].dtype)
    return np.concatenate(out, axis=0)


def pretrain_teacher(
    model: ModelState,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int = 30,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
) -> tuple[ModelState, dict]:
    """Softmax cross-entropy over identities on top of the embedding.

    Returns the trained model (classification head dropped) and a summary with
    the final full-set training ``accuracy`` and ``loss``.
    """
    from .train import AdamState, adam_step

    if len(images) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    rng = np.random.default_rng(seed)
    dtype = model.params["fc.weight"].dtype
    d = model.config.embedding_dim
    head_w = Tensor(_he_uniform(rng, (d, len(classes)), d), True, dtype)
    head_b = Tensor(np.zeros(len(classes)), True, dtype)
    params = dict(model.params, **{"head.weight": head_w, "head.bias": head_b})
    frozen = {k: False for k in params}
    state = AdamState()
    images = np.asarray(images, dtype=dtype)
    n = len(images)

    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            emb = forward_embed(model, images[idx])
            logits = emb @ head_w + head_b
            logp = T.log_softmax(logits, axis=1)
            loss = -T.mean(logp[np.arange(len(idx)), y[idx]])
            for t in params.values():
                t.grad = None
            loss.backward()
            adam_step(params, {k: t.grad for k, t in params.items()}, state, lr=lr, frozen=frozen)
            total += loss.item() * len(idx)
        log.debug("pretrain epoch %d loss %.4f", epoch + 1, total / n)

    with T.no_grad():
        logits = embed_numpy(model, images) @ head_w.data + head_b.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    summary = {
        "accuracy": float(np.mean(np.argmax(logits, axis=1) == y)),
        "loss": float(-logp[np.arange(n), y].mean()),
    }
    model.zero_grad()
    return model, summary
