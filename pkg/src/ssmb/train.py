"""Adam, the SSMB student training loop and routing inspection."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .backbone import ModelState, add_ssmb_blocks, embed_numpy, forward_features
from .block import GATE_SCALED
from .losses import LossConfig, combine, contrastive_loss, load_balance_loss, tsi_loss
from .synthdata import SOURCE, DatasetManifest

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 48
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    gamma: float = 0.5
    alpha: float = 0.01
    margin: float = 0.0
    num_experts: int = 4
    gate_mode: str = GATE_SCALED
    seed: int = 0
    steps_per_epoch: int | None = None
    # False trains every parameter (the unrestricted ceiling run)
    freeze_backbone: bool = True

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.margin, self.gamma, self.alpha)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    frozen: dict[str, bool] | None = None,
) -> None:
    """One bias-corrected Adam update.

    Frozen parameters and parameters without a gradient are left untouched.
    Parameter arrays are replaced rather than modified in place.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None or (frozen is not None and frozen.get(name, False)):
            continue
        if g.shape != p.data.shape:
            raise T.ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.data.dtype)


@dataclass
class RunLog:
    config: dict
    steps: list[dict] = field(default_factory=list)
    routing: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def epoch_means(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for s in self.steps:
            by_epoch.setdefault(s["epoch"], []).append(s["total"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def to_text(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=False) + "\n"


def steps_per_epoch(manifest: DatasetManifest, batch_size: int) -> int:
    """ceil(train identities × train samples per identity / batch size)."""
    train = manifest.select("train")
    n_ids = len({r.identity for r in train})
    per_id = len(train) / max(n_ids, 1)
    return max(1, math.ceil(n_ids * per_id / batch_size))


def _teacher_embeddings(teacher, manifest, records, cache) -> np.ndarray:
    todo = [r for r in dict.fromkeys(records) if r.path not in cache]
    if todo:
        for r, e in zip(todo, embed_numpy(teacher, manifest.batch(todo))):
            cache[r.path] = e
    return np.stack([cache[r.path] for r in records])


def train_student(
    teacher: ModelState,
    manifest: DatasetManifest,
    config: TrainConfig = TrainConfig(),
    progress=None,
) -> tuple[ModelState, RunLog]:
    """Adapt three fresh SSMB blocks on top of a frozen copy of ``teacher``."""
    from .synthdata import draw_pair_records

    if not manifest.select("train"):
        raise ValueError("manifest has no train split")
    student = add_ssmb_blocks(teacher.copy(), config.num_experts, config.gate_mode, config.seed)
    if not config.freeze_backbone:
        for name, p in student.params.items():
            student.frozen[name] = False
            p.requires_grad = True
    params = student.params
    loss_cfg = config.loss
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    runlog = RunLog(config=asdict(config))
    cache: dict[str, np.ndarray] = {}
    n_steps = config.steps_per_epoch or steps_per_epoch(manifest, config.batch_size)
    n_exp = config.num_experts

    for epoch in range(1, config.epochs + 1):
        hist = np.zeros((len(student.slots), n_exp), dtype=np.int64)
        for step in range(n_steps):
            triples = draw_pair_records(manifest, config.batch_size, 0.5, rng)
            src = [s for s, _, _ in triples]
            tgt = [t for _, t, _ in triples]
            y = np.array([lbl for _, _, lbl in triples])
            images = np.concatenate([manifest.batch(src), manifest.batch(tgt)])
            emb, stats = forward_features(student, images)
            b = len(triples)
            e_s, e_t = emb[:b], emb[b:]
            e_teacher = T.Tensor(_teacher_embeddings(teacher, manifest, src, cache), dtype=emb.dtype)

            l_c = contrastive_loss(e_s, e_t, y, loss_cfg.margin)
            l_tsi = tsi_loss(e_teacher, e_s)
            l_b = load_balance_loss(stats, n_exp)
            total = combine(l_c, l_tsi, l_b, loss_cfg)

            student.zero_grad()
            total.backward()
            adam_step(
                params,
                {k: p.grad for k, p in params.items()},
                state,
                config.lr,
                config.betas,
                config.adam_eps,
                student.frozen,
            )
            for k, st in enumerate(stats):
                hist[k] += np.bincount(st.winners, minlength=n_exp)
            runlog.steps.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "contrastive": l_c.item(),
                    "tsi": l_tsi.item(),
                    "balance": l_b.item(),
                    "total": total.item(),
                }
            )
        runlog.routing.append({"epoch": epoch, "histograms": hist.tolist()})
        if progress is not None:
            progress(epoch, runlog)
        log.info("epoch %d mean loss %.5f", epoch, runlog.epoch_means()[-1])
    student.zero_grad()
    return student, runlog


def inspect_routing(student: ModelState, manifest: DatasetManifest, split: str = "dev-probe") -> dict:
    """Winning-expert counts per block and modality over one split."""
    out: dict[str, dict[str, list[int]]] = {}
    for modality in manifest.modalities:
        records = manifest.select(split, modality)
        if not records:
            continue
        for slot, counts in enumerate(routing_histograms(student, manifest.batch(records))):
            if counts is not None:
                out.setdefault(f"block{slot}", {})[modality] = counts
    return out


def routing_histograms(model: ModelState, images: np.ndarray, batch: int = 256) -> list[list[int] | None]:
    totals = [None if b is None else np.zeros(b.config.num_experts, np.int64) for b in model.slots]
    with T.no_grad():
        for i in range(0, len(images), batch):
            _, stats = forward_features(model, images[i : i + batch])
            live = [k for k, b in enumerate(model.slots) if b is not None]
            for k, st in zip(live, stats):
                totals[k] += np.bincount(st.winners, minlength=len(totals[k]))
    return [None if t is None else t.tolist() for t in totals]


def source_training_set(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """VIS train images and their identity labels, for teacher pretraining."""
    records = manifest.select("train", SOURCE)
    return manifest.batch(records), np.array([r.identity for r in records])
