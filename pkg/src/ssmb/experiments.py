"""End-to-end runs shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backbone import BackboneConfig, ModelState, build_backbone, pretrain_teacher
from .metrics import MetricsReport, evaluate
from .synthdata import MODALITIES, SOURCE, DatasetManifest, generate_dataset
from .train import RunLog, TrainConfig, source_training_set, train_student

CROSS_MODAL = tuple(m for m in MODALITIES if m != SOURCE)


@dataclass
class PipelineConfig:
    seed: int = 7
    identities: int = 20
    samples: int = 5
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class PipelineResult:
    manifest: DatasetManifest
    teacher: ModelState
    teacher_report: MetricsReport
    students: dict = field(default_factory=dict)  # num_experts -> (model, RunLog, MetricsReport)
    seconds: float = 0.0


def prepare(cfg: PipelineConfig, workdir) -> tuple[DatasetManifest, ModelState]:
    """Generate the benchmark and pretrain the teacher on its VIS train split."""
    data = Path(workdir) / "data"
    data.mkdir(parents=True, exist_ok=True)
    manifest = generate_dataset(cfg.seed, cfg.identities, cfg.samples, data)
    images, labels = source_training_set(manifest)
    model = build_backbone(BackboneConfig(num_pretrain_classes=len(set(labels.tolist()))), cfg.train.seed)
    teacher, _ = pretrain_teacher(model, images, labels, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.train.seed)
    return manifest, teacher


def cross_modal_report(model: ModelState, manifest: DatasetManifest) -> MetricsReport:
    """Dev metrics over non-VIS probes only."""
    return evaluate(model, manifest, CROSS_MODAL)


def run_pipeline(cfg: PipelineConfig, workdir, experts=(4,), progress=print) -> PipelineResult:
    start = time.perf_counter()
    manifest, teacher = prepare(cfg, workdir)
    result = PipelineResult(manifest, teacher, cross_modal_report(teacher, manifest))
    for n in experts:
        student, runlog = train_student(teacher, manifest, replace(cfg.train, num_experts=n))
        report = cross_modal_report(student, manifest)
        runlog.metrics = report.values()
        result.students[n] = (student, runlog, report)
        if progress:
            progress(f"N={n}: EER {report.eer:.2f} (teacher {result.teacher_report.eer:.2f})")
    result.seconds = time.perf_counter() - start
    return result


def relative_reduction(before: float, after: float) -> float:
    return (before - after) / before if before else 0.0


def expert_table(result: PipelineResult) -> str:
    """Expert-count comparison: AUC, EER and Rank-1 per row, percent."""
    rows = [("Frozen teacher", result.teacher_report)]
    rows += [(f"SSMB N={n}", rep) for n, (_, _, rep) in sorted(result.students.items())]
    lines = ["| Experts (N) | AUC | EER | Rank-1 |", "|---|---|---|---|"]
    lines += [f"| {name} | {r.auc:.2f} | {r.eer:.2f} | {r.rank1:.2f} |" for name, r in rows]
    return "\n".join(lines) + "\n"


def loss_drop(runlog: RunLog) -> float:
    means = runlog.epoch_means()
    return relative_reduction(means[0], means[-1])
