"""Command-line entry point: ``ssmb {gen-data,pretrain,train,eval,routes}``.

Exit status is 0 on success, 2 on a usage error and 1 when a command fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backbone import BackboneConfig, build_backbone, pretrain_teacher
from .block import GATE_SCALED, VALUE_PRESERVING
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .metrics import evaluate
from .synthdata import MODALITIES, DatasetManifest, ManifestError, generate_dataset
from .train import TrainConfig, inspect_routing, source_training_set, train_student

log = logging.getLogger("ssmb")

GATE_FLAGS = {"scaled": GATE_SCALED, "value-preserving": VALUE_PRESERVING}


def runlog_path(ckpt) -> Path:
    """Where the run log for ``ckpt`` is written."""
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".runlog.json")


def _modalities(text: str) -> tuple[str, ...]:
    mods = tuple(m.strip() for m in text.split(",") if m.strip())
    unknown = [m for m in mods if m not in MODALITIES]
    if unknown or not mods:
        raise argparse.ArgumentTypeError(f"unknown modalities {unknown}; choose from {','.join(MODALITIES)}")
    return mods


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="render the synthetic multi-modal benchmark")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--identities", type=int, default=20)
    g.add_argument("--samples", type=int, default=5, help="samples per identity per modality")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--modalities", type=_modalities, default=MODALITIES)

    pt = sub.add_parser("pretrain", help="pretrain the teacher on VIS train images")
    pt.add_argument("--data", required=True, type=Path)
    pt.add_argument("--out", required=True, type=Path)
    pt.add_argument("--epochs", type=int, default=30)
    pt.add_argument("--lr", type=float, default=1e-3)
    pt.add_argument("--seed", type=int, default=0)

    d = TrainConfig()
    t = sub.add_parser("train", help="adapt SSMB blocks on a frozen teacher")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--teacher", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--experts", type=int, default=d.num_experts)
    t.add_argument("--gate-mode", choices=sorted(GATE_FLAGS), default="scaled")
    t.add_argument("--gamma", type=float, default=d.gamma)
    t.add_argument("--alpha", type=float, default=d.alpha)
    t.add_argument("--margin", type=float, default=d.margin)
    t.add_argument("--lr", type=float, default=d.lr)
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--batch", type=int, default=d.batch_size)
    t.add_argument("--seed", type=int, default=d.seed)

    e = sub.add_parser("eval", help="score the dev protocol")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--report", required=True, type=Path)
    e.add_argument("--csv", type=Path)

    r = sub.add_parser("routes", help="per-modality expert histograms over dev probes")
    r.add_argument("--data", required=True, type=Path)
    r.add_argument("--model", required=True, type=Path)
    r.add_argument("--out", required=True, type=Path)
    return p


def cmd_gen_data(a) -> None:
    a.out.mkdir(parents=True, exist_ok=True)
    m = generate_dataset(a.seed, a.identities, a.samples, a.out, a.modalities)
    print(f"wrote {len(m.records)} images to {a.out}")


def cmd_pretrain(a) -> None:
    manifest = DatasetManifest.read(a.data)
    images, labels = source_training_set(manifest)
    cfg = BackboneConfig(num_pretrain_classes=len(set(labels.tolist())))
    model, summary = pretrain_teacher(build_backbone(cfg, a.seed), images, labels, a.epochs, a.lr, a.seed)
    save_checkpoint(model, a.out)
    summary = {"epochs": a.epochs, "lr": a.lr, "seed": a.seed, **summary}
    runlog_path(a.out).write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    print(f"teacher train accuracy {summary['accuracy']:.4f}")


def cmd_train(a) -> None:
    manifest = DatasetManifest.read(a.data)
    teacher = load_checkpoint(a.teacher)
    config = TrainConfig(
        lr=a.lr,
        epochs=a.epochs,
        batch_size=a.batch,
        gamma=a.gamma,
        alpha=a.alpha,
        margin=a.margin,
        num_experts=a.experts,
        gate_mode=GATE_FLAGS[a.gate_mode],
        seed=a.seed,
    )
    student, runlog = train_student(teacher, manifest, config)
    runlog.metrics = evaluate(student, manifest).values()
    save_checkpoint(student, a.out)
    runlog_path(a.out).write_text(runlog.to_text(), encoding="utf-8")
    print(f"final mean loss {runlog.epoch_means()[-1]:.5f}")


def cmd_eval(a) -> None:
    manifest = DatasetManifest.read(a.data)
    report = evaluate(load_checkpoint(a.model), manifest)
    a.report.write_text(report.to_text(), encoding="utf-8")
    if a.csv is not None:
        a.csv.write_text(report.to_csv(), encoding="utf-8")
    print(report.to_text(), end="")


def cmd_routes(a) -> None:
    manifest = DatasetManifest.read(a.data)
    routes = inspect_routing(load_checkpoint(a.model), manifest)
    a.out.write_text(json.dumps(routes, indent=1) + "\n", encoding="utf-8")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "routes": cmd_routes,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"ssmb {args.command}: {exc}", file=sys.stderr)
        return 1
    except CheckpointError as exc:
        print(f"ssmb {args.command}: invalid checkpoint: {exc}", file=sys.stderr)
        return 1
    except ManifestError as exc:
        print(f"ssmb {args.command}: invalid manifest: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"ssmb {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
