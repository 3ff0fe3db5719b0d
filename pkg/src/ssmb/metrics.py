"""Verification and identification metrics over cosine scores.

Conventions: a comparison is accepted when its score is ``>= threshold``;
thresholds are swept over the observed scores only (no ROC interpolation).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

# reported operating points: percent label -> FAR fraction
FAR_POINTS = {0.1: 0.001, 1.0: 0.01}


class EmptyScoresError(ValueError):
    pass


class MissingIdentityError(ValueError):
    pass


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray
    genuine_tags: np.ndarray | None = None
    impostor_tags: np.ndarray | None = None

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.impostor = np.asarray(self.impostor, dtype=np.float64)

    def check(self) -> None:
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise EmptyScoresError("both genuine and impostor scores are required")

    def subset(self, tag) -> "ScoreSet":
        g = self.genuine_tags == tag
        i = self.impostor_tags == tag
        return ScoreSet(self.genuine[g], self.impostor[i], self.genuine_tags[g], self.impostor_tags[i])


def _far_frr(scores: ScoreSet, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    imp = np.sort(scores.impostor)
    gen = np.sort(scores.genuine)
    far = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    frr = np.searchsorted(gen, thresholds, side="left") / gen.size
    return far, frr


def roc_auc(scores: ScoreSet) -> float:
    """P(genuine > impostor) with ties counted as one half."""
    scores.check()
    imp = np.sort(scores.impostor)
    below = np.searchsorted(imp, scores.genuine, side="left")
    upto = np.searchsorted(imp, scores.genuine, side="right")
    wins = below.sum() + 0.5 * (upto - below).sum()
    return float(wins / (scores.genuine.size * imp.size))


def eer(scores: ScoreSet) -> float:
    """Mean of FAR and FRR at the observed threshold where they are closest."""
    scores.check()
    thresholds = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    far, frr = _far_frr(scores, thresholds)
    best = int(np.argmin(np.abs(far - frr)))  # lowest threshold on ties
    return float((far[best] + frr[best]) / 2)


def vr_at_far(scores: ScoreSet, far_target: float) -> float:
    """Genuine acceptance rate at the lowest threshold meeting ``FAR <= far_target``."""
    scores.check()
    if not 0.0 < far_target < 1.0:
        raise ValueError("far_target must lie in (0, 1)")
    thresholds = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    far, frr = _far_frr(scores, thresholds)
    ok = np.flatnonzero(far <= far_target)
    if ok.size == 0:
        return 0.0
    return float(1.0 - frr[ok[0]])


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding")
    return x / norms


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _normalize(np.asarray(a, np.float64)) @ _normalize(np.asarray(b, np.float64)).T


def rank1(probes: np.ndarray, gallery: np.ndarray, probe_ids, gallery_ids) -> float:
    """Fraction of probes whose best-matching gallery template has their identity."""
    probe_ids, gallery_ids = np.asarray(probe_ids), np.asarray(gallery_ids)
    missing = set(probe_ids.tolist()) - set(gallery_ids.tolist())
    if missing:
        raise MissingIdentityError(f"probe identities {sorted(missing)} are not enrolled")
    if len(probe_ids) == 0:
        raise EmptyScoresError("no probes")
    best = np.argmax(cosine_matrix(probes, gallery), axis=1)
    return float(np.mean(gallery_ids[best] == probe_ids))


# -- protocol ------------------------------------------------------------
@dataclass
class ProtocolScores:
    scores: ScoreSet
    gallery_ids: np.ndarray
    templates: np.ndarray
    probe_ids: np.ndarray
    probe_modalities: np.ndarray
    probe_embeddings: np.ndarray


def score_embeddings(enroll_emb, enroll_ids, probe_emb, probe_ids, probe_modalities) -> ProtocolScores:
    """Mean-template gallery vs. every probe, cosine scored."""
    enroll_ids = np.asarray(enroll_ids)
    probe_ids = np.asarray(probe_ids)
    probe_modalities = np.asarray(probe_modalities)
    gallery_ids = np.unique(enroll_ids)
    templates = np.stack([np.asarray(enroll_emb)[enroll_ids == g].mean(axis=0) for g in gallery_ids])
    sim = cosine_matrix(probe_emb, templates)
    same = probe_ids[:, None] == gallery_ids[None, :]
    tags = np.broadcast_to(probe_modalities[:, None], sim.shape)
    scores = ScoreSet(sim[same], sim[~same], tags[same], tags[~same])
    return ProtocolScores(scores, gallery_ids, templates, probe_ids, probe_modalities, np.asarray(probe_emb))


def score_protocol(model, manifest, probe_modalities=None) -> ProtocolScores:
    """Enroll dev identities from VIS samples, score every dev probe."""
    from .backbone import embed_numpy

    enroll = manifest.select("dev-enroll")
    probes = manifest.select("dev-probe")
    if not enroll or not probes:
        raise ValueError("manifest needs both dev-enroll and dev-probe records")
    if probe_modalities is not None:
        probes = [r for r in probes if r.modality in set(probe_modalities)]
    e_emb = embed_numpy(model, manifest.batch(enroll))
    p_emb = embed_numpy(model, manifest.batch(probes))
    return score_embeddings(
        e_emb,
        [r.identity for r in enroll],
        p_emb,
        [r.identity for r in probes],
        [r.modality for r in probes],
    )


# -- reporting -----------------------------------------------------------
@dataclass
class MetricsReport:
    auc: float
    eer: float
    rank1: float
    vr_at_far: dict[float, float]
    counts: dict[str, int]
    per_modality: dict[str, "MetricsReport"] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        """Headline numbers (percent) in report key order."""
        return {
            "auc": self.auc,
            "eer": self.eer,
            "rank1": self.rank1,
            "vr_far_0.1": self.vr_at_far[0.1],
            "vr_far_1.0": self.vr_at_far[1.0],
        }

    def to_text(self) -> str:
        """YAML-compatible text, fixed key order, two decimals."""
        lines = _block(self, "")
        if self.per_modality:
            lines.append("per_modality:")
            for m, rep in self.per_modality.items():
                lines.append(f"  {m}:")
                lines += _block(rep, "    ")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "modality", "value"])
        for name, rep in [("all", self)] + list(self.per_modality.items()):
            for key, value in rep.values().items():
                w.writerow([key, name, f"{value:.2f}"])
        return buf.getvalue()


def _block(rep: MetricsReport, indent: str) -> list[str]:
    lines = [f"{indent}{k}: {v:.2f}" for k, v in rep.values().items()]
    lines.append(f"{indent}counts: {{{', '.join(f'{k}: {v}' for k, v in rep.counts.items())}}}")
    return lines


def _report(ps: ProtocolScores, mask: np.ndarray, scores: ScoreSet) -> MetricsReport:
    return MetricsReport(
        auc=100 * roc_auc(scores),
        eer=100 * eer(scores),
        rank1=100 * rank1(ps.probe_embeddings[mask], ps.templates, ps.probe_ids[mask], ps.gallery_ids),
        vr_at_far={pct: 100 * vr_at_far(scores, f) for pct, f in FAR_POINTS.items()},
        counts={
            "probes": int(mask.sum()),
            "genuine": int(scores.genuine.size),
            "impostor": int(scores.impostor.size),
        },
    )


def metrics_report(ps: ProtocolScores) -> MetricsReport:
    """Aggregate report over all probes plus one sub-report per probe modality."""
    report = _report(ps, np.ones(len(ps.probe_ids), bool), ps.scores)
    from .synthdata import MODALITIES

    present = set(ps.probe_modalities.tolist())
    for m in [m for m in MODALITIES if m in present] + sorted(present - set(MODALITIES)):
        report.per_modality[m] = _report(ps, ps.probe_modalities == m, ps.scores.subset(m))
    return report


def evaluate(model, manifest, probe_modalities=None) -> MetricsReport:
    return metrics_report(score_protocol(model, manifest, probe_modalities))
