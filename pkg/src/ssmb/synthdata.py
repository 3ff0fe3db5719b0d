"""Procedural multi-modality identity benchmark.

Each identity is a 12-number recipe for a cartoon face. VIS renders are turned
into four target modalities (nir, thermal, sketch, lowres) by fixed image
transforms. Images are stored as 8-bit binary PGM files next to a plain-text
manifest, so a dataset is fully determined by its seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import replicate_channels

SOURCE = "vis"
MODALITIES = ("vis", "nir", "thermal", "sketch", "lowres")
SPLITS = ("train", "dev-enroll", "dev-probe")
SIZE = 32
MANIFEST_NAME = "manifest.csv"
HEADER = "#ssmb-manifest-v1"

_SUPERSAMPLE = 4


class ManifestError(ValueError):
    pass


class InsufficientIdentitiesError(ValueError):
    pass


@dataclass(frozen=True)
class IdentityParams:
    identity: int
    vector: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, identity: int) -> "IdentityParams":
        return cls(identity, np.random.default_rng([seed, identity]).uniform(0.0, 1.0, 12))


@dataclass(frozen=True)
class SampleRecord:
    path: str
    identity: int
    modality: str
    split: str
    variation_seed: int


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    seed: int
    root: Path = Path(".")
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def modalities(self) -> list[str]:
        seen = {r.modality for r in self.records}
        return [m for m in MODALITIES if m in seen]

    def select(self, split: str | None = None, modality: str | None = None) -> list[SampleRecord]:
        return [
            r
            for r in self.records
            if (split is None or r.split == split) and (modality is None or r.modality == modality)
        ]

    def identities(self, split: str) -> list[int]:
        return sorted({r.identity for r in self.records if r.split == split})

    def counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for r in self.records:
            out[(r.split, r.modality)] = out.get((r.split, r.modality), 0) + 1
        return out

    def image(self, record: SampleRecord) -> np.ndarray:
        """Single-channel float image in [0, 1], cached after first read."""
        img = self._cache.get(record.path)
        if img is None:
            img = read_pgm(self.root / record.path)
            self._cache[record.path] = img
        return img

    def batch(self, records: list[SampleRecord]) -> np.ndarray:
        """N×3×32×32 float32 network input."""
        if not records:
            return np.zeros((0, 3, SIZE, SIZE), dtype=np.float32)
        return np.stack([replicate_channels(self.image(r)[None]) for r in records]).astype(np.float32)

    # -- file format ---------------------------------------------------
    def to_text(self) -> str:
        lines = [f"{HEADER} seed={self.seed}"]
        for r in self.records:
            lines.append(f"{r.path},{r.identity},{r.modality},{r.split},{r.variation_seed}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, root=".") -> "DatasetManifest":
        lines = text.splitlines()
        if not lines or not lines[0].startswith(HEADER + " seed="):
            raise ManifestError("missing '#ssmb-manifest-v1 seed=<seed>' header")
        seed = int(lines[0].split("seed=", 1)[1])
        records = []
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ManifestError(f"line {n}: expected 5 fields, got {len(parts)}")
            path, ident, modality, split, vseed = parts
            if modality not in MODALITIES or split not in SPLITS:
                raise ManifestError(f"line {n}: unknown modality or split")
            records.append(SampleRecord(path, int(ident), modality, split, int(vseed)))
        return cls(records, seed, Path(root))

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, data_dir) -> "DatasetManifest":
        data_dir = Path(data_dir)
        path = data_dir / MANIFEST_NAME
        if not path.is_file():
            raise FileNotFoundError(f"no manifest at {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), root=data_dir)


# -- rendering ------------------------------------------------------------
def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def render_identity(params: IdentityParams, variation_seed: int) -> np.ndarray:
    """Anti-aliased 1×32×32 face raster in [0, 1].

    The variation seed adds a sub-pixel translation of up to 2 px in each
    direction and a global intensity offset within ±0.1.
    """
    p = params.vector
    rng = np.random.default_rng(variation_seed)
    dy, dx = rng.uniform(-2.0, 2.0, 2)
    shade = rng.uniform(-0.1, 0.1)

    s = _SUPERSAMPLE
    coords = (np.arange(SIZE * s) + 0.5) / s
    yy, xx = np.meshgrid(coords - dy, coords - dx, indexing="ij")

    face_rx, face_ry = 8.0 + 4.0 * p[0], 10.0 + 4.0 * p[1]
    cx, cy = 16.0 + 2.0 * (p[2] - 0.5), 16.0 + 2.0 * (p[3] - 0.5)
    eye_dx, eye_dy = 3.5 + 3.0 * p[4], 2.0 + 3.0 * p[5]
    eye_rl, eye_rr = 1.0 + 1.5 * p[6], 1.0 + 1.5 * p[7]
    curve, mouth_w = 3.0 * (p[8] - 0.5), 3.0 + 4.0 * p[9]
    skin = 0.45 + 0.4 * p[10]
    mouth_y = cy + 3.5 + 3.0 * p[11]

    img = np.full(yy.shape, 0.1)
    img[_ellipse(yy, xx, cy, cx, face_ry, face_rx)] = skin
    img[_ellipse(yy, xx, cy - eye_dy, cx - eye_dx, eye_rl, eye_rl)] = 0.05
    img[_ellipse(yy, xx, cy - eye_dy, cx + eye_dx, eye_rr, eye_rr)] = 0.05
    t = (xx - cx) / mouth_w
    arc = mouth_y - curve * (1.0 - t**2)
    img[(np.abs(t) <= 1.0) & (np.abs(yy - arc) <= 0.6)] = 0.05

    img = img.reshape(SIZE, s, SIZE, s).mean(axis=(1, 3))
    return np.clip(img + shade, 0.0, 1.0)[None]


# -- modality transforms -------------------------------------------------
def _box3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    return win.mean(axis=(-2, -1))


def _sobel_magnitude(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    kx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    gx = np.einsum("ijab,ab->ij", win, kx)
    gy = np.einsum("ijab,ab->ij", win, kx.T)
    return np.hypot(gx, gy)


def apply_modality(image: np.ndarray, modality: str) -> np.ndarray:
    """Turn a VIS raster (1×H×W) into the requested modality."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    x = np.asarray(image, dtype=np.float64)
    if modality == "vis":
        return x.copy()
    img = x[0]
    if modality == "nir":
        g = np.sqrt(img)
        lo, hi = g.min(), g.max()
        out = (g - lo) / (hi - lo) if hi > lo else g
    elif modality == "thermal":
        out = 1.0 - _box3(_box3(img))
    elif modality == "sketch":
        mag = _sobel_magnitude(img)
        peak = mag.max()
        out = mag / peak if peak > 0 else mag
    else:  # lowres
        h, w = img.shape
        small = img.reshape(h // 4, 4, w // 4, 4).mean(axis=(1, 3))
        out = np.repeat(np.repeat(small, 4, axis=0), 4, axis=1)
    return np.clip(out, 0.0, 1.0)[None]


# -- PGM io --------------------------------------------------------------
def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    pixels = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).astype(np.float32) / np.float32(maxval)


# -- dataset generation --------------------------------------------------
def generate_dataset(
    seed: int,
    num_identities: int,
    samples_per_id_per_modality: int,
    out_dir,
    modalities=MODALITIES,
) -> DatasetManifest:
    """Render the benchmark to ``out_dir`` and write its manifest.

    The first ``floor(0.7·K)`` identities are training identities and have
    every modality; the rest are dev identities with VIS enrollment samples
    plus probe samples in every modality.
    """
    if num_identities < 4:
        raise InsufficientIdentitiesError("need at least 4 identities for a train/dev split")
    modalities = [m for m in MODALITIES if m in set(modalities)]
    if SOURCE not in modalities or len(modalities) < 2:
        raise ValueError("modalities must include 'vis' and at least one target modality")
    n = samples_per_id_per_modality
    if n < 1:
        raise ValueError("need at least one sample per identity and modality")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train = int(np.floor(0.7 * num_identities))

    plan: list[tuple[int, str, str]] = []
    for ident in range(num_identities):
        if ident < n_train:
            plan += [(ident, m, "train") for m in modalities for _ in range(n)]
        else:
            plan += [(ident, SOURCE, "dev-enroll") for _ in range(n)]
            plan += [(ident, m, "dev-probe") for m in modalities for _ in range(n)]

    records = []
    params: dict[int, IdentityParams] = {}
    for k, (ident, modality, split) in enumerate(plan):
        vseed = int(rng.integers(0, 2**31 - 1))
        if ident not in params:
            params[ident] = IdentityParams.from_seed(seed, ident)
        rel = f"images/{ident:04d}_{split}_{modality}_{k:05d}.pgm"
        img = apply_modality(render_identity(params[ident], vseed), modality)
        write_pgm(out_dir / rel, img)
        records.append(SampleRecord(rel, ident, modality, split, vseed))

    manifest = DatasetManifest(records, seed, out_dir)
    manifest.write(out_dir)
    return manifest


# -- pair sampling -------------------------------------------------------
@dataclass
class PairBatch:
    source_images: np.ndarray
    target_images: np.ndarray
    labels: np.ndarray
    source_ids: np.ndarray
    target_ids: np.ndarray
    source_paths: list[str]


def draw_pair_records(
    manifest: DatasetManifest, batch_size: int, genuine_fraction: float, rng: np.random.Generator
) -> list[tuple[SampleRecord, SampleRecord, int]]:
    """Choose (vis record, target record, label) triples from the train split."""
    if not 0.0 < genuine_fraction < 1.0:
        raise ValueError("genuine_fraction must lie in (0, 1)")
    train = manifest.select("train")
    if not train:
        raise ManifestError("manifest has no train split")
    vis: dict[int, list[SampleRecord]] = {}
    target: dict[str, dict[int, list[SampleRecord]]] = {}
    for r in train:
        if r.modality == SOURCE:
            vis.setdefault(r.identity, []).append(r)
        else:
            target.setdefault(r.modality, {}).setdefault(r.identity, []).append(r)
    ids = sorted(vis)
    target_modalities = [m for m in MODALITIES if m in target]
    if not target_modalities:
        raise ManifestError("train split has no target-modality samples")

    n_genuine = int(round(batch_size * genuine_fraction))
    if n_genuine < batch_size and len(ids) < 2:
        raise InsufficientIdentitiesError("impostor pairs need at least two training identities")

    triples = []
    for k in range(batch_size):
        genuine = k < n_genuine
        src_id = ids[rng.integers(len(ids))]
        src = vis[src_id][rng.integers(len(vis[src_id]))]
        modality = target_modalities[rng.integers(len(target_modalities))]
        pool = target[modality]
        if genuine:
            tgt_id = src_id
        else:
            others = [i for i in sorted(pool) if i != src_id]
            tgt_id = others[rng.integers(len(others))]
        tgt = pool[tgt_id][rng.integers(len(pool[tgt_id]))]
        triples.append((src, tgt, int(genuine)))
    return [triples[i] for i in rng.permutation(batch_size)]


def sample_pairs(
    manifest: DatasetManifest, batch_size: int, genuine_fraction: float = 0.5, rng=None
) -> PairBatch:
    rng = rng if rng is not None else np.random.default_rng()
    triples = draw_pair_records(manifest, batch_size, genuine_fraction, rng)
    src = [s for s, _, _ in triples]
    tgt = [t for _, t, _ in triples]
    return PairBatch(
        manifest.batch(src),
        manifest.batch(tgt),
        np.array([y for _, _, y in triples], dtype=np.int64),
        np.array([r.identity for r in src]),
        np.array([r.identity for r in tgt]),
        [r.path for r in src],
    )
