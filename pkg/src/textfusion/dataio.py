"""Dataset manifests, visual-feature sidecars and synthetic datasets.

Manifest format (UTF-8 JSON lines). The first line is a header::

    {"format": "textfusion-manifest/1", "class_names": [...], "v_dim": 16,
     "n_max": null, "sidecar": null}

Every further line is one sample::

    {"id": "s0001", "split": "train", "label": "cafe",
     "words": [["CAFE", 0.93], ["OPEN", 0.61]], "visual": [0.1, ...]}

With a sidecar the ``visual`` field is replaced by ``"visual_index": <row>``.
The sidecar is little-endian: uint32 row count, uint32 dim, then float32
rows. Unknown or missing fields are errors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingTable
from .model import Batch
from .textrep import SpottedWord, build_text_feature, compute_nmax

FORMAT = "textfusion-manifest/1"
SPLITS = ("train", "test")
VISUAL_OFFSET = 2.0

# class keyword followed by three other words of the same class
CLASS_VOCAB = [
    ("cafe", ["espresso", "latte", "mocha"]),
    ("bakery", ["bread", "pastry", "croissant"]),
    ("pizza", ["pepperoni", "oven", "slice"]),
    ("motel", ["vacancy", "rooms", "parking"]),
    ("tavern", ["beer", "pub", "ale"]),
    ("pharmacy", ["prescription", "health", "clinic"]),
    ("barber", ["haircut", "shave", "trim"]),
    ("steak", ["grill", "beef", "sirloin"]),
    ("bistro", ["wine", "menu", "chef"]),
    ("pawn", ["loans", "gold", "jewelry"]),
    ("books", ["novels", "reading", "library"]),
    ("tea", ["oolong", "matcha", "chai"]),
]


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    split: str
    label: int
    visual: np.ndarray
    words: list[SpottedWord] = field(default_factory=list)


@dataclass
class DatasetManifest:
    class_names: list[str]
    v_dim: int
    samples: list[Sample]
    n_max: int | None = None

    def __post_init__(self):
        validate(self)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]


def validate(m: DatasetManifest) -> None:
    if not m.class_names or len(set(m.class_names)) != len(m.class_names):
        raise ManifestError("class_names must be non-empty and unique")
    if m.v_dim < 1:
        raise ManifestError("v_dim must be positive")
    if m.n_max is not None and m.n_max < 1:
        raise ManifestError("n_max must be positive")
    seen = set()
    for s in m.samples:
        if s.id in seen:
            raise ManifestError(f"sample {s.id}: duplicate id")
        seen.add(s.id)
        if s.split not in SPLITS:
            raise ManifestError(f"sample {s.id}: field 'split' must be one of {SPLITS}, got {s.split!r}")
        if not 0 <= s.label < len(m.class_names):
            raise ManifestError(f"sample {s.id}: field 'label' index {s.label} out of range")
        if s.visual.shape != (m.v_dim,):
            raise ManifestError(f"sample {s.id}: field 'visual' has {s.visual.size} values, v_dim is {m.v_dim}")
        if not np.all(np.isfinite(s.visual)):
            raise ManifestError(f"sample {s.id}: field 'visual' has non-finite values")


_HEADER_KEYS = {"format", "class_names", "v_dim", "n_max", "sidecar"}
_SAMPLE_KEYS = {"id", "split", "label", "words"}


def read_sidecar(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ManifestError(f"{path}: sidecar shorter than its header")
    count, dim = struct.unpack_from("<II", data, 0)
    if len(data) != 8 + 4 * count * dim:
        raise ManifestError(f"{path}: sidecar size does not match header ({count} x {dim})")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(count, dim).astype(np.float64)


def write_sidecar(path, rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def _parse_words(sid: str, raw) -> list[SpottedWord]:
    if not isinstance(raw, list):
        raise ManifestError(f"sample {sid}: field 'words' must be a list of [text, score] pairs")
    out = []
    for item in raw:
        if not (isinstance(item, list) and len(item) == 2 and isinstance(item[0], str)
                and isinstance(item[1], (int, float)) and not isinstance(item[1], bool)):
            raise ManifestError(f"sample {sid}: field 'words' entry {item!r} is not a [text, score] pair")
        try:
            out.append(SpottedWord(item[0], float(item[1])))
        except ValueError as exc:
            raise ManifestError(f"sample {sid}: field 'words': {exc}") from None
    return out


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:1: {exc}") from None
    if not isinstance(header, dict) or set(header) != _HEADER_KEYS:
        raise ManifestError(f"{path}:1: header must have exactly the fields {sorted(_HEADER_KEYS)}")
    if header["format"] != FORMAT:
        raise ManifestError(f"{path}:1: unsupported format {header['format']!r}")
    class_names = header["class_names"]
    if not isinstance(class_names, list) or not all(isinstance(c, str) for c in class_names):
        raise ManifestError(f"{path}:1: class_names must be a list of strings")
    index = {c: i for i, c in enumerate(class_names)}
    v_dim = header["v_dim"]
    if not isinstance(v_dim, int) or isinstance(v_dim, bool):
        raise ManifestError(f"{path}:1: v_dim must be an integer")
    sidecar = None
    if header["sidecar"] is not None:
        sidecar = read_sidecar(path.parent / header["sidecar"])
        if sidecar.shape[1] != v_dim:
            raise ManifestError(f"{path}: sidecar dim {sidecar.shape[1]} differs from v_dim {v_dim}")
        if sidecar.shape[0] != len(lines) - 1:
            raise ManifestError(f"{path}: sidecar has {sidecar.shape[0]} vectors for {len(lines) - 1} samples")

    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        if not isinstance(rec, dict):
            raise ManifestError(f"{path}:{lineno}: sample record must be an object")
        sid = rec.get("id", f"<line {lineno}>")
        visual_key = "visual" if sidecar is None else "visual_index"
        expected = _SAMPLE_KEYS | {visual_key}
        if set(rec) != expected:
            extra = sorted(set(rec) - expected)
            missing = sorted(expected - set(rec))
            raise ManifestError(f"sample {sid}: unknown fields {extra}, missing fields {missing}")
        if not isinstance(rec["id"], str) or not rec["id"]:
            raise ManifestError(f"sample {sid}: field 'id' must be a non-empty string")
        if rec["label"] not in index:
            raise ManifestError(f"sample {sid}: field 'label' {rec['label']!r} is not a known class")
        if sidecar is None:
            raw = rec["visual"]
            if not isinstance(raw, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in raw):
                raise ManifestError(f"sample {sid}: field 'visual' must be a list of numbers")
            visual = np.array(raw, dtype=np.float64)
        else:
            vi = rec["visual_index"]
            if not isinstance(vi, int) or not 0 <= vi < sidecar.shape[0]:
                raise ManifestError(f"sample {sid}: field 'visual_index' out of range")
            visual = sidecar[vi].copy()
        samples.append(Sample(rec["id"], rec["split"], index[rec["label"]], visual,
                              _parse_words(sid, rec["words"])))
    return DatasetManifest(list(class_names), v_dim, samples, header["n_max"])


def manifest_text(m: DatasetManifest, sidecar_name: str | None = None) -> str:
    header = {"format": FORMAT, "class_names": m.class_names, "v_dim": m.v_dim,
              "n_max": m.n_max, "sidecar": sidecar_name}
    lines = [json.dumps(header)]
    for i, s in enumerate(m.samples):
        rec = {"id": s.id, "split": s.split, "label": m.class_names[s.label],
               "words": [[w.text, w.score] for w in s.words]}
        if sidecar_name is None:
            rec["visual"] = [float(x) for x in s.visual]
        else:
            rec["visual_index"] = i
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def save_manifest(m: DatasetManifest, path, sidecar: bool = False) -> None:
    """Write atomically. With ``sidecar`` the visual vectors go to ``<name>.f32`` (float32)."""
    path = Path(path)
    sidecar_name = None
    if sidecar:
        sidecar_name = path.name + ".f32"
        tmp_side = path.with_name(sidecar_name + ".tmp")
        rows = np.stack([s.visual for s in m.samples]) if m.samples else np.zeros((0, m.v_dim))
        write_sidecar(tmp_side, rows)
        tmp_side.replace(path.with_name(sidecar_name))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(manifest_text(m, sidecar_name), encoding="utf-8")
    tmp.replace(path)


def manifest_nmax(m: DatasetManifest, table: EmbeddingTable) -> int:
    if m.n_max is not None:
        return m.n_max
    return compute_nmax([s.words for s in m.split("train")], table)


def encode(samples: Sequence[Sample], table: EmbeddingTable, n_max: int) -> Batch:
    """Stack samples into model-ready arrays."""
    feats = [build_text_feature(s.words, table, n_max) for s in samples]
    b = len(samples)
    v_dim = samples[0].visual.shape[0] if samples else 0
    return Batch(
        visual=np.stack([s.visual for s in samples]) if samples else np.zeros((0, v_dim)),
        text=np.stack([f.matrix for f in feats]) if feats else np.zeros((0, table.dim, n_max)),
        mask=np.stack([f.mask for f in feats]) if feats else np.zeros((0, n_max), dtype=bool),
        labels=np.array([s.label for s in samples], dtype=np.intp).reshape(b),
        words=[f.words for f in feats],
        ids=[s.id for s in samples],
    )


# synthetic datasets -----------------------------------------------------

def _check_k(k: int) -> None:
    if not 2 <= k <= len(CLASS_VOCAB):
        raise ValueError(f"K must be between 2 and {len(CLASS_VOCAB)} for the bundled vocabulary")


def _split_for(j: int) -> str:
    # two of every three samples per class train, one tests
    return "test" if j % 3 == 2 else "train"


def _separated_centers(rng: np.random.Generator, k: int, v_dim: int, min_dist: float) -> np.ndarray:
    centers = rng.normal(size=(k, v_dim))
    d = np.sqrt(((centers[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
    closest = d[~np.eye(k, dtype=bool)].min()
    return centers * (min_dist / closest)


def _offset(v_dim: int) -> np.ndarray:
    # pooled CNN activations are non-negative with a non-zero mean; a shared
    # offset gives the bilinear scores an image-independent component
    return np.full(v_dim, VISUAL_OFFSET)


def _score(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi))


def _assemble(k, per_class, v_dim, make_sample) -> DatasetManifest:
    samples = []
    for c in range(k):
        for j in range(per_class):
            visual, words = make_sample(c)
            samples.append(Sample(f"c{c:02d}-{j:04d}", _split_for(j), c, visual, words))
    return DatasetManifest([CLASS_VOCAB[c][0] for c in range(k)], v_dim, samples)


def synth_overfit(k: int, per_class: int, v_dim: int, seed: int) -> DatasetManifest:
    """Well-separated unit-variance visual clusters plus the class keyword."""
    _check_k(k)
    rng = np.random.default_rng(seed)
    centers = _separated_centers(rng, k, v_dim, 8.0)

    def make(c):
        visual = _offset(v_dim) + centers[c] + rng.normal(size=v_dim)
        return visual, [SpottedWord(CLASS_VOCAB[c][0].upper(), _score(rng, 0.5, 1.0))]
    return _assemble(k, per_class, v_dim, make)


def synth_text_only(k: int, per_class: int, v_dim: int, seed: int) -> DatasetManifest:
    """One visual distribution for all classes; the keyword alone decides the label."""
    _check_k(k)
    rng = np.random.default_rng(seed)

    def make(c):
        visual = _offset(v_dim) + rng.normal(size=v_dim)
        pool = [w for o in range(k) if o != c for w in CLASS_VOCAB[o][1]]
        words = [SpottedWord(CLASS_VOCAB[c][0].upper(), _score(rng, 0.5, 1.0))]
        for w in rng.choice(len(pool), size=2, replace=False):
            words.append(SpottedWord(pool[w].upper(), _score(rng, 0.3, 0.9)))
        return visual, words
    return _assemble(k, per_class, v_dim, make)


def synth_noisy_words(k: int, per_class: int, v_dim: int, noise_words_per_sample: int, seed: int) -> DatasetManifest:
    """Weak visual clusters, the true keyword and misleading keywords of other classes."""
    _check_k(k)
    if not 0 <= noise_words_per_sample <= k - 1:
        raise ValueError(f"noise_words_per_sample must be in [0, {k - 1}]")
    rng = np.random.default_rng(seed)
    centers = _separated_centers(rng, k, v_dim, 1.0)

    def make(c):
        visual = _offset(v_dim) + centers[c] + rng.normal(size=v_dim)
        words = [SpottedWord(CLASS_VOCAB[c][0].upper(), _score(rng, 0.5, 1.0))]
        others = [o for o in range(k) if o != c]
        for o in rng.choice(len(others), size=noise_words_per_sample, replace=False):
            words.append(SpottedWord(CLASS_VOCAB[others[o]][0].upper(), _score(rng, 0.3, 0.9)))
        return visual, words
    return _assemble(k, per_class, v_dim, make)
