"""Dataset files, sharding, epoch batching, and the synthetic paired-data generator.

All line-oriented files start with the ``#laclip-kit v1`` tag line followed by
one canonical JSON object per line (sorted keys, no extra whitespace).
Feature sidecars are the tag line, one JSON header line, then little-endian
float32 rows.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import FORMAT_TAG
from .encoder import CONTEXT_LEN, VOCAB_SIZE, tokenize_batch
from .errors import ConfigError, DuplicateId, ParseError
from .hashing import canonical_json, hash64
from .textaug import AugmentedRecord, sample_caption_index

CAPTION_KEYS = ("caption", "id", "image_ref")
AUGMENTED_KEYS = ("captions", "id", "image_ref", "rewrite_meta")


# ---------------------------------------------------------------------------
# line-delimited record files


def _iter_json_lines(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                if lineno == 1 and stripped != FORMAT_TAG:
                    raise ParseError(lineno, f"unsupported format tag {stripped!r}")
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as e:
                raise ParseError(lineno, f"invalid JSON: {e.msg}") from None
            if not isinstance(obj, dict):
                raise ParseError(lineno, "expected a JSON object")
            yield lineno, obj


def _write_lines(path: str | Path, objs) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(FORMAT_TAG + "\n")
        for obj in objs:
            f.write(canonical_json(obj) + "\n")
    tmp.replace(path)


def ingest_captions(path: str | Path) -> list[AugmentedRecord]:
    """Read ``{id, image_ref, caption}`` lines into records with no rewrites."""
    records, seen = [], set()
    for lineno, obj in _iter_json_lines(path):
        missing = [k for k in CAPTION_KEYS if k not in obj]
        if missing:
            raise ParseError(lineno, f"missing field(s) {', '.join(missing)}")
        if not all(isinstance(obj[k], str) for k in CAPTION_KEYS):
            raise ParseError(lineno, "id, image_ref and caption must be strings")
        if obj["id"] in seen:
            raise DuplicateId(obj["id"])
        seen.add(obj["id"])
        try:
            records.append(AugmentedRecord(obj["id"], obj["image_ref"], [obj["caption"]]))
        except ValueError as e:
            raise ParseError(lineno, str(e)) from None
    return records


def write_captions(path: str | Path, records: list[AugmentedRecord]) -> None:
    _write_lines(path, ({"id": r.id, "image_ref": r.image_ref, "caption": r.captions[0]} for r in records))


def read_augmented(path: str | Path) -> list[AugmentedRecord]:
    records, seen = [], set()
    for lineno, obj in _iter_json_lines(path):
        if sorted(obj) != list(AUGMENTED_KEYS):
            raise ParseError(lineno, f"expected fields exactly {set(AUGMENTED_KEYS)}")
        if obj["id"] in seen:
            raise DuplicateId(obj["id"])
        seen.add(obj["id"])
        try:
            records.append(AugmentedRecord(obj["id"], obj["image_ref"], obj["captions"], obj["rewrite_meta"]))
        except (ValueError, TypeError) as e:
            raise ParseError(lineno, str(e)) from None
    return records


def write_augmented(path: str | Path, records: list[AugmentedRecord]) -> None:
    _write_lines(path, (r.to_json() for r in records))


def read_records(path: str | Path) -> list[AugmentedRecord]:
    """Read either a caption file or an augmented file, by inspecting the first record."""
    for _, obj in _iter_json_lines(path):
        return read_augmented(path) if "captions" in obj else ingest_captions(path)
    return []


# ---------------------------------------------------------------------------
# sharding


def shard_index(record_id: str, n_shards: int) -> int:
    return hash64(record_id) % n_shards


def assign_shards(records: list[AugmentedRecord], n_shards: int) -> list[list[AugmentedRecord]]:
    if n_shards < 1:
        raise ConfigError("n_shards must be >= 1")
    shards: list[list[AugmentedRecord]] = [[] for _ in range(n_shards)]
    for r in records:
        shards[shard_index(r.id, n_shards)].append(r)
    return shards


def shard(records: list[AugmentedRecord], n_shards: int, out_dir: str | Path, stem: str = "shard") -> list[Path]:
    """Write records into ``n_shards`` augmented files, preserving input order within each."""
    paths = []
    for i, part in enumerate(assign_shards(records, n_shards)):
        p = Path(out_dir) / f"{stem}-{i:05d}-of-{n_shards:05d}.jsonl"
        write_augmented(p, part)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# feature sidecar


def ids_digest(ids: list[str]) -> str:
    return hashlib.sha256("\n".join(ids).encode("utf-8")).hexdigest()


class FeatureStore:
    """Precomputed image feature vectors keyed by image_ref."""

    def __init__(self, ids: list[str], matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ValueError(f"matrix shape {matrix.shape} does not match {len(ids)} ids")
        self.ids = list(ids)
        self.matrix = matrix
        self._index = {k: i for i, k in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("feature ids must be unique")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, ref: str) -> bool:
        return ref in self._index

    def rows(self, refs) -> np.ndarray:
        try:
            return self.matrix[[self._index[r] for r in refs]]
        except KeyError as e:
            raise KeyError(f"no features for image_ref {e.args[0]!r}") from None

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"count": len(self.ids), "dim": self.dim, "ids": self.ids, "ids_sha": ids_digest(self.ids)}
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write((FORMAT_TAG + "\n" + canonical_json(header) + "\n").encode("utf-8"))
            f.write(self.matrix.astype("<f4").tobytes(order="C"))
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureStore":
        with open(path, "rb") as f:
            tag = f.readline().decode("utf-8").rstrip("\n")
            if tag != FORMAT_TAG:
                raise ParseError(1, f"unsupported format tag {tag!r}")
            header = json.loads(f.readline().decode("utf-8"))
            data = np.frombuffer(f.read(), dtype="<f4")
        count, dim = header["count"], header["dim"]
        if data.size != count * dim:
            raise ParseError(3, f"expected {count * dim} floats, found {data.size}")
        if ids_digest(header["ids"]) != header["ids_sha"]:
            raise ParseError(2, "ids_sha does not match ids")
        return cls(header["ids"], data.reshape(count, dim).astype(np.float64))


# ---------------------------------------------------------------------------
# batching


@dataclass
class BatchPairs:
    """One training batch.

    ``token_batches`` is ``(N, L)`` for the sampled/original caption modes and
    ``(M + 1, N, L)`` in ``"all"`` mode (slot ``j`` holds ``captions[j]``).
    """

    image_features: np.ndarray
    token_batches: np.ndarray
    record_ids: list[str]
    caption_indices: np.ndarray

    def __post_init__(self):
        n = len(self.record_ids)
        if n < 1 or self.image_features.shape[0] != n or self.token_batches.shape[-2] != n:
            raise ValueError("batch components must share a length N >= 1")


CAPTION_MODES = ("sample", "original", "all")


def batch_iter(
    records: list[AugmentedRecord],
    features: FeatureStore,
    batch_size: int,
    epoch_seed: int,
    caption_mode: str = "sample",
    vocab_size: int = VOCAB_SIZE,
    context_len: int = CONTEXT_LEN,
) -> Iterator[BatchPairs]:
    """Yield one epoch of batches; the final short batch is kept.

    The permutation and the per-record caption choices use independent
    streams spawned from ``epoch_seed``, so the visiting order does not
    depend on ``caption_mode``.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if caption_mode not in CAPTION_MODES:
        raise ConfigError(f"caption_mode must be one of {CAPTION_MODES}")
    if not records:
        return
    perm_ss, cap_ss = np.random.SeedSequence(epoch_seed).spawn(2)
    order = np.random.default_rng(perm_ss).permutation(len(records))
    cap_rng = np.random.default_rng(cap_ss)
    if caption_mode == "sample":
        chosen = np.array([sample_caption_index(records[i], cap_rng) for i in order], dtype=np.int64)
    else:
        chosen = np.zeros(len(records), dtype=np.int64)
    if caption_mode == "all":
        n_slots = {len(r.captions) for r in records}
        if len(n_slots) != 1:
            raise ConfigError("multi-text batching needs the same number of rewrites on every record")

    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batch = [records[i] for i in idx]
        feats = features.rows([r.image_ref for r in batch])
        if caption_mode == "all":
            tokens = np.stack([
                tokenize_batch([r.captions[j] for r in batch], vocab_size, context_len)
                for j in range(len(batch[0].captions))
            ])
        else:
            picks = chosen[start:start + batch_size]
            tokens = tokenize_batch([r.captions[k] for r, k in zip(batch, picks)], vocab_size, context_len)
        yield BatchPairs(feats, tokens, [r.id for r in batch], chosen[start:start + batch_size].copy())


# ---------------------------------------------------------------------------
# synthetic paired data

CLASS_NAMES = (
    "apple", "bear", "bicycle", "bridge", "butterfly", "camel", "castle", "cloud",
    "crab", "dolphin", "elephant", "forest", "fox", "guitar", "hamster", "kangaroo",
    "lamp", "lion", "lobster", "mushroom", "orchid", "otter", "penguin", "piano",
    "pumpkin", "rabbit", "rocket", "shark", "snail", "tiger", "tractor", "tulip",
    "turtle", "violin", "whale", "zebra", "canoe", "lantern", "volcano", "walrus",
    "beetle", "cactus", "dragonfly", "falcon", "giraffe", "hedgehog", "iguana", "jellyfish",
    "koala", "lighthouse", "meadow", "narwhal", "owl", "parrot", "quail", "raccoon",
    "saxophone", "toucan", "umbrella", "vulture", "windmill", "yak", "anchor", "balloon",
)

CAPTION_TEMPLATES = ("a photo of a {class}.", "an image of the {class}.", "a {class} in the photo.")
PARAPHRASE_TEMPLATES = (
    "somebody snapped this {class} outdoors",
    "look at my lovely {class} here",
    "close view showing one {class} today",
    "this shot features some {class} nearby",
    "my friend spotted that {class} yesterday",
    "wonderful capture of another {class} indeed",
)


@dataclass
class SyntheticSpec:
    n_classes: int = 32
    samples_per_class: int = 64
    feature_dim: int = 64
    caption_templates: tuple[str, ...] = CAPTION_TEMPLATES
    paraphrase_templates: tuple[str, ...] = PARAPHRASE_TEMPLATES
    noise_sigma: float = 0.1
    test_per_class: int = 16
    n_rewrites: int = 4
    orthogonal_means: bool = True
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.caption_templates = tuple(self.caption_templates)
        self.paraphrase_templates = tuple(self.paraphrase_templates)
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.samples_per_class < 1 or self.feature_dim < 1 or self.test_per_class < 0:
            raise ConfigError("samples_per_class and feature_dim must be positive")
        if not self.caption_templates or not self.paraphrase_templates:
            raise ConfigError("template lists must be non-empty")
        if set(self.caption_templates) & set(self.paraphrase_templates):
            raise ConfigError("caption and paraphrase templates must be disjoint")
        for t in self.caption_templates + self.paraphrase_templates:
            if "{class}" not in t:
                raise ConfigError(f"template {t!r} has no {{class}} slot")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.n_rewrites < 0:
            raise ConfigError("n_rewrites must be >= 0")
        if self.class_names is not None and len(self.class_names) < self.n_classes:
            raise ConfigError("not enough class names")

    def names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names[: self.n_classes])
        if self.n_classes <= len(CLASS_NAMES):
            return list(CLASS_NAMES[: self.n_classes])
        return [f"class{c:04d}" for c in range(self.n_classes)]


def fill(template: str, name: str) -> str:
    return template.replace("{class}", name)


@dataclass
class SyntheticData:
    """Output of :func:`gen_synthetic`.

    ``train`` records carry ``n_rewrites`` paraphrase-template rewrites;
    ``test`` uses caption templates and ``test_shifted`` the same images with
    paraphrase templates only.
    """

    spec: SyntheticSpec
    class_names: list[str]
    features: FeatureStore
    train: list[AugmentedRecord]
    test: list[AugmentedRecord]
    test_shifted: list[AugmentedRecord]
    labels: dict[str, int] = field(default_factory=dict)
    class_means: np.ndarray | None = None

    def label_array(self, records: list[AugmentedRecord]) -> np.ndarray:
        return np.array([self.labels[r.image_ref] for r in records], dtype=np.int64)

    def meta_json(self) -> dict:
        return {
            "class_names": self.class_names,
            "caption_templates": list(self.spec.caption_templates),
            "paraphrase_templates": list(self.spec.paraphrase_templates),
            "labels": self.labels,
        }


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def gen_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticData:
    """Generate class-clustered image features and templated captions.

    Features are ``unit(mu_c + noise_sigma * eps)`` rounded to float32 so that
    a save/load round trip through the sidecar is exact.
    """
    rng = np.random.default_rng(seed)
    names = spec.names()
    C, D = spec.n_classes, spec.feature_dim
    mu = rng.standard_normal((C, D))
    if spec.orthogonal_means and C <= D:
        q, _ = np.linalg.qr(mu.T)
        mu = q.T[:C]
    mu = _unit_rows(mu)

    ids, feats, labels = [], [], {}
    train, test, shifted = [], [], []
    n_para = len(spec.paraphrase_templates)
    for c, name in enumerate(names):
        for s in range(spec.samples_per_class + spec.test_per_class):
            split = "train" if s < spec.samples_per_class else "test"
            rid = f"{split}-{c:04d}-{s:05d}"
            ids.append(rid)
            labels[rid] = c
            feats.append(mu[c] + spec.noise_sigma * rng.standard_normal(D))
            cap = fill(spec.caption_templates[int(rng.integers(len(spec.caption_templates)))], name)
            if split == "train":
                picks = rng.choice(n_para, size=spec.n_rewrites, replace=spec.n_rewrites > n_para)
                rewrites = [fill(spec.paraphrase_templates[p], name) for p in picks]
                train.append(AugmentedRecord(rid, rid, [cap] + rewrites,
                                             [("paraphrase", "synthetic")] * spec.n_rewrites))
            else:
                para = fill(spec.paraphrase_templates[int(rng.integers(n_para))], name)
                test.append(AugmentedRecord(rid, rid, [cap]))
                shifted.append(AugmentedRecord(rid, rid, [para]))
    matrix = _unit_rows(np.array(feats)).astype(np.float32).astype(np.float64)
    return SyntheticData(spec, names, FeatureStore(ids, matrix), train, test, shifted, labels, mu)
