"""Text augmentation: uniform rewrite sampling, EDA, and back-translation."""

from __future__ import annotations

import json
import logging
import math
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import BackendError, ConfigError, EmptyInput, EmptyTranslation
from .hashing import canonical_json, hash64

log = logging.getLogger(__name__)

EDA_OPS = ("synonym_replacement", "random_insertion", "random_swap", "random_deletion")
BACKTRANSLATION_LANGUAGES = ("es", "fr", "de", "it")
_INSERT_ATTEMPTS = 10


@dataclass
class AugmentedRecord:
    """One image reference with its original caption and M rewrites.

    ``captions[0]`` is always the original; ``rewrite_meta[k]`` describes
    ``captions[k + 1]`` as ``(strategy_name, backend_id)``.
    """

    id: str
    image_ref: str
    captions: list[str]
    rewrite_meta: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.captions = list(self.captions)
        self.rewrite_meta = [tuple(m) for m in self.rewrite_meta]
        if not self.captions:
            raise ValueError(f"record {self.id!r}: captions must be non-empty")
        for c in self.captions:
            if not isinstance(c, str) or not c.strip():
                raise ValueError(f"record {self.id!r}: empty caption")
        if len(self.rewrite_meta) != len(self.captions) - 1:
            raise ValueError(
                f"record {self.id!r}: {len(self.rewrite_meta)} rewrite_meta entries "
                f"for {len(self.captions) - 1} rewrites"
            )
        for m in self.rewrite_meta:
            if len(m) != 2:
                raise ValueError(f"record {self.id!r}: rewrite_meta entries are (strategy, backend_id)")

    @property
    def n_rewrites(self) -> int:
        return len(self.captions) - 1

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image_ref": self.image_ref,
            "captions": list(self.captions),
            "rewrite_meta": [list(m) for m in self.rewrite_meta],
        }

    def with_rewrites(self, rewrites: list[str], meta: list[tuple[str, str]]) -> "AugmentedRecord":
        return AugmentedRecord(
            self.id, self.image_ref, self.captions + list(rewrites), self.rewrite_meta + list(meta)
        )


def sample_caption_index(record: AugmentedRecord, rng: np.random.Generator) -> int:
    return int(rng.integers(len(record.captions)))


def sample_caption(record: AugmentedRecord, rng: np.random.Generator) -> str:
    """Pick the original or one of the rewrites uniformly at random.

    Consumes exactly one integer draw from ``rng``.
    """
    return record.captions[sample_caption_index(record, rng)]


# ---------------------------------------------------------------------------
# EDA


def load_synonyms(path: str | Path | None = None) -> dict[str, list[str]]:
    """Read a ``word<TAB>syn1,syn2,...`` table; ``None`` loads the bundled one."""
    if path is None:
        text = resources.files("laclip_kit").joinpath("data/synonyms.tsv").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    table: dict[str, list[str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            word, syns = line.split("\t")
        except ValueError:
            raise ConfigError(f"synonym table line {lineno}: expected word<TAB>synonyms") from None
        entries = [s.strip().lower() for s in syns.split(",") if s.strip()]
        table.setdefault(word.strip().lower(), []).extend(entries)
    return table


@dataclass
class EdaParams:
    alpha_sr: float = 0.1
    alpha_ri: float = 0.1
    alpha_rs: float = 0.1
    p_rd: float = 0.1
    synonym_table: dict[str, list[str]] = field(default_factory=load_synonyms)

    def __post_init__(self):
        for name in ("alpha_sr", "alpha_ri", "alpha_rs", "p_rd"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for word, syns in self.synonym_table.items():
            if any(not s for s in syns):
                raise ConfigError(f"empty synonym for {word!r}")


def _n_touched(alpha: float, n_words: int) -> int:
    # round half up; Python's round() is banker's rounding
    return max(1, int(math.floor(alpha * n_words + 0.5)))


def _synonyms(word: str, table: dict[str, list[str]]) -> list[str]:
    return [s for s in table.get(word, ()) if s != word]


def _synonym_replacement(words, params, rng):
    n = _n_touched(params.alpha_sr, len(words))
    candidates = [i for i, w in enumerate(words) if _synonyms(w, params.synonym_table)]
    if not candidates:
        return words
    out = list(words)
    chosen = rng.choice(len(candidates), size=min(n, len(candidates)), replace=False)
    for c in sorted(chosen):
        i = candidates[c]
        syns = _synonyms(words[i], params.synonym_table)
        out[i] = syns[int(rng.integers(len(syns)))]
    return out


def _random_insertion(words, params, rng):
    out = list(words)
    for _ in range(_n_touched(params.alpha_ri, len(words))):
        for _attempt in range(_INSERT_ATTEMPTS):
            syns = _synonyms(out[int(rng.integers(len(out)))], params.synonym_table)
            if syns:
                out.insert(int(rng.integers(len(out) + 1)), syns[int(rng.integers(len(syns)))])
                break
    return out


def _random_swap(words, params, rng):
    out = list(words)
    if len(out) < 2:
        return out
    for _ in range(_n_touched(params.alpha_rs, len(words))):
        i, j = rng.choice(len(out), size=2, replace=False)
        out[i], out[j] = out[j], out[i]
    return out


def _random_deletion(words, params, rng):
    keep = rng.random(len(words)) >= params.p_rd
    if not keep.any():
        return [words[int(rng.integers(len(words)))]]
    return [w for w, k in zip(words, keep) if k]


_OPS = {
    "synonym_replacement": _synonym_replacement,
    "random_insertion": _random_insertion,
    "random_swap": _random_swap,
    "random_deletion": _random_deletion,
}


def eda_tokenize(sentence: str) -> list[str]:
    return sentence.lower().split()


def eda_augment(sentence: str, op: str, params: EdaParams, rng: np.random.Generator) -> str:
    """Apply one EDA word-level operation.

    ``op`` is one of :data:`EDA_OPS` or ``"composite"``, which picks one of
    the four uniformly. Words are lowercased and split on whitespace;
    punctuation stays attached.
    """
    words = eda_tokenize(sentence)
    if not words:
        raise EmptyInput("sentence has no words")
    if op == "composite":
        op = EDA_OPS[int(rng.integers(len(EDA_OPS)))]
    try:
        fn = _OPS[op]
    except KeyError:
        raise ConfigError(f"unknown EDA op {op!r}") from None
    return " ".join(fn(words, params, rng))


# ---------------------------------------------------------------------------
# back-translation


class TranslationClient(Protocol):
    backend_id: str

    def translate(self, text: str, source: str, target: str) -> str: ...


class IdentityTranslator:
    backend_id = "identity"

    def translate(self, text: str, source: str, target: str) -> str:
        return text


class HttpTranslator:
    """POSTs ``{text, source, target}`` as JSON and reads ``{text}`` back.

    The endpoint defaults to the ``TRANSLATE_ENDPOINT`` environment variable.
    """

    backend_id = "http"

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint or os.environ.get("TRANSLATE_ENDPOINT")
        if not self.endpoint:
            raise ConfigError("no translation endpoint; set TRANSLATE_ENDPOINT")
        self.timeout = timeout

    def translate(self, text: str, source: str, target: str) -> str:
        body = canonical_json({"text": text, "source": source, "target": target}).encode()
        request_id = f"{hash64(body):016x}"
        req = urllib.request.Request(
            self.endpoint,
            data=body,
            headers={"Content-Type": "application/json", "X-Request-Id": request_id},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
            return payload["text"]
        except (urllib.error.URLError, OSError, ValueError, KeyError) as e:
            raise BackendError(f"translation request failed: {e}", request_id) from e


def back_translate(sentence: str, language: str, client: TranslationClient, source: str = "en") -> str:
    """Translate ``sentence`` into ``language`` and back to ``source``."""
    if language not in BACKTRANSLATION_LANGUAGES:
        raise ConfigError(f"unsupported pivot language {language!r}")
    if not sentence.strip():
        raise EmptyInput("sentence is empty")
    text = sentence
    for src, tgt in ((source, language), (language, source)):
        request_id = f"{hash64(canonical_json({'text': text, 'source': src, 'target': tgt})):016x}"
        try:
            text = client.translate(text, src, tgt)
        except BackendError:
            raise
        except Exception as e:
            raise BackendError(f"translation backend raised {type(e).__name__}: {e}", request_id) from e
    text = text.strip()
    if not text:
        raise EmptyTranslation(f"round trip through {language!r} produced an empty string")
    return text
