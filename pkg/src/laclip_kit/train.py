"""Training loop for the clip / laclip / laclip_mt modes, plus checkpoint and metrics files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import FORMAT_TAG
from .dataset import BatchPairs, FeatureStore, batch_iter
from .encoder import (CONTEXT_LEN, VOCAB_SIZE, EncoderParams, aug_image, encode_image, encode_text,
                      tokenize_batch)
from .errors import ConfigError, ParseError
from .hashing import canonical_json, config_hash
from .losses import LOGIT_SCALE_MAX, LossOutput, TemperatureParam, clip_loss_and_grads, multitext_loss_and_grads
from .optim import TEMP_KEY, AdamWConfig, OptState, adamw_step
from .textaug import AugmentedRecord

MODES = ("clip", "laclip", "laclip_mt")
CAPTION_MODE = {"clip": "original", "laclip": "sample", "laclip_mt": "all"}
METRIC_COLUMNS = ("step", "epoch", "loss", "l_image", "l_text", "tau", "lr")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    mode: str = "laclip"
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    warmup_epochs: float = 1.0
    vocab_size: int = VOCAB_SIZE
    context_len: int = CONTEXT_LEN
    text_width: int = 64
    embed_dim: int = 64
    token_init_std: float = 0.02
    aug_sigma: float = 0.05
    aug_dropout: float = 0.1
    init_tau: float = 0.07
    max_logit_scale: float = LOGIT_SCALE_MAX
    mt_image_scaling: str = "mean"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("epochs", "batch_size", "text_width", "embed_dim", "context_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size <= 3:
            raise ConfigError("vocab_size must exceed 3")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.aug_sigma < 0 or not 0 <= self.aug_dropout < 1:
            raise ConfigError("aug_sigma >= 0 and aug_dropout in [0, 1) required")
        if self.token_init_std < 0:
            raise ConfigError("token_init_std must be >= 0")
        if not self.init_tau > 0 or not self.max_logit_scale > 0:
            raise ConfigError("init_tau and max_logit_scale must be positive")
        if self.mt_image_scaling not in ("mean", "printed"):
            raise ConfigError("mt_image_scaling must be 'mean' or 'printed'")
        # AdamW ranges are validated by AdamWConfig
        AdamWConfig(self.lr, self.weight_decay, self.beta1, self.beta2, self.eps)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _int_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


def epoch_seed(seed: int, epoch: int) -> int:
    return _int_seed(seed, 1, epoch)


def aug_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, epoch])


def init_params(config: TrainConfig, image_dim: int) -> EncoderParams:
    temp = TemperatureParam.from_tau(config.init_tau, math.log(config.max_logit_scale))
    temp.clamp()
    return EncoderParams.init(config.vocab_size, config.text_width, image_dim, config.embed_dim,
                              np.random.default_rng([config.seed, 0]), temp, config.token_init_std)


def _merge(grads: dict, more: dict) -> None:
    for k, v in more.items():
        grads[k] = grads[k] + v if k in grads else v


def forward_backward(params: EncoderParams, image_features: np.ndarray, tokens: np.ndarray,
                     mode: str, mt_image_scaling: str = "mean") -> tuple[LossOutput, dict]:
    """Loss and parameter gradients for one batch (image features already augmented).

    ``tokens`` is ``(N, L)``, or ``(M + 1, N, L)`` in ``laclip_mt`` mode.
    """
    img, img_back = encode_image(params, image_features)
    if mode == "laclip_mt":
        k, n, L = tokens.shape
        txt, txt_back = encode_text(params, tokens.reshape(k * n, L))
        out = multitext_loss_and_grads(img, list(txt.reshape(k, n, -1)), params.temp, mt_image_scaling)
    else:
        txt, txt_back = encode_text(params, tokens)
        out = clip_loss_and_grads(img, txt, params.temp)
    grads = img_back(out.grad_image)
    _merge(grads, txt_back(out.grad_text))
    grads[TEMP_KEY] = out.grad_s
    return out, grads


@dataclass
class TrainResult:
    params: EncoderParams
    config: TrainConfig
    metrics: list[dict] = field(default_factory=list)

    def epoch_losses(self) -> list[float]:
        out: dict[int, list[float]] = {}
        for row in self.metrics:
            out.setdefault(row["epoch"], []).append(row["loss"])
        return [float(np.mean(out[e])) for e in sorted(out)]


def train(config: TrainConfig, records: list[AugmentedRecord], features: FeatureStore,
          params: EncoderParams | None = None) -> TrainResult:
    """Train the reference encoders; deterministic given ``config.seed``.

    ``clip`` always uses ``captions[0]``; ``laclip`` samples one caption per
    record per epoch; ``laclip_mt`` uses every caption with the multi-text loss.
    """
    if not records:
        raise ConfigError("training set is empty")
    if config.mode == "laclip_mt" and len({len(r.captions) for r in records}) != 1:
        raise ConfigError("laclip_mt needs the same number of rewrites on every record")
    steps_per_epoch = math.ceil(len(records) / config.batch_size)
    hyper = AdamWConfig(
        config.lr, config.weight_decay, config.beta1, config.beta2, config.eps,
        warmup_steps=int(round(config.warmup_epochs * steps_per_epoch)),
        total_steps=config.epochs * steps_per_epoch,
    )
    params = params.copy() if params is not None else init_params(config, features.dim)
    state = OptState(hyper)
    result = TrainResult(params, config)
    for epoch in range(config.epochs):
        rng = aug_rng(config.seed, epoch)
        for batch in batch_iter(records, features, config.batch_size, epoch_seed(config.seed, epoch),
                                CAPTION_MODE[config.mode], config.vocab_size, config.context_len):
            feats = aug_image(batch.image_features, rng, config.aug_sigma, config.aug_dropout)
            tau = params.temp.tau
            out, grads = forward_backward(params, feats, batch.token_batches, config.mode,
                                          config.mt_image_scaling)
            _, _, lr = adamw_step(params, grads, state)
            result.metrics.append({
                "step": state.t, "epoch": epoch, "loss": out.total, "l_image": out.l_image,
                "l_text": out.l_text, "tau": tau, "lr": lr,
            })
    return result


# ---------------------------------------------------------------------------
# inference helpers


def text_encoder(params: EncoderParams, config: TrainConfig):
    """Callable mapping a list of strings to unit-norm text embeddings."""
    def encode(texts):
        return encode_text(params, tokenize_batch(list(texts), config.vocab_size, config.context_len))[0]
    return encode


def image_embeddings(params: EncoderParams, features: np.ndarray) -> np.ndarray:
    return encode_image(params, features)[0]


# ---------------------------------------------------------------------------
# files


def write_metrics(path: str | Path, metrics: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in metrics:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()} for r in rows]


def save_checkpoint(path: str | Path, params: EncoderParams, config: TrainConfig) -> None:
    """Tag line, JSON header line, then raw little-endian float64 tensors in header order."""
    tensors, offset = [], 0
    for name, arr in params.tensors().items():
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "temperature": {"s": params.temp.s, "clamp_max": params.temp.clamp_max},
        "tensors": tensors,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write((FORMAT_TAG + "\n" + canonical_json(header) + "\n").encode("utf-8"))
        for arr in params.tensors().values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, TrainConfig]:
    with open(path, "rb") as f:
        tag = f.readline().decode("utf-8").rstrip("\n")
        if tag != FORMAT_TAG:
            raise ParseError(1, f"unsupported format tag {tag!r}")
        header = json.loads(f.readline().decode("utf-8"))
        blob = f.read()
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        arrays[t["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"]).copy()
    config = TrainConfig.from_dict(header["config"])
    temp = TemperatureParam(header["temperature"]["s"], header["temperature"]["clamp_max"])
    return EncoderParams(arrays["token_embedding"], arrays["text_proj"], arrays["image_proj"], temp), config
