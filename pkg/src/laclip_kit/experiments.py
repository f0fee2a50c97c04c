"""Desk-scale experiments on synthetic paired data."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .dataset import SyntheticData, SyntheticSpec, gen_synthetic
from .evaluation import build_zeroshot_classifier, zeroshot_accuracy
from .textaug import AugmentedRecord
from .train import TrainConfig, TrainResult, image_embeddings, text_encoder, train


def zeroshot_on(data: SyntheticData, result: TrainResult, templates, records: list[AugmentedRecord]) -> float:
    clf = build_zeroshot_classifier(data.class_names, templates, text_encoder(result.params, result.config))
    feats = data.features.rows([r.image_ref for r in records])
    return zeroshot_accuracy(clf, image_embeddings(result.params, feats), data.label_array(records))


@dataclass
class TransferRow:
    seed: int
    mode: str
    n_rewrites: int
    zs_in: float  # held-out images, training caption templates
    zs_shifted: float  # same images, paraphrase templates
    final_loss: float
    seconds: float


def transfer_run(seed: int, mode: str, spec: SyntheticSpec | None = None, epochs: int = 20,
                 **train_overrides) -> TransferRow:
    """Generate data with ``seed``, train one mode, score both zero-shot template sets."""
    spec = spec or SyntheticSpec()
    t0 = time.perf_counter()
    data = gen_synthetic(spec, seed)
    cfg = TrainConfig(seed=seed, mode=mode, epochs=epochs, **train_overrides)
    res = train(cfg, data.train, data.features)
    zs_in = zeroshot_on(data, res, spec.caption_templates, data.test)
    zs_shift = zeroshot_on(data, res, spec.paraphrase_templates, data.test_shifted)
    return TransferRow(seed, mode, spec.n_rewrites, zs_in, zs_shift, res.epoch_losses()[-1],
                       time.perf_counter() - t0)


def transfer_experiment(seeds=(0, 1, 2), modes=("clip", "laclip"), spec: SyntheticSpec | None = None,
                        epochs: int = 20, **train_overrides) -> list[TransferRow]:
    return [transfer_run(s, m, spec, epochs, **train_overrides) for s in seeds for m in modes]


def augment_scaling(counts=(0, 1, 2, 3, 4), seeds=(0,), spec: SyntheticSpec | None = None,
                    epochs: int = 20, **train_overrides) -> list[TransferRow]:
    """Train laclip with 0..k rewrites per caption; k=0 is the clip baseline."""
    spec = spec or SyntheticSpec()
    rows = []
    for k in counts:
        sub = dataclasses.replace(spec, n_rewrites=k)
        for s in seeds:
            rows.append(transfer_run(s, "laclip" if k else "clip", sub, epochs, **train_overrides))
    return rows


def format_rows(rows: list[TransferRow]) -> str:
    lines = [f"{'seed':>4}  {'mode':<9} {'M':>2}  {'zs_in':>7}  {'zs_shift':>8}  {'loss':>7}  {'sec':>6}"]
    for r in rows:
        lines.append(f"{r.seed:>4}  {r.mode:<9} {r.n_rewrites:>2}  {100 * r.zs_in:7.2f}  "
                     f"{100 * r.zs_shifted:8.2f}  {r.final_loss:7.4f}  {r.seconds:6.1f}")
    return "\n".join(lines)


def mean_by_mode(rows: list[TransferRow]) -> dict[str, tuple[float, float]]:
    out = {}
    for mode in dict.fromkeys(r.mode for r in rows):
        sel = [r for r in rows if r.mode == mode]
        out[mode] = (float(np.mean([r.zs_in for r in sel])), float(np.mean([r.zs_shifted for r in sel])))
    return out
