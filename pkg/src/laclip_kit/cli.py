"""``laclip`` command-line entry point.

Every subcommand merges settings as built-in defaults < ``--config`` JSON file
< explicit flags, validates them before touching the filesystem, and writes a
run manifest next to its outputs. Exit status: 0 ok, 1 runtime failure,
2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from . import FORMAT_TAG, __version__
from .dataset import FeatureStore, SyntheticSpec, gen_synthetic, read_records, write_augmented
from .errors import ConfigError, LaclipError
from .evaluation import (DEFAULT_TEMPLATES, build_zeroshot_classifier, fewshot_eval, linear_probe_sweep,
                         zeroshot_accuracy)
from .hashing import canonical_json, config_hash, hash64
from .rewriter import (DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, STRATEGIES, FixtureCompletion, HttpCompletion,
                       RewriteCache, rewrite_dataset)
from .textaug import (BACKTRANSLATION_LANGUAGES, EDA_OPS, AugmentedRecord, EdaParams, HttpTranslator,
                      IdentityTranslator, back_translate, eda_augment, load_synonyms)
from .train import (TrainConfig, image_embeddings, load_checkpoint, save_checkpoint, text_encoder, train,
                    write_metrics)

log = logging.getLogger("laclip")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def versions() -> dict:
    return {"laclip_kit": __version__, "numpy": np.__version__, "python": platform.python_version(),
            "scipy": scipy.__version__}


def write_manifest(path: Path, command: str, cfg: dict, outputs: list[str], extra: dict | None = None) -> None:
    manifest = {
        "format": FORMAT_TAG,
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed"),
        "versions": versions(),
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    _write_json(path, manifest)


def _need_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _need_value(cfg: dict, key: str, flag: str) -> None:
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"{flag} is required")


def _choice(cfg: dict, key: str, options) -> None:
    if cfg[key] not in options:
        raise ConfigError(f"{key} must be one of {list(options)}, got {cfg[key]!r}")


# ---------------------------------------------------------------------------
# subcommands


def _add_config(p):
    p.add_argument("--config", metavar="JSON", help="JSON file of settings (flags take precedence)")


def _args_rewrite(p):
    p.add_argument("--in", dest="input", metavar="PATH", help="caption or augmented JSONL file")
    p.add_argument("--out", metavar="PATH", help="augmented JSONL output")
    p.add_argument("--strategies", type=_csv_list, metavar="LIST",
                   help=f"comma-separated meta-pair strategies (default: {','.join(STRATEGIES)})")
    p.add_argument("--temp", type=float, help=f"sampling temperature (default: {DEFAULT_TEMPERATURE})")
    p.add_argument("--backend", choices=("fixture", "http"), help="completion backend (default: fixture)")
    p.add_argument("--cache", metavar="PATH", help="append-only completion cache file")
    p.add_argument("--jobs", type=int, help="concurrent backend requests (default: 1)")
    p.add_argument("--retries", type=int, help="retries per request on backend errors (default: 3)")
    p.add_argument("--max-tokens", dest="max_tokens", type=int,
                   help=f"completion length cap (default: {DEFAULT_MAX_TOKENS})")
    p.add_argument("--seed", type=int, help="seed for demonstration sampling (default: 0)")


def _run_rewrite(cfg: dict) -> dict:
    _need_value(cfg, "out", "--out")
    src = _need_file(cfg["input"], "--in")
    _choice(cfg, "backend", ("fixture", "http"))
    for s in cfg["strategies"]:
        _choice({"strategy": s}, "strategy", STRATEGIES)
    if cfg["jobs"] < 1 or cfg["retries"] < 0:
        raise ConfigError("--jobs must be >= 1 and --retries >= 0")
    records = read_records(src)
    backend = FixtureCompletion() if cfg["backend"] == "fixture" else HttpCompletion()
    cache = RewriteCache(cfg["cache"]) if cfg["cache"] else None
    out, report = rewrite_dataset(records, cfg["strategies"], backend, cache, cfg["temp"], cfg["jobs"],
                                  cfg["seed"], cfg["retries"], cfg["backoff"], cfg["max_tokens"])
    write_augmented(cfg["out"], out)
    log.info("rewrite: %s", report.to_json())
    return {"outputs": [cfg["out"]], "manifest": cfg["out"] + ".manifest.json",
            "extra": {"report": report.to_json()}}


def _args_eda(p):
    p.add_argument("--in", dest="input", metavar="PATH", help="caption or augmented JSONL file")
    p.add_argument("--out", metavar="PATH", help="augmented JSONL output")
    p.add_argument("--n-aug", dest="n_aug", type=int, help="augmented captions per record (default: 4)")
    p.add_argument("--op", help=f"one of {', '.join(EDA_OPS)} or composite (default: composite)")
    p.add_argument("--alpha-sr", dest="alpha_sr", type=float, help="synonym replacement rate (default: 0.1)")
    p.add_argument("--alpha-ri", dest="alpha_ri", type=float, help="random insertion rate (default: 0.1)")
    p.add_argument("--alpha-rs", dest="alpha_rs", type=float, help="random swap rate (default: 0.1)")
    p.add_argument("--p-rd", dest="p_rd", type=float, help="random deletion probability (default: 0.1)")
    p.add_argument("--synonyms", metavar="PATH", help="word<TAB>syn,syn table (default: bundled)")
    p.add_argument("--seed", type=int, help="seed (default: 0)")


def _run_eda(cfg: dict) -> dict:
    _need_value(cfg, "out", "--out")
    src = _need_file(cfg["input"], "--in")
    _choice(cfg, "op", EDA_OPS + ("composite",))
    if cfg["n_aug"] < 0:
        raise ConfigError("--n-aug must be >= 0")
    table = load_synonyms(_need_file(cfg["synonyms"], "--synonyms") if cfg["synonyms"] else None)
    params = EdaParams(cfg["alpha_sr"], cfg["alpha_ri"], cfg["alpha_rs"], cfg["p_rd"], table)
    out = []
    for r in read_records(src):
        rng = np.random.default_rng([cfg["seed"], hash64(r.id)])
        augs = [eda_augment(r.captions[0], cfg["op"], params, rng) for _ in range(cfg["n_aug"])]
        out.append(AugmentedRecord(r.id, r.image_ref, [r.captions[0]] + augs, [("eda", cfg["op"])] * len(augs)))
    write_augmented(cfg["out"], out)
    return {"outputs": [cfg["out"]], "manifest": cfg["out"] + ".manifest.json"}


def _args_backtranslate(p):
    p.add_argument("--in", dest="input", metavar="PATH", help="caption or augmented JSONL file")
    p.add_argument("--out", metavar="PATH", help="augmented JSONL output")
    p.add_argument("--languages", type=_csv_list, metavar="LIST",
                   help=f"pivot languages (default: {','.join(BACKTRANSLATION_LANGUAGES)})")
    p.add_argument("--backend", choices=("identity", "http"), help="translation backend (default: identity)")


def _run_backtranslate(cfg: dict) -> dict:
    _need_value(cfg, "out", "--out")
    src = _need_file(cfg["input"], "--in")
    _choice(cfg, "backend", ("identity", "http"))
    for lang in cfg["languages"]:
        _choice({"language": lang}, "language", BACKTRANSLATION_LANGUAGES)
    client = IdentityTranslator() if cfg["backend"] == "identity" else HttpTranslator()
    out = []
    for r in read_records(src):
        caps = [back_translate(r.captions[0], lang, client) for lang in cfg["languages"]]
        meta = [(f"backtranslate-{lang}", client.backend_id) for lang in cfg["languages"]]
        out.append(AugmentedRecord(r.id, r.image_ref, [r.captions[0]] + caps, meta))
    write_augmented(cfg["out"], out)
    return {"outputs": [cfg["out"]], "manifest": cfg["out"] + ".manifest.json"}


SYNTH_FILES = ("train.jsonl", "test.jsonl", "test_shifted.jsonl", "features.bin", "synth_meta.json")


def _args_synth(p):
    p.add_argument("--out-dir", dest="out_dir", metavar="DIR", help="output directory (default: .)")
    p.add_argument("--classes", type=int, help="number of classes (default: 32)")
    p.add_argument("--per-class", dest="per_class", type=int, help="training samples per class (default: 64)")
    p.add_argument("--test-per-class", dest="test_per_class", type=int,
                   help="held-out samples per class (default: 16)")
    p.add_argument("--dim", type=int, help="image feature dimension (default: 64)")
    p.add_argument("--sigma", type=float, help="feature noise scale (default: 0.1)")
    p.add_argument("--rewrites", type=int, help="paraphrase rewrites per training caption (default: 4)")
    p.add_argument("--seed", type=int, help="seed (default: 0)")


def _run_synth(cfg: dict) -> dict:
    spec = SyntheticSpec(n_classes=cfg["classes"], samples_per_class=cfg["per_class"], feature_dim=cfg["dim"],
                         noise_sigma=cfg["sigma"], test_per_class=cfg["test_per_class"],
                         n_rewrites=cfg["rewrites"])
    data = gen_synthetic(spec, cfg["seed"])
    d = Path(cfg["out_dir"])
    write_augmented(d / "train.jsonl", data.train)
    write_augmented(d / "test.jsonl", data.test)
    write_augmented(d / "test_shifted.jsonl", data.test_shifted)
    data.features.save(d / "features.bin")
    _write_json(d / "synth_meta.json", data.meta_json())
    return {"outputs": [str(d / f) for f in SYNTH_FILES], "manifest": str(d / "synth.manifest.json")}


def _args_train(p):
    p.add_argument("--in", dest="input", metavar="PATH", help="training JSONL (default: train.jsonl)")
    p.add_argument("--features", metavar="PATH", help="feature sidecar (default: features.bin)")
    p.add_argument("--out-dir", dest="out_dir", metavar="DIR",
                   help="where checkpoint.bin and metrics.csv go (default: .)")
    p.add_argument("--mode", choices=("clip", "laclip", "laclip_mt"), help="training objective (default: laclip)")
    p.add_argument("--epochs", type=int, help="epochs (default: 10)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="batch size (default: 256)")
    p.add_argument("--lr", type=float, help="peak learning rate (default: 1e-3)")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, help="AdamW weight decay (default: 0.5)")
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=float, help="linear warmup epochs (default: 1)")
    p.add_argument("--embed-dim", dest="embed_dim", type=int, help="joint embedding width (default: 64)")
    p.add_argument("--text-width", dest="text_width", type=int, help="token embedding width (default: 64)")
    p.add_argument("--init-tau", dest="init_tau", type=float, help="initial temperature (default: 0.07)")
    p.add_argument("--mt-image-scaling", dest="mt_image_scaling", choices=("mean", "printed"),
                   help="laclip_mt image-side normalization (default: mean)")
    p.add_argument("--seed", type=int, help="seed (default: 0)")


TRAIN_PATH_KEYS = ("input", "features", "out_dir")


def _run_train(cfg: dict) -> dict:
    tcfg = TrainConfig.from_dict({k: v for k, v in cfg.items() if k not in TRAIN_PATH_KEYS})
    src = _need_file(cfg["input"], "--in")
    feats_path = _need_file(cfg["features"], "--features")
    records = read_records(src)
    features = FeatureStore.load(feats_path)
    missing = [r.image_ref for r in records if r.image_ref not in features]
    if missing:
        raise ConfigError(f"{len(missing)} image_ref(s) have no features, e.g. {missing[0]!r}")
    result = train(tcfg, records, features)
    d = Path(cfg["out_dir"])
    save_checkpoint(d / "checkpoint.bin", result.params, tcfg)
    write_metrics(d / "metrics.csv", result.metrics)
    return {"outputs": [str(d / "checkpoint.bin"), str(d / "metrics.csv")],
            "manifest": str(d / "train.manifest.json"),
            "extra": {"train_config_hash": tcfg.hash()}}


# evaluation helpers


def _load_meta(path) -> dict:
    meta = json.loads(_need_file(path, "--meta").read_text(encoding="utf-8"))
    if "class_names" not in meta or "labels" not in meta:
        raise ConfigError("meta file needs 'class_names' and 'labels'")
    return meta


def _embedder(checkpoint):
    """Returns (image embedding fn, text encoder or None, model config hash)."""
    if checkpoint in (None, "", "none"):
        return (lambda x: np.asarray(x, dtype=np.float64)), None, "raw-features"
    params, tcfg = load_checkpoint(_need_file(checkpoint, "--checkpoint"))
    return (lambda x: image_embeddings(params, x)), text_encoder(params, tcfg), tcfg.hash()


def _labelled(meta: dict, refs: list[str]) -> np.ndarray:
    unknown = [r for r in refs if r not in meta["labels"]]
    if unknown:
        raise ConfigError(f"{len(unknown)} image_ref(s) have no label, e.g. {unknown[0]!r}")
    return np.array([meta["labels"][r] for r in refs], dtype=np.int64)


def _templates(spec: str, meta: dict) -> list[str]:
    if spec == "default":
        return list(DEFAULT_TEMPLATES)
    if spec == "caption":
        return list(meta.get("caption_templates") or [])
    if spec == "paraphrase":
        return list(meta.get("paraphrase_templates") or [])
    templates = json.loads(_need_file(spec, "--templates").read_text(encoding="utf-8"))
    if not isinstance(templates, list) or not all(isinstance(t, str) for t in templates):
        raise ConfigError("templates file must hold a JSON list of strings")
    return templates


def _eval_common(p, out_default: str):
    p.add_argument("--checkpoint", metavar="PATH",
                   help="trained checkpoint, or 'none' for raw features (default: checkpoint.bin)")
    p.add_argument("--features", metavar="PATH", help="feature sidecar (default: features.bin)")
    p.add_argument("--meta", metavar="PATH", help="class names and labels JSON (default: synth_meta.json)")
    p.add_argument("--dataset", help="dataset name recorded in the report (default: input file stem)")
    p.add_argument("--out", metavar="PATH", help=f"report JSON (default: {out_default})")


def _report(protocol: str, dataset: str, model_hash: str, metrics: dict, ci) -> dict:
    return {"protocol": protocol, "dataset": dataset, "config_hash": model_hash, "metrics": metrics, "ci": ci}


def _args_zeroshot(p):
    p.add_argument("--in", dest="input", metavar="PATH", help="evaluation records (default: test.jsonl)")
    p.add_argument("--templates", metavar="SPEC",
                   help="default, caption, paraphrase, or a JSON list file (default: caption)")
    _eval_common(p, "zeroshot.json")


def _run_zeroshot(cfg: dict) -> dict:
    src = _need_file(cfg["input"], "--in")
    meta = _load_meta(cfg["meta"])
    templates = _templates(cfg["templates"], meta)
    feats = FeatureStore.load(_need_file(cfg["features"], "--features"))
    embed, encoder, model_hash = _embedder(cfg["checkpoint"])
    if encoder is None:
        raise ConfigError("zero-shot evaluation needs a checkpoint")
    records = read_records(src)
    refs = [r.image_ref for r in records]
    labels = _labelled(meta, refs)
    clf = build_zeroshot_classifier(meta["class_names"], templates, encoder)
    acc = zeroshot_accuracy(clf, embed(feats.rows(refs)), labels)
    report = _report("zeroshot", cfg["dataset"] or src.stem, model_hash,
                     {"accuracy": acc, "n": len(refs), "templates": len(templates)}, None)
    _write_json(Path(cfg["out"]), report)
    return {"outputs": [cfg["out"]], "manifest": cfg["out"] + ".manifest.json", "print": report}


def _args_fewshot(p):
    p.add_argument("--in", dest="input", type=_csv_list, metavar="LIST",
                   help="comma-separated record files to pool (default: every labelled feature row)")
    p.add_argument("--episodes", type=int, help="episodes (default: 600)")
    p.add_argument("--way", type=int, help="classes per episode (default: 5)")
    p.add_argument("--shot", type=int, help="support samples per class (default: 5)")
    p.add_argument("--query", dest="n_query", type=int, help="query samples per class (default: 15)")
    p.add_argument("--classifier", choices=("prototypical", "weighted_knn"),
                   help="episode classifier (default: prototypical)")
    p.add_argument("--seed", type=int, help="episode seed (default: 0)")
    _eval_common(p, "fewshot.json")


def _run_fewshot(cfg: dict) -> dict:
    meta = _load_meta(cfg["meta"])
    feats = FeatureStore.load(_need_file(cfg["features"], "--features"))
    if cfg["input"]:
        refs = [r.image_ref for f in cfg["input"] for r in read_records(_need_file(f, "--in"))]
        refs = list(dict.fromkeys(refs))
        dataset = cfg["dataset"] or "+".join(Path(f).stem for f in cfg["input"])
    else:
        refs = [i for i in feats.ids if i in meta["labels"]]
        dataset = cfg["dataset"] or "all"
    labels = _labelled(meta, refs)
    embed, _, model_hash = _embedder(cfg["checkpoint"])
    mean, ci = fewshot_eval(embed(feats.rows(refs)), labels, cfg["episodes"], cfg["seed"], cfg["way"],
                            cfg["shot"], cfg["n_query"], cfg["classifier"])
    report = _report("fewshot", dataset, model_hash,
                     {"accuracy": mean, "episodes": cfg["episodes"], "way": cfg["way"], "shot": cfg["shot"]}, ci)
    _write_json(Path(cfg["out"]), report)
    return {"outputs": [cfg["out"]], "manifest": cfg["out"] + ".manifest.json", "print": report}


def _args_linear(p):
    p.add_argument("--train", metavar="PATH", help="training records (default: train.jsonl)")
    p.add_argument("--test", metavar="PATH", help="test records (default: test.jsonl)")
    p.add_argument("--val-fraction", dest="val_fraction", type=float,
                   help="share of training records held out for the lambda sweep (default: 0.2)")
    p.add_argument("--max-iter", dest="max_iter", type=int, help="L-BFGS iteration cap (default: 500)")
    p.add_argument("--jobs", type=int, help="parallel sweep workers (default: 1)")
    p.add_argument("--seed", type=int, help="seed for the validation split (default: 0)")
    _eval_common(p, "linear.json")


def _run_linear(cfg: dict) -> dict:
    meta = _load_meta(cfg["meta"])
    feats = FeatureStore.load(_need_file(cfg["features"], "--features"))
    tr_path, te_path = _need_file(cfg["train"], "--train"), _need_file(cfg["test"], "--test")
    if not 0 < cfg["val_fraction"] < 1:
        raise ConfigError("--val-fraction must be in (0, 1)")
    if cfg["jobs"] < 1:
        raise ConfigError("--jobs must be >= 1")
    tr_refs = [r.image_ref for r in read_records(tr_path)]
    te_refs = [r.image_ref for r in read_records(te_path)]
    if set(tr_refs) & set(te_refs):
        raise ConfigError("train and test records overlap")
    embed, _, model_hash = _embedder(cfg["checkpoint"])
    perm = np.random.default_rng(cfg["seed"]).permutation(len(tr_refs))
    n_val = max(1, int(round(cfg["val_fraction"] * len(tr_refs))))
    va_refs = [tr_refs[i] for i in np.sort(perm[:n_val])]
    fit_refs = [tr_refs[i] for i in np.sort(perm[n_val:])]

    def split(refs):
        return embed(feats.rows(refs)), _labelled(meta, refs)

    res = linear_probe_sweep(split(fit_refs), split(va_refs), split(te_refs), max_iter=cfg["max_iter"],
                             jobs=cfg["jobs"])
    report = _report("linear", cfg["dataset"] or te_path.stem, model_hash,
                     {"accuracy": res.test_acc, "val_accuracy": res.val_acc, "best_lambda": res.best_lambda,
                      "sweep": [list(t) for t in res.sweep_table]}, None)
    _write_json(Path(cfg["out"]), report)
    return {"outputs": [cfg["out"]], "manifest": cfg["out"] + ".manifest.json",
            "print": {k: v for k, v in report.items() if k != "metrics"} | {"accuracy": res.test_acc}}


def _args_report(p):
    p.add_argument("--reports", type=_csv_list, metavar="LIST", help="comma-separated report JSON files")
    p.add_argument("--out", metavar="PATH", help="also write the table to this file")


COLUMNS = (("zeroshot", "ZS"), ("fewshot", "FS"), ("linear", "LP"))


def format_table(reports: list[dict]) -> str:
    """Fixed-width ZS / FS / LP table, one row per model config hash."""
    rows: dict[str, dict] = {}
    for r in reports:
        rows.setdefault(r["config_hash"], {})[r["protocol"]] = r
    lines = [f"{'model':<18}{'ZS':>10}{'FS':>16}{'LP':>10}", "-" * 54]
    for model, by in rows.items():
        cells = []
        for proto, _ in COLUMNS:
            r = by.get(proto)
            if r is None:
                cell = "-"
            elif r.get("ci") is not None:
                cell = f"{100 * r['metrics']['accuracy']:.1f} +- {100 * r['ci']:.1f}"
            else:
                cell = f"{100 * r['metrics']['accuracy']:.1f}"
            cells.append(cell)
        lines.append(f"{model:<18}{cells[0]:>10}{cells[1]:>16}{cells[2]:>10}")
    return "\n".join(lines) + "\n"


def _run_report(cfg: dict) -> dict:
    if not cfg["reports"]:
        raise ConfigError("--reports is required")
    reports = []
    for f in cfg["reports"]:
        r = json.loads(_need_file(f, "--reports").read_text(encoding="utf-8"))
        if not {"protocol", "dataset", "config_hash", "metrics", "ci"} <= set(r):
            raise ConfigError(f"{f} is not an evaluation report")
        reports.append(r)
    table = format_table(reports)
    sys.stdout.write(table)
    if not cfg["out"]:
        return {"outputs": []}
    _write_text(Path(cfg["out"]), table)
    return {"outputs": [cfg["out"]], "manifest": cfg["out"] + ".manifest.json"}


@dataclass(frozen=True)
class Command:
    name: str
    help: str
    add_args: Callable
    run: Callable
    defaults: Callable[[], dict]


def _train_defaults() -> dict:
    return {"input": "train.jsonl", "features": "features.bin", "out_dir": "."} | TrainConfig().to_dict()


_EVAL_DEFAULTS = {"checkpoint": "checkpoint.bin", "features": "features.bin", "meta": "synth_meta.json",
                  "dataset": None}

COMMANDS = (
    Command("rewrite", "rewrite captions with in-context demonstrations", _args_rewrite, _run_rewrite,
            lambda: {"input": None, "out": None, "strategies": list(STRATEGIES), "temp": DEFAULT_TEMPERATURE,
                     "backend": "fixture", "cache": None, "jobs": 1, "retries": 3, "backoff": 0.5,
                     "max_tokens": DEFAULT_MAX_TOKENS, "seed": 0}),
    Command("augment-eda", "word-level EDA augmentation", _args_eda, _run_eda,
            lambda: {"input": None, "out": None, "n_aug": 4, "op": "composite", "alpha_sr": 0.1,
                     "alpha_ri": 0.1, "alpha_rs": 0.1, "p_rd": 0.1, "synonyms": None, "seed": 0}),
    Command("backtranslate", "round-trip translation augmentation", _args_backtranslate, _run_backtranslate,
            lambda: {"input": None, "out": None, "languages": list(BACKTRANSLATION_LANGUAGES),
                     "backend": "identity"}),
    Command("synth", "generate a synthetic paired dataset", _args_synth, _run_synth,
            lambda: {"out_dir": ".", "classes": 32, "per_class": 64, "test_per_class": 16, "dim": 64,
                     "sigma": 0.1, "rewrites": 4, "seed": 0}),
    Command("train", "train the reference encoders", _args_train, _run_train, _train_defaults),
    Command("eval-zeroshot", "zero-shot classification with template ensembles", _args_zeroshot,
            _run_zeroshot, lambda: {"input": "test.jsonl", "templates": "caption", "out": "zeroshot.json"}
            | _EVAL_DEFAULTS),
    Command("eval-fewshot", "episodic few-shot evaluation", _args_fewshot, _run_fewshot,
            lambda: {"input": None, "episodes": 600, "way": 5, "shot": 5, "n_query": 15,
                     "classifier": "prototypical", "seed": 0, "out": "fewshot.json"} | _EVAL_DEFAULTS),
    Command("eval-linear", "linear probe with a regularization sweep", _args_linear, _run_linear,
            lambda: {"train": "train.jsonl", "test": "test.jsonl", "val_fraction": 0.2, "max_iter": 500,
                     "jobs": 1, "seed": 0, "out": "linear.json"} | _EVAL_DEFAULTS),
    Command("report", "print a ZS / FS / LP table from report files", _args_report, _run_report,
            lambda: {"reports": [], "out": None}),
)
_BY_NAME = {c.name: c for c in COMMANDS}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="laclip", description="Language-augmented contrastive pretraining toolkit.")
    parser.add_argument("--version", action="version", version=f"laclip {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for c in COMMANDS:
        p = sub.add_parser(c.name, help=c.help, description=c.help, argument_default=argparse.SUPPRESS)
        _add_config(p)
        c.add_args(p)
    return parser


def merge_config(command: Command, file_cfg: dict, flags: dict) -> dict:
    """defaults < config file < flags; unknown config-file keys are rejected."""
    cfg = command.defaults()
    unknown = sorted(set(file_cfg) - set(cfg))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command.name}: {', '.join(unknown)}")
    cfg.update(file_cfg)
    cfg.update(flags)
    return cfg


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    command = _BY_NAME[args.command]
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    try:
        file_cfg = {}
        if getattr(args, "config", None):
            try:
                file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, ValueError) as e:
                raise ConfigError(f"cannot read config {args.config}: {e}") from None
            if not isinstance(file_cfg, dict):
                raise ConfigError("config file must hold a JSON object")
        cfg = merge_config(command, file_cfg, flags)
        result = command.run(cfg)
    except ConfigError as e:
        print(f"laclip {command.name}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (LaclipError, OSError, ValueError, KeyError) as e:
        print(f"laclip {command.name}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if "manifest" in result:
        write_manifest(Path(result["manifest"]), command.name, cfg, result["outputs"], result.get("extra"))
    if "print" in result:
        print(canonical_json(result["print"]))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
