"""Command-line entry points.

One process per command: gen-data, pretrain-captioner, train, translate,
evaluate, retrieve, degrade-report. Every artifact directory receives a
manifest.json recording the config hash, git state, seed, and metric paths.
Commands refuse to overwrite existing outputs unless --force is given, exit
0 on success, and report failures as a single stderr line with exit 1."""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adversarial import TrainingError, corpus_bleu, run_training
from .captioner import pretrain_captioner
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (PRESETS, ConfigError, RunConfig, config_from_text,
                     config_hash, config_to_text)
from .data import DataError, Manifest, gen_corpus, load_split_arrays
from .evaluation import (DEGRADE_KINDS, degradation_report,
                         image_feature_grids, imagined_feature_grids,
                         likelihood_profile, retrieval_recall,
                         translate_sentences, write_degradation_report)
from .model import (MODES, ImagitModel, adopt_captioner,
                    build_captioner_parameters, build_parameters, nested_view)
from .rng import RngStreams
from .vocab import VocabError, Vocabulary


class CliError(RuntimeError):
    pass


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_run_manifest(out_dir: Path, cfg: RunConfig, command: str,
                       metrics: dict) -> None:
    payload = {
        "command": command,
        "config_hash": config_hash(cfg),
        "git": git_describe(),
        "seed": cfg.seed,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "metrics": metrics,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def refuse_existing(paths, force: bool) -> None:
    hits = [str(p) for p in paths if Path(p).exists()]
    if hits and not force:
        raise CliError(f"refusing to overwrite {', '.join(hits)} (use --force)")


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """--set key=value overrides, typed by the config field."""
    updates = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--set expects key=value, got '{pair}'")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise CliError(f"unknown config key '{key}'")
        kind = _FIELD_TYPES[key]
        if kind in ("int", int):
            updates[key] = int(raw)
        elif kind in ("float", float):
            updates[key] = float(raw)
        else:
            updates[key] = raw
    return replace(cfg, **updates)


def layered_config(args) -> RunConfig:
    """preset, then optional config file, then --set pairs."""
    if args.config:
        cfg = config_from_text(Path(args.config).read_text(encoding="utf-8"))
    else:
        cfg = PRESETS[args.preset]()
    cfg = apply_overrides(cfg, getattr(args, "set", None))
    return cfg.validate()


def load_corpus(data_dir):
    data_dir = Path(data_dir)
    manifest = Manifest.load(data_dir / "manifest.tsv")
    src_vocab = Vocabulary.load(data_dir / "src_vocab.txt")
    tgt_vocab = Vocabulary.load(data_dir / "tgt_vocab.txt")
    return manifest, src_vocab, tgt_vocab


def split_dict(manifest, split, src_vocab, tgt_vocab, with_images):
    src, tgt, imgs = load_split_arrays(manifest, split, src_vocab, tgt_vocab,
                                       with_images=with_images)
    out = {"src": src, "src_mask": np.ones_like(src, bool),
           "tgt": tgt, "tgt_mask": np.ones_like(tgt, bool)}
    if imgs is not None:
        out["images"] = imgs
    return out


def load_model(path) -> ImagitModel:
    store, meta = load_checkpoint(path)
    extra = meta.get("extra") or {}
    if extra.get("kind") != "model":
        raise CliError(f"{path} is not a translation model checkpoint")
    cfg = config_from_text(extra["config"])
    return ImagitModel(cfg, store, extra["mode"], seed=meta["seed"])


def load_captioner(path):
    store, meta = load_checkpoint(path)
    extra = meta.get("extra") or {}
    if extra.get("kind") != "captioner":
        raise CliError(f"{path} is not a captioner checkpoint")
    return store, config_from_text(extra["config"])


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    refuse_existing([out / "manifest.tsv"], args.force)
    out.mkdir(parents=True, exist_ok=True)
    manifest = gen_corpus(out, seed=args.seed, n_train=args.train,
                          n_dev=args.dev, n_test=args.test,
                          image_size=args.image_size)
    counts = {s: len(manifest.split(s)) for s in ("train", "dev", "test")}
    cfg = replace(RunConfig(), seed=args.seed, image_size=args.image_size,
                  out_dir=str(out))
    write_run_manifest(out, cfg, "gen-data",
                       {"examples": counts, "manifest": "manifest.tsv"})
    print(f"wrote {sum(counts.values())} examples to {out}")
    return 0


def cmd_pretrain_captioner(args) -> int:
    cfg = layered_config(args)
    out = Path(args.out)
    ckpt = out / "captioner.ckpt"
    refuse_existing([ckpt], args.force)
    out.mkdir(parents=True, exist_ok=True)
    manifest, src_vocab, tgt_vocab = load_corpus(args.data)
    train = split_dict(manifest, "train", src_vocab, tgt_vocab, True)
    dev = split_dict(manifest, "dev", src_vocab, tgt_vocab, True)
    rngs = RngStreams(cfg.seed)
    store = build_captioner_parameters(cfg, len(src_vocab), rngs)
    view = nested_view(store, "captioner.")
    stats = pretrain_captioner(view, train["images"], train["src"],
                               train["src_mask"], dev["images"], dev["src"],
                               dev["src_mask"], cfg, rngs,
                               log=lambda row: print(
                                   f"epoch {row['epoch']} train {row['train_loss']:.4f}"
                                   f" dev {row['dev_loss']:.4f}"))
    save_checkpoint(ckpt, store, config_hash=config_hash(cfg),
                    step=stats["best_epoch"], seed=cfg.seed,
                    extra={"kind": "captioner", "config": config_to_text(cfg),
                           "train_token_accuracy": stats["train_token_accuracy"]})
    write_run_manifest(out, cfg, "pretrain-captioner", {
        "checkpoint": ckpt.name,
        "train_token_accuracy": stats["train_token_accuracy"],
        "best_dev_loss": stats["best_dev_loss"],
        "epochs": len(stats["history"]),
    })
    print(f"captioner train token accuracy {stats['train_token_accuracy']:.4f}")
    return 0


def _check_captioner_compatible(cfg: RunConfig, cap_cfg: RunConfig) -> None:
    keys = ("refined_channels", "base_grid", "image_size", "cap_hidden",
            "cap_attn_dim")
    ours = tuple(getattr(cfg, k) for k in keys)
    theirs = tuple(getattr(cap_cfg, k) for k in keys)
    if ours != theirs:
        raise CliError(
            f"captioner checkpoint geometry {theirs} does not match config {ours}")


def cmd_train(args) -> int:
    cfg = layered_config(args)
    out = Path(args.out)
    ckpt = out / "model.ckpt"
    refuse_existing([ckpt, out / "progress.csv"], args.force)
    out.mkdir(parents=True, exist_ok=True)
    manifest, src_vocab, tgt_vocab = load_corpus(args.data)
    with_images = args.mode == "imagit"
    train = split_dict(manifest, "train", src_vocab, tgt_vocab, with_images)
    dev = split_dict(manifest, "dev", src_vocab, tgt_vocab, False)
    rngs = RngStreams(cfg.seed)
    store = build_parameters(cfg, len(src_vocab), len(tgt_vocab), rngs,
                             args.mode)
    if args.mode == "imagit":
        if not args.captioner:
            raise CliError("--captioner is required for the imagit mode")
        cap_store, cap_cfg = load_captioner(args.captioner)
        _check_captioner_compatible(cfg, cap_cfg)
        adopt_captioner(store, cap_store)
    model = ImagitModel(cfg, store, args.mode)
    result = run_training(model, train, dev, cfg, csv_path=out / "progress.csv",
                          log=(lambda b: print(
                              f"step {b.step} l_trans {b.l_trans:.4f} l_g {b.l_g:.4f}"
                              f" l_d {b.l_d:.4f}"))
                          if args.verbose else None)
    save_checkpoint(ckpt, store, config_hash=config_hash(cfg),
                    step=result["steps"], seed=cfg.seed,
                    extra={"kind": "model", "mode": args.mode,
                           "config": config_to_text(cfg)})
    metrics = {"checkpoint": ckpt.name, "progress": "progress.csv",
               "steps": result["steps"], "stop_reason": result["stop_reason"],
               "best_dev_bleu": result["best_dev_bleu"]}
    if result["train_bleu"] is not None:
        metrics["train_bleu"] = result["train_bleu"]
    write_run_manifest(out, cfg, "train", metrics)
    print(f"stopped after {result['steps']} steps ({result['stop_reason']})")
    return 0


def _read_sentences(args):
    if args.sentence:
        return [args.sentence.split()]
    if args.input:
        lines = Path(args.input).read_text(encoding="utf-8").splitlines()
        return [line.split() for line in lines if line.strip()]
    raise CliError("provide --sentence or --input")


def cmd_translate(args) -> int:
    model = load_model(args.model)
    _, src_vocab, tgt_vocab = load_corpus(args.data)
    sentences = _read_sentences(args)
    hyp = translate_sentences(model, src_vocab, tgt_vocab, sentences,
                              deterministic=args.deterministic,
                              beam=args.beam)
    text = "\n".join(" ".join(s) for s in hyp)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    manifest, src_vocab, tgt_vocab = load_corpus(args.data)
    data = split_dict(manifest, args.split, src_vocab, tgt_vocab, False)
    score = corpus_bleu(model, data["src"], data["src_mask"], data["tgt"],
                        data["tgt_mask"])
    print(f"bleu {score}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"split": args.split, "bleu": score}, fh)
            fh.write("\n")
    return 0


def cmd_retrieve(args) -> int:
    model = load_model(args.model)
    if model.cap is None:
        raise CliError("model checkpoint has no captioner weights for retrieval")
    manifest, src_vocab, tgt_vocab = load_corpus(args.data)
    data = split_dict(manifest, args.split, src_vocab, tgt_vocab, True)
    gen = likelihood_profile(
        imagined_feature_grids(model, data["src"], data["src_mask"]),
        data["src"], data["src_mask"], model.cap)
    true = likelihood_profile(
        image_feature_grids(model.cap, data["images"], model.cfg),
        data["src"], data["src_mask"], model.cap)
    score = retrieval_recall(gen, true, args.k)
    print(f"recall@{args.k} {score}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"split": args.split, "k": args.k, "recall": score}, fh)
            fh.write("\n")
    return 0


def cmd_degrade_report(args) -> int:
    models = {}
    for spec in args.model:
        if "=" not in spec:
            raise CliError(f"--model expects name=checkpoint, got '{spec}'")
        name, path = spec.split("=", 1)
        models[name] = load_model(path)
    manifest, src_vocab, tgt_vocab = load_corpus(args.data)
    rows_src = [r.src.split() for r in manifest.split(args.split)]
    refs = [r.tgt.split() for r in manifest.split(args.split)]
    try:
        fractions = tuple(float(x) for x in args.fractions.split(","))
    except ValueError:
        raise CliError(f"--fractions expects comma-separated floats, "
                       f"got '{args.fractions}'")
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise CliError("--fractions values must lie in [0,1]")
    rows = degradation_report(models, src_vocab, tgt_vocab, rows_src, refs,
                              seed=args.seed, entity_fractions=fractions)
    if args.kind != "both":
        rows = [r for r in rows if r[1] == args.kind]
    write_degradation_report(args.out, rows)
    for name, kind, fraction, score in rows:
        print(f"{name} {kind} {fraction} {score}")
    return 0


# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--config", help="config file (overrides --preset)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single config field")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imagit",
        description="Imagination-guided translation on the shapes corpus")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--train", type=int, default=512)
    p.add_argument("--dev", type=int, default=64)
    p.add_argument("--test", type=int, default=64)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-captioner", help="fit and freeze the captioner")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_pretrain_captioner)

    p = sub.add_parser("train", help="train a translation model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, default="imagit")
    p.add_argument("--captioner", help="pretrained captioner checkpoint")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("translate", help="translate source sentences")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="corpus dir (for vocabularies)")
    p.add_argument("--sentence")
    p.add_argument("--input", help="file with one sentence per line")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="use zero imagination noise")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("evaluate", help="corpus BLEU on a split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("retrieve", help="image retrieval from imagined features")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("degrade-report", help="BLEU under masked inputs")
    p.add_argument("--kind", choices=DEGRADE_KINDS + ("both",), default="both")
    p.add_argument("--fractions", default="0,0.15,0.3,0.45,0.6",
                   help="comma-separated entity_masking fractions")
    p.add_argument("--model", action="append", required=True,
                   metavar="NAME=CKPT")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_degrade_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, DataError, VocabError, TrainingError,
            FileNotFoundError) as exc:
        print(f"imagit: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
