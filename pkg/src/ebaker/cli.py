"""Command-line entry point: synth, keywords, train, eval, rerank."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .corpus import (DEFAULT_STOPLIST, Corpus, KeywordList, SynthConfig, Vocabulary, compute_keywords,
                     generate_synthetic, load_stoplist)
from .evaluation import config_hash, evaluate
from .model import EbakerModel
from .rerank import SarConfig, audit, fuse, load_matrix, sar_rerank, save_matrix
from .trainer import RunConfig, Trainer

log = logging.getLogger("ebaker")

VOCAB_FILE = "vocab.json"


class CliError(Exception):
    pass


def resolve_seed(flag: int | None, fallback: int) -> int:
    """--seed beats EBAKER_SEED beats the config value."""
    if flag is not None:
        return flag
    env = os.environ.get("EBAKER_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise CliError(f"EBAKER_SEED={env!r} is not an integer") from None
    return fallback


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON ({e})") from None


def _synth_config(raw: dict) -> SynthConfig:
    section = raw.get("synth", raw if "train" not in raw else {})
    known = {f.name for f in fields(SynthConfig)}
    bad = set(section) - known
    if bad:
        raise CliError(f"unknown synth keys: {sorted(bad)}")
    return SynthConfig(**section)


def corpus_vocab(corpus_dir: Path, train: Corpus) -> Vocabulary:
    path = corpus_dir / VOCAB_FILE
    return Vocabulary.load(path) if path.exists() else Vocabulary.build(train.captions())


# subcommands -------------------------------------------------------------------

def cmd_synth(args) -> dict:
    cfg = _synth_config(_read_json(args.config)) if args.config else SynthConfig()
    cfg.seed = resolve_seed(args.seed, cfg.seed)
    syn = generate_synthetic(cfg)
    out = Path(args.out)
    syn.save(out)
    Vocabulary.build(syn.train.captions() + syn.test.captions()).save(out / VOCAB_FILE)
    return {"out": str(out), "n_train": syn.manifest["n_train"], "n_test": syn.manifest["n_test"],
            "corrupted_count": syn.manifest["corrupted_count"], "seed": cfg.seed}


def cmd_keywords(args) -> dict:
    stop = load_stoplist(args.stoplist) if args.stoplist else DEFAULT_STOPLIST
    corpora, names = [], []
    for d in args.corpus:
        corpora.append(Corpus.load(d, args.split).captions())
        names.append(f"{d}:{args.split}")
    kw = compute_keywords(corpora, args.k, stop, names)
    kw.save(args.out)
    return {"out": args.out, "n_keywords": len(kw)}


def cmd_train(args) -> dict:
    raw = _read_json(args.config) if args.config else {}
    cfg = RunConfig.from_dict(raw)
    seed = resolve_seed(args.seed, cfg.train.seed)
    cfg.train.seed = cfg.model.seed = seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    corpus_dir = Path(args.corpus)
    train = Corpus.load(corpus_dir, args.split)
    vocab = corpus_vocab(corpus_dir, train)
    keywords = KeywordList.load(args.keywords) if args.keywords else None
    trainer = Trainer(train, vocab, keywords, cfg, args.out)
    reports = trainer.fit()
    last = reports[-1]
    return {"out": args.out, "epochs": len(reports), "final": last.mean, "seed": seed,
            "eliminated_final_epoch": len(last.eliminated), "config_hash": config_hash(cfg.to_dict())}


def cmd_eval(args) -> dict:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"no such checkpoint: {ckpt}")
    model, meta = EbakerModel.load(ckpt)
    if "vocab" not in meta:
        raise CliError(f"{ckpt}: sidecar lacks a vocabulary")
    vocab = Vocabulary(meta["vocab"])
    run = RunConfig.from_dict(meta.get("run", {}))
    corpus = Corpus.load(args.corpus, args.split)
    alpha = run.train.alpha if args.alpha is None else args.alpha
    beta = (1.0 - alpha if args.alpha is not None else run.train.beta) if args.beta is None else args.beta
    sar = None
    if args.sar:
        sar = run.sar
        for name in ("tau", "k", "l", "mu1", "mu2"):
            if getattr(args, name) is not None:
                setattr(sar, name, getattr(args, name))
    seed = resolve_seed(args.seed, run.train.seed)
    report = evaluate(model, corpus, vocab, alpha, beta, sar, config_hash=config_hash(meta.get("run", {})),
                      checkpoint=str(ckpt), seed=seed)
    if sar is not None:
        report.extra["sar"] = asdict(sar)
    out = Path(args.out) if args.out else ckpt.parent / f"report_{args.split}{'_sar' if sar else ''}.json"
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    return report.to_dict()


def cmd_rerank(args) -> dict:
    cfg = SarConfig(tau=args.tau, k=args.k, l=args.l, mu1=args.mu1, mu2=args.mu2,
                    outside="raw" if args.raw_outside else "zero")
    sim = load_matrix(args.sim)
    g_rr = sar_rerank(sim, cfg, args.direction)
    if args.sim_local:
        l_rr = sar_rerank(load_matrix(args.sim_local), cfg, args.direction)
        fused = fuse(g_rr, l_rr, args.alpha, 1.0 - args.alpha if args.beta is None else args.beta, cfg.mu1, cfg.mu2)
        rows = {"global": audit(g_rr, cfg.mu1, cfg.mu2), "local": audit(l_rr, cfg.mu1, cfg.mu2)}
    else:
        fused = g_rr.optimized(cfg.mu1, cfg.mu2)
        rows = {"global": audit(g_rr, cfg.mu1, cfg.mu2)}
    out = Path(args.out) if args.out else Path(args.sim).with_name(Path(args.sim).stem + "_sar.ebkm")
    save_matrix(out, fused)
    audit_path = Path(args.audit) if args.audit else out.with_suffix(".audit.json")
    audit_path.write_text(json.dumps({"config": asdict(cfg), "direction": args.direction, "pairs": rows},
                                     indent=1) + "\n", encoding="utf-8")
    return {"out": str(out), "audit": str(audit_path), "shape": list(fused.shape)}


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ebaker", description=__doc__)
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None, help="overrides EBAKER_SEED and the config")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "write a synthetic corpus")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = add("keywords", cmd_keywords, "top-k keyword list from one or more corpora")
    sp.add_argument("--corpus", action="append", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--k", type=int, default=512)
    sp.add_argument("--stoplist")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train and write checkpoints, banks and logs")
    sp.add_argument("--config")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--keywords")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "retrieval report for a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--sar", action="store_true")
    for name, typ in (("tau", float), ("k", int), ("l", int), ("mu1", float), ("mu2", float)):
        sp.add_argument(f"--{name}", type=typ)
    sp.add_argument("--out")

    sp = add("rerank", cmd_rerank, "rerank an EBKM1 similarity matrix")
    sp.add_argument("--sim", required=True)
    sp.add_argument("--sim-local")
    sp.add_argument("--direction", choices=("i2t", "t2i"), default="i2t")
    sp.add_argument("--tau", type=float, default=0.05)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--l", type=int, default=10)
    sp.add_argument("--mu1", type=float, default=0.5)
    sp.add_argument("--mu2", type=float, default=1.25)
    sp.add_argument("--alpha", type=float, default=0.6)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--raw-outside", action="store_true", help="keep raw similarity outside the top-k")
    sp.add_argument("--out")
    sp.add_argument("--audit")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.fn(args)
    except (CliError, ValueError, KeyError, OSError, FloatingPointError) as e:
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=_jsonable))
    return 0


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


if __name__ == "__main__":
    sys.exit(main())
