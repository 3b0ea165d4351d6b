"""Command-line surface: corpus generation, vocabulary building, the two
training stages, decoding, scoring and diagnostics.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import numerics as nx
from .config import DEFAULTS, RunConfig, parse_overrides
from .data import (
    SynthSpec,
    Vocabulary,
    build_vocab,
    load_dataset,
    save_dataset,
    synth_corpus,
)
from .decoding import (
    DecodeConfig,
    decode_image,
    evaluate,
    read_decode_records,
    write_decode_records,
)
from .errors import BidicapError, ConfigError
from .metrics import bleu, cider
from .model import (
    ModelConfig,
    ParameterSet,
    decode_train,
    encode,
    load_checkpoint,
)
from .numerics import Tensor, grad_check
from .training import TrainConfig, joint_xe_loss, train_sc, train_xe


def _dataset_paths(cfg: RunConfig) -> dict:
    d = cfg["data_dir"]
    return {
        "train": os.path.join(d, "train.jsonl"),
        "val": os.path.join(d, "val.jsonl"),
        "test": os.path.join(d, "test.jsonl"),
        "vocab": os.path.join(d, "vocab.json"),
    }


def cmd_synth(cfg: RunConfig) -> int:
    spec = cfg.synth_spec()
    paths = _dataset_paths(cfg)
    os.makedirs(cfg["data_dir"], exist_ok=True)
    splits = synth_corpus(spec)
    for name in ("train", "val", "test"):
        split = splits[name]
        save_dataset(split.records, split.features, paths[name])
        print(f"wrote {len(split)} images to {paths[name]}")
    return 0


def cmd_vocab(cfg: RunConfig) -> int:
    paths = _dataset_paths(cfg)
    train = load_dataset(paths["train"])
    corpus = (list(c) for rec in train.records for c in rec.captions)
    vocab = build_vocab(corpus, min_count=cfg["min_count"])
    vocab.save(paths["vocab"])
    print(f"wrote vocabulary of {len(vocab)} tokens to {paths['vocab']}")
    return 0


def _load_data(cfg: RunConfig, splits=("train", "val")):
    paths = _dataset_paths(cfg)
    vocab = Vocabulary.load(paths["vocab"])
    out = [vocab]
    for s in splits:
        out.append(load_dataset(paths[s]))
    return out


def cmd_train_xe(cfg: RunConfig) -> int:
    vocab, train, val = _load_data(cfg)
    mcfg = cfg.model_config(len(vocab))
    tcfg = cfg.train_config()
    cfg.echo()
    params = ParameterSet.initialize(mcfg, np.random.default_rng(cfg["seed"]))
    history = train_xe(params, train, val, vocab, tcfg, cfg["seed"],
                       run_dir=cfg["run_dir"], flows=cfg["flows"])
    final = history[-1]
    print(f"cross-entropy stage done: loss {final['loss']:.4f}, "
          f"val ensemble score {final['val_cider_ensemble']:.3f}")
    return 0


def cmd_train_sc(cfg: RunConfig) -> int:
    vocab, train, val = _load_data(cfg)
    tcfg = cfg.train_config()
    cfg.echo()
    init = cfg["checkpoint"] or os.path.join(cfg["run_dir"], "checkpoints", "xe_best.ckpt")
    params, _ = load_checkpoint(init)
    history = train_sc(params, train, val, vocab, tcfg, cfg["seed"],
                       run_dir=cfg["run_dir"])
    final = history[-1]
    print(f"self-critical stage done: rewards fwd {final['reward_fwd']:.3f} / "
          f"bwd {final['reward_bwd']:.3f}, val ensemble score "
          f"{final['val_cider_ensemble']:.3f}")
    return 0


def _load_models(cfg: RunConfig):
    spec = cfg["checkpoint"]
    if not spec:
        spec = os.path.join(cfg["run_dir"], "checkpoints", "xe_best.ckpt")
    models = []
    for path in spec.split(","):
        params, _ = load_checkpoint(path.strip())
        models.append(params)
    return models


def cmd_decode(cfg: RunConfig) -> int:
    vocab, split = _load_data(cfg, splits=(cfg["decode_split"],))
    models = _load_models(cfg)
    dcfg = cfg.decode_config()
    report, records = evaluate(models, split, dcfg, vocab, method=cfg["decode_method"])
    out = cfg["decode_out"]
    if not out:
        os.makedirs(os.path.join(cfg["run_dir"], "decodes"), exist_ok=True)
        out = os.path.join(cfg["run_dir"], "decodes", f"{cfg['decode_split']}.jsonl")
    write_decode_records(records, out)
    print(f"wrote {len(records)} decode records to {out} "
          f"(ensemble of {len(models)} model(s))")
    _print_report(report)
    return 0


def _print_report(report: dict) -> None:
    print(f"{'variant':<10} {'BLEU-1':>7} {'BLEU-2':>7} {'BLEU-3':>7} "
          f"{'BLEU-4':>7} {'CIDEr':>7}")
    for name in ("l2r", "r2l", "ensemble"):
        r = report[name]
        b = r["bleu"]
        print(f"{name:<10} {b[0]:7.3f} {b[1]:7.3f} {b[2]:7.3f} {b[3]:7.3f} "
              f"{r['cider']:7.3f}")


def cmd_score(cfg: RunConfig) -> int:
    vocab, split = _load_data(cfg, splits=(cfg["decode_split"],))
    path = cfg["candidates"]
    if not path:
        path = os.path.join(cfg["run_dir"], "decodes", f"{cfg['decode_split']}.jsonl")
    records = read_decode_records(path)
    by_id = {r["image_id"]: r for r in records}
    references, variants = [], {"l2r": [], "r2l": [], "ensemble": []}
    for rec in split.records:
        if rec.image_id not in by_id:
            raise ConfigError(f"{path}: no decode record for image {rec.image_id}")
        row = by_id[rec.image_id]
        references.append([list(c) for c in rec.captions])
        variants["l2r"].append(row["fwd_caption"].split())
        variants["r2l"].append(row["bwd_caption"].split())
        variants["ensemble"].append(row["caption"].split())
    report = {}
    for name, candidates in variants.items():
        score, _ = cider(candidates, references)
        report[name] = {"cider": score, "bleu": bleu(candidates, references)}
    _print_report(report)
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    """64-bit finite-difference check of the full model gradient."""
    from .data import pair_from_ids

    rng = np.random.default_rng(cfg["seed"])
    mcfg = ModelConfig(vocab_size=11, feature_dim=5, d_model=8, d_k=4, d_v=4,
                       d_ff=16, n_layers=1, n_heads=2, p_dropout=0.0,
                       lam=cfg["lambda"], af=cfg["af"], max_len=8).validate()
    params = ParameterSet.initialize(mcfg, rng, dtype=np.float64)
    feats = rng.normal(size=(3, mcfg.feature_dim))
    sp = type("S", (), {"pad": 0, "l2r": 1, "r2l": 2, "eos": 3, "unk": 4})()
    pair = pair_from_ids([5, 6, 7], [8, 9], sp)

    def loss_fn():
        ctx = encode(feats, params, mcfg)
        lf, lb = decode_train(ctx, pair, params, mcfg)
        return joint_xe_loss(lf, lb, pair)

    report = grad_check(loss_fn, list(params.named()), tolerance=1e-4)
    print(report)
    for name, err in sorted(report.per_param.items(), key=lambda kv: -kv[1])[:5]:
        print(f"  {name:<24} rel err {err:.3e}")
    return 0 if report.passed else 2


def cmd_ablate(cfg: RunConfig) -> int:
    """Sweep the cross-flow weight and activation on the synthetic task."""
    vocab, train, val = _load_data(cfg)
    tcfg = cfg.train_config()
    results = {}
    for af in ("tanh", "relu"):
        for lam in (0.0, 0.1, 0.4):
            mcfg = cfg.model_config(len(vocab))
            mcfg.lam, mcfg.af = lam, af
            params = ParameterSet.initialize(mcfg, np.random.default_rng(cfg["seed"]))
            train_xe(params, train, val, vocab, tcfg, cfg["seed"], run_dir=None)
            report, _ = evaluate(params, val, cfg.decode_config(), vocab,
                                 method=cfg["val_decode"])
            results[(af, lam)] = (report["ensemble"]["bleu"][0],
                                  report["ensemble"]["cider"])
            print(f"af={af:<5} lambda={lam:<4} BLEU-1 {results[(af, lam)][0]:.3f} "
                  f"score {results[(af, lam)][1]:.3f}")
    print(f"\n{'AF':<6}" + "".join(f"{lam:>16}" for lam in (0.0, 0.1, 0.4)))
    for af in ("tanh", "relu"):
        cells = "".join(
            f"  {results[(af, lam)][0]:6.3f}/{results[(af, lam)][1]:6.3f}"
            for lam in (0.0, 0.1, 0.4)
        )
        print(f"{af:<6}{cells}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "vocab": cmd_vocab,
    "train-xe": cmd_train_xe,
    "train-sc": cmd_train_sc,
    "decode": cmd_decode,
    "score": cmd_score,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bidicap",
        description="Bidirectional captioning transformer: synth data, train, decode, score.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().split("\n")[0] or name)
        p.add_argument("--config", default=None, help="JSON config file (flat keys)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--show-defaults", action="store_true",
                       help="print all config keys with defaults and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.show_defaults:
        for k, (v, help_text) in DEFAULTS.items():
            print(f"{k:<22} = {v!r:<18} # {help_text}")
        return 0
    try:
        cfg = RunConfig.load(args.config, parse_overrides(args.set))
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except BidicapError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
