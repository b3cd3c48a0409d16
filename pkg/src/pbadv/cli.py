"""Command-line entry point: ``pbadv {train,eval,retrieve,synth,gradcheck}``."""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from . import gradcheck
from .config import Config, apply_overrides, from_dict
from .dataio import (
    load_dataset,
    load_embeddings,
    save_embeddings,
    save_features,
    save_manifest,
    synth_generate,
)
from .errors import ConfigError, ContractError, DataError, DegenerateInputError, NumericError, ShapeError
from .evaluate import candidate_pairs, evaluate, topk_retrieval
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import Trainer

logger = logging.getLogger("pbadv")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# config and manifest helpers


def resolve_config(args, base=None):
    """Config from ``--config`` (a config file or a run manifest), else ``base``,
    then ``--seed`` and ``--set`` on top."""
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if isinstance(raw, dict) and "command" in raw and "config" in raw:
            raw = raw["config"]
        config = from_dict(raw)
    elif base is not None:
        config = from_dict(base)
    else:
        config = Config()
    apply_overrides(config, args.set or [])
    if args.seed is not None:
        config.train.seed = args.seed
    return config.validate()


def write_run_manifest(out, command, config, extra=None):
    """Record everything needed to re-run ``command`` before it does real work."""
    os.makedirs(out, exist_ok=True)
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "data": {
            "manifest": config.data.manifest,
            "features": config.data.features,
            "embeddings": config.data.embeddings,
        },
        "seed": config.train.seed,
        "out": os.path.abspath(out),
        "version": __version__,
    }
    manifest.update(extra or {})
    path = os.path.join(out, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _require(path, what):
    if not path:
        raise ConfigError(f"no {what} given; set data.{what} in the config or with --set")
    if not os.path.exists(path):
        raise DataError(f"{what} file not found: {path}")


def load_data(config, need_embeddings=False):
    _require(config.data.manifest, "manifest")
    _require(config.data.features, "features")
    if need_embeddings:
        _require(config.data.embeddings, "embeddings")
    return load_dataset(config.data.manifest, config.data.features)


def _check_dims(model, dataset):
    if dataset.dim != model.config.feat_dim:
        raise ShapeError(
            "feature", f"checkpoint expects D={model.config.feat_dim}, data has D={dataset.dim}"
        )
    if (dataset.vocab.m, dataset.vocab.n) != (model.config.num_attrs, model.config.num_objs):
        raise ShapeError(
            "vocabulary",
            f"checkpoint expects {model.config.num_attrs}x{model.config.num_objs} primitives, "
            f"data has {dataset.vocab.m}x{dataset.vocab.n}",
        )


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    config = resolve_config(args)
    if args.no_adv:
        config.adv.enabled = False
    if args.no_osp:
        config.osp.enabled = False
    if args.select_best:
        config.train.select_best = True
    dataset = load_data(config, need_embeddings=True)
    if config.train.select_best and dataset.indices("val").size == 0:
        raise ConfigError("train.select_best needs a val split in the manifest")
    vocab = dataset.vocab
    table = load_embeddings(config.data.embeddings, vocab.attributes + vocab.objects)
    write_run_manifest(args.out, "train", config)

    mc = ModelConfig(
        feat_dim=dataset.dim,
        num_attrs=vocab.m,
        num_objs=vocab.n,
        word_dim=table.dim,
        hidden=config.model.hidden,
        embed_dim=config.model.embed_dim,
        dropout=config.model.dropout,
        freeze_words=config.model.freeze_words,
        seed=config.train.seed,
    )
    model = Model.from_embeddings(mc, vocab, table)
    trainer = Trainer(dataset, model, config)
    stats_path = os.path.join(args.out, "stats.jsonl")
    every = config.train.ckpt_every
    extra = {"config": config.to_dict()}
    best = {"auc": -1.0, "epoch": 0}

    with open(stats_path, "w", encoding="utf-8") as log:

        def on_epoch(tr, stats):
            if config.train.select_best:
                rep = evaluate(tr.model, dataset, config.train.inv_tau, config.eval.world, "val", grid_size=config.eval.grid_size)
                stats["val_auc"] = rep.auc
                if rep.auc > best["auc"]:
                    best.update(auc=rep.auc, epoch=stats["epoch"])
                    save_checkpoint(os.path.join(args.out, "best.pbck"), tr.model, {**extra, "epochs": stats["epoch"]})
            log.write(json.dumps(stats, sort_keys=True) + "\n")
            log.flush()
            logger.info("epoch %d loss %.4f acc %.3f", stats["epoch"], stats["loss_total"], stats["acc_ensemble"])
            if every and stats["epoch"] % every == 0:
                save_checkpoint(os.path.join(args.out, f"ckpt_epoch{stats['epoch']:04d}.pbck"), tr.model, extra)

        trainer.fit(callback=on_epoch)
    final = os.path.join(args.out, "model.pbck")
    save_checkpoint(final, model, {**extra, "epochs": trainer.epoch})
    print(f"trained {trainer.epoch} epochs; checkpoint {final}")
    if config.train.select_best and best["epoch"]:
        print(f"best val AUC {best['auc']:.4f} at epoch {best['epoch']}; checkpoint {os.path.join(args.out, 'best.pbck')}")
    return EXIT_OK


def _load_model(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, extra = load_checkpoint(args.checkpoint)
    config = resolve_config(args, base=extra.get("config"))
    return model, config


def _write_report(path, report, config, world, split):
    body = report.to_dict()
    body.update(
        {
            "world": world,
            "split": split,
            "headline": report.headline(),
            "config": config.to_dict(),
            "version": __version__,
        }
    )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_eval(args):
    model, config = _load_model(args)
    if args.world:
        config.eval.world = args.world
    dataset = load_data(config)
    _check_dims(model, dataset)
    world = config.eval.world
    write_run_manifest(args.out, "eval", config, {"checkpoint": os.path.abspath(args.checkpoint)})
    report = evaluate(model, dataset, config.train.inv_tau, world=world, split=args.split, grid_size=config.eval.grid_size)
    _write_report(os.path.join(args.out, "report.json"), report, config, world, args.split)
    if args.csv:
        with open(os.path.join(args.out, "curve.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bias", "seen", "unseen"])
            w.writerows(zip(report.biases, report.seen_curve, report.unseen_curve))
    head = report.headline()
    print(f"{world}-world {args.split}")
    print("  ".join(f"{k:>7s}" for k in head))
    print("  ".join(f"{v:7.2f}" for v in head.values()))
    return EXIT_OK


def _parse_pair(text, vocab):
    try:
        a, o = [t.strip() for t in text.split(",")]
        return vocab.attr_index[a], vocab.obj_index[o]
    except (ValueError, KeyError):
        raise ConfigError(f"query {text!r} is not an 'attribute,object' pair of this vocabulary") from None


def cmd_retrieve(args):
    model, config = _load_model(args)
    if args.world:
        config.eval.world = args.world
    dataset = load_data(config)
    _check_dims(model, dataset)
    vocab = dataset.vocab
    write_run_manifest(args.out, "retrieve", config, {"checkpoint": os.path.abspath(args.checkpoint)})
    pairs = np.array(candidate_pairs(vocab, config.eval.world, args.split), dtype=np.int64)
    rows = dataset.indices(args.split)
    corpus = dataset.features[rows]
    ids = [dataset.ids[i] for i in rows]
    inv_tau = config.train.inv_tau
    direction = args.direction

    if direction == "image2text":
        if args.query:
            lookup = {sid: i for i, sid in enumerate(ids)}
            missing = [q for q in args.query if q not in lookup]
            if missing:
                raise DataError(f"unknown sample id(s) in split {args.split!r}: {missing}")
            picks = [lookup[q] for q in args.query]
        else:
            picks = list(range(min(args.queries, len(ids))))
        queries = [(ids[i], corpus[i], vocab.pair_name((int(dataset.attrs[rows[i]]), int(dataset.objs[rows[i]])))) for i in picks]
    elif direction == "text2image":
        qs = [_parse_pair(q, vocab) for q in args.query] if args.query else [tuple(p) for p in pairs[: args.queries].tolist()]
        queries = [(vocab.pair_name(q), q, None) for q in qs]
    else:
        names = vocab.attributes if direction == "attr" else vocab.objects
        index = vocab.attr_index if direction == "attr" else vocab.obj_index
        if args.query:
            bad = [q for q in args.query if q not in index]
            if bad:
                raise ConfigError(f"unknown {direction} name(s): {bad}")
            qs = [index[q] for q in args.query]
        else:
            qs = list(range(min(args.queries, len(names))))
        queries = [(names[q], q, None) for q in qs]

    results = []
    for label, query, truth in queries:
        ranked = topk_retrieval(model, query, corpus, args.k, direction, pairs, inv_tau)
        header = f"query {label}" + (f" (true: {truth})" if truth else "")
        print(header)
        entries = []
        for rank, (idx, score) in enumerate(ranked, 1):
            if direction == "image2text":
                item = vocab.pair_name(tuple(pairs[idx]))
            else:
                r = rows[idx]
                item = f"{ids[idx]} [{vocab.pair_name((int(dataset.attrs[r]), int(dataset.objs[r])))}]"
            print(f"  {rank:3d}  {score:9.4f}  {item}")
            entries.append({"rank": rank, "item": item, "score": score})
        results.append({"query": label, "results": entries})
    with open(os.path.join(args.out, f"retrieval_{direction}.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2)
        fh.write("\n")
    return EXIT_OK


def cmd_synth(args):
    seed = 0 if args.seed is None else args.seed
    os.makedirs(args.out, exist_ok=True)
    synth = synth_generate(
        args.m,
        args.n,
        args.D,
        args.seen_fraction,
        args.samples_per_pair,
        seed,
        sigma=args.sigma,
        gamma=args.gamma,
        word_dim=args.word_dim,
    )
    ds = synth.dataset
    paths = {
        "manifest": os.path.join(args.out, "manifest.json"),
        "features": os.path.join(args.out, "features.pbfv"),
        "embeddings": os.path.join(args.out, "embeddings.txt"),
    }
    save_manifest(paths["manifest"], ds.vocab, ds.samples())
    save_features(paths["features"], ds.ids, ds.features)
    save_embeddings(paths["embeddings"], synth.embeddings)
    # ready-to-use config pointing at the files just written
    config = {"preset": "synthetic", "data": {k: os.path.abspath(v) for k, v in paths.items()}}
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    counts = {s: int(ds.indices(s).size) for s in ("train", "val", "test")}
    print(
        f"wrote {len(ds)} samples ({counts['train']} train, {counts['val']} val, {counts['test']} test), "
        f"{len(ds.vocab.pairs_seen)} seen / {len(ds.vocab.pairs_unseen)} unseen pairs to {args.out}"
    )
    return EXIT_OK


def cmd_gradcheck(args):
    seed = 0 if args.seed is None else args.seed
    results = gradcheck.run_suite(seed=seed, h=args.h, tol=args.tol)
    failed = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        failed += not r.ok
        skip = f"  ({r.skipped} kink entries skipped)" if r.skipped else ""
        print(f"{status:4s}  {r.name:16s} {r.input:12s} rel_err={r.rel_error:.2e}{skip}")
    dtype = np.dtype(ad.get_dtype()).name
    print(f"{len(results) - failed}/{len(results)} checks passed ({dtype}, h={args.h:g}, tol={args.tol:g})")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or a run_manifest.json to replay")
    common.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pbadv", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--no-adv", action="store_true", help="disable the primitive perturbation losses")
    p.add_argument("--no-osp", action="store_true", help="disable similarity-based oversampling")
    p.add_argument("--select-best", action="store_true", help="also keep the checkpoint with the best val AUC")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--world", choices=["closed", "open"], default=None)
    p.add_argument("--split", choices=["val", "test"], default="test")
    p.add_argument("--csv", action="store_true", help="also write the calibration curve as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", parents=[common], help="print top-k retrieval tables")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", choices=["image2text", "text2image", "attr", "obj"], default="image2text")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--query", action="append", help="sample id, 'attr,obj' pair or primitive name; repeatable")
    p.add_argument("--queries", type=int, default=5, help="number of default queries when --query is absent")
    p.add_argument("--world", choices=["closed", "open"], default=None)
    p.add_argument("--split", choices=["val", "test"], default="test")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--m", type=int, default=8, help="number of attributes")
    p.add_argument("--n", type=int, default=10, help="number of objects")
    p.add_argument("--D", type=int, default=32, help="feature dimension (even)")
    p.add_argument("--seen-fraction", type=float, default=0.75)
    p.add_argument("--samples-per-pair", type=int, default=20)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--word-dim", type=int, default=300)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", parents=[common], help="run the finite-difference suite")
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateInputError as exc:
        print(f"numeric error: {exc} (an all-zero relu embedding; a larger model.embed_dim makes this rarer)", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
