"""Command line: ``retrocast <command> [--config cfg.json] [--set key=value ...]``.

Commands
  gen-data     write the synthetic corpus as CSV files plus a manifest
  pretrain     pretrain and freeze the backbone on the pretraining domains
  build-kb     build the knowledge base (curated, pooled or domain)
  train        jointly train retriever and fuser; per-epoch checkpoints and a loss log
  eval         MSE on the held-out windows, with or without retrieval
  ablate       the ablation grid (retrieval x fusion, KB source, KB size)
  case-study   per-query dumps of retrieved candidates and both forecasts

Stages left out on the command line are recomputed from the config: without
``--data`` the corpus is generated, without ``--backbone`` it is pretrained,
without ``--kb`` the knowledge base is built.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import fileformat, kbase, pipeline, synthetic
from .backbone import Backbone, PretrainDiverged, PretrainError
from .fusion import load_fuser
from .kbase import KnowledgeBaseError
from .numkit import ConfigError, mse
from .pipeline import PipelineConfig
from .retriever import Retriever
from .trainer import JointTrainer, NumericalError, TrainConfig, evaluate
from .tsdata import IngestError, instance_normalize, load_manifest

log = logging.getLogger("retrocast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """Usage problems are config errors (exit 1), not argparse's exit 2."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# -- config ---------------------------------------------------------------------


def _set_path(tree, dotted, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"--set {dotted}: {k!r} is not a config section")
        node = node[k]
    node[keys[-1]] = value


def load_config(args):
    """Config file (or defaults), then ``--set`` overrides, then ``--seed``."""
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    tree = cfg.to_dict()
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(tree, key, value)
    cfg = PipelineConfig.from_dict(tree)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _comment(prov):
    return json.dumps({"provenance": prov}, sort_keys=True)


# -- stage loading ----------------------------------------------------------------


def _series(args, cfg):
    return load_manifest(args.data) if args.data else pipeline.generate_series(cfg)


def _bench(args, cfg):
    backbone = Backbone.load(args.backbone) if getattr(args, "backbone", None) else None
    kb = kbase.load(args.kb) if getattr(args, "kb", None) else None
    return pipeline.prepare(cfg, _series(args, cfg), backbone=backbone, kb=kb)


def _load_trained(ckpt_dir):
    """Retriever, fuser and their training config from a ``train`` output directory."""
    ckpt_dir = Path(ckpt_dir)
    fuser = load_fuser(ckpt_dir / "fusion.tsck")
    _, meta = fileformat.read_tsck(ckpt_dir / "fusion.tsck")
    train_cfg = TrainConfig.from_dict(meta["config"])
    return Retriever.load(ckpt_dir / "retriever.tsck"), fuser, train_cfg


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    series = pipeline.generate_series(cfg)
    path = synthetic.write_dataset(series, args.out, {"provenance": pipeline.provenance(cfg)})
    log.info("wrote %d series, manifest %s", len(series), path)


def cmd_pretrain(args, cfg):
    source, _ = pipeline.split_roles(_series(args, cfg), cfg.holdout)
    bb, report = pipeline.pretrain_backbone(source, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bb.save(
        out,
        {
            "provenance": pipeline.provenance(cfg),
            "pretrain": {"initial_loss": report.initial_loss, "epoch_losses": report.epoch_losses},
        },
    )
    log.info("backbone loss %.4g -> %.4g, saved %s", report.initial_loss, report.epoch_losses[-1], out)


def cmd_build_kb(args, cfg):
    source, _ = pipeline.split_roles(_series(args, cfg), cfg.holdout)
    kb = pipeline.build_kb(source, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    kbase.save(kb, out, {"provenance": pipeline.provenance(cfg)})
    log.info("knowledge base: %d windows %s, saved %s", kb.n_kb, kb.domain_counts(), out)


def cmd_train(args, cfg):
    bench = _bench(args, cfg)
    prov = pipeline.provenance(cfg)
    out = Path(args.out)
    trainer, log_ = bench.fit(out_dir=out, meta={"provenance": prov})
    trainer.save(out, meta={"provenance": prov})
    log_.write_csv(out / "log.csv", comment=_comment(prov))
    log.info("trained %d steps (%d windows skipped), saved %s", len(log_.rows), log_.skipped, out)


def cmd_eval(args, cfg):
    bench = _bench(args, cfg)
    prov = pipeline.provenance(cfg)
    if args.checkpoints:
        retriever, fuser, train_cfg = _load_trained(args.checkpoints)
        trainer = JointTrainer(bench.kb, bench.backbone, train_cfg, retriever=retriever, fuser=fuser)
        predictor, config = bench.predictor(trainer), train_cfg.to_dict()
    else:
        predictor, config = bench.backbone.predict, {"policy": "w/o RAF"}
    report = evaluate(bench.test_pairs, predictor, config, cfg.seed, keep_residuals=args.residuals)
    report.write_json(_out_path(args.out), {"provenance": prov})
    log.info("MSE %.6g over %d windows", report.mse, report.n_windows)


def _out_path(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_ablate(args, cfg):
    bench = _bench(args, cfg)
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    cells = pipeline.ablation_cells(cfg, axes)
    rows = pipeline.run_ablation(bench, cells, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = pipeline.provenance(cfg)
    _write_json(out / "ablation.json", {"provenance": prov, "axes": axes, "cells": rows})
    with open(out / "ablation.csv", "w", newline="") as fh:
        fh.write(f"# {_comment(prov)}\n")
        w = csv.writer(fh)
        w.writerow(pipeline.ABLATION_COLUMNS)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in pipeline.ABLATION_COLUMNS])
    for r in rows:
        shown = f"{r['mse']:.6g}" if r["status"] == "ok" else f"skipped ({r['reason']})"
        log.info("%-44s %s", r["cell"], shown)


def parse_queries(text, n):
    try:
        picks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--queries must be comma-separated integers, got {text!r}") from None
    bad = [q for q in picks if not 0 <= q < n]
    if bad:
        raise ConfigError(f"query indices {bad} out of range; {n} evaluation windows")
    return picks


def case_record(bench, trainer, query):
    """Everything needed to replot one query offline."""
    pair = bench.test_pairs[query]
    predictor = bench.predictor(trainer)
    res = predictor.retrieve(pair.x)
    xn, stats = instance_normalize(pair.x)
    yn = (pair.y - stats.mean) / stats.std
    target = trainer.feedback_target(xn, yn, res.indices)
    y_raf = predictor.predict_with(pair.x, res.indices)
    y_bare = bench.backbone.predict(pair.x)
    kb = trainer.kb
    return {
        "query": query,
        "source": list(pair.source),
        "lookback": pair.x.tolist(),
        "ground_truth": pair.y.tolist(),
        "y_raf": y_raf.tolist(),
        "y_bare": y_bare.tolist(),
        "mse_raf": mse(y_raf, pair.y),
        "mse_bare": mse(y_bare, pair.y),
        "candidates": [
            {
                "kb_index": int(i),
                "score": float(s),
                "target": float(t),
                "dataset_id": kb.dataset_ids[i],
                "domain": kb.domains[i],
                "origin": list(kb.origins[i]),
                "values": kb.values[i].tolist(),
            }
            for i, s, t in zip(res.indices, res.scores, target)
        ],
    }


def cmd_case_study(args, cfg):
    bench = _bench(args, cfg)
    retriever, fuser, train_cfg = _load_trained(args.checkpoints)
    trainer = JointTrainer(bench.kb, bench.backbone, train_cfg, retriever=retriever, fuser=fuser)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = pipeline.provenance(cfg)
    for q in parse_queries(args.queries, len(bench.test_pairs)):
        rec = case_record(bench, trainer, q)
        _write_json(out / f"case_{q:04d}.json", {"provenance": prov, **rec})
        with open(out / f"case_{q:04d}.csv", "w", newline="") as fh:
            fh.write(f"# {_comment(prov)}\n")
            w = csv.writer(fh)
            w.writerow(["series", "t", "value"])
            sl = len(rec["lookback"])
            for t, v in enumerate(rec["lookback"]):
                w.writerow(["lookback", t, repr(v)])
            for name in ("ground_truth", "y_raf", "y_bare"):
                for t, v in enumerate(rec[name]):
                    w.writerow([name, sl + t, repr(v)])
            for j, c in enumerate(rec["candidates"]):
                for t, v in enumerate(c["values"]):
                    w.writerow([f"candidate_{j}", t, repr(v)])
        log.info("query %d: mse raf %.4g, bare %.4g", q, rec["mse_raf"], rec["mse_bare"])


# -- entry point ----------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="retrocast", description="Retrieval-augmented zero-shot forecasting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(name, help_, data=True, stages=False, ckpt=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON pipeline config (defaults when omitted)")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.k=4")
        s.add_argument("--seed", type=int)
        if data:
            s.add_argument("--data", help="manifest.json written by gen-data")
        if stages:
            s.add_argument("--backbone", help="backbone checkpoint (.tsck)")
            s.add_argument("--kb", help="knowledge base (.tskb)")
        if ckpt:
            s.add_argument("--checkpoints", help="directory written by train")
        return s

    common("gen-data", "write the synthetic corpus", data=False).add_argument("--out", required=True)
    common("pretrain", "pretrain and freeze the backbone").add_argument("--out", required=True)
    common("build-kb", "build the knowledge base").add_argument("--out", required=True)
    common("train", "joint retriever and fuser training", stages=True).add_argument("--out", required=True)
    s = common("eval", "evaluate on the held-out windows", stages=True, ckpt=True)
    s.add_argument("--out", required=True)
    s.add_argument("--residuals", action="store_true", help="keep per-window residuals in the report")
    s = common("ablate", "run the ablation grid", stages=True)
    s.add_argument("--out", required=True)
    s.add_argument("--axes", default="policy,source,size", help="comma list of policy, source, size")
    s.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
    s = common("case-study", "dump retrieved candidates per query", stages=True, ckpt=True)
    s.add_argument("--out", required=True)
    s.add_argument("--queries", required=True, help="comma-separated evaluation window indices")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "build-kb": cmd_build_kb,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "case-study": cmd_case_study,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
        if args.command == "case-study" and not args.checkpoints:
            raise ConfigError("case-study needs --checkpoints")
        COMMANDS[args.command](args, load_config(args))
    except (NumericalError, PretrainDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, PretrainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, KnowledgeBaseError, fileformat.FormatError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK
