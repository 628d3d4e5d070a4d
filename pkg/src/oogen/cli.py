"""Command-line interface: ``oogen {split,pretrain,train,eval,predict}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import TIE_RULES, DDIReport, aggregate, relation_logits, ddi_metrics, rank_split, \
    report_document, validation_metric, write_rank_csv, write_report
from .graph import TripletFormatError, load_graph, parse_triplet_file
from .model import ModelParams
from .split import InsufficientEntitiesError, ManifestError, SplitConfig, make_split, read_manifest, write_manifest
from .train import meta_train, pretrain_in_graph
from .utils import derive_rng

logger = logging.getLogger("oogen")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

COMMANDS = {
    "split": "build an out-of-graph split manifest from a triplet file",
    "pretrain": "fit entity and relation embeddings on the in-graph",
    "train": "meta-train the extrapolation layers",
    "eval": "evaluate a checkpoint on a meta-set",
    "predict": "rank completions of partial triplets for new entities",
}


class UsageError(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    for key in cfgmod.KEYS:
        default = key.default
        if isinstance(default, tuple):
            default = ",".join(map(str, default))
        extra = f" (choices: {', '.join(key.choices)})" if key.choices else ""
        common.add_argument(_flag(key.name), dest=key.name, metavar="VALUE", default=None,
                            help=f"{key.help}{extra} [default: {default}]")
    parser = argparse.ArgumentParser(prog="oogen", description="Few-shot out-of-graph link prediction.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, text in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _resolve(args) -> dict:
    overrides = {k.name: getattr(args, k.name) for k in cfgmod.KEYS}
    file_values = {}
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        file_values = cfgmod.read_config_file(args.config)
    return cfgmod.resolve(file_values, overrides)


def _require(cfg: dict, key: str, kind: str = "file") -> Path:
    value = cfg[key]
    if not value:
        raise UsageError(f"{key} is required for this command")
    path = Path(value)
    ok = path.is_dir() if kind == "dir" else path.is_file()
    if not ok:
        raise UsageError(f"{key}: {kind} not found: {path}")
    return path


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_ndjson(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _echo(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())}


def cmd_split(cfg: dict) -> int:
    path = _require(cfg, "data.triplets")
    vocab, g = load_graph(path, add_inverses=cfg["split.add_inverses"])
    scfg = SplitConfig(cfg["split.min_degree"], cfg["split.max_degree"], cfg["split.n_unseen"],
                       cfg["split.ratios"], cfg["seed"])
    split = make_split(g, vocab, scfg)
    out = write_manifest(split, _out_dir(cfg))
    print(json.dumps({"manifest": str(out), **{k: v for k, v in split.stats.items() if k != "config"}},
                     sort_keys=True))
    return EXIT_OK


def _load_split(cfg: dict):
    return read_manifest(_require(cfg, "data.manifest", "dir"))


def _load_ckpt(path, split) -> Checkpoint:
    return load_checkpoint(path, split.vocab.fingerprint())


def cmd_pretrain(cfg: dict) -> int:
    split = _load_split(cfg)
    hp = cfgmod.hyperparams(cfg)
    init = ModelParams.initialize(hp.model_config(split.vocab), derive_rng(hp.seed, "init"), split.seen_mask())
    every = max(1, hp.pretrain_steps // 20) if hp.pretrain_steps else 0
    params, history = pretrain_in_graph(init, split, hp, eval_every=every)
    out = _out_dir(cfg)
    save_checkpoint(out / "pretrain.ckpt", Checkpoint(params, split.vocab.fingerprint(), hp.to_dict()))
    _write_ndjson(out / "pretrain.ndjson", [{"step": s, "loss": l} for s, l in history])
    print(json.dumps({"checkpoint": str(out / "pretrain.ckpt"), "steps": hp.pretrain_steps,
                      "final_loss": history[-1][1] if history else None}))
    return EXIT_OK


def _eval_kwargs(cfg: dict, hp) -> dict:
    return dict(transductive=hp.transductive, stochastic=hp.stochastic, shots=hp.shots,
                n_samples=cfg["eval.mc_samples"], seed=cfg["seed"])


def _report(params, split, cfg, hp, meta_set):
    kw = _eval_kwargs(cfg, hp)
    if params.config.score == "linear":
        return ddi_metrics(*relation_logits(params, split, meta_set, **kw)), None
    ranks = rank_split(params, split, meta_set, threads=cfg["threads"], **kw)
    if not ranks:
        raise RuntimeError(f"meta-set {meta_set!r} has no queries to rank")
    return aggregate(ranks, cfg["eval.tie_rule"]), ranks


def cmd_train(cfg: dict) -> int:
    split = _load_split(cfg)
    hp = cfgmod.hyperparams(cfg)
    hp.pretrain_steps = 0
    if cfg["data.init"]:
        params = _load_ckpt(_require(cfg, "data.init"), split).params
        if params.config != hp.model_config(split.vocab):
            raise UsageError("data.init checkpoint does not match the model.* settings")
    else:
        params = ModelParams.initialize(hp.model_config(split.vocab), derive_rng(hp.seed, "init"),
                                        split.seen_mask())
    validate = None
    if hp.eval_every and split.entities("valid"):
        validate = lambda p: validation_metric(_report(p, split, cfg, hp, "valid")[0])  # noqa: E731
    out = _out_dir(cfg)
    log_path = out / "train.ndjson"
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        def emit(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        result = meta_train(split, hp, params, validate=validate, callback=emit)
    save_checkpoint(out / "model.ckpt", Checkpoint(result.params, split.vocab.fingerprint(), hp.to_dict(),
                                                   result.optimizer, {"best_episode": result.best_episode}))
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "episodes": len(result.log),
                      "best_episode": result.best_episode, "best_val_metric": result.best_metric}))
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    split = _load_split(cfg)
    ckpt = _load_ckpt(_require(cfg, "data.checkpoint"), split)
    hp = cfgmod.hyperparams(cfg)
    meta_set = cfg["eval.meta_set"]
    report, ranks = _report(ckpt.params, split, cfg, hp, meta_set)
    out = _out_dir(cfg)
    echo = _echo(cfg)
    echo["checkpoint_hyperparams"] = ckpt.hyperparams
    doc = report_document(report if isinstance(report, DDIReport) else ranks, echo)
    write_report(out / "report.json", doc)
    if ranks is not None and cfg["eval.ranks_csv"]:
        write_rank_csv(out / "ranks.csv", ranks, split.vocab)
    if isinstance(report, DDIReport):
        summary = report.to_dict()
    else:
        summary = {f"mrr_{rule}": round(doc["metrics"][rule]["mrr"], 6) for rule in TIE_RULES}
    print(json.dumps({"report": str(out / "report.json"), "meta_set": meta_set, **summary}))
    return EXIT_OK


def _read_queries(path: Path):
    queries = []
    for h, r, t in parse_triplet_file(path):
        queries.append((None if h == "?" else h, r, None if t == "?" else t))
    return queries


def cmd_predict(cfg: dict) -> int:
    from .estimator import predict_completions

    split = _load_split(cfg)
    ckpt = _load_ckpt(_require(cfg, "data.checkpoint"), split)
    hp = cfgmod.hyperparams(cfg)
    support_rows = parse_triplet_file(_require(cfg, "data.support"))
    queries = _read_queries(_require(cfg, "data.queries"))
    known_names = set(split.vocab.entity_names)
    seen = split.seen_mask()
    supports: dict[str, list] = {}

    def is_new(name):
        return name not in known_names or not seen[split.vocab.entity_id(name)]

    for h, r, t in support_rows:
        for name in (h, t):
            if is_new(name):
                supports.setdefault(name, []).append((h, r, t))
    if not supports:
        raise UsageError("data.support mentions no unseen entity")
    k = cfg["predict.top_k"]
    results = predict_completions(ckpt.params, split, supports, queries, k=k, transductive=hp.transductive,
                                  stochastic=hp.stochastic, n_samples=cfg["eval.mc_samples"], seed=cfg["seed"])
    out = _out_dir(cfg)
    with open(out / "predictions.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query\trank\tanswer\tscore\n")
        for (h, r, t), ranked in zip(queries, results):
            q = f"{h or '?'} {r} {t or '?'}"
            for i, (name, score) in enumerate(ranked, start=1):
                fh.write(f"{q}\t{i}\t{name}\t{score:.6g}\n")
    print(json.dumps({"predictions": str(out / "predictions.tsv"), "queries": len(queries)}))
    return EXIT_OK


HANDLERS = {"split": cmd_split, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict}


def _setup_logging() -> None:
    level = os.environ.get("GEN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        return HANDLERS[args.command](cfg)
    except (UsageError, cfgmod.ConfigError, FileNotFoundError, TripletFormatError, InsufficientEntitiesError) as exc:
        print(f"oogen {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ManifestError) as exc:
        print(f"oogen {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"oogen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
