"""Run configuration: typed keys with defaults, key=value files with dotted sections.

A config file holds ``key = value`` lines. Keys are either fully dotted
(``train.lr = 0.001``) or grouped under an INI-style ``[train]`` header.
Precedence is command-line flag, then file, then built-in default.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .model import SCORE_KINDS

_ROOT = "__root__"


class ConfigError(ValueError):
    """Raised with every offending key listed."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text: str) -> int | None:
    return None if str(text).strip().lower() in ("", "none", "auto") else int(text)


def _ratios(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(text)
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 3:
        raise ValueError("ratios need three comma-separated values")
    return tuple(int(p) if p.isdigit() else float(p) for p in parts)


def _u64(text) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return value


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None
    minimum: float | None = None


KEYS: tuple[Key, ...] = (
    Key("seed", _u64, 0, "master seed; every component derives its own stream from it"),
    Key("threads", int, 1, "evaluation worker threads", minimum=1),
    Key("out", str, "out", "output directory"),
    Key("task", str, "entity", "entity prediction or relation prediction (needs model.score=linear)",
        choices=("entity", "relation")),
    Key("data.triplets", str, "", "triplet TSV file to split"),
    Key("data.manifest", str, "", "split manifest directory"),
    Key("data.checkpoint", str, "", "checkpoint to evaluate or predict with"),
    Key("data.init", str, "", "checkpoint to start meta-training from (e.g. pretrain output)"),
    Key("data.support", str, "", "support triplets for predict (TSV names)"),
    Key("data.queries", str, "", "partial triplets for predict, '?' marks the slot to fill"),
    Key("split.min_degree", int, 10, "lower bound on raw triplet count of unseen entities", minimum=1),
    Key("split.max_degree", int, 100, "upper bound on raw triplet count of unseen entities", minimum=1),
    Key("split.n_unseen", int, 5000, "number of unseen entities", minimum=1),
    Key("split.ratios", _ratios, (2500, 1000, 1500), "train,valid,test proportions"),
    Key("split.add_inverses", _bool, True, "add inverse relations"),
    Key("model.dim", int, 100, "embedding dimension", minimum=1),
    Key("model.n_bases", int, 100, "number of weight bases", minimum=1),
    Key("model.score", str, "distmult", "score function", choices=SCORE_KINDS),
    Key("model.hidden", _optional_int, None, "hidden width of the linear head (none = 2 * dim, 0 = single layer)"),
    Key("model.dropout", float, 0.3, "dropout rate", minimum=0.0),
    Key("model.mode", str, "transductive", "embedding layers", choices=("inductive", "transductive")),
    Key("model.stochastic", _bool, True, "sample transductive embeddings from the learned Gaussian"),
    Key("pretrain.steps", int, 1000, "in-graph pretraining steps", minimum=0),
    Key("pretrain.batch", int, 512, "pretraining batch size", minimum=1),
    Key("pretrain.lr", float, 1e-2, "pretraining learning rate"),
    Key("train.lr", float, 1e-3, "meta-training learning rate"),
    Key("train.margin", float, 1.0, "hinge margin"),
    Key("train.num_neg", int, 32, "negatives per query triplet", minimum=1),
    Key("train.mc_samples", int, 1, "Monte Carlo samples per training query", minimum=1),
    Key("train.shots", int, 3, "support size K", minimum=1),
    Key("train.n_task_entities", int, 500, "unseen entities per episode", minimum=1),
    Key("train.max_iteration", int, 10000, "meta-training episodes", minimum=0),
    Key("train.curriculum", _bool, True, "start many-shot and decay to K"),
    Key("train.eval_every", int, 100, "episodes between validation runs (0 disables)", minimum=0),
    Key("train.patience", int, 10, "validation runs without improvement before stopping (0 disables)", minimum=0),
    Key("train.train_embeddings", _bool, True, "update entity and relation embeddings during meta-training"),
    Key("eval.meta_set", str, "test", "meta-set to evaluate", choices=("valid", "test")),
    Key("eval.mc_samples", int, 10, "Monte Carlo samples per test query", minimum=1),
    Key("eval.tie_rule", str, "mean", "tie rule used for model selection and the summary line",
        choices=("optimistic", "pessimistic", "mean")),
    Key("eval.ranks_csv", _bool, False, "also write per-query ranks as CSV"),
    Key("predict.top_k", int, 10, "completions per query", minimum=1),
)
KEY_INDEX = {k.name: k for k in KEYS}
DEFAULTS = {k.name: k.default for k in KEYS}


def read_config_file(path) -> dict[str, str]:
    """Raw ``key -> text`` pairs from a config file."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__", delimiters=("=",),
                                       comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_ROOT}]\n" + path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            out[key if section == _ROOT else f"{section}.{key}"] = value
    return out


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict[str, Any]:
    """Merge defaults, file values and overrides; parse and validate every key.

    All problems are collected and raised together.
    """
    merged: dict[str, Any] = dict(DEFAULTS)
    problems = []
    for source in (file_values or {}, overrides or {}):
        for name, raw in source.items():
            if raw is None:
                continue
            key = KEY_INDEX.get(name)
            if key is None:
                problems.append(f"{name}: unknown key")
                continue
            try:
                merged[name] = key.parse(raw) if isinstance(raw, str) else raw
            except (TypeError, ValueError) as exc:
                problems.append(f"{name}: {exc}")
    for key in KEYS:
        value = merged[key.name]
        if key.choices is not None and value not in key.choices:
            problems.append(f"{key.name}: must be one of {', '.join(key.choices)} (got {value!r})")
        if key.minimum is not None and isinstance(value, (int, float)) and value < key.minimum:
            problems.append(f"{key.name}: must be >= {key.minimum} (got {value})")
    if not problems:
        if merged["split.min_degree"] > merged["split.max_degree"]:
            problems.append("split.max_degree: must be >= split.min_degree")
        if merged["model.dropout"] >= 1.0:
            problems.append("model.dropout: must be < 1")
        for name in ("train.lr", "pretrain.lr", "train.margin"):
            if merged[name] <= 0:
                problems.append(f"{name}: must be > 0")
        if (merged["task"] == "relation") != (merged["model.score"] == "linear"):
            problems.append("task: relation prediction requires model.score=linear and vice versa")
    if problems:
        raise ConfigError(problems)
    return merged


def hyperparams(cfg: dict):
    from .train import HyperParams

    return HyperParams(
        dim=cfg["model.dim"], n_bases=cfg["model.n_bases"], lr=cfg["train.lr"], margin=cfg["train.margin"],
        num_neg=cfg["train.num_neg"], mc_train=cfg["train.mc_samples"], mc_test=cfg["eval.mc_samples"],
        shots=cfg["train.shots"], n_task_entities=cfg["train.n_task_entities"],
        max_iteration=cfg["train.max_iteration"], curriculum=cfg["train.curriculum"], dropout=cfg["model.dropout"],
        score=cfg["model.score"], hidden=cfg["model.hidden"], mode=cfg["model.mode"],
        stochastic=cfg["model.stochastic"], eval_every=cfg["train.eval_every"], patience=cfg["train.patience"],
        pretrain_steps=cfg["pretrain.steps"], pretrain_batch=cfg["pretrain.batch"], pretrain_lr=cfg["pretrain.lr"],
        train_embeddings=cfg["train.train_embeddings"], seed=cfg["seed"],
    )
