"""Losses, gradients, Adam, in-graph pretraining and episodic meta-training."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .episode import NegativeSampler, Task, curriculum_shots, sample_task
from .graph import TripletIndex, Vocabulary
from .model import (
    ModelConfig,
    ModelParams,
    build_support_index,
    embed_task,
    pair_logits,
    position_lookup,
    score_rows,
    triplet_vectors,
)
from .split import OOGSplit
from .utils import derive_rng

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class HyperParams:
    dim: int = 100
    n_bases: int = 100
    lr: float = 1e-3
    margin: float = 1.0
    num_neg: int = 32
    mc_train: int = 1
    mc_test: int = 10
    shots: int = 3
    n_task_entities: int = 500
    max_iteration: int = 10000
    curriculum: bool = True
    dropout: float = 0.3
    score: str = "distmult"
    hidden: int | None = None
    mode: str = "transductive"
    stochastic: bool = True
    eval_every: int = 100
    patience: int = 10
    pretrain_steps: int = 0
    pretrain_batch: int = 512
    pretrain_lr: float = 1e-2
    train_embeddings: bool = True
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.lr <= 0:
            problems.append("lr must be > 0")
        if self.margin <= 0:
            problems.append("margin must be > 0")
        if self.num_neg < 1:
            problems.append("num_neg must be >= 1")
        if self.mc_train < 1 or self.mc_test < 1:
            problems.append("MC sample sizes must be >= 1")
        if self.mode not in ("inductive", "transductive"):
            problems.append("mode must be 'inductive' or 'transductive'")
        if self.shots < 1:
            problems.append("shots must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def transductive(self) -> bool:
        return self.mode == "transductive"

    @property
    def loss_kind(self) -> str:
        return "bce" if self.score == "linear" else "hinge"

    def model_config(self, vocab: Vocabulary) -> ModelConfig:
        return ModelConfig.for_vocab(vocab, dim=self.dim, n_bases=self.n_bases, score=self.score,
                                     dropout=self.dropout, hidden=self.hidden)

    def to_dict(self) -> dict:
        return asdict(self)


# --- losses -----------------------------------------------------------------

def hinge_loss(pos_scores, neg_scores, margin: float) -> float:
    """``sum max(margin - s_pos + s_neg, 0)`` over every (positive, negative) pair."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(len(pos), -1)
    if neg.shape[1] == 0:
        raise ValueError("each positive needs at least one negative")
    return float(np.maximum(margin - pos[:, None] + neg, 0.0).sum())


def bce_loss(logits, labels) -> float:
    """Mean sigmoid cross-entropy in the stable ``softplus(x) - y x`` form."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("logits and labels must have the same shape")
    with np.errstate(invalid="ignore"):
        per = np.logaddexp(0.0, x) - np.where(y != 0, y * x, 0.0)
    return float(per.mean())


# --- episodes ---------------------------------------------------------------

@dataclass
class Episode:
    """Arrays describing one task for the loss: supports, queries, negatives and weights."""

    task: Task
    support: object
    pos_lookup: np.ndarray
    rows: np.ndarray            # hinge: positives (n, 3); bce: pair rows (n, 3)
    self_pos: np.ndarray
    weights: np.ndarray
    negatives: np.ndarray | None = None
    labels: np.ndarray | None = None


def prepare_episode(task: Task, vocab: Vocabulary, sampler: NegativeSampler | None, num_neg: int,
                    loss_kind: str = "hinge") -> Episode:
    """Assemble loss inputs; entities whose open query set is empty contribute no loss terms.

    Weights implement the per-entity average over queries (and negatives),
    then the average over contributing entities.
    """
    idx = build_support_index(task.entities, task.support, vocab)
    queries = task.open_queries()
    active = [i for i, q in enumerate(queries) if len(q)]
    n_active = max(len(active), 1)
    rows, self_pos, weights, negs, labels = [], [], [], [], []
    for i in active:
        e, q = task.entities[i], queries[i]
        if loss_kind == "hinge":
            rows.append(q)
            self_pos.append(np.full(len(q), i))
            weights.append(np.full(len(q), 1.0 / (len(q) * num_neg * n_active)))
            negs.append(sampler.corrupt_many(q, e, num_neg))
        else:
            pairs: dict[tuple, list] = {}
            for h, r, t in q.tolist():
                pairs.setdefault((h, t), []).append(r)
            for (h, t), rels in pairs.items():
                lab = np.zeros(vocab.n_raw_relations)
                lab[rels] = 1.0
                rows.append(np.array([[h, 0, t]]))
                labels.append(lab)
                self_pos.append(np.array([i]))
            weights.append(np.full(len(pairs), 1.0 / (len(pairs) * vocab.n_raw_relations * n_active)))
    cat = (lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape, dtype=np.int64))
    return Episode(
        task=task,
        support=idx,
        pos_lookup=position_lookup(task.entities, vocab.n_entities),
        rows=cat(rows, (0, 3)),
        self_pos=cat(self_pos, (0,)),
        weights=np.concatenate(weights) if weights else np.zeros(0),
        negatives=cat(negs, (0, num_neg, 3)) if loss_kind == "hinge" else None,
        labels=np.stack(labels) if labels else (None if loss_kind == "hinge" else np.zeros((0, vocab.n_raw_relations))),
    )


def episode_loss(P: dict, cfg: ModelConfig, ep: Episode, seen_mask: np.ndarray, rng, *,
                 transductive: bool, stochastic: bool, margin: float, dropout_mode: str = "train",
                 freeze_sigma: bool = False):
    """Scalar loss Var for one episode (L = 1 Monte Carlo sample)."""
    emb = embed_task(P, ep.support, seen_mask, transductive=transductive, stochastic=stochastic,
                     dropout=cfg.dropout, dropout_mode=dropout_mode, rng=rng,
                     relation_half=cfg.score != "linear", freeze_sigma=freeze_sigma)
    table = emb.final
    if len(ep.rows) == 0:
        return ad.sum(table * 0.0)
    if cfg.score == "linear":
        h, t = triplet_vectors(P, ep.rows, ep.self_pos, ep.pos_lookup, seen_mask, table, transductive)
        x = pair_logits(P, h, t)
        per = ad.softplus(x) - x * ep.labels
        return ad.sum(ad.sum(per, axis=1) * ep.weights)
    n, k = ep.negatives.shape[:2]
    h, t = triplet_vectors(P, ep.rows, ep.self_pos, ep.pos_lookup, seen_mask, table, transductive)
    s_pos = score_rows(P, cfg.score, h, ep.rows[:, 1], t)
    flat = ep.negatives.reshape(-1, 3)
    nh, nt = triplet_vectors(P, flat, np.repeat(ep.self_pos, k), ep.pos_lookup, seen_mask, table, transductive)
    s_neg = ad.reshape(score_rows(P, cfg.score, nh, flat[:, 1], nt), (n, k))
    margins = ad.relu(ad.reshape(margin - s_pos, (n, 1)) + s_neg)
    return ad.sum(ad.sum(margins, axis=1) * ep.weights)


def loss_and_grad(params: ModelParams, ep: Episode, seen_mask, rng, n_samples: int = 1, **kw) -> tuple[float, dict]:
    """Loss value and exact gradients for every parameter tensor (zeros where untouched).

    With ``n_samples > 1`` the loss is the mean over that many stochastic passes.
    """
    P = params.as_vars()
    loss = episode_loss(P, params.config, ep, seen_mask, rng, **kw)
    for _ in range(n_samples - 1):
        loss = loss + episode_loss(P, params.config, ep, seen_mask, rng, **kw)
    if n_samples > 1:
        loss = loss * (1.0 / n_samples)
    g = ad.grad(loss, wrt=list(P.values()))
    grads = {name: g[var] for name, var in P.items()}
    for name, arr in grads.items():
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite gradient in {name}")
    return float(loss.value), grads


# --- optimizer ----------------------------------------------------------------

class Adam:
    """Adam with bias correction.

    Tensors named in ``sparse`` are updated lazily: rows with an all-zero
    gradient keep their values and moments.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 sparse=("entity_emb", "relation_emb")):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.sparse = frozenset(sparse)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, frozen=()) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name in frozen:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v, p = self.m[name], self.v[name], params[name]
            if name in self.sparse and g.ndim == 2:
                rows = np.flatnonzero(np.any(g != 0.0, axis=1))
                if not len(rows):
                    continue
                gr = g[rows]
                m[rows] = self.beta1 * m[rows] + (1.0 - self.beta1) * gr
                v[rows] = self.beta2 * v[rows] + (1.0 - self.beta2) * gr * gr
                p[rows] -= self.lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + self.eps)
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "lr": self.lr}


def adam_step(params: dict, grads: dict, opt: Adam, lr: float | None = None) -> None:
    if lr is not None:
        opt.lr = lr
    opt.step(params, grads)


# --- pretraining on the in-graph ------------------------------------------------

def _pretrain_loss(P, cfg: ModelConfig, pos: np.ndarray, neg: np.ndarray, margin: float):
    h = ad.take(P["entity_emb"], pos[:, 0])
    t = ad.take(P["entity_emb"], pos[:, 2])
    s_pos = score_rows(P, cfg.score, h, pos[:, 1], t)
    nh = ad.take(P["entity_emb"], neg[:, 0])
    nt = ad.take(P["entity_emb"], neg[:, 2])
    s_neg = score_rows(P, cfg.score, nh, neg[:, 1], nt)
    return ad.sum(ad.relu(margin - s_pos + s_neg)) * (1.0 / len(pos))


def _pretrain_pairs_loss(P, pairs: np.ndarray, labels: np.ndarray):
    h = ad.take(P["entity_emb"], pairs[:, 0])
    t = ad.take(P["entity_emb"], pairs[:, 1])
    x = pair_logits(P, h, t)
    return ad.sum(ad.softplus(x) - x * labels) * (1.0 / labels.size)


def _corrupt_uniform(rows: np.ndarray, candidates: np.ndarray, known: TripletIndex, rng) -> np.ndarray:
    out = rows.copy()
    slot = np.where(rng.random(len(rows)) < 0.5, 0, 2)
    todo = np.arange(len(rows))
    for _ in range(100):
        if not len(todo):
            break
        draw = rng.choice(candidates, size=len(todo))
        out[todo, slot[todo]] = draw
        bad = known.contains(out[todo]) | (draw == rows[todo, slot[todo]])
        todo = todo[bad]
    return out


def pretrain_in_graph(params: ModelParams, split: OOGSplit, hp: HyperParams, steps: int | None = None,
                      rng=None, eval_every: int = 0, eval_size: int = 2048) -> tuple[ModelParams, list]:
    """Fit entity and relation embeddings on in-graph triplets only.

    Hinge loss with uniform head/tail corruption for TransE/DistMult; pairwise
    sigmoid cross-entropy for the linear head. Unseen entities stay at zero.
    Returns the trained copy and a list of ``(step, loss)`` evaluations on a
    fixed sample.
    """
    steps = hp.pretrain_steps if steps is None else steps
    params = params.copy()
    if steps <= 0:
        return params, []
    rng = rng if rng is not None else derive_rng(hp.seed, "pretrain")
    cfg = params.config
    vocab = split.vocab
    rows = split.in_graph.triplets
    if not len(rows):
        raise ValueError("in-graph is empty")
    seen = np.flatnonzero(split.seen_mask())
    known = TripletIndex(split.in_graph.triplet_set(), vocab.n_entities, vocab.n_relations)
    trainable = ["entity_emb", "relation_emb"] if cfg.score != "linear" else \
        ["entity_emb"] + [n for n in params.names() if n.startswith("head_")]
    opt = Adam(lr=hp.pretrain_lr)

    if cfg.score == "linear":
        raw = rows[rows[:, 1] < vocab.n_raw_relations]
        pair_index: dict[tuple, list] = {}
        for h, r, t in raw.tolist():
            pair_index.setdefault((h, t), []).append(r)
        pairs = np.array(list(pair_index), dtype=np.int64)
        labels = np.zeros((len(pairs), vocab.n_raw_relations))
        for i, rels in enumerate(pair_index.values()):
            labels[i, rels] = 1.0

        def batch_loss(P, sel):
            return _pretrain_pairs_loss(P, pairs[sel], labels[sel])

        n_items = len(pairs)
        fixed = np.arange(min(eval_size, n_items))

        def eval_loss(P):
            return _pretrain_pairs_loss(P, pairs[fixed], labels[fixed])
    else:
        fixed_pos = rows[:min(eval_size, len(rows))]
        fixed_neg = _corrupt_uniform(fixed_pos, seen, known, np.random.default_rng(0))

        def batch_loss(P, sel):
            pos = rows[sel]
            return _pretrain_loss(P, cfg, pos, _corrupt_uniform(pos, seen, known, rng), hp.margin)

        n_items = len(rows)

        def eval_loss(P):
            return _pretrain_loss(P, cfg, fixed_pos, fixed_neg, hp.margin)

    history = []
    for step in range(1, steps + 1):
        sel = rng.choice(n_items, size=min(hp.pretrain_batch, n_items), replace=False)
        P = params.as_vars()
        loss = batch_loss(P, sel)
        if not np.isfinite(loss.value):
            raise DivergenceError(f"pretraining loss became non-finite at step {step}")
        g = ad.grad(loss, wrt=[P[n] for n in trainable])
        opt.step(params.tensors, {n: g[P[n]] for n in trainable})
        if eval_every and step % eval_every == 0:
            history.append((step, float(eval_loss(params.as_vars()).value)))
    params.tensors["entity_emb"][~split.seen_mask()] = 0.0
    return params, history


# --- meta-training ------------------------------------------------------------

@dataclass
class TrainingResult:
    params: ModelParams
    log: list = field(default_factory=list)
    best_metric: float | None = None
    best_episode: int = 0
    optimizer: Adam | None = None


def meta_train(split: OOGSplit, hp: HyperParams, params: ModelParams | None = None,
               validate=None, callback=None) -> TrainingResult:
    """Episodic meta-training.

    Each episode samples a task from the meta-train set (shots from the
    curriculum when enabled), embeds its entities, scores the open queries
    against negatives and takes one Adam step. ``validate(params)`` returns a
    higher-is-better metric; the best-scoring parameters are returned and
    training stops after ``hp.patience`` evaluations without improvement.
    """
    vocab = split.vocab
    seen_mask = split.seen_mask()
    if params is None:
        params = ModelParams.initialize(hp.model_config(vocab), derive_rng(hp.seed, "init"), seen_mask)
    params = params.copy()
    result = TrainingResult(params=params.copy())
    if hp.max_iteration <= 0:
        return result

    task_rng = derive_rng(hp.seed, "episode")
    model_rng = derive_rng(hp.seed, "model")
    sampler = None
    if hp.loss_kind == "hinge":
        known = split.known_triplets(("train",))
        sampler = NegativeSampler(np.flatnonzero(seen_mask), known, vocab.n_entities, vocab.n_relations,
                                  derive_rng(hp.seed, "negatives"))
    opt = Adam(lr=hp.lr)
    frozen = () if hp.train_embeddings else ("entity_emb", "relation_emb")
    train_set = split.meta_sets["train"]
    eligible = sum(1 for _, rows in train_set if _n_raw(rows, vocab) >= 2)
    n_task = min(hp.n_task_entities, eligible)
    best = None
    stale = 0
    for it in range(1, hp.max_iteration + 1):
        shots = curriculum_shots(it, hp.max_iteration, hp.shots, hp.curriculum)
        task = sample_task(train_set, n_task, shots, task_rng, vocab)
        ep = prepare_episode(task, vocab, sampler, hp.num_neg, hp.loss_kind)
        loss, grads = loss_and_grad(params, ep, seen_mask, model_rng, hp.mc_train, transductive=hp.transductive,
                                    stochastic=hp.stochastic, margin=hp.margin)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became non-finite at episode {it}")
        opt.step(params.tensors, grads, frozen=frozen)
        record = {"episode": it, "loss": loss, "shots": shots}
        if validate is not None and hp.eval_every and (it % hp.eval_every == 0 or it == hp.max_iteration):
            metric = float(validate(params))
            record["val_metric"] = metric
            if best is None or metric > best:
                best = metric
                stale = 0
                result.params = params.copy()
                result.best_metric = metric
                result.best_episode = it
            else:
                stale += 1
        result.log.append(record)
        if callback is not None:
            callback(record)
        if validate is not None and hp.patience and stale >= hp.patience:
            logger.info("early stopping at episode %d", it)
            break
    if validate is None:
        result.params = params.copy()
        result.best_episode = len(result.log)
    result.optimizer = opt
    return result


def _n_raw(rows: np.ndarray, vocab: Vocabulary) -> int:
    if not vocab.add_inverses:
        return len(rows)
    return int(np.count_nonzero(rows[:, 1] < vocab.n_raw_relations))


def clone_hp(hp: HyperParams, **changes) -> HyperParams:
    new = copy.copy(hp)
    for k, v in changes.items():
        setattr(new, k, v)
    new.__post_init__()
    return new
