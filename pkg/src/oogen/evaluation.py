"""Filtered ranking metrics, relation-prediction metrics and split evaluation."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import average_precision_score

from .episode import corruption_slot, evaluation_task
from .graph import TripletIndex
from .model import EmbeddedTask, ModelParams, candidate_scores, linear_logits_np
from .split import OOGSplit
from .utils import build_id

TIE_RULES = ("optimistic", "pessimistic", "mean")
HITS_AT = (1, 3, 10)
SEEN_UNSEEN = "seen_unseen"
UNSEEN_UNSEEN = "unseen_unseen"
CATEGORIES = (SEEN_UNSEEN, UNSEEN_UNSEEN)


@dataclass(frozen=True)
class RankResult:
    """Outcome of one ranked query.

    ``greater`` and ``equal`` count surviving candidates scoring strictly above
    and exactly equal to the true triplet, so any tie rule can be applied later.
    """

    triplet: tuple
    slot: int
    greater: int
    equal: int
    category: str
    entity: int = -1

    def rank(self, tie_rule: str = "mean") -> float:
        if tie_rule == "optimistic":
            return 1.0 + self.greater
        if tie_rule == "pessimistic":
            return 1.0 + self.greater + self.equal
        if tie_rule == "mean":
            return 1.0 + self.greater + self.equal / 2.0
        raise ValueError(f"tie_rule must be one of {TIE_RULES}")


def rank_counts(true_score: float, competitor_scores) -> tuple[int, int]:
    s = np.asarray(competitor_scores, dtype=np.float64)
    return int(np.count_nonzero(s > true_score)), int(np.count_nonzero(s == true_score))


def rank_from_scores(true_score: float, competitor_scores, tie_rule: str = "mean") -> float:
    """Rank of ``true_score`` among already-filtered competitors."""
    greater, equal = rank_counts(true_score, competitor_scores)
    return RankResult((), 2, greater, equal, SEEN_UNSEEN).rank(tie_rule)


def _filtered_candidates(query, slot: int, known: TripletIndex, candidates) -> np.ndarray:
    cand = np.asarray(candidates, dtype=np.int64)
    cand = cand[cand != int(query[slot])]
    rows = np.repeat(np.asarray(query, dtype=np.int64)[None], len(cand), axis=0)
    rows[:, slot] = cand
    return rows[~known.contains(rows)] if len(rows) else rows


def filtered_rank(query, slot: int, known: TripletIndex, candidates, scorer, *, category: str = SEEN_UNSEEN,
                  entity: int = -1) -> RankResult:
    """Rank ``query`` against corruptions of ``slot`` that are not known triplets.

    ``scorer(rows)`` scores an ``(n, 3)`` array; the true triplet is scored in
    the same call as its competitors.
    """
    query = tuple(int(x) for x in query)
    rows = _filtered_candidates(query, slot, known, candidates)
    scores = np.asarray(scorer(np.vstack([np.asarray(query)[None], rows])), dtype=np.float64)
    greater, equal = rank_counts(scores[0], scores[1:])
    return RankResult(query, slot, greater, equal, category, entity)


@dataclass
class MetricReport:
    mrr: float
    hits: dict
    count: int
    tie_rule: str = "mean"
    categories: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"mrr": self.mrr, "count": self.count, "tie_rule": self.tie_rule}
        out.update({f"hits@{n}": v for n, v in self.hits.items()})
        for name, sub in self.categories.items():
            out[name] = None if sub is None else sub.to_dict()
        return out


def _summary(ranks: np.ndarray, tie_rule: str) -> MetricReport:
    return MetricReport(
        mrr=float(np.mean(1.0 / ranks)),
        hits={n: float(np.mean(ranks <= n)) for n in HITS_AT},
        count=len(ranks),
        tie_rule=tie_rule,
    )


def aggregate(results, tie_rule: str = "mean") -> MetricReport:
    """MRR and Hits@{1,3,10}, overall and per category (absent categories are ``None``)."""
    results = list(results)
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    ranks = np.array([r.rank(tie_rule) for r in results])
    report = _summary(ranks, tie_rule)
    cats = np.array([r.category for r in results])
    for name in CATEGORIES:
        sel = ranks[cats == name]
        report.categories[name] = _summary(sel, tie_rule) if len(sel) else None
    return report


# --- relation prediction ------------------------------------------------------

@dataclass
class DDIReport:
    roc_auc: float | None
    pr_auc: float | None
    accuracy: float
    count: int

    def to_dict(self) -> dict:
        return {"roc_auc": self.roc_auc, "pr_auc": self.pr_auc, "accuracy": self.accuracy, "count": self.count}


def mann_whitney_counts(scores, labels) -> tuple[int, int, int, int]:
    """``(greater, equal, n_pos, n_neg)``: positive/negative pairs ordered correctly and tied."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], np.sort(s[~y])
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    return int(below.sum()), int((upto - below).sum()), len(pos), len(neg)


def roc_auc_exact(scores, labels) -> float | None:
    """Area under the ROC curve as the normalized Mann-Whitney statistic, ties counted as one half."""
    greater, equal, n_pos, n_neg = mann_whitney_counts(scores, labels)
    if n_pos == 0 or n_neg == 0:
        return None
    return (2 * greater + equal) / (2 * n_pos * n_neg)


def ddi_metrics(logits, labels) -> DDIReport:
    """Micro-averaged ROC/PR over the flattened label matrix, plus argmax accuracy.

    AUCs are computed on logits; the sigmoid is strictly increasing so the
    ordering is the same and saturation cannot create spurious ties.
    """
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or not len(x):
        raise ValueError("logits and labels must be matching non-empty (n, relations) arrays")
    flat_y = y.ravel() > 0
    degenerate = flat_y.all() or not flat_y.any()
    acc = float(np.mean(y[np.arange(len(x)), np.argmax(x, axis=1)] > 0))
    return DDIReport(
        roc_auc=None if degenerate else roc_auc_exact(x.ravel(), flat_y),
        pr_auc=None if degenerate else float(average_precision_score(flat_y, x.ravel())),
        accuracy=acc,
        count=len(x),
    )


# --- split evaluation -----------------------------------------------------------

@dataclass
class SplitContext:
    """Everything query ranking needs that does not depend on the parameters."""

    split: OOGSplit
    meta_set: str
    shots: int
    seed: int
    seen_mask: np.ndarray = field(init=False)
    unseen_mask: np.ndarray = field(init=False)
    known: TripletIndex = field(init=False)
    candidates: np.ndarray = field(init=False)
    task: object = field(init=False)

    def __post_init__(self):
        if self.meta_set not in self.split.meta_sets:
            raise ValueError(f"unknown meta-set {self.meta_set!r}")
        vocab = self.split.vocab
        self.seen_mask = self.split.seen_mask()
        self.unseen_mask = np.zeros(vocab.n_entities, dtype=bool)
        self.unseen_mask[sorted(self.split.unseen())] = True
        self.known = TripletIndex(self.split.known_triplets(), vocab.n_entities, vocab.n_relations)
        self.candidates = np.union1d(np.flatnonzero(self.seen_mask),
                                     np.asarray(self.split.entities(self.meta_set), dtype=np.int64))
        self.task = evaluation_task(self.split.meta_sets[self.meta_set], self.shots, self.seed, vocab)


def _category(triplet, unseen_mask) -> str:
    h, _, t = triplet
    return UNSEEN_UNSEEN if unseen_mask[h] and unseen_mask[t] else SEEN_UNSEEN


def _rank_entity(params: ModelParams, ctx: SplitContext, emb: EmbeddedTask, i: int, queries, n_samples: int,
                 mc_dropout: bool) -> list[RankResult]:
    e = ctx.task.entities[i]
    out = []
    for q_idx, q in enumerate(queries.tolist()):
        slot = corruption_slot(q, e)
        rows = _filtered_candidates(q, slot, ctx.known, ctx.candidates)
        cand = np.concatenate([[q[slot]], rows[:, slot]])
        cand_pos = np.array([emb.pos.get(c, -1) for c in cand.tolist()], dtype=np.int64)
        rng = np.random.default_rng([ctx.seed, e, q_idx])
        draws = n_samples if emb.stochastic else 1
        total = np.zeros(len(cand))
        for _ in range(draws):
            table = emb.sample(rng, mc_dropout) if emb.stochastic else emb.mean()
            fixed = emb.vector(q[2 - slot], table, owner=e)
            total += candidate_scores(params, fixed, q[1], slot, emb.candidate_matrix(cand, table, e, cand_pos))
        scores = total / draws
        greater, equal = rank_counts(scores[0], scores[1:])
        out.append(RankResult(tuple(q), slot, greater, equal, _category(q, ctx.unseen_mask), e))
    return out


def _map_entities(fn, n: int, threads: int) -> list:
    if threads <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def rank_split(params: ModelParams, split: OOGSplit, meta_set: str = "test", *, transductive: bool = True,
               stochastic: bool = True, shots: int = 3, n_samples: int = 10, seed: int = 0, threads: int = 1,
               mc_dropout: bool = True, context: SplitContext | None = None) -> list[RankResult]:
    """Rank every open query of every entity in ``meta_set``.

    Supports are the first ``shots`` triplets of a shuffle seeded per entity;
    scores average ``n_samples`` draws, each with its own MC-dropout masks.
    Results do not depend on ``threads``.
    """
    if params.config.score == "linear":
        raise ValueError("relation-prediction models are evaluated with evaluate_ddi")
    ctx = context if context is not None else SplitContext(split, meta_set, shots, seed)
    if not ctx.task.entities:
        return []
    emb = EmbeddedTask(params, ctx.task, ctx.seen_mask, split.vocab, transductive=transductive,
                       stochastic=stochastic)
    queries = ctx.task.open_queries()
    parts = _map_entities(lambda i: _rank_entity(params, ctx, emb, i, queries[i], n_samples, mc_dropout),
                          len(ctx.task.entities), threads)
    return [r for part in parts for r in part]


def relation_logits(params: ModelParams, split: OOGSplit, meta_set: str = "test", *, transductive: bool = True,
                    stochastic: bool = True, shots: int = 3, n_samples: int = 10, seed: int = 0,
                    mc_dropout: bool = True, context: SplitContext | None = None):
    """Per query pair ``(h, t)``: averaged relation logits and multi-hot labels."""
    ctx = context if context is not None else SplitContext(split, meta_set, shots, seed)
    n_rel = split.vocab.n_raw_relations
    if not ctx.task.entities:
        return np.zeros((0, n_rel)), np.zeros((0, n_rel))
    emb = EmbeddedTask(params, ctx.task, ctx.seen_mask, split.vocab, transductive=transductive,
                       stochastic=stochastic)
    all_logits, all_labels = [], []
    for i, (e, q) in enumerate(zip(ctx.task.entities, ctx.task.open_queries())):
        pairs: dict[tuple, list] = {}
        for h, r, t in q.tolist():
            pairs.setdefault((h, t), []).append(r)
        for p_idx, ((h, t), rels) in enumerate(pairs.items()):
            rng = np.random.default_rng([ctx.seed, e, p_idx])
            draws = n_samples if emb.stochastic else 1
            total = np.zeros(n_rel)
            for _ in range(draws):
                table = emb.sample(rng, mc_dropout) if emb.stochastic else emb.mean()
                pair = np.concatenate([emb.vector(h, table, e), emb.vector(t, table, e)])
                total += linear_logits_np(params, pair)
            lab = np.zeros(n_rel)
            lab[rels] = 1.0
            all_logits.append(total / draws)
            all_labels.append(lab)
    return np.array(all_logits).reshape(-1, n_rel), np.array(all_labels).reshape(-1, n_rel)


def evaluate_split(params: ModelParams, split: OOGSplit, meta_set: str = "test", *, transductive: bool = True,
                   stochastic: bool = True, shots: int = 3, n_samples: int = 10, seed: int = 0,
                   tie_rule: str = "mean", threads: int = 1, context: SplitContext | None = None):
    """MetricReport for entity prediction, DDIReport for the linear relation head."""
    kw = dict(transductive=transductive, stochastic=stochastic, shots=shots, n_samples=n_samples, seed=seed,
              context=context)
    if params.config.score == "linear":
        return ddi_metrics(*relation_logits(params, split, meta_set, **kw))
    return aggregate(rank_split(params, split, meta_set, threads=threads, **kw), tie_rule)


def validation_metric(report) -> float:
    """Higher-is-better selection metric: MRR, or ROC-AUC for relation prediction."""
    if isinstance(report, DDIReport):
        return -np.inf if report.roc_auc is None else report.roc_auc
    return report.mrr


# --- output -------------------------------------------------------------------------

def report_document(results, config: dict | None = None) -> dict:
    """JSON-ready document with every tie rule (or DDI metrics), config echo and build id."""
    doc: dict = {"build": build_id(), "config": config or {}}
    if isinstance(results, DDIReport):
        doc["metrics"] = results.to_dict()
    else:
        doc["metrics"] = {rule: aggregate(results, rule).to_dict() for rule in TIE_RULES}
    return doc


def write_report(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_rank_csv(path, results, vocab=None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "head", "relation", "tail", "slot", "category", *[f"rank_{r}" for r in TIE_RULES]])
        for r in results:
            h, rel, t = r.triplet
            names = (vocab.entity_name(r.entity), vocab.entity_name(h), vocab.relation_name(rel),
                     vocab.entity_name(t)) if vocab is not None else (r.entity, h, rel, t)
            w.writerow([*names, "head" if r.slot == 0 else "tail", r.category,
                        *[r.rank(rule) for rule in TIE_RULES]])
