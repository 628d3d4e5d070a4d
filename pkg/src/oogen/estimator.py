"""Scikit-learn style wrappers around splitting, meta-training and evaluation."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_choice, check_int, check_split
from .episode import Task, evaluation_task
from .evaluation import TIE_RULES, evaluate_split, rank_split, validation_metric
from .graph import GraphStore, TripletIndex, Vocabulary
from .model import SCORE_KINDS, EmbeddedTask, ModelConfig, ModelParams, candidate_scores, linear_logits_np
from .split import OOGSplit, SplitConfig, make_split
from .train import HyperParams, meta_train, pretrain_in_graph
from .utils import derive_rng


class OOGSplitter(BaseEstimator):
    """Builds an out-of-graph benchmark split from a graph."""

    def __init__(self, min_degree=10, max_degree=100, n_unseen=5000, ratios=(2500, 1000, 1500), seed=0):
        self.min_degree = min_degree
        self.max_degree = max_degree
        self.n_unseen = n_unseen
        self.ratios = ratios
        self.seed = seed

    def fit_transform(self, graph: GraphStore, vocab: Vocabulary) -> OOGSplit:
        cfg = SplitConfig(self.min_degree, self.max_degree, self.n_unseen, tuple(self.ratios), self.seed)
        self.split_ = make_split(graph, vocab, cfg)
        self.stats_ = dict(self.split_.stats)
        return self.split_


class GraphExtrapolationNetwork(BaseEstimator):
    """Meta-learned embedding of unseen entities from a few support triplets.

    ``fit`` optionally pretrains embeddings on the in-graph, then meta-trains
    on the split's ``train`` meta-set with model selection on ``valid``.
    ``transform`` returns unseen-entity embeddings, ``predict`` ranks
    completions of partial triplets and ``score`` reports MRR (ROC-AUC for
    the linear relation head). The triplet score is chosen by
    ``score_function`` so that it does not shadow ``score``.
    """

    def __init__(self, dim=100, n_bases=100, lr=1e-3, margin=1.0, num_neg=32, mc_train=1, mc_test=10, shots=3,
                 n_task_entities=500, max_iteration=10000, curriculum=True, dropout=0.3,
                 score_function="distmult", hidden=None, mode="transductive", stochastic=True, eval_every=100,
                 patience=10, pretrain_steps=0, pretrain_batch=512, pretrain_lr=1e-2, train_embeddings=True, seed=0,
                 threads=1):
        self.dim = dim
        self.n_bases = n_bases
        self.lr = lr
        self.margin = margin
        self.num_neg = num_neg
        self.mc_train = mc_train
        self.mc_test = mc_test
        self.shots = shots
        self.n_task_entities = n_task_entities
        self.max_iteration = max_iteration
        self.curriculum = curriculum
        self.dropout = dropout
        self.score_function = score_function
        self.hidden = hidden
        self.mode = mode
        self.stochastic = stochastic
        self.eval_every = eval_every
        self.patience = patience
        self.pretrain_steps = pretrain_steps
        self.pretrain_batch = pretrain_batch
        self.pretrain_lr = pretrain_lr
        self.train_embeddings = train_embeddings
        self.seed = seed
        self.threads = threads

    def hyperparams(self) -> HyperParams:
        check_choice(self.score_function, "score_function", SCORE_KINDS)
        check_int(self.threads, "threads", 1)
        p = self.get_params()
        p.pop("threads")
        p["score"] = p.pop("score_function")
        return HyperParams(**p)

    @property
    def transductive(self) -> bool:
        return self.mode == "transductive"

    def fit(self, split: OOGSplit, y=None, init_params: ModelParams | None = None, callback=None):
        check_split(split, ("train", "valid"))
        hp = self.hyperparams()
        if init_params is None:
            init_params = ModelParams.initialize(hp.model_config(split.vocab), derive_rng(hp.seed, "init"),
                                                 split.seen_mask())
        elif init_params.config != hp.model_config(split.vocab):
            raise ValueError("init_params were built for a different model configuration")
        params, self.pretrain_history_ = pretrain_in_graph(init_params, split, hp)
        validate = None
        if hp.eval_every and split.entities("valid"):
            validate = lambda p: validation_metric(self._evaluate(p, split, "valid"))  # noqa: E731
        result = meta_train(split, hp, params, validate=validate, callback=callback)
        self.params_ = result.params
        self.optimizer_ = result.optimizer
        self.log_ = result.log
        self.best_metric_ = result.best_metric
        self.best_episode_ = result.best_episode
        self.vocab_hash_ = split.vocab.fingerprint()
        return self

    def _evaluate(self, params, split, meta_set, tie_rule="mean"):
        return evaluate_split(params, split, meta_set, transductive=self.transductive, stochastic=self.stochastic,
                              shots=self.shots, n_samples=self.mc_test, seed=self.seed, tie_rule=tie_rule,
                              threads=self.threads)

    def _check_vocab(self, split):
        check_is_fitted(self, "params_")
        if split.vocab.fingerprint() != self.vocab_hash_:
            raise ValueError("split vocabulary differs from the one the model was fitted on")

    def evaluate(self, split: OOGSplit, meta_set: str = "test", tie_rule: str = "mean"):
        check_split(split, (meta_set,))
        check_choice(tie_rule, "tie_rule", TIE_RULES)
        self._check_vocab(split)
        return self._evaluate(self.params_, split, meta_set, tie_rule)

    def rank(self, split: OOGSplit, meta_set: str = "test"):
        check_split(split, (meta_set,))
        self._check_vocab(split)
        return rank_split(self.params_, split, meta_set, transductive=self.transductive,
                          stochastic=self.stochastic, shots=self.shots, n_samples=self.mc_test, seed=self.seed,
                          threads=self.threads)

    def score(self, split: OOGSplit, y=None, meta_set: str = "valid") -> float:
        return validation_metric(self.evaluate(split, meta_set))

    def transform(self, split: OOGSplit, meta_set: str = "test") -> tuple[list[int], np.ndarray]:
        """Entities of ``meta_set`` and their mean embeddings from deterministic supports."""
        check_split(split, (meta_set,))
        self._check_vocab(split)
        task = evaluation_task(split.meta_sets[meta_set], self.shots, self.seed, split.vocab)
        emb = EmbeddedTask(self.params_, task, split.seen_mask(), split.vocab, transductive=self.transductive,
                           stochastic=self.stochastic)
        return task.entities, emb.mean().copy()

    def predict(self, split: OOGSplit, supports: dict, queries, k: int = 10):
        return predict_completions(self.params_, split, supports, queries, k=k, transductive=self.transductive,
                                   stochastic=self.stochastic, n_samples=self.mc_test, seed=self.seed)


def _extend_params(params: ModelParams, n_extra: int) -> ModelParams:
    if n_extra == 0:
        return params
    cfg = params.config
    new_cfg = ModelConfig(cfg.n_entities + n_extra, cfg.n_relations, cfg.n_raw_relations, cfg.dim, cfg.n_bases,
                          cfg.score, cfg.dropout, cfg.hidden)
    t = dict(params.tensors)
    t["entity_emb"] = np.vstack([t["entity_emb"], np.zeros((n_extra, cfg.dim))])
    return ModelParams(new_cfg, t)


def predict_completions(params: ModelParams, split: OOGSplit, supports: dict, queries, *, k: int = 10,
                        transductive: bool = True, stochastic: bool = True, n_samples: int = 10, seed: int = 0):
    """Top-``k`` completions of partial triplets about unseen entities.

    ``supports`` maps an entity name to its support triplets (name triples);
    names missing from the vocabulary become new zero-initialized entities.
    Each query is ``(head, relation, tail)`` with ``None`` in the slot to fill.
    Candidates are seen entities plus every support-file entity; known
    triplets and support triplets are filtered out. For the linear relation
    head the query is a pair and the result lists the top-``k`` relations.
    Returns one list of ``(name, score)`` per query.
    """
    vocab = split.vocab
    if not supports:
        raise ValueError("need at least one support entity")
    names = list(vocab.entity_names)
    index = {n: i for i, n in enumerate(names)}
    for ent, rows in supports.items():
        for h, _, t in [(ent, None, None), *rows]:
            for n in (h, t):
                if n is not None and n not in index:
                    index[n] = len(names)
                    names.append(n)
    extra = len(names) - vocab.n_entities
    params = _extend_params(params, extra)
    seen = np.concatenate([split.seen_mask(), np.zeros(extra, dtype=bool)])
    task_ents, task_sup = [], []
    for ent, rows in supports.items():
        ids = np.array([[index[h], vocab.relation_id(r), index[t]] for h, r, t in rows], dtype=np.int64)
        if not len(ids):
            raise ValueError(f"entity {ent!r} has an empty support set")
        if seen[index[ent]]:
            raise ValueError(f"entity {ent!r} is part of the in-graph, not an unseen entity")
        task_ents.append(index[ent])
        task_sup.append(ids)
    task = Task(task_ents, task_sup, [np.zeros((0, 3), dtype=np.int64)] * len(task_ents), max(map(len, task_sup)))
    emb = EmbeddedTask(params, task, seen, vocab, transductive=transductive, stochastic=stochastic)
    n_all = len(names)
    known = TripletIndex([*split.known_triplets(), *map(tuple, np.concatenate(task_sup).tolist())], n_all,
                         vocab.n_relations)
    candidates = np.union1d(np.flatnonzero(seen), task_ents)
    cand_pos = np.array([emb.pos.get(c, -1) for c in candidates.tolist()], dtype=np.int64)
    out = []
    for q_idx, (h, r, t) in enumerate(queries):
        rng = np.random.default_rng([seed, q_idx])
        draws = n_samples if emb.stochastic else 1
        if params.config.score == "linear":
            hid, tid = index[h], index[t]
            owner = hid if hid in emb.pos else tid
            total = np.zeros(vocab.n_raw_relations)
            for _ in range(draws):
                table = emb.sample(rng) if emb.stochastic else emb.mean()
                total += linear_logits_np(params, np.concatenate([emb.vector(hid, table, owner),
                                                                  emb.vector(tid, table, owner)]))
            order = np.lexsort((np.arange(len(total)), -total))[:k]
            out.append([(vocab.relation_name(int(i)), float(total[i])) for i in order])
            continue
        if (h is None) == (t is None):
            raise ValueError(f"query {(h, r, t)} must leave exactly one entity slot empty")
        slot = 0 if h is None else 2
        fixed_name = t if slot == 0 else h
        fixed = index[fixed_name]
        owner = fixed if fixed in emb.pos else -1
        rel = vocab.relation_id(r)
        total = np.zeros(len(candidates))
        for _ in range(draws):
            table = emb.sample(rng) if emb.stochastic else emb.mean()
            mat = emb.candidate_matrix(candidates, table, owner, cand_pos)
            total += candidate_scores(params, emb.vector(fixed, table, owner), rel, slot, mat)
        rows = np.repeat(np.array([[fixed, rel, fixed]]), len(candidates), axis=0)
        rows[:, slot] = candidates
        keep = ~known.contains(rows)
        scores = np.where(keep, total / draws, -np.inf)
        order = [i for i in np.lexsort((candidates, -scores)) if keep[i]][:k]
        out.append([(names[candidates[i]], float(scores[i])) for i in order])
    return out

