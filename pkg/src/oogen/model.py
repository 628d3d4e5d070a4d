"""Graph extrapolation layers, score functions and stochastic embeddings.

Forward computations are written against :mod:`oogen.autodiff` so the same
code serves training (with gradients) and inference (values only).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .episode import Task, corruption_slot
from .graph import Vocabulary

SCORE_KINDS = ("transe", "distmult", "linear")
SIGMA_FLOOR = 1e-4
DROPOUT_MODES = ("train", "mc_test", "off")


@dataclass(frozen=True)
class ModelConfig:
    n_entities: int
    n_relations: int
    n_raw_relations: int
    dim: int = 100
    n_bases: int = 100
    score: str = "distmult"
    dropout: float = 0.3
    hidden: int | None = None

    def __post_init__(self):
        if self.score not in SCORE_KINDS:
            raise ValueError(f"score must be one of {SCORE_KINDS}, got {self.score!r}")
        if self.dim <= 0 or self.n_bases < 1:
            raise ValueError("dim and n_bases must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def hidden_width(self) -> int:
        return 2 * self.dim if self.hidden is None else self.hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def for_vocab(cls, vocab: Vocabulary, **kw) -> "ModelConfig":
        return cls(vocab.n_entities, vocab.n_relations, vocab.n_raw_relations, **kw)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Tensor names and shapes, in the canonical (checkpoint) order."""
    d, b, r = cfg.dim, cfg.n_bases, cfg.n_relations
    shapes = {
        "entity_emb": (cfg.n_entities, d),
        "relation_emb": (r, d),
        "ind_bases": (b, d, 2 * d),
        "ind_coeffs": (r, b),
        "mu_bases": (b, d, 2 * d),
        "mu_coeffs": (r, b),
        "mu_self": (d, d),
        "sigma_bases": (b, d, 2 * d),
        "sigma_coeffs": (r, b),
        "sigma_self": (d, d),
    }
    if cfg.score == "linear":
        h = cfg.hidden_width
        if h > 0:
            shapes.update(head_w1=(h, 2 * d), head_b1=(h,), head_w2=(cfg.n_raw_relations, h))
        else:
            shapes.update(head_w2=(cfg.n_raw_relations, 2 * d))
        shapes["head_b2"] = (cfg.n_raw_relations,)
    return shapes


class ModelParams:
    """All learnable tensors of the model, keyed by name."""

    def __init__(self, config: ModelConfig, tensors: dict):
        shapes = param_shapes(config)
        if set(tensors) != set(shapes):
            raise ValueError(f"tensor names {sorted(tensors)} do not match {sorted(shapes)}")
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self.tensors = {name: np.asarray(tensors[name], dtype=np.float64) for name in shapes}

    @classmethod
    def initialize(cls, config: ModelConfig, rng, seen_mask=None) -> "ModelParams":
        """Random initialization; entities outside ``seen_mask`` start as zero vectors."""
        d, b = config.dim, config.n_bases
        scale = 1.0 / np.sqrt(d)
        t = {}
        t["entity_emb"] = rng.normal(0.0, scale, (config.n_entities, d))
        if seen_mask is not None:
            t["entity_emb"][~np.asarray(seen_mask, dtype=bool)] = 0.0
        t["relation_emb"] = rng.normal(0.0, scale, (config.n_relations, d))
        for prefix in ("ind", "mu", "sigma"):
            t[f"{prefix}_bases"] = rng.normal(0.0, np.sqrt(1.0 / (2 * d)), (b, d, 2 * d))
            t[f"{prefix}_coeffs"] = rng.normal(0.0, 1.0 / np.sqrt(b), (config.n_relations, b))
        # start the mean head near the identity on the inductive embedding
        t["mu_bases"] *= 0.1
        t["mu_self"] = np.eye(d)
        t["sigma_bases"] *= 0.1
        t["sigma_self"] = np.zeros((d, d))
        if config.score == "linear":
            h = config.hidden_width
            if h > 0:
                t["head_w1"] = rng.normal(0.0, np.sqrt(2.0 / (2 * d)), (h, 2 * d))
                t["head_b1"] = np.zeros(h)
                t["head_w2"] = rng.normal(0.0, np.sqrt(1.0 / h), (config.n_raw_relations, h))
            else:
                t["head_w2"] = rng.normal(0.0, np.sqrt(1.0 / (2 * d)), (config.n_raw_relations, 2 * d))
            t["head_b2"] = np.zeros(config.n_raw_relations)
        return cls(config, t)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(param_shapes(self.config))

    def as_vars(self) -> dict[str, ad.Var]:
        return {name: ad.param(self.tensors[name], name=name) for name in self.names()}

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return self.config == other.config and all(
            np.allclose(self.tensors[k], other.tensors[k], **kw) for k in self.names()
        )

    def equal(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.names()
        )


# --- score functions ----------------------------------------------------------

def score(params: ModelParams, h_vec, r: int, t_vec):
    """Score one triplet from explicit head/tail vectors.

    TransE and DistMult return a float; the linear head returns logits over raw
    relations (``r`` is ignored).
    """
    h_vec = np.asarray(h_vec, dtype=np.float64)
    t_vec = np.asarray(t_vec, dtype=np.float64)
    kind = params.config.score
    if kind == "linear":
        return linear_logits_np(params, np.concatenate([h_vec, t_vec]))
    r_vec = params["relation_emb"][r]
    if kind == "transe":
        return float(-np.linalg.norm(h_vec + r_vec - t_vec))
    return float(np.sum(h_vec * r_vec * t_vec))


def linear_logits_np(params: ModelParams, pair: np.ndarray) -> np.ndarray:
    t = params.tensors
    x = pair
    if "head_w1" in t:
        x = np.maximum(x @ t["head_w1"].T + t["head_b1"], 0.0)
    return x @ t["head_w2"].T + t["head_b2"]


def _triplet_scores(P, kind: str, h, r, t):
    """Scores for stacked rows (Vars of shape ``(n, d)``); DistMult and TransE only."""
    if kind == "distmult":
        return ad.sum(h * r * t, axis=1)
    if kind == "transe":
        diff = h + r - t
        return -ad.sqrt(ad.sum(diff * diff, axis=1))
    raise ValueError(f"{kind} does not produce triplet scores")


def _linear_logits(P, pair):
    x = pair
    if "head_w1" in P:
        x = ad.relu(ad.add(ad.matmul(x, ad.transpose(P["head_w1"])), P["head_b1"]))
    return ad.add(ad.matmul(x, ad.transpose(P["head_w2"])), P["head_b2"])


# --- basis-decomposed relation weights ------------------------------------------

def effective_weight(coeffs: np.ndarray, bases: np.ndarray, r: int) -> np.ndarray:
    """``W_r = sum_b coeffs[r, b] * bases[b]`` as a ``d x 2d`` matrix."""
    return np.tensordot(coeffs[r], bases, axes=1)


@dataclass
class SupportIndex:
    """Flattened support entries of a task, sorted canonically within each owner.

    ``rel`` already folds incoming triplets onto the inverse relation, ``nbr``
    is the neighbor entity and ``nbr_pos`` its position in the task (-1 if the
    neighbor is not a task entity).
    """

    owner: np.ndarray
    rel: np.ndarray
    nbr: np.ndarray
    nbr_pos: np.ndarray
    n_owners: int

    def averaging_matrix(self) -> np.ndarray:
        m = np.zeros((self.n_owners, len(self.owner)))
        counts = np.bincount(self.owner, minlength=self.n_owners)
        if np.any(counts == 0):
            raise ValueError("every task entity needs a non-empty support")
        m[self.owner, np.arange(len(self.owner))] = 1.0 / counts[self.owner]
        return m


def support_entries(entity: int, rows: np.ndarray, vocab: Vocabulary | None):
    """``(rel, neighbor)`` pairs for one entity's support triplets."""
    out = []
    for h, r, t in np.asarray(rows).reshape(-1, 3).tolist():
        if h == entity:
            out.append((r, t))
        elif t == entity:
            out.append((vocab.inverse_of(r) if vocab is not None else r, h))
        else:
            raise ValueError(f"support triplet {(h, r, t)} does not contain entity {entity}")
    return out


def build_support_index(entities, supports, vocab: Vocabulary | None) -> SupportIndex:
    pos = {e: i for i, e in enumerate(entities)}
    owner, rel, nbr = [], [], []
    for i, (e, rows) in enumerate(zip(entities, supports)):
        entries = sorted(support_entries(e, rows, vocab))
        if not entries:
            raise ValueError(f"entity {e} has an empty support set")
        for r, n in entries:
            owner.append(i)
            rel.append(r)
            nbr.append(n)
    nbr_pos = [pos.get(n, -1) for n in nbr]
    return SupportIndex(
        np.asarray(owner, dtype=np.int64), np.asarray(rel, dtype=np.int64),
        np.asarray(nbr, dtype=np.int64), np.asarray(nbr_pos, dtype=np.int64), len(entities),
    )


def _aggregate(P, prefix: str, idx: SupportIndex, nbr_vecs, relation_half: bool):
    """Mean over support entries of ``W_r [rel_emb ; nbr_vec]``."""
    n = len(idx.rel)
    if relation_half:
        rel_vecs = ad.take(P["relation_emb"], idx.rel)
    else:
        rel_vecs = ad.Var(np.zeros((n, nbr_vecs.shape[1])))
    c = ad.concat([rel_vecs, nbr_vecs], axis=1)
    uniq, inv = np.unique(idx.rel, return_inverse=True)
    w = ad.einsum("ub,bij->uij", ad.take(P[f"{prefix}_coeffs"], uniq), P[f"{prefix}_bases"])
    msg = ad.einsum("nij,nj->ni", ad.take(w, inv), c)
    return ad.matmul(ad.Var(idx.averaging_matrix()), msg)


def _dropout_mask(shape, rate: float, mode: str, rng) -> np.ndarray | None:
    if mode not in DROPOUT_MODES:
        raise ValueError(f"dropout mode must be one of {DROPOUT_MODES}")
    if mode == "off" or rate == 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def apply_dropout(vec, rate: float, mode: str, rng):
    """Inverted dropout; ``off`` is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must be in [0, 1)")
    mask = _dropout_mask(np.shape(vec.value if isinstance(vec, ad.Var) else vec), rate, mode, rng)
    if mask is None:
        return vec
    return vec * mask


def _neighbor_vectors(P, idx: SupportIndex, seen_mask: np.ndarray, phi=None):
    ent = ad.take(P["entity_emb"], idx.nbr) * seen_mask[idx.nbr][:, None].astype(np.float64)
    if phi is None:
        return ent
    in_task = idx.nbr_pos >= 0
    gathered = ad.take(phi, np.where(in_task, idx.nbr_pos, 0))
    return ent + gathered * in_task[:, None].astype(np.float64)


def inductive_embed(P, idx: SupportIndex, seen_mask, relation_half: bool = True):
    """Inductive layer: unseen neighbors contribute zero entity vectors."""
    return _aggregate(P, "ind", idx, _neighbor_vectors(P, idx, seen_mask), relation_half)


def transductive_embed(P, prefix: str, idx: SupportIndex, seen_mask, phi, relation_half: bool = True):
    """Transductive layer pre-activation: task neighbors contribute their inductive ``phi``, plus ``W_0 phi``."""
    agg = _aggregate(P, prefix, idx, _neighbor_vectors(P, idx, seen_mask, phi), relation_half)
    return agg + ad.matmul(phi, ad.transpose(P[f"{prefix}_self"]))


def sample_embedding(mu, sigma, rng):
    """``mu + sigma * z`` with standard normal ``z`` (numpy arrays)."""
    mu = np.asarray(mu, dtype=np.float64)
    return mu + np.asarray(sigma) * rng.standard_normal(mu.shape)


@dataclass
class TaskEmbedding:
    """Output of the embedding layers for one task (autodiff Vars)."""

    phi: ad.Var
    mu: ad.Var | None = None
    sigma: ad.Var | None = None
    final: ad.Var | None = None


def embed_task(P, idx: SupportIndex, seen_mask, *, transductive: bool, stochastic: bool,
               dropout: float, dropout_mode: str, rng, relation_half: bool = True,
               freeze_sigma: bool = False) -> TaskEmbedding:
    """Run the inductive layer and, if requested, the stochastic transductive layer.

    Random draws happen in a fixed order (inductive mask, mean-head mask,
    sigma-head mask, Gaussian noise) so a re-seeded ``rng`` reproduces a pass.
    With ``freeze_sigma`` the sample is ``mu + 0 * z``.
    """
    ind_mode = "off" if dropout_mode == "mc_test" else dropout_mode
    phi = inductive_embed(P, idx, seen_mask, relation_half)
    phi = apply_dropout(phi, dropout, ind_mode, rng)
    if not transductive:
        return TaskEmbedding(phi=phi, final=phi)
    pre_mu = transductive_embed(P, "mu", idx, seen_mask, phi, relation_half)
    mu = apply_dropout(pre_mu, dropout, dropout_mode, rng)
    if not stochastic:
        return TaskEmbedding(phi=phi, mu=mu, final=mu)
    pre_sigma = transductive_embed(P, "sigma", idx, seen_mask, phi, relation_half)
    pre_sigma = apply_dropout(pre_sigma, dropout, dropout_mode, rng)
    z = rng.standard_normal(mu.shape)
    if freeze_sigma:
        return TaskEmbedding(phi=phi, mu=mu, sigma=ad.Var(np.zeros(mu.shape)), final=mu + np.zeros(mu.shape) * z)
    sigma = ad.softplus(pre_sigma) + SIGMA_FLOOR
    return TaskEmbedding(phi=phi, mu=mu, sigma=sigma, final=mu + sigma * z)


def entity_vectors(P, ids: np.ndarray, seen_mask: np.ndarray, task_pos: np.ndarray, unseen_table,
                   use_task: np.ndarray):
    """Embedding rows for arbitrary entity ids.

    Seen ids read ``entity_emb``; ids flagged in ``use_task`` read
    ``unseen_table[task_pos]``; everything else is the zero vector.
    """
    ids = np.asarray(ids)
    seen = seen_mask[ids]
    ent = ad.take(P["entity_emb"], ids) * seen[..., None].astype(np.float64)
    if unseen_table is None or not np.any(use_task):
        return ent
    rows = ad.take(unseen_table, np.where(use_task, task_pos, 0))
    return ent + rows * use_task[..., None].astype(np.float64)


def position_lookup(entities, n_entities: int) -> np.ndarray:
    """Array mapping entity id to its task position, -1 elsewhere."""
    pos = np.full(n_entities, -1, dtype=np.int64)
    pos[np.asarray(entities, dtype=np.int64)] = np.arange(len(entities))
    return pos


def triplet_vectors(P, rows: np.ndarray, self_pos: np.ndarray, pos_lookup: np.ndarray, seen_mask, unseen_table,
                    transductive: bool):
    """Head and tail vectors for rows whose owning task entity sits at ``self_pos``.

    In inductive mode only the owning entity reads its task embedding; other
    unseen entities are zero vectors.
    """
    rows = np.asarray(rows, dtype=np.int64)
    self_pos = np.asarray(self_pos, dtype=np.int64).reshape(self_pos.shape + (1,) * (rows.ndim - 1 - np.ndim(self_pos)))
    out = []
    for col in (0, 2):
        ids = rows[..., col]
        pos = pos_lookup[ids]
        use = (pos >= 0) & ((pos == self_pos) | transductive)
        out.append(entity_vectors(P, ids, seen_mask, pos, unseen_table, use))
    return out[0], out[1]


def score_rows(P, kind: str, head, rel: np.ndarray, tail):
    """DistMult/TransE scores for row-aligned head/tail Vars and relation ids."""
    r = ad.take(P["relation_emb"], rel)
    return _triplet_scores(P, kind, head, r, tail)


def pair_logits(P, head, tail):
    return _linear_logits(P, ad.concat([head, tail], axis=1))


# --- inference helpers (numpy) ---------------------------------------------------

class EmbeddedTask:
    """Deterministic parts of a task's embeddings, ready for repeated stochastic sampling."""

    def __init__(self, params: ModelParams, task: Task, seen_mask, vocab: Vocabulary | None, *,
                 transductive: bool, stochastic: bool):
        self.params = params
        self.entities = list(task.entities)
        self.pos = {e: i for i, e in enumerate(self.entities)}
        self.seen_mask = np.asarray(seen_mask, dtype=bool)
        self.transductive = transductive
        self.stochastic = stochastic and transductive
        relation_half = params.config.score != "linear"
        P = params.as_vars()
        idx = build_support_index(self.entities, task.support, vocab)
        self.phi = inductive_embed(P, idx, self.seen_mask, relation_half).value
        self.pre_mu = self.pre_sigma = None
        if transductive:
            phi_v = ad.Var(self.phi)
            self.pre_mu = transductive_embed(P, "mu", idx, self.seen_mask, phi_v, relation_half).value
            if self.stochastic:
                self.pre_sigma = transductive_embed(P, "sigma", idx, self.seen_mask, phi_v, relation_half).value

    def mean(self) -> np.ndarray:
        return self.pre_mu if self.transductive else self.phi

    def sample(self, rng, mc_dropout: bool = True) -> np.ndarray:
        """One draw of the unseen embeddings (MC dropout on the transductive heads, then noise)."""
        if not self.stochastic:
            return self.mean()
        rate = self.params.config.dropout if mc_dropout else 0.0
        mode = "mc_test" if mc_dropout else "off"
        mu = apply_dropout(self.pre_mu, rate, mode, rng)
        pre_sigma = apply_dropout(self.pre_sigma, rate, mode, rng)
        sigma = np.logaddexp(0.0, pre_sigma) + SIGMA_FLOOR
        return sample_embedding(mu, sigma, rng)

    def sigma(self) -> np.ndarray | None:
        if self.pre_sigma is None:
            return None
        return np.logaddexp(0.0, self.pre_sigma) + SIGMA_FLOOR

    def vector(self, entity: int, table: np.ndarray, owner: int | None = None) -> np.ndarray:
        """Embedding of ``entity`` given one draw ``table`` of the task embeddings."""
        p = self.pos.get(entity)
        if p is not None and (self.transductive or entity == owner):
            return table[p]
        if entity < len(self.seen_mask) and self.seen_mask[entity]:
            return self.params["entity_emb"][entity]
        return np.zeros(self.params.config.dim)

    def candidate_matrix(self, candidates: np.ndarray, table: np.ndarray, owner: int,
                         cand_pos: np.ndarray | None = None) -> np.ndarray:
        """Rows of candidate embeddings under one draw ``table``."""
        candidates = np.asarray(candidates, dtype=np.int64)
        if cand_pos is None:
            cand_pos = np.array([self.pos.get(c, -1) for c in candidates.tolist()], dtype=np.int64)
        emb = self.params["entity_emb"]
        inside = candidates < len(self.seen_mask)
        seen = np.zeros(len(candidates), dtype=bool)
        seen[inside] = self.seen_mask[candidates[inside]]
        mat = np.zeros((len(candidates), emb.shape[1]))
        mat[seen] = emb[candidates[seen]]
        use = cand_pos >= 0
        if not self.transductive:
            use &= candidates == owner
        mat[use] = table[cand_pos[use]]
        return mat


def candidate_scores(params: ModelParams, fixed_vec: np.ndarray, rel: int, slot: int,
                     cand: np.ndarray) -> np.ndarray:
    """Scores of ``(fixed, rel, c)`` (slot 2) or ``(c, rel, fixed)`` (slot 0) for candidate rows ``cand``."""
    r_vec = params["relation_emb"][rel]
    kind = params.config.score
    if kind == "distmult":
        return cand @ (fixed_vec * r_vec)
    if kind == "transe":
        diff = (fixed_vec + r_vec) - cand if slot == 2 else (cand + r_vec) - fixed_vec
        return -np.sqrt(np.sum(diff * diff, axis=1))
    raise ValueError("candidate ranking needs a triplet score function")


def stochastic_score(params: ModelParams, triplet, embedded: EmbeddedTask, n_samples: int, rng,
                     owner: int | None = None) -> float:
    """Average triplet score over ``n_samples`` draws of the unseen embeddings."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    h, r, t = (int(x) for x in triplet)
    total = 0.0
    for _ in range(n_samples):
        table = embedded.sample(rng)
        total += score(params, embedded.vector(h, table, owner), r, embedded.vector(t, table, owner))
    return total / n_samples


def query_slot(triplet, entity: int) -> int:
    return corruption_slot(triplet, entity)
