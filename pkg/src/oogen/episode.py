"""Meta-learning tasks: support/query sampling, negative sampling and the shot curriculum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import TripletIndex, Vocabulary


class EpisodeError(RuntimeError):
    pass


@dataclass
class Task:
    """N unseen entities, each with a support (at most K triplets) and a query set.

    ``support[i]`` and ``query[i]`` partition the raw triplets of ``entities[i]``.
    """

    entities: list
    support: list
    query: list
    shot_size: int

    def __len__(self) -> int:
        return len(self.entities)

    def open_queries(self) -> list[np.ndarray]:
        """Queries with every triplet that sits in some task entity's support removed.

        A triplet between two task entities can land in one entity's support and
        the other's query; scoring it would leak the answer.
        """
        revealed = {tuple(row) for s in self.support for row in s.tolist()}
        out = []
        for q in self.query:
            keep = [i for i, row in enumerate(q.tolist()) if tuple(row) not in revealed]
            out.append(q[keep])
        return out


def raw_rows(rows: np.ndarray, vocab: Vocabulary | None) -> np.ndarray:
    if vocab is None or not vocab.add_inverses:
        return rows
    return rows[rows[:, 1] < vocab.n_raw_relations]


def sample_task(meta_set, n_entities: int, shots: int, rng, vocab: Vocabulary | None = None) -> Task:
    """Sample ``n_entities`` distinct entities and split each one's triplets.

    Support size is ``min(shots, M_i - 1)`` so the query is never empty.
    Entities with fewer than two raw triplets are not eligible.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    pool = [(e, raw_rows(rows, vocab)) for e, rows in meta_set]
    pool = [(e, rows) for e, rows in pool if len(rows) >= 2]
    if len(pool) < n_entities:
        raise EpisodeError(f"requested {n_entities} entities but only {len(pool)} are eligible")
    picked = rng.choice(len(pool), size=n_entities, replace=False)
    entities, support, query = [], [], []
    for idx in picked.tolist():
        e, rows = pool[idx]
        perm = rng.permutation(len(rows))
        k = min(shots, len(rows) - 1)
        entities.append(int(e))
        support.append(rows[perm[:k]])
        query.append(rows[perm[k:]])
    return Task(entities, support, query, shots)


def evaluation_task(meta_set, shots: int, seed: int, vocab: Vocabulary | None = None) -> Task:
    """Deterministic task over every entity of a meta-set.

    Each entity's support is the first ``min(shots, M_i - 1)`` triplets of a
    shuffle seeded by ``(seed, entity)``.
    """
    entities, support, query = [], [], []
    for e, rows in meta_set:
        rows = raw_rows(rows, vocab)
        if len(rows) < 2:
            continue
        perm = np.random.default_rng([seed, int(e)]).permutation(len(rows))
        k = min(shots, len(rows) - 1)
        entities.append(int(e))
        support.append(rows[perm[:k]])
        query.append(rows[perm[k:]])
    return Task(entities, support, query, shots)


def curriculum_shots(iteration: int, max_iteration: int, shots: int, enabled: bool = True) -> int:
    """Shot count ``floor(log2(max_iteration / iteration)) + shots``, or ``shots`` when disabled."""
    if not 1 <= iteration <= max_iteration:
        raise ValueError("need 1 <= iteration <= max_iteration")
    if not enabled:
        return shots
    # floor(log2(x)) == floor(log2(floor(x))) for x >= 1; integer math avoids rounding
    return (max_iteration // iteration).bit_length() - 1 + shots


def corruption_slot(triplet, entity: int) -> int:
    """Column (0 = head, 2 = tail) to corrupt: the one not holding ``entity``."""
    h, _, t = (int(x) for x in triplet)
    if t != entity:
        return 2
    if h != entity:
        return 0
    return 2


class NegativeSampler:
    """Draws corrupted triplets from a pool of candidate entities, rejecting known positives."""

    max_attempts = 1000

    def __init__(self, candidates, known, n_entities: int, n_relations: int, rng):
        self.candidates = np.asarray(candidates, dtype=np.int64)
        if not len(self.candidates):
            raise EpisodeError("empty candidate pool")
        self.known = known if isinstance(known, TripletIndex) else TripletIndex(known, n_entities, n_relations)
        self.rng = rng

    def is_known(self, rows: np.ndarray) -> np.ndarray:
        return self.known.contains(rows)

    def corrupt(self, triplet, entity: int, num_neg: int) -> np.ndarray:
        """``num_neg`` corruptions of ``triplet`` in the slot opposite ``entity``."""
        triplet = np.asarray(triplet, dtype=np.int64)
        slot = corruption_slot(triplet, entity)
        out = np.empty((0, 3), dtype=np.int64)
        attempts = 0
        while len(out) < num_neg:
            need = num_neg - len(out)
            if attempts >= self.max_attempts * num_neg:
                raise EpisodeError(
                    f"could not draw {num_neg} negatives for {tuple(triplet.tolist())} "
                    f"within {self.max_attempts} attempts per sample"
                )
            draw = self.rng.choice(self.candidates, size=max(need, 4))
            attempts += len(draw)
            rows = np.repeat(triplet[None], len(draw), axis=0)
            rows[:, slot] = draw
            ok = (draw != triplet[slot]) & ~self.is_known(rows)
            out = np.concatenate([out, rows[ok][:need]])
        return out

    def corrupt_many(self, triplets: np.ndarray, entity: int, num_neg: int) -> np.ndarray:
        """Stacked negatives, shape ``(len(triplets), num_neg, 3)``."""
        if not len(triplets):
            return np.zeros((0, num_neg, 3), dtype=np.int64)
        return np.stack([self.corrupt(q, entity, num_neg) for q in triplets])


def corrupt(q, unseen: int, candidates, known_positives, num_neg: int, rng,
            n_entities: int | None = None, n_relations: int | None = None) -> np.ndarray:
    """One-off corruption of a single query triplet (see :class:`NegativeSampler`)."""
    known = list(known_positives)
    if n_entities is None:
        n_entities = int(max([*np.ravel(candidates).tolist(), q[0], q[2]] + [max(k[0], k[2]) for k in known]) + 1)
    if n_relations is None:
        n_relations = int(max([q[1]] + [k[1] for k in known]) + 1)
    sampler = NegativeSampler(candidates, known, n_entities, n_relations, rng)
    return sampler.corrupt(q, unseen, num_neg)
