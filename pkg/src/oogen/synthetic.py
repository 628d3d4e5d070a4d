"""Planted-structure graphs for smoke tests and the desk-scale benchmark."""
from __future__ import annotations

import numpy as np

from .graph import GraphStore, Vocabulary, build_graph
from .split import OOGSplit, SplitConfig, make_split


def planted_graph(n_entities: int = 300, n_clusters: int = 30, n_relations: int = 8, links: int = 1,
                  extra_prob: float = 0.5, seed: int = 0) -> list[tuple[str, str, str]]:
    """Name triples of a clustered graph.

    Every relation pairs clusters through a random involution; each entity
    links to ``links`` (plus one more with probability ``extra_prob``) random
    members of the partner cluster under every relation. An entity's cluster
    is therefore recoverable from any one of its triplets.
    """
    if n_clusters < 2 or n_entities < 2 * n_clusters:
        raise ValueError("need at least two clusters with two members each")
    rng = np.random.default_rng(seed)
    cluster = rng.permutation(np.arange(n_entities) % n_clusters)
    members = [np.flatnonzero(cluster == c) for c in range(n_clusters)]
    rows = []
    for r in range(n_relations):
        order = rng.permutation(n_clusters)
        partner = np.arange(n_clusters)  # an odd cluster out pairs with itself
        for a, b in zip(order[0::2].tolist(), order[1::2].tolist()):
            partner[a], partner[b] = b, a
        for e in range(n_entities):
            pool = members[partner[cluster[e]]]
            pool = pool[pool != e]
            k = links + int(rng.random() < extra_prob)
            for t in rng.choice(pool, size=min(k, len(pool)), replace=False).tolist():
                rows.append((f"e{e:04d}", f"r{r}", f"e{t:04d}"))
    return rows


def synthetic_benchmark(seed: int = 0, n_entities: int = 300, n_relations: int = 8, n_unseen: int = 60,
                        ratios=(40, 5, 15), n_clusters: int = 60) -> tuple[Vocabulary, GraphStore, OOGSplit]:
    """Planted graph plus an out-of-graph split over every entity with at least 4 triplets."""
    rows = planted_graph(n_entities, n_clusters, n_relations, seed=seed)
    vocab, g = build_graph(rows, add_inverses=True)
    cfg = SplitConfig(min_degree=4, max_degree=10 ** 6, n_unseen=n_unseen, ratios=tuple(ratios), seed=seed)
    return vocab, g, make_split(g, vocab, cfg)
