"""Multi-relational graph storage: triplet files, vocabularies and neighbor indices."""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

OUTGOING = "outgoing"
INCOMING = "incoming"


class TripletFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class Triplet(NamedTuple):
    head: int
    rel: int
    tail: int


class Neighbor(NamedTuple):
    rel: int
    entity: int
    direction: str


def parse_triplet_file(path) -> list[tuple[str, str, str]]:
    """Read a tab-separated ``head<TAB>relation<TAB>tail`` file.

    Empty lines and lines starting with ``#`` are skipped. Rows are returned in
    file order, without interning.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise TripletFormatError(path, lineno, f"expected 3 tab-separated fields, got {len(fields)}")
            if any(not f for f in fields):
                raise TripletFormatError(path, lineno, "empty field")
            rows.append((fields[0], fields[1], fields[2]))
    return rows


def write_triplet_file(path, rows: Iterable[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in rows:
            fh.write(f"{h}\t{r}\t{t}\n")


@dataclass(frozen=True)
class Vocabulary:
    """Entity and relation names with dense ids.

    When ``add_inverses`` is set, relation ids ``[n_raw, 2 * n_raw)`` are the
    inverses of ``[0, n_raw)``.
    """

    entity_names: tuple[str, ...]
    relation_names: tuple[str, ...]
    add_inverses: bool = False
    _entity_index: dict = field(init=False, repr=False, compare=False)
    _relation_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ents = {n: i for i, n in enumerate(self.entity_names)}
        rels = {n: i for i, n in enumerate(self.relation_names)}
        if len(ents) != len(self.entity_names) or len(rels) != len(self.relation_names):
            raise ValueError("vocabulary names must be unique")
        object.__setattr__(self, "_entity_index", ents)
        object.__setattr__(self, "_relation_index", rels)

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_raw_relations(self) -> int:
        return len(self.relation_names)

    @property
    def n_relations(self) -> int:
        return 2 * self.n_raw_relations if self.add_inverses else self.n_raw_relations

    def entity_id(self, name: str) -> int:
        return self._entity_index[name]

    def entity_name(self, idx: int) -> str:
        return self.entity_names[idx]

    def relation_id(self, name: str) -> int:
        if name in self._relation_index:
            return self._relation_index[name]
        if self.add_inverses and name.endswith("_inv") and name[:-4] in self._relation_index:
            return self._relation_index[name[:-4]] + self.n_raw_relations
        raise KeyError(name)

    def relation_name(self, idx: int) -> str:
        if idx >= self.n_raw_relations:
            return self.relation_names[idx - self.n_raw_relations] + "_inv"
        return self.relation_names[idx]

    def is_inverse(self, rel: int) -> bool:
        return self.add_inverses and rel >= self.n_raw_relations

    def inverse_of(self, rel: int) -> int:
        """Relation used for the reversed direction of ``rel``.

        Without inverse augmentation relations are their own reverse.
        """
        if not self.add_inverses:
            return rel
        n = self.n_raw_relations
        return rel + n if rel < n else rel - n

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(b"inv=1\n" if self.add_inverses else b"inv=0\n")
        for name in self.entity_names:
            h.update(b"E" + name.encode("utf-8") + b"\n")
        for name in self.relation_names:
            h.update(b"R" + name.encode("utf-8") + b"\n")
        return h.hexdigest()


class GraphStore:
    """Immutable set of triplets with a per-entity neighbor index.

    ``triplets`` is an ``(n, 3)`` int64 array of ``(head, rel, tail)`` rows in
    insertion order.
    """

    def __init__(self, triplets, n_entities: int, n_relations: int):
        arr = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        if arr.size:
            if arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= n_entities:
                raise ValueError("entity id out of range")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= n_relations:
                raise ValueError("relation id out of range")
        seen = set()
        keep = []
        for i, row in enumerate(map(tuple, arr.tolist())):
            if row not in seen:
                seen.add(row)
                keep.append(i)
        arr = arr[keep] if len(keep) != len(arr) else arr
        arr.setflags(write=False)
        self.triplets = arr
        self.n_entities = int(n_entities)
        self.n_relations = int(n_relations)
        self._set = frozenset(seen)
        self._neighbors: dict[int, list[Neighbor]] = {}
        for h, r, t in arr.tolist():
            self._neighbors.setdefault(h, []).append(Neighbor(r, t, OUTGOING))
            self._neighbors.setdefault(t, []).append(Neighbor(r, h, INCOMING))

    def __len__(self) -> int:
        return len(self.triplets)

    def __contains__(self, triplet) -> bool:
        return tuple(int(x) for x in triplet) in self._set

    def __iter__(self):
        return (Triplet(*row) for row in self.triplets.tolist())

    def triplet_set(self) -> frozenset:
        return self._set

    def neighbors(self, entity: int) -> list[Neighbor]:
        if not 0 <= entity < self.n_entities:
            raise IndexError(f"invalid entity id {entity}")
        return list(self._neighbors.get(entity, ()))

    def entities(self) -> np.ndarray:
        """Sorted ids of entities touched by at least one triplet."""
        if not len(self.triplets):
            return np.zeros(0, dtype=np.int64)
        return np.unique(self.triplets[:, [0, 2]])

    def subgraph(self, rows) -> "GraphStore":
        return GraphStore(rows, self.n_entities, self.n_relations)


class TripletIndex:
    """Vectorized membership test for ``(head, rel, tail)`` rows."""

    def __init__(self, triplets, n_entities: int, n_relations: int):
        self.n_entities = int(n_entities)
        self.n_relations = int(n_relations)
        rows = np.asarray(list(triplets), dtype=np.int64).reshape(-1, 3)
        self._keys = np.unique(self.keys(rows))

    def keys(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        return (rows[..., 0] * self.n_relations + rows[..., 1]) * self.n_entities + rows[..., 2]

    def __len__(self) -> int:
        return len(self._keys)

    def contains(self, rows) -> np.ndarray:
        keys = self.keys(rows)
        if not len(self._keys):
            return np.zeros(keys.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self._keys, keys), len(self._keys) - 1)
        return self._keys[pos] == keys


def build_graph(rows, add_inverses: bool = False) -> tuple[Vocabulary, GraphStore]:
    """Intern name triples and build a graph.

    Ids follow first-appearance order (head, relation, tail within each row).
    Duplicate rows are dropped.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no triplets given")
    ents: dict[str, int] = {}
    rels: dict[str, int] = {}
    ids = []
    for h, r, t in rows:
        hi = ents.setdefault(h, len(ents))
        ri = rels.setdefault(r, len(rels))
        ti = ents.setdefault(t, len(ents))
        ids.append((hi, ri, ti))
    vocab = Vocabulary(tuple(ents), tuple(rels), add_inverses)
    return vocab, graph_from_ids(ids, vocab)


def graph_from_ids(ids, vocab: Vocabulary) -> GraphStore:
    """Build a graph over raw-relation id triples, adding inverses if ``vocab`` asks for them."""
    raw = np.asarray(ids, dtype=np.int64).reshape(-1, 3)
    if vocab.add_inverses and len(raw):
        inv = raw[:, [2, 1, 0]].copy()
        inv[:, 1] += vocab.n_raw_relations
        # interleave so each raw triplet is followed by its inverse
        both = np.empty((2 * len(raw), 3), dtype=np.int64)
        both[0::2] = raw
        both[1::2] = inv
        raw = both
    return GraphStore(raw, vocab.n_entities, vocab.n_relations)


def raw_triplets(g: GraphStore, vocab: Vocabulary) -> np.ndarray:
    """Rows of ``g`` whose relation is not an inverse."""
    if not vocab.add_inverses:
        return g.triplets
    return g.triplets[g.triplets[:, 1] < vocab.n_raw_relations]


def entity_frequency(g: GraphStore, vocab: Vocabulary | None = None) -> Counter:
    """Number of triplets per entity (head and tail occurrences both count).

    With ``vocab`` given, inverse triplets are ignored.
    """
    rows = g.triplets if vocab is None else raw_triplets(g, vocab)
    counts: Counter = Counter()
    for h, _, t in rows.tolist():
        counts[h] += 1
        counts[t] += 1
    return counts


def load_graph(path, add_inverses: bool = True) -> tuple[Vocabulary, GraphStore]:
    path = Path(path)
    return build_graph(parse_triplet_file(path), add_inverses=add_inverses)
