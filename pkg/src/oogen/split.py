"""Out-of-graph benchmark construction from a full triplet graph."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .graph import (
    GraphStore,
    Vocabulary,
    entity_frequency,
    graph_from_ids,
    parse_triplet_file,
    raw_triplets,
    write_triplet_file,
)

logger = logging.getLogger(__name__)

META_SETS = ("train", "valid", "test")
MANIFEST_VERSION = 1
_TSV = {"train": "meta_train.tsv", "valid": "meta_valid.tsv", "test": "meta_test.tsv"}


class ManifestError(RuntimeError):
    pass


class InsufficientEntitiesError(ValueError):
    def __init__(self, needed: int, eligible: int):
        super().__init__(f"need {needed} entities but only {eligible} are eligible")
        self.needed = needed
        self.eligible = eligible


@dataclass(frozen=True)
class SplitConfig:
    min_degree: int = 10
    max_degree: int = 100
    n_unseen: int = 5000
    ratios: tuple = (2500, 1000, 1500)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.min_degree <= self.max_degree:
            raise ValueError("need 0 < min_degree <= max_degree")
        if self.n_unseen <= 0:
            raise ValueError("n_unseen must be positive")
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or sum(self.ratios) <= 0:
            raise ValueError("ratios must be three non-negative numbers with a positive sum")


@dataclass
class OOGSplit:
    """In-graph triplets plus per-meta-set unseen entities and their triplets.

    ``meta_sets[name]`` is a list of ``(entity, triplets)`` pairs where
    ``triplets`` is an ``(m, 3)`` array of every triplet associated with the
    entity (inverse rows included when the vocabulary has them).
    """

    vocab: Vocabulary
    in_graph: GraphStore
    meta_sets: dict
    stats: dict = field(default_factory=dict)

    def entities(self, name: str) -> list[int]:
        return [e for e, _ in self.meta_sets[name]]

    def unseen(self) -> set[int]:
        return {e for name in META_SETS for e, _ in self.meta_sets[name]}

    def seen_mask(self) -> np.ndarray:
        """Entities that appear in the in-graph."""
        mask = np.zeros(self.vocab.n_entities, dtype=bool)
        mask[self.in_graph.entities()] = True
        return mask

    def set_triplets(self, name: str) -> np.ndarray:
        """Distinct triplets assigned to one meta-set, sorted."""
        rows = [t for _, t in self.meta_sets[name] if len(t)]
        if not rows:
            return np.zeros((0, 3), dtype=np.int64)
        return _canonical(np.concatenate(rows))

    def known_triplets(self, names=META_SETS) -> frozenset:
        known = set(self.in_graph.triplet_set())
        for name in names:
            known.update(map(tuple, self.set_triplets(name).tolist()))
        return frozenset(known)


def _canonical(rows: np.ndarray) -> np.ndarray:
    if not len(rows):
        return np.zeros((0, 3), dtype=np.int64)
    return np.unique(rows, axis=0)


def eligible_entities(g: GraphStore, vocab: Vocabulary, min_degree: int, max_degree: int) -> np.ndarray:
    counts = entity_frequency(g, vocab)
    return np.array(sorted(e for e, c in counts.items() if min_degree <= c <= max_degree), dtype=np.int64)


def select_unseen(g: GraphStore, vocab: Vocabulary, cfg: SplitConfig, rng) -> list[int]:
    """Uniformly sample ``cfg.n_unseen`` entities from the degree band (raw triplet counts)."""
    eligible = eligible_entities(g, vocab, cfg.min_degree, cfg.max_degree)
    if len(eligible) < cfg.n_unseen:
        raise InsufficientEntitiesError(cfg.n_unseen, len(eligible))
    picked = rng.choice(eligible, size=cfg.n_unseen, replace=False)
    return [int(e) for e in picked]


def _sizes(n: int, ratios) -> list[int]:
    fr = [Fraction(r) for r in ratios]
    total = sum(fr)
    sizes = [int(n * r / total) for r in fr]
    sizes[0] += n - sum(sizes)
    return sizes


def partition_meta_sets(unseen, ratios, rng) -> tuple[list[int], list[int], list[int]]:
    """Shuffle and cut ``unseen`` into train/valid/test by floor allocation; remainder goes to train."""
    unseen = list(unseen)
    if len(set(unseen)) != len(unseen):
        raise ValueError("unseen entities must be distinct")
    order = rng.permutation(len(unseen))
    shuffled = [unseen[i] for i in order]
    n_train, n_valid, _ = _sizes(len(unseen), ratios)
    return (
        shuffled[:n_train],
        shuffled[n_train:n_train + n_valid],
        shuffled[n_train + n_valid:],
    )


def _assign(triplets: np.ndarray, owner: dict[int, int]):
    """Map each triplet to a meta-set index (-1 = in-graph); also count cross-set triplets."""
    assign = np.full(len(triplets), -1, dtype=np.int64)
    cross = 0
    for i, (h, _, t) in enumerate(triplets.tolist()):
        oh, ot = owner.get(h), owner.get(t)
        if oh is None and ot is None:
            continue
        if oh is not None and ot is not None and oh != ot:
            cross += 1
            assign[i] = oh if h < t else ot
        else:
            assign[i] = oh if oh is not None else ot
    return assign, cross


def build_split(g: GraphStore, vocab: Vocabulary, partition, min_associated: int = 2) -> OOGSplit:
    """Separate in-graph triplets from triplets touching unseen entities.

    A triplet whose endpoints are unseen entities of two different meta-sets
    goes to the meta-set of the smaller entity id only. Entities left with fewer
    than ``min_associated`` raw triplets are returned to the seen side, and the
    assignment is recomputed until stable.
    """
    sets = [list(map(int, p)) for p in partition]
    if len({e for s in sets for e in s}) != sum(len(s) for s in sets):
        raise ValueError("meta-set partitions overlap")
    for s in sets:
        for e in s:
            if not 0 <= e < vocab.n_entities:
                raise IndexError(f"invalid entity id {e}")

    rows = g.triplets
    is_raw = rows[:, 1] < vocab.n_raw_relations if vocab.add_inverses else np.ones(len(rows), dtype=bool)
    dropped = 0
    while True:
        owner = {e: k for k, s in enumerate(sets) for e in s}
        assign, cross = _assign(rows, owner)
        raw_count: dict[int, int] = {}
        for (h, _, t), a, raw in zip(rows.tolist(), assign.tolist(), is_raw.tolist()):
            if a < 0 or not raw:
                continue
            for e in {h, t}:
                if owner.get(e) == a:
                    raw_count[e] = raw_count.get(e, 0) + 1
        weak = {e for e in owner if raw_count.get(e, 0) < min_associated}
        if not weak:
            break
        dropped += len(weak)
        sets = [[e for e in s if e not in weak] for s in sets]
    if dropped:
        logger.warning("dropped %d unseen entities with fewer than %d associated triplets", dropped, min_associated)

    per_entity: dict[int, list[int]] = {e: [] for s in sets for e in s}
    for i, ((h, _, t), a) in enumerate(zip(rows.tolist(), assign.tolist())):
        if a < 0:
            continue
        for e in (h, t) if h != t else (h,):
            if owner.get(e) == a:
                per_entity[e].append(i)
    meta_sets = {
        name: [(e, _canonical(rows[per_entity[e]])) for e in s]
        for name, s in zip(META_SETS, sets)
    }
    in_graph = g.subgraph(rows[assign < 0])
    stats = {
        "dropped_entities": dropped,
        "cross_set_triplets": cross,
        "in_graph_triplets": int(len(in_graph)),
    }
    for name in META_SETS:
        stats[f"{name}_entities"] = len(meta_sets[name])
        stats[f"{name}_triplets"] = int(np.count_nonzero(assign == META_SETS.index(name)))
    return OOGSplit(vocab, in_graph, meta_sets, stats)


def make_split(g: GraphStore, vocab: Vocabulary, cfg: SplitConfig) -> OOGSplit:
    rng = np.random.default_rng(cfg.seed)
    unseen = select_unseen(g, vocab, cfg, rng)
    split = build_split(g, vocab, partition_meta_sets(unseen, cfg.ratios, rng))
    split.stats["config"] = {
        "min_degree": cfg.min_degree,
        "max_degree": cfg.max_degree,
        "n_unseen": cfg.n_unseen,
        "ratios": [str(r) for r in cfg.ratios],
        "seed": cfg.seed,
    }
    return split


# --- manifest -------------------------------------------------------------

def _names(vocab: Vocabulary, rows: np.ndarray):
    for h, r, t in rows.tolist():
        yield vocab.entity_name(h), vocab.relation_name(r), vocab.entity_name(t)


def _write_lines(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(f"{line}\n")


def _read_lines(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def _data_files() -> list[str]:
    files = ["vocab.entities.txt", "vocab.relations.txt", "in_graph.tsv"]
    for name in META_SETS:
        files += [_TSV[name], _TSV[name].replace(".tsv", ".entities.txt")]
    return files


def _checksum(directory: Path) -> str:
    h = hashlib.sha256()
    for fname in _data_files():
        h.update(fname.encode())
        h.update((directory / fname).read_bytes())
    return h.hexdigest()


def write_manifest(split: OOGSplit, directory) -> Path:
    """Write a split as TSV files plus ``meta.json``. Only raw triplets are stored."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vocab = split.vocab
    _write_lines(directory / "vocab.entities.txt", vocab.entity_names)
    _write_lines(directory / "vocab.relations.txt", vocab.relation_names)
    write_triplet_file(directory / "in_graph.tsv", _names(vocab, raw_triplets(split.in_graph, vocab)))
    for name in META_SETS:
        rows = split.set_triplets(name)
        if vocab.add_inverses:
            rows = rows[rows[:, 1] < vocab.n_raw_relations]
        write_triplet_file(directory / _TSV[name], _names(vocab, rows))
        _write_lines(directory / _TSV[name].replace(".tsv", ".entities.txt"),
                     (vocab.entity_name(e) for e in split.entities(name)))
    meta = {
        "format_version": MANIFEST_VERSION,
        "vocabulary_hash": vocab.fingerprint(),
        "add_inverses": vocab.add_inverses,
        "stats": split.stats,
        "checksum": _checksum(directory),
    }
    with open(directory / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def read_manifest(directory, vocab: Vocabulary | None = None) -> OOGSplit:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise ManifestError(f"no manifest at {directory}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {meta.get('format_version')!r}")
    if _checksum(directory) != meta.get("checksum"):
        raise ManifestError("manifest checksum mismatch")
    stored = Vocabulary(
        tuple(_read_lines(directory / "vocab.entities.txt")),
        tuple(_read_lines(directory / "vocab.relations.txt")),
        bool(meta["add_inverses"]),
    )
    if stored.fingerprint() != meta["vocabulary_hash"]:
        raise ManifestError("stored vocabulary does not match its hash")
    if vocab is not None and vocab.fingerprint() != meta["vocabulary_hash"]:
        raise ManifestError("manifest was built from a different vocabulary")
    vocab = stored

    def load(fname):
        ids = [(vocab.entity_id(h), vocab.relation_id(r), vocab.entity_id(t))
               for h, r, t in parse_triplet_file(directory / fname)]
        return graph_from_ids(ids, vocab)

    in_graph = load("in_graph.tsv")
    meta_sets = {}
    for name in META_SETS:
        g = load(_TSV[name])
        rows = g.triplets
        ents = [vocab.entity_id(n) for n in _read_lines(directory / _TSV[name].replace(".tsv", ".entities.txt"))]
        meta_sets[name] = [
            (e, _canonical(rows[(rows[:, 0] == e) | (rows[:, 2] == e)])) for e in ents
        ]
    return OOGSplit(vocab, in_graph, meta_sets, meta.get("stats", {}))
