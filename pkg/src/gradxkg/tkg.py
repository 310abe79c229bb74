"""Temporal knowledge graph data model.

A temporal KG is an ordered sequence of per-timestamp snapshot graphs over
shared entity/relation vocabularies. This module covers quadruple ingestion,
relation-specific adjacency construction, the graph edits used by fidelity
and stability measurements, and a synthetic generator that plants causal
chains with known ground-truth explanations.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from gradxkg.autodiff import Tensor

__all__ = [
    "DataError",
    "Quadruple",
    "Snapshot",
    "TemporalKG",
    "SynthConfig",
    "PlantedChain",
    "ingest_quadruples",
    "relation_adjacency",
    "remove_node",
    "perturb_edges",
    "synth_generate",
    "with_inverse_relations",
    "write_dataset",
    "load_dataset",
]


class DataError(ValueError):
    """Malformed input data or an inconsistent configuration."""


class Quadruple(NamedTuple):
    subject: int
    relation: int
    object: int
    timestamp: int


@dataclass(frozen=True)
class Snapshot:
    """All (subject, relation, object) facts at one timestamp."""

    timestamp: int
    edges: frozenset
    num_nodes: int
    num_relations: int

    def __post_init__(self):
        for s, r, o in self.edges:
            if not (0 <= s < self.num_nodes and 0 <= o < self.num_nodes):
                raise DataError(f"edge endpoint out of range: {(s, r, o)}")
            if not (0 <= r < self.num_relations):
                raise DataError(f"edge relation out of range: {(s, r, o)}")

    def edges_sorted(self) -> list:
        return sorted(self.edges)


@dataclass(frozen=True)
class TemporalKG:
    """Immutable snapshot sequence with id<->label vocabularies."""

    snapshots: tuple
    entity_labels: tuple
    relation_labels: tuple
    timestamp_labels: tuple

    def __post_init__(self):
        times = [s.timestamp for s in self.snapshots]
        if times != sorted(set(times)):
            raise DataError("snapshots must be strictly increasing in timestamp")
        for snap in self.snapshots:
            if snap.num_nodes != self.num_nodes or snap.num_relations != self.num_relations:
                raise DataError("snapshots disagree on vocabulary sizes")

    @property
    def num_nodes(self) -> int:
        return len(self.entity_labels)

    @property
    def num_relations(self) -> int:
        return len(self.relation_labels)

    @property
    def num_timesteps(self) -> int:
        return len(self.snapshots)

    def snapshot_at(self, t: int) -> Snapshot:
        if not (0 <= t < len(self.snapshots)):
            raise DataError(f"timestep {t} out of range [0, {len(self.snapshots)})")
        return self.snapshots[t]

    def quadruples(self) -> Iterable[Quadruple]:
        for snap in self.snapshots:
            for s, r, o in snap.edges_sorted():
                yield Quadruple(s, r, o, snap.timestamp)

    def replace_snapshot(self, t: int, snap: Snapshot) -> "TemporalKG":
        snaps = list(self.snapshots)
        snaps[t] = snap
        return replace(self, snapshots=tuple(snaps))


def _intern(label: str, table: dict, order: list) -> int:
    if label not in table:
        table[label] = len(order)
        order.append(label)
    return table[label]


def _timestamp_sort_key(labels: Sequence[str]):
    try:
        return sorted(labels, key=lambda x: (float(x), x))
    except ValueError:
        return sorted(labels)


def ingest_quadruples(source) -> TemporalKG:
    """Parse TAB-separated `subject relation object timestamp` lines.

    Lines starting with `#` and blank lines are skipped. Labels (including
    integer-looking ones) are interned in first-appearance order; raw
    timestamps map to dense ordinals preserving their numeric (or, failing
    that, lexicographic) order. Duplicate quadruples are dropped.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return ingest_quadruples(fh)
    if isinstance(source, io.TextIOBase):
        lines = source
    else:
        lines = iter(source)

    ent_table: dict = {}
    ent_order: list = []
    rel_table: dict = {}
    rel_order: list = []
    raw_quads = set()
    time_labels = set()
    count = 0
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split("\t")
        if len(parts) != 4:
            raise DataError(f"line {lineno}: expected 4 TAB-separated fields, got {len(parts)}")
        s_lbl, r_lbl, o_lbl, t_lbl = (p.strip() for p in parts)
        if not all((s_lbl, r_lbl, o_lbl, t_lbl)):
            raise DataError(f"line {lineno}: empty field")
        s = _intern(s_lbl, ent_table, ent_order)
        r = _intern(r_lbl, rel_table, rel_order)
        o = _intern(o_lbl, ent_table, ent_order)
        raw_quads.add((s, r, o, t_lbl))
        time_labels.add(t_lbl)
        count += 1
    if count == 0:
        raise DataError("empty input: no quadruples found")

    ordered_times = _timestamp_sort_key(list(time_labels))
    time_ids = {lbl: i for i, lbl in enumerate(ordered_times)}
    n, nr = len(ent_order), len(rel_order)
    per_t: dict = {i: set() for i in range(len(ordered_times))}
    for s, r, o, t_lbl in raw_quads:
        per_t[time_ids[t_lbl]].add((s, r, o))
    snapshots = tuple(
        Snapshot(t, frozenset(per_t[t]), n, nr) for t in range(len(ordered_times))
    )
    return TemporalKG(snapshots, tuple(ent_order), tuple(rel_order), tuple(ordered_times))


def relation_adjacency(snap: Snapshot, r: int) -> Tensor:
    """Row-normalized adjacency for relation r: A[i, j] = 1/c_i if (j, r, i)
    is an edge, where c_i counts i's in-edges under r. Messages flow from
    subject to object; rows with no in-edges stay all-zero.
    """
    if not (0 <= r < snap.num_relations):
        raise DataError(f"relation {r} out of range [0, {snap.num_relations})")
    n = snap.num_nodes
    a = np.zeros((n, n), dtype=np.float64)
    edges = [(s, o) for s, rel, o in snap.edges if rel == r]
    if edges:
        senders = np.array([s for s, _ in edges], dtype=np.intp)
        receivers = np.array([o for _, o in edges], dtype=np.intp)
        counts = np.zeros(n, dtype=np.float64)
        np.add.at(counts, receivers, 1.0)
        a[receivers, senders] = 1.0 / counts[receivers]
    return Tensor(a)


def remove_node(snap: Snapshot, node: int) -> Snapshot:
    """Drop every edge incident to node; the node stays in the vocabulary."""
    if not (0 <= node < snap.num_nodes):
        raise DataError(f"node {node} out of range [0, {snap.num_nodes})")
    kept = frozenset((s, r, o) for s, r, o in snap.edges if s != node and o != node)
    return replace(snap, edges=kept)


def perturb_edges(snap: Snapshot, fraction: float, seed: int) -> Snapshot:
    """Delete floor(fraction * |edges|) edges, chosen uniformly without
    replacement by a generator seeded with `seed`. Deterministic per seed."""
    if not (0.0 <= fraction <= 1.0):
        raise DataError(f"fraction must lie in [0, 1], got {fraction}")
    edges = snap.edges_sorted()
    k = int(np.floor(fraction * len(edges)))
    if k == 0:
        return replace(snap, edges=frozenset(snap.edges))
    rng = np.random.default_rng(seed)
    drop = set(rng.choice(len(edges), size=k, replace=False).tolist())
    kept = frozenset(e for i, e in enumerate(edges) if i not in drop)
    return replace(snap, edges=kept)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic TKG shape: background density plus planted causal chains.

    A chain plants (a, r1, b, t) and (b, r2, c, t+1), then adds the
    consequence (a, r3, c, t+2). The rule triple (r1, r2, r3) must use
    distinct relations below num_relations.
    """

    num_nodes: int
    num_relations: int
    num_timesteps: int
    density: float = 0.0
    num_chains: int = 1
    rule: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.num_nodes < 4:
            raise DataError("synthetic graphs need at least 4 nodes")
        if self.num_relations < 2:
            raise DataError("synthetic graphs need at least 2 relations")
        if self.num_timesteps < 3:
            raise DataError("planted chains span 3 timesteps; need num_timesteps >= 3")
        if len(self.rule) != 3 or len(set(self.rule)) != 3:
            raise DataError("rule must name 3 distinct relations")
        if any(not (0 <= r < self.num_relations) for r in self.rule):
            raise DataError("rule relations out of range")
        if not (0.0 <= self.density <= 1.0):
            raise DataError("density must lie in [0, 1]")
        if self.num_chains < 0:
            raise DataError("num_chains must be non-negative")


@dataclass(frozen=True)
class PlantedChain:
    """Ground truth for one planted consequence: the query quadruple and the
    (node, timestep) pairs of its cause edges."""

    subject: int
    bridge: int
    object: int
    start_t: int
    query: Quadruple
    cause_nodes: frozenset


def synth_generate(config: SynthConfig, seed: int):
    """Sample a TKG with `num_chains` planted rule instances plus uniform
    background edges at the configured density. Returns the graph and the
    ground-truth cause sets, deterministically per seed."""
    root = np.random.SeedSequence(seed)
    chain_rng = np.random.default_rng(root.spawn(1)[0])
    bg_rng = np.random.default_rng(root.spawn(2)[0])
    n, nr, nt = config.num_nodes, config.num_relations, config.num_timesteps
    r1, r2, r3 = config.rule

    per_t: list = [set() for _ in range(nt)]
    chains = []
    for _ in range(config.num_chains):
        t = int(chain_rng.integers(0, nt - 2))
        a, b, c = (int(v) for v in chain_rng.choice(n, size=3, replace=False))
        per_t[t].add((a, r1, b))
        per_t[t + 1].add((b, r2, c))
        per_t[t + 2].add((a, r3, c))
        chains.append(
            PlantedChain(
                subject=a,
                bridge=b,
                object=c,
                start_t=t,
                query=Quadruple(a, r3, c, t + 2),
                cause_nodes=frozenset({(a, t), (b, t), (b, t + 1), (c, t + 1)}),
            )
        )

    candidates = [(s, r, o) for s in range(n) for o in range(n) if s != o for r in range(nr)]
    per_snapshot = int(round(config.density * len(candidates)))
    for t in range(nt):
        if per_snapshot == 0:
            continue
        picks = bg_rng.choice(len(candidates), size=per_snapshot, replace=False)
        for idx in picks:
            per_t[t].add(candidates[int(idx)])

    snapshots = tuple(Snapshot(t, frozenset(per_t[t]), n, nr) for t in range(nt))
    tkg = TemporalKG(
        snapshots,
        tuple(f"e{i}" for i in range(n)),
        tuple(f"r{j}" for j in range(nr)),
        tuple(str(t) for t in range(nt)),
    )
    return tkg, chains


def with_inverse_relations(tkg: TemporalKG) -> TemporalKG:
    """Add R extra relation types holding the reversed edges."""
    nr = tkg.num_relations
    snapshots = []
    for snap in tkg.snapshots:
        edges = set(snap.edges)
        edges.update((o, r + nr, s) for s, r, o in snap.edges)
        snapshots.append(
            Snapshot(snap.timestamp, frozenset(edges), snap.num_nodes, nr * 2)
        )
    return TemporalKG(
        tuple(snapshots),
        tkg.entity_labels,
        tkg.relation_labels + tuple(f"{lbl}_inv" for lbl in tkg.relation_labels),
        tkg.timestamp_labels,
    )


def write_dataset(tkg: TemporalKG, out_dir) -> dict:
    """Write the canonical dataset layout: quadruples plus vocab sidecars.

    Files: quadruples.tsv (labels, one fact per line), entities.tsv,
    relations.tsv, timestamps.tsv (each `id<TAB>label`). Returns the
    path map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "quadruples": out / "quadruples.tsv",
        "entities": out / "entities.tsv",
        "relations": out / "relations.tsv",
        "timestamps": out / "timestamps.tsv",
    }
    with open(paths["quadruples"], "w", encoding="utf-8") as fh:
        for q in tkg.quadruples():
            fh.write(
                f"{tkg.entity_labels[q.subject]}\t{tkg.relation_labels[q.relation]}"
                f"\t{tkg.entity_labels[q.object]}\t{tkg.timestamp_labels[q.timestamp]}\n"
            )
    for key, labels in (
        ("entities", tkg.entity_labels),
        ("relations", tkg.relation_labels),
        ("timestamps", tkg.timestamp_labels),
    ):
        with open(paths[key], "w", encoding="utf-8") as fh:
            for i, lbl in enumerate(labels):
                fh.write(f"{i}\t{lbl}\n")
    return {k: str(v) for k, v in paths.items()}


def _read_vocab(path) -> tuple:
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            text = line.rstrip("\n")
            if not text:
                continue
            parts = text.split("\t")
            if len(parts) != 2 or int(parts[0]) != len(labels):
                raise DataError(f"{path}: bad vocab entry at line {lineno + 1}")
            labels.append(parts[1])
    return tuple(labels)


def load_dataset(dataset_dir) -> TemporalKG:
    """Load a dataset written by write_dataset, keeping its id assignment."""
    d = Path(dataset_dir)
    for name in ("quadruples.tsv", "entities.tsv", "relations.tsv", "timestamps.tsv"):
        if not (d / name).exists():
            raise DataError(f"dataset is missing {name} under {d}")
    ents = _read_vocab(d / "entities.tsv")
    rels = _read_vocab(d / "relations.tsv")
    times = _read_vocab(d / "timestamps.tsv")
    ent_ids = {lbl: i for i, lbl in enumerate(ents)}
    rel_ids = {lbl: i for i, lbl in enumerate(rels)}
    time_ids = {lbl: i for i, lbl in enumerate(times)}
    per_t: list = [set() for _ in range(len(times))]
    with open(d / "quadruples.tsv", "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split("\t")
            if len(parts) != 4:
                raise DataError(f"quadruples.tsv line {lineno}: expected 4 fields")
            try:
                s = ent_ids[parts[0]]
                r = rel_ids[parts[1]]
                o = ent_ids[parts[2]]
                t = time_ids[parts[3]]
            except KeyError as exc:
                raise DataError(f"quadruples.tsv line {lineno}: unknown label {exc}") from exc
            per_t[t].add((s, r, o))
    snapshots = tuple(
        Snapshot(t, frozenset(per_t[t]), len(ents), len(rels)) for t in range(len(times))
    )
    return TemporalKG(snapshots, ents, rels, times)
