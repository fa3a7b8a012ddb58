"""Scene graphs, graph tracks and their linearization into transformer tokens.

A graph with ``N_n`` nodes and ``N_e`` edges becomes ``1 + N_n + N_e`` tokens:
the special context token, the nodes in list order, then the edges in list
order. Token embeddings are keyed by category. Structural encodings are keyed
by node *slot* (position in the node list): a node gets its slot's vector, an
edge ``i -> j`` gets ``enc[i] - enc[j]`` and the context token gets its own
vector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Tensor, concat
from .numerics.autograd import _lift

CONTEXT_SLOT = -1
NO_SLOT = -2


@dataclass(frozen=True)
class Vocabulary:
    object_categories: tuple
    predicate_categories: tuple

    def __post_init__(self):
        object.__setattr__(self, "object_categories", tuple(self.object_categories))
        object.__setattr__(self, "predicate_categories", tuple(self.predicate_categories))
        for kind, names in (("object", self.object_categories), ("predicate", self.predicate_categories)):
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate {kind} category names")

    @property
    def num_objects(self) -> int:
        return len(self.object_categories)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_categories)

    @property
    def num_tokens(self) -> int:
        """Embedding rows: the context token, then objects, then predicates."""
        return 1 + self.num_objects + self.num_predicates

    def object_index(self, name) -> int:
        return name if isinstance(name, (int, np.integer)) else self.object_categories.index(name)

    def predicate_index(self, name) -> int:
        return name if isinstance(name, (int, np.integer)) else self.predicate_categories.index(name)

    def object_token(self, category: int) -> int:
        return 1 + int(category)

    def predicate_token(self, predicate: int) -> int:
        return 1 + self.num_objects + int(predicate)

    def token_name(self, token: int) -> str:
        if token == 0:
            return "[context]"
        if token <= self.num_objects:
            return self.object_categories[token - 1]
        return self.predicate_categories[token - 1 - self.num_objects]

    def fingerprint(self) -> str:
        blob = json.dumps([self.object_categories, self.predicate_categories]).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"objects": list(self.object_categories), "predicates": list(self.predicate_categories)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["objects"]), tuple(d["predicates"]))


@dataclass(frozen=True)
class Node:
    node_id: int
    category: int


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    predicate: int


@dataclass
class SceneGraph:
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def slot_of(self) -> dict[int, int]:
        return {n.node_id: i for i, n in enumerate(self.nodes)}

    def to_dict(self, vocab: Vocabulary | None = None) -> dict:
        def obj(c):
            return vocab.object_categories[c] if vocab else c

        def pred(p):
            return vocab.predicate_categories[p] if vocab else p
        return {
            "nodes": [{"id": n.node_id, "category": obj(n.category)} for n in self.nodes],
            "edges": [{"src": e.src, "dst": e.dst, "predicate": pred(e.predicate)} for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict, vocab: Vocabulary | None = None) -> "SceneGraph":
        def obj(c):
            return vocab.object_index(c) if vocab else int(c)

        def pred(p):
            return vocab.predicate_index(p) if vocab else int(p)
        nodes = [Node(int(n["id"]), obj(n["category"])) for n in d.get("nodes", [])]
        edges = [Edge(int(e["src"]), int(e["dst"]), pred(e["predicate"])) for e in d.get("edges", [])]
        return cls(nodes, edges)


@dataclass
class GraphTrack:
    length: int
    entries: dict = field(default_factory=dict)

    def frames(self) -> list[int]:
        return sorted(self.entries)

    def to_dict(self, vocab: Vocabulary | None = None) -> dict:
        return {"length": self.length,
                "entries": {str(t): self.entries[t].to_dict(vocab) for t in self.frames()}}

    @classmethod
    def from_dict(cls, d: dict, vocab: Vocabulary | None = None) -> "GraphTrack":
        entries = {int(t): SceneGraph.from_dict(g, vocab) for t, g in d["entries"].items()}
        return cls(int(d["length"]), entries)

    def save(self, path, vocab: Vocabulary | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(vocab), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, vocab: Vocabulary | None = None) -> "GraphTrack":
        return cls.from_dict(json.loads(Path(path).read_text()), vocab)


def validate_graph(g: SceneGraph, vocab: Vocabulary, max_nodes: int) -> list[str]:
    """Every violated invariant as a message; an empty list means the graph is valid."""
    problems = []
    if g.num_nodes > max_nodes:
        problems.append(f"node budget: {g.num_nodes} nodes exceeds max_nodes={max_nodes}")
    ids = [n.node_id for n in g.nodes]
    if len(set(ids)) != len(ids):
        problems.append("duplicate node id")
    for n in g.nodes:
        if not 0 <= n.category < vocab.num_objects:
            problems.append(f"unknown object category {n.category} on node {n.node_id}")
    known = set(ids)
    for e in g.edges:
        if e.src not in known or e.dst not in known:
            problems.append(f"dangling edge: {e.src}->{e.dst} references a missing node")
        if not 0 <= e.predicate < vocab.num_predicates:
            problems.append(f"unknown predicate {e.predicate} on edge {e.src}->{e.dst}")
    return problems


def validate_track(track: GraphTrack, vocab: Vocabulary, max_nodes: int) -> list[str]:
    problems = []
    if not track.entries:
        problems.append("empty track: at least one graph is required")
    for t, g in sorted(track.entries.items()):
        if not 0 <= t < track.length:
            problems.append(f"frame index {t} outside [0, {track.length})")
        problems.extend(f"frame {t}: {p}" for p in validate_graph(g, vocab, max_nodes))
    return problems


@dataclass
class TokenSequence:
    """Linearized graph. ``enc_pos``/``enc_neg`` name the slots whose encodings
    are added/subtracted for each token (``CONTEXT_SLOT``, ``NO_SLOT`` or a node slot)."""

    token_ids: np.ndarray
    kinds: list
    enc_pos: np.ndarray
    enc_neg: np.ndarray
    num_nodes: int
    num_edges: int

    def __len__(self) -> int:
        return len(self.token_ids)

    def labels(self, vocab: Vocabulary) -> list[str]:
        return [vocab.token_name(int(t)) for t in self.token_ids]


def linearize(g: SceneGraph, vocab: Vocabulary) -> TokenSequence:
    slots = g.slot_of()
    tokens, kinds, pos, neg = [0], ["context"], [CONTEXT_SLOT], [NO_SLOT]
    for i, n in enumerate(g.nodes):
        tokens.append(vocab.object_token(n.category))
        kinds.append("node")
        pos.append(i)
        neg.append(NO_SLOT)
    for e in g.edges:
        if e.src not in slots or e.dst not in slots:
            raise ValueError(f"dangling edge {e.src}->{e.dst}; validate the graph first")
        tokens.append(vocab.predicate_token(e.predicate))
        kinds.append("edge")
        pos.append(slots[e.src])
        neg.append(slots[e.dst])
    return TokenSequence(np.array(tokens, dtype=np.int64), kinds, np.array(pos, dtype=np.int64),
                         np.array(neg, dtype=np.int64), g.num_nodes, g.num_edges)


def encoding_rows(seq: TokenSequence, max_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices into the extended table ``[E(c); E(n_0..n_{max-1}); 0]``."""
    def rows(slots):
        out = slots + 1
        out[slots == CONTEXT_SLOT] = 0
        out[slots == NO_SLOT] = max_nodes + 1
        return out
    if np.any(seq.enc_pos >= max_nodes) or np.any(seq.enc_neg >= max_nodes):
        raise IndexError(f"node slot outside the encoding table ({max_nodes} rows)")
    return rows(seq.enc_pos), rows(seq.enc_neg)


def extended_encoding_table(node_table: Tensor, context_encoding: Tensor) -> Tensor:
    d = node_table.shape[-1]
    zero = _lift(np.zeros((1, d)), node_table)
    return concat([context_encoding.reshape(1, d), node_table, zero], axis=0)


def structural_encodings(seq: TokenSequence, node_table: Tensor, context_encoding: Tensor) -> Tensor:
    """Per-token structural encodings (L, d) for one linearized graph."""
    plus, minus = encoding_rows(seq, node_table.shape[0])
    table = extended_encoding_table(node_table, context_encoding)
    return table[plus] - table[minus]
