"""Directed multigraph model of process flowsheets.

Nodes are unit operations (optionally carrying a controller letter code or a
multi-stream equipment label); edges are material streams or control signals.
Graphs are immutable after construction and validated eagerly, so every
downstream operation can assume a well-formed flowsheet.
"""

from __future__ import annotations

import json
import re
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field

import networkx as nx

MATERIAL = "material"
SIGNAL = "signal"

CONTROLLER_CLASS = "C"
VALVE_CLASS = "v"
# unit classes that may represent one physical device with several streams
MULTI_STREAM_CLASSES = frozenset({"hex"})

_CLASS_RE = re.compile(r"[a-z][a-z0-9_]*|C")
_LETTER_RE = re.compile(r"[A-Z]{1,5}")
_TAG_RE = re.compile(r"[a-z][a-z0-9_]*")


class GraphError(ValueError):
    """A flowsheet graph violates a structural invariant."""


class StripError(GraphError):
    """A control element cannot be removed by splicing."""


class EmptyDataset(ValueError):
    """Statistics were requested for an empty graph collection."""


@dataclass(frozen=True)
class UnitNode:
    """One unit operation.

    letter_code is present iff unit_class is the controller class; compartment
    and equipment_group are present iff the node is one stream of a
    multi-stream device (so far: heat exchangers).
    """

    id: int
    unit_class: str
    compartment: int | None = None
    letter_code: str | None = None
    equipment_group: int | None = None


@dataclass(frozen=True)
class FlowEdge:
    """A directed material stream or control signal between two units."""

    src: int
    dst: int
    kind: str = MATERIAL
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class DatasetStats:
    n_samples: int
    mean_nodes: float
    std_nodes: float
    vocab_size: int


class FlowsheetGraph:
    """Immutable directed multigraph of unit operations.

    Parallel edges are allowed (kept as a list). Independent process trains
    are permitted as separate material components as long as the whole graph
    is tied together by signals or shared multi-stream equipment identity.
    """

    def __init__(self, nodes, edges):
        nodes = tuple(nodes)
        for n in nodes:
            # checked before normalization: a compartment on a single-stream
            # class is a modeling error even when its group has no partner
            if n.compartment is not None and n.unit_class not in MULTI_STREAM_CLASSES:
                raise GraphError(
                    f"compartment on single-stream class {n.unit_class!r} (node {n.id})"
                )
        nodes = tuple(_normalize_singleton_groups(nodes))
        edges = tuple(edges)
        _validate(nodes, edges)
        self.nodes: tuple[UnitNode, ...] = nodes
        self.edges: tuple[FlowEdge, ...] = edges
        self._by_id = {n.id: n for n in nodes}
        self._out = defaultdict(list)
        self._in = defaultdict(list)
        for e in edges:
            self._out[e.src].append(e)
            self._in[e.dst].append(e)

    # -- basic accessors ---------------------------------------------------

    def node(self, node_id: int) -> UnitNode:
        return self._by_id[node_id]

    def node_ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    def out_edges(self, node_id: int, kind: str | None = None) -> list[FlowEdge]:
        es = self._out.get(node_id, [])
        return [e for e in es if kind is None or e.kind == kind]

    def in_edges(self, node_id: int, kind: str | None = None) -> list[FlowEdge]:
        es = self._in.get(node_id, [])
        return [e for e in es if kind is None or e.kind == kind]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def unit_class_counts(self) -> Counter:
        return Counter(n.unit_class for n in self.nodes)

    def equipment_groups(self) -> dict[int, list[int]]:
        """group id -> member node ids (only groups that survived validation)."""
        groups = defaultdict(list)
        for n in self.nodes:
            if n.equipment_group is not None:
                groups[n.equipment_group].append(n.id)
        return dict(groups)

    def material_components(self) -> list[set[int]]:
        """Weakly connected components over material edges only."""
        parent = {n.id: n.id for n in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in self.edges:
            if e.kind == MATERIAL:
                parent[find(e.src)] = find(e.dst)
        comps = defaultdict(set)
        for n in self.nodes:
            comps[find(n.id)].add(n.id)
        return list(comps.values())

    def __eq__(self, other):
        if not isinstance(other, FlowsheetGraph):
            return NotImplemented
        return self.nodes == other.nodes and sorted(self.edges, key=repr) == sorted(
            other.edges, key=repr
        )

    def __repr__(self):
        return f"FlowsheetGraph(n_nodes={self.n_nodes}, n_edges={len(self.edges)})"

    # -- JSON interface ----------------------------------------------------

    def to_json_dict(self) -> dict:
        nodes = []
        for n in self.nodes:
            d = {"id": n.id, "class": n.unit_class}
            if n.compartment is not None:
                d["compartment"] = n.compartment
            if n.letter_code is not None:
                d["letter_code"] = n.letter_code
            if n.equipment_group is not None:
                d["equipment_group"] = n.equipment_group
            nodes.append(d)
        edges = [
            {"src": e.src, "dst": e.dst, "kind": e.kind, "tags": list(e.tags)}
            for e in self.edges
        ]
        return {"nodes": nodes, "edges": edges}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), separators=(",", ":"))

    @classmethod
    def from_json_dict(cls, d: dict) -> "FlowsheetGraph":
        nodes = [
            UnitNode(
                id=nd["id"],
                unit_class=nd["class"],
                compartment=nd.get("compartment"),
                letter_code=nd.get("letter_code"),
                equipment_group=nd.get("equipment_group"),
            )
            for nd in d["nodes"]
        ]
        edges = [
            FlowEdge(
                src=ed["src"],
                dst=ed["dst"],
                kind=ed.get("kind", MATERIAL),
                tags=tuple(ed.get("tags", ())),
            )
            for ed in d["edges"]
        ]
        return cls(nodes, edges)

    @classmethod
    def from_json(cls, text: str) -> "FlowsheetGraph":
        return cls.from_json_dict(json.loads(text))


# -- validation -------------------------------------------------------------


def _normalize_singleton_groups(nodes):
    """Clear equipment groups with a single member: a lone multi-stream label
    carries no pairing information, and dropping it keeps canonicalization and
    isomorphism consistent."""
    counts = Counter(
        n.equipment_group for n in nodes if n.equipment_group is not None
    )
    out = []
    for n in nodes:
        if n.equipment_group is not None and counts[n.equipment_group] == 1:
            n = UnitNode(n.id, n.unit_class, None, n.letter_code, None)
        out.append(n)
    return out


def _validate(nodes, edges):
    if not nodes:
        raise GraphError("graph must contain at least one node")
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise GraphError("duplicate node ids")
    by_id = {n.id: n for n in nodes}

    for n in nodes:
        if not _CLASS_RE.fullmatch(n.unit_class):
            raise GraphError(f"invalid unit class {n.unit_class!r} (node {n.id})")
        if (n.letter_code is not None) != (n.unit_class == CONTROLLER_CLASS):
            raise GraphError(
                f"letter_code present iff unit_class is {CONTROLLER_CLASS!r} (node {n.id})"
            )
        if n.letter_code is not None and not _LETTER_RE.fullmatch(n.letter_code):
            raise GraphError(f"invalid letter code {n.letter_code!r} (node {n.id})")
        if (n.compartment is None) != (n.equipment_group is None):
            raise GraphError(
                f"compartment and equipment_group must be set together (node {n.id})"
            )
        if n.compartment is not None:
            if n.unit_class not in MULTI_STREAM_CLASSES:
                raise GraphError(
                    f"compartment on single-stream class {n.unit_class!r} (node {n.id})"
                )
            if n.compartment < 1:
                raise GraphError(f"compartment must be positive (node {n.id})")

    group_classes = defaultdict(set)
    for n in nodes:
        if n.equipment_group is not None:
            group_classes[n.equipment_group].add(n.unit_class)
    for gid, classes in group_classes.items():
        if len(classes) > 1:
            raise GraphError(f"equipment group {gid} mixes unit classes {classes}")

    for e in edges:
        if e.src not in by_id or e.dst not in by_id:
            raise GraphError(f"edge endpoint missing: {e.src}->{e.dst}")
        if e.src == e.dst:
            raise GraphError(f"self-loop on node {e.src}")
        if e.kind not in (MATERIAL, SIGNAL):
            raise GraphError(f"unknown edge kind {e.kind!r}")
        for t in e.tags:
            if not _TAG_RE.fullmatch(t):
                raise GraphError(f"invalid stream tag {t!r}")
        if e.kind == SIGNAL:
            if e.tags:
                raise GraphError("signal edges carry no tags")
            n_ctrl = sum(
                by_id[x].unit_class == CONTROLLER_CLASS for x in (e.src, e.dst)
            )
            if n_ctrl != 1:
                raise GraphError(
                    f"signal edge {e.src}->{e.dst} must have exactly one controller endpoint"
                )

    # connectedness: material + signal edges plus shared equipment identity
    parent = {i: i for i in by_id}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        parent[find(a)] = find(b)

    for e in edges:
        union(e.src, e.dst)
    first_of_group = {}
    for n in nodes:
        if n.equipment_group is not None:
            if n.equipment_group in first_of_group:
                union(first_of_group[n.equipment_group], n.id)
            else:
                first_of_group[n.equipment_group] = n.id
    roots = {find(i) for i in by_id}
    if len(roots) > 1:
        raise GraphError(
            f"graph is disconnected ({len(roots)} parts, counting signals and equipment identity)"
        )


# -- isomorphism --------------------------------------------------------------


def _as_networkx(g: FlowsheetGraph) -> nx.MultiDiGraph:
    """Encode a flowsheet for VF2: equipment grouping becomes gadget nodes so
    only the grouping partition is compared, never the label values."""
    G = nx.MultiDiGraph()
    for n in g.nodes:
        G.add_node(("n", n.id), cls=n.unit_class, letter=n.letter_code or "")
    for gid, members in g.equipment_groups().items():
        G.add_node(("g", gid), cls="__group__", letter="")
        for m in members:
            G.add_edge(("n", m), ("g", gid), kind="__member__", tags=())
    for e in g.edges:
        G.add_edge(("n", e.src), ("n", e.dst), kind=e.kind, tags=tuple(sorted(e.tags)))
    return G


def isomorphic(a: FlowsheetGraph, b: FlowsheetGraph) -> bool:
    """True iff a node bijection preserves unit_class, letter_code,
    equipment-group partition, edge direction, kind, and tags."""
    node_match = nx.algorithms.isomorphism.categorical_node_match(
        ["cls", "letter"], ["", ""]
    )
    edge_match = nx.algorithms.isomorphism.categorical_multiedge_match(
        ["kind", "tags"], ["", ()]
    )
    return nx.is_isomorphic(
        _as_networkx(a), _as_networkx(b), node_match=node_match, edge_match=edge_match
    )


# -- control stripping --------------------------------------------------------


def strip_controls(g: FlowsheetGraph, remove_valves: bool = False) -> FlowsheetGraph:
    """Remove all controllers and signal edges (optionally all valves too),
    splicing in-line removals so material paths stay connected."""
    doomed_classes = [CONTROLLER_CLASS] + ([VALVE_CLASS] if remove_valves else [])
    nodes = {n.id: n for n in g.nodes}
    edges = [e for e in g.edges if e.kind == MATERIAL]

    for cls in doomed_classes:
        for nid in sorted(nodes):
            if nodes[nid].unit_class != cls:
                continue
            preds = [e for e in edges if e.dst == nid]
            succs = [e for e in edges if e.src == nid]
            if len(preds) > 1 or len(succs) > 1:
                raise StripError(
                    f"cannot splice {cls!r} node {nid}: "
                    f"{len(preds)} predecessors, {len(succs)} successors"
                )
            edges = [e for e in edges if nid not in (e.src, e.dst)]
            if preds and succs:
                tags = list(preds[0].tags)
                tags += [t for t in succs[0].tags if t not in tags]
                edges.append(FlowEdge(preds[0].src, succs[0].dst, MATERIAL, tuple(tags)))
            del nodes[nid]

    try:
        return FlowsheetGraph(list(nodes.values()), edges)
    except GraphError as exc:
        raise StripError(f"stripping left an invalid graph: {exc}") from exc


# -- dataset statistics -------------------------------------------------------


def stats(graphs, vocab) -> DatasetStats:
    """Node-count statistics (population std) plus the supplied vocabulary's
    content size (specials excluded)."""
    # deferred so that importing the package does not load numpy; the CLI
    # relies on that to cap BLAS threads via env vars before first use
    import numpy as np

    graphs = list(graphs)
    if not graphs:
        raise EmptyDataset("no graphs to summarize")
    counts = np.array([g.n_nodes for g in graphs], dtype=float)
    return DatasetStats(
        n_samples=len(graphs),
        mean_nodes=float(counts.mean()),
        std_nodes=float(counts.std()),
        vocab_size=vocab.n_tokens,
    )
