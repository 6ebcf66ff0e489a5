"""SFILES 2.0 codec.

Serializes flowsheet graphs to strings with either a canonical or a seeded
random branch order, parses strings back to graphs, canonicalizes, and
produces augmented (re-ordered) variants.

Canonical ordering ranks sibling branches by (stream-tag priority, downstream
subtree weight, unit class, letter code, iterated neighborhood hash); the hash
makes the result invariant under node relabeling. Random ordering keys every
branching decision on a control-blind subtree hash, so the same seed makes
compatible choices for a PFD and for the matching P&ID even though only the
latter contains controllers and signals.
"""

from __future__ import annotations

import hashlib
import re
from collections import defaultdict, deque
from dataclasses import dataclass, field

from .graph import (
    CONTROLLER_CLASS,
    MATERIAL,
    MULTI_STREAM_CLASSES,
    SIGNAL,
    VALVE_CLASS,
    FlowEdge,
    FlowsheetGraph,
    GraphError,
    UnitNode,
)
from .tokenizer import TokenizeError, tokenize_spans

CANONICAL_MODE = "canonical"
RANDOM_MODE = "random"

_CLASS_RE = re.compile(r"[a-z][a-z0-9_]*|C")
_LETTER_RE = re.compile(r"[A-Z]{1,5}")
_TAG_RE = re.compile(r"[a-z][a-z0-9_]*")
_REC_CLOSE_RE = re.compile(r"<\d+")
_SIG_OPEN_RE = re.compile(r"_\d+")
_SIG_CLOSE_RE = re.compile(r"<_\d+")

# branch-tag priority: top outlet before bottom outlet, then other tags
# alphabetically, untagged streams last
_TAG_PRIORITY = {"tout": 0, "bout": 1}


class SerializeError(ValueError):
    """The graph contains a pattern the SFILES 2.0 grammar cannot express."""


class ParseError(ValueError):
    """A string is not valid SFILES 2.0; carries byte offset and category."""

    def __init__(self, reason: str, offset: int, category: str = "invalid_sfiles"):
        super().__init__(f"{reason} (at byte {offset})")
        self.reason = reason
        self.offset = offset
        self.category = category


@dataclass(frozen=True)
class SfilesString:
    """An SFILES 2.0 string plus a flag telling whether it is known canonical.

    The flag records provenance, so equality and hashing look at the text
    alone: a string loaded from disk equals the serializer output it came
    from."""

    text: str
    canonical: bool = field(default=False, compare=False)

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class BranchOrderPolicy:
    mode: str = CANONICAL_MODE
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in (CANONICAL_MODE, RANDOM_MODE):
            raise ValueError(f"unknown branch order mode {self.mode!r}")
        if self.mode == RANDOM_MODE and self.seed is None:
            raise ValueError("random branch order requires a seed")


CANONICAL = BranchOrderPolicy(CANONICAL_MODE, None)


def _text(s) -> str:
    return s.text if isinstance(s, SfilesString) else str(s)


def _digest(*parts) -> int:
    payload = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


# -- neighborhood hashing -----------------------------------------------------


def _iterate_hashes(ids, base, neighbors, rounds=12):
    """Morgan-style refinement: repeatedly mix each node's hash with its
    labeled neighborhood. `neighbors[v]` is a list of (role, other). Pure
    hashlib arithmetic so results are identical across platforms and runs.

    Hot path: payloads are assembled from pre-encoded bytes and repeated
    (role, neighbor) digests are memoized per round, producing bit-identical
    results to digesting each part separately."""
    blake = hashlib.blake2b
    sep = b"\x1f"
    role_bytes = {
        v: [(role.encode() + sep, w) for role, w in neighbors[v]] for v in ids
    }
    h = dict(base)
    for _ in range(rounds):
        enc = {v: str(h[v]).encode() for v in ids}
        env_cache = {}
        nxt = {}
        for v in ids:
            env = []
            for role_b, w in role_bytes[v]:
                key = (role_b, w)
                entry = env_cache.get(key)
                if entry is None:
                    value = int.from_bytes(
                        blake(role_b + enc[w], digest_size=8).digest(), "big"
                    )
                    entry = (value, str(value).encode())
                    env_cache[key] = entry
                env.append(entry)
            env.sort()
            payload = b"it" + sep + enc[v] + b"".join(sep + eb for _, eb in env)
            nxt[v] = int.from_bytes(blake(payload, digest_size=8).digest(), "big")
        h = nxt
    return h


def _full_hashes(g: FlowsheetGraph) -> dict[int, int]:
    # graphs are immutable, so derived hashes are cached on the instance
    # (augmentation serializes the same graph once per variant)
    cached = g.__dict__.get("_codec_full_hashes")
    if cached is not None:
        return cached
    groups = g.equipment_groups()
    partners = defaultdict(list)
    for members in groups.values():
        for m in members:
            partners[m] = [x for x in members if x != m]
    base = {}
    neighbors = defaultdict(list)
    for n in g.nodes:
        base[n.id] = _digest(
            "node", n.unit_class, n.letter_code or "", len(partners.get(n.id, ()))
        )
    for e in g.edges:
        label = f"{e.kind}:{','.join(sorted(e.tags))}"
        neighbors[e.src].append((f"out:{label}", e.dst))
        neighbors[e.dst].append((f"in:{label}", e.src))
    for m, ps in partners.items():
        for p in ps:
            neighbors[m].append(("grp", p))
    hashes = _iterate_hashes([n.id for n in g.nodes], base, neighbors)
    g.__dict__["_codec_full_hashes"] = hashes
    return hashes


def _blind_view(g: FlowsheetGraph):
    """Hashes of the graph with controllers, valves, and signals erased
    (valves spliced out), plus an anchor map original node -> surviving node.

    Used to key random branch decisions identically for a P&ID and its PFD:
    a branch leading through a valve gets the key of the first non-control
    unit behind it, which exists in both graphs.
    """
    cached = g.__dict__.get("_codec_blind_view")
    if cached is not None:
        return cached
    blind = {CONTROLLER_CLASS, VALVE_CLASS}
    survivors = {n.id: n for n in g.nodes if n.unit_class not in blind}
    edges = [e for e in g.edges if e.kind == MATERIAL]
    for nid in sorted(n.id for n in g.nodes if n.unit_class in blind):
        preds = [e for e in edges if e.dst == nid]
        succs = [e for e in edges if e.src == nid]
        edges = [e for e in edges if nid not in (e.src, e.dst)]
        if len(preds) == 1 and len(succs) == 1:
            tags = list(preds[0].tags)
            tags += [t for t in succs[0].tags if t not in tags]
            edges.append(FlowEdge(preds[0].src, succs[0].dst, MATERIAL, tuple(tags)))

    groups = defaultdict(list)
    for n in survivors.values():
        if n.equipment_group is not None:
            groups[n.equipment_group].append(n.id)
    base = {}
    neighbors = defaultdict(list)
    for n in survivors.values():
        base[n.id] = _digest("node", n.unit_class, "", 0)
    for e in edges:
        label = ",".join(sorted(e.tags))
        neighbors[e.src].append((f"out:{label}", e.dst))
        neighbors[e.dst].append((f"in:{label}", e.src))
    for members in groups.values():
        for m in members:
            for p in members:
                if p != m:
                    neighbors[m].append(("grp", p))
    hashes = _iterate_hashes(list(survivors), base, neighbors)

    anchors = {}
    for n in g.nodes:
        cur, seen = n.id, set()
        while cur is not None and cur not in survivors:
            if cur in seen:
                cur = None
                break
            seen.add(cur)
            outs = g.out_edges(cur, MATERIAL)
            cur = outs[0].dst if len(outs) == 1 else None
        anchors[n.id] = cur
    g.__dict__["_codec_blind_view"] = (anchors, hashes)
    return anchors, hashes


def _tag_rank(tags):
    if not tags:
        return (1, ())
    return (0, tuple(sorted((_TAG_PRIORITY.get(t, 2), t) for t in tags)))


# -- serialization ------------------------------------------------------------


class _TreeNode:
    __slots__ = ("nid", "in_tags", "children", "incoming", "all_bracketed")

    def __init__(self, nid, in_tags):
        self.nid = nid
        self.in_tags = tuple(in_tags)
        self.children: list[_TreeNode] = []
        self.incoming: list[_TreeNode] = []
        self.all_bracketed = False


class _Serializer:
    def __init__(self, g: FlowsheetGraph, policy: BranchOrderPolicy):
        self.g = g
        self.mode = policy.mode
        self.seed = policy.seed
        self.hashes = _full_hashes(g)
        if self.mode == RANDOM_MODE:
            self.anchors, self.blind_hashes = _blind_view(g)
        self.visited: set[int] = set()
        self.roots: list[_TreeNode] = []
        self.recycles: list[tuple[int, FlowEdge]] = []  # (opener node, edge)
        self.pos: dict[int, int] = {}
        self._tnodes: dict[int, _TreeNode] = {}
        self._weights: dict[tuple[int, int], int] = {}
        # while serializing an incoming-branch region, the path from its root
        # to the junction node must stay on the bare trunk so the junction is
        # the region's last emitted unit; edges entering the spine from the
        # side are deferred and become recycles
        self._spine_next: dict[int, int] | None = None
        self._spine_nodes: frozenset[int] = frozenset()
        self._deferred: list[tuple[int, FlowEdge]] = []
        self._partners = defaultdict(list)
        for members in g.equipment_groups().values():
            for m in members:
                self._partners[m] = [x for x in members if x != m]

    # ordering keys ---------------------------------------------------------

    def _blind_key(self, nid: int) -> int:
        a = self.anchors.get(nid)
        if a is None:
            n = self.g.node(nid)
            return _digest("dangle", n.unit_class, n.letter_code or "")
        return self.blind_hashes[a]

    def _root_key(self, nid: int):
        n = self.g.node(nid)
        if self.mode == RANDOM_MODE:
            return (_digest(self.seed, "root", self._blind_key(nid)), nid)
        return (n.unit_class, n.letter_code or "", self.hashes[nid], nid)

    def _weight(self, start: int, banned: int) -> int:
        """Number of nodes reachable over material edges from `start` without
        stepping onto `banned` (the branching node). Smaller subtrees first."""
        key = (start, banned)
        if key not in self._weights:
            seen = {banned, start}
            queue = deque([start])
            count = 1
            while queue:
                x = queue.popleft()
                for e in self.g.out_edges(x, MATERIAL):
                    if e.dst not in seen:
                        seen.add(e.dst)
                        count += 1
                        queue.append(e.dst)
            self._weights[key] = count
        return self._weights[key]

    def _child_key(self, parent: int, e: FlowEdge, idx: int):
        if self.mode == RANDOM_MODE:
            return (
                _digest(self.seed, "child", ",".join(sorted(e.tags)), self._blind_key(e.dst)),
                idx,
            )
        n = self.g.node(e.dst)
        return (
            _tag_rank(e.tags),
            self._weight(e.dst, parent),
            n.unit_class,
            n.letter_code or "",
            self.hashes[e.dst],
            idx,
        )

    # traversal ---------------------------------------------------------------

    def _dfs(self, nid: int, in_tags, attach) -> _TreeNode:
        self.visited.add(nid)
        tn = _TreeNode(nid, in_tags)
        self._tnodes[nid] = tn
        outs = self.g.out_edges(nid, MATERIAL)
        if attach is not None and attach[0] == nid:
            tn.all_bracketed = True
            outs = [e for e in outs if e is not attach[1]]
        spine_edge = None
        if self._spine_next is not None:
            nxt = self._spine_next.get(nid)
            kept = []
            for e in outs:
                if e.dst in self.visited:
                    kept.append(e)
                elif spine_edge is None and e.dst == nxt:
                    spine_edge = e
                elif e.dst in self._spine_nodes:
                    self._deferred.append((nid, e))
                else:
                    kept.append(e)
            outs = kept
        if len(outs) > 1:
            outs = [
                e
                for _, e in sorted(
                    enumerate(outs), key=lambda p: self._child_key(nid, p[1], p[0])
                )
            ]
        if spine_edge is not None:
            outs = [*outs, spine_edge]
        for e in outs:
            if e.dst in self.visited:
                if e.tags:
                    raise SerializeError("stream tag on a recycle edge")
                self.recycles.append((nid, e))
            else:
                tn.children.append(self._dfs(e.dst, e.tags, attach))
        return tn

    def _recompute_positions(self):
        # emission order: node, then its incoming branches, then its children
        self.pos = {}
        counter = 0

        def walk(tn):
            nonlocal counter
            self.pos[tn.nid] = counter
            counter += 1
            for inc in tn.incoming:
                walk(inc)
            for ch in tn.children:
                walk(ch)

        for root in self.roots:
            walk(root)

    def _component_root(self, comp: set[int]) -> int:
        feeds = [x for x in comp if not self.g.in_edges(x, MATERIAL)]
        pool = feeds or sorted(comp)
        return min(pool, key=self._root_key)

    def _spine_key(self, nid: int):
        if self.mode == RANDOM_MODE:
            return (_digest(self.seed, "spine", self._blind_key(nid)), nid)
        return (self.hashes[nid], nid)

    def _set_spine(self, region: set[int], root: int, u: int) -> None:
        """Fix a shortest path root -> u inside the region; its nodes may only
        be entered along it during the region traversal."""
        dist = {u: 0}
        queue = deque([u])
        while queue:
            x = queue.popleft()
            for ein in self.g.in_edges(x, MATERIAL):
                if ein.src in region and ein.src not in dist:
                    dist[ein.src] = dist[x] + 1
                    queue.append(ein.src)
        nxt: dict[int, int] = {}
        x = root
        while x != u:
            step = min(
                (
                    e.dst
                    for e in self.g.out_edges(x, MATERIAL)
                    if dist.get(e.dst) == dist[x] - 1
                ),
                key=self._spine_key,
            )
            nxt[x] = step
            x = step
        self._spine_next = nxt
        self._spine_nodes = frozenset(nxt) | {u}
        self._deferred = []

    def _attach_incoming(self, comp: set[int]):
        while True:
            unvisited = [x for x in comp if x not in self.visited]
            if not unvisited:
                return
            candidates = []
            for u in unvisited:
                for e in self.g.out_edges(u, MATERIAL):
                    if e.dst in self.visited:
                        candidates.append((u, e))
            if not candidates:
                raise SerializeError("unreachable region without junction")

            def cand_key(item):
                u, e = item
                if self.mode == RANDOM_MODE:
                    ku = (_digest(self.seed, "attach", self._blind_key(u)), u)
                else:
                    ku = (self.hashes[u], u)
                return (self.pos[e.dst], ku)

            u, e = min(candidates, key=cand_key)
            if e.tags:
                raise SerializeError("stream tag on an incoming-branch junction edge")
            # region feeding u through unvisited nodes; pick its root
            region = {u}
            queue = deque([u])
            while queue:
                x = queue.popleft()
                for ein in self.g.in_edges(x, MATERIAL):
                    if ein.src not in self.visited and ein.src not in region:
                        region.add(ein.src)
                        queue.append(ein.src)
            feeds = [x for x in region if not self.g.in_edges(x, MATERIAL)]
            pool = feeds or sorted(region)
            root_id = min(pool, key=self._root_key)
            self._set_spine(region, root_id, u)
            sub = self._dfs(root_id, (), (u, e))
            self._spine_next = None
            self._spine_nodes = frozenset()
            for x, de in self._deferred:
                if de.tags:
                    raise SerializeError("stream tag on a recycle edge")
                self.recycles.append((x, de))
            self._deferred = []
            self._tnodes[e.dst].incoming.append(sub)
            self._recompute_positions()

    def _component_order(self, comps):
        sig = {
            i: tuple(sorted(self.hashes[x] for x in comp)) for i, comp in enumerate(comps)
        }
        remaining = list(range(len(comps)))
        order = []
        while remaining:
            if not order:
                pick = max(remaining, key=lambda i: (len(comps[i]), sig[i]))
            else:

                def link_pos(i):
                    best = float("inf")
                    for x in comps[i]:
                        for p in self._partners.get(x, ()):
                            if p in self.pos:
                                best = min(best, self.pos[p])
                        for e in self.g.out_edges(x, SIGNAL) + self.g.in_edges(x, SIGNAL):
                            other = e.src if e.dst == x else e.dst
                            if other in self.pos:
                                best = min(best, self.pos[other])
                    return best

                pick = min(remaining, key=lambda i: (link_pos(i), -len(comps[i]), sig[i]))
            remaining.remove(pick)
            order.append(pick)
            yield comps[pick]

    # numbering and rendering -------------------------------------------------

    def _assign_numbers(self):
        pos = self.pos
        self._rec_open = defaultdict(list)
        self._rec_close = defaultdict(list)
        rec_sorted = sorted(
            range(len(self.recycles)),
            key=lambda i: (
                min(pos[self.recycles[i][0]], pos[self.recycles[i][1].dst]),
                max(pos[self.recycles[i][0]], pos[self.recycles[i][1].dst]),
                i,
            ),
        )
        if len(rec_sorted) > 9:
            raise SerializeError(
                f"{len(rec_sorted)} recycles, but openers are single digits (max 9)"
            )
        for rank, i in enumerate(rec_sorted, start=1):
            opener, e = self.recycles[i]
            if self.g.node(opener).unit_class == CONTROLLER_CLASS:
                # a bare digit after a signal opener would re-tokenize as one
                # _NN token and corrupt the string
                raise SerializeError("controller node cannot open a recycle")
            self._rec_open[opener].append(rank)
            self._rec_close[e.dst].append(rank)

        self._sig_open = defaultdict(list)
        self._sig_close = defaultdict(list)
        signals = [e for e in self.g.edges if e.kind == SIGNAL]
        sig_sorted = sorted(
            range(len(signals)),
            key=lambda i: (
                min(pos[signals[i].src], pos[signals[i].dst]),
                max(pos[signals[i].src], pos[signals[i].dst]),
                i,
            ),
        )
        for rank, i in enumerate(sig_sorted, start=1):
            self._sig_open[signals[i].src].append(rank)
            self._sig_close[signals[i].dst].append(rank)

        self._comp_label = {}
        groups = sorted(
            self.g.equipment_groups().values(), key=lambda ms: min(pos[m] for m in ms)
        )
        for label, members in enumerate(groups, start=1):
            for m in members:
                self._comp_label[m] = label

    def _render(self, tn: _TreeNode) -> list[str]:
        n = self.g.node(tn.nid)
        toks = [f"({n.unit_class})"]
        if tn.nid in self._comp_label:
            toks.append("{%d}" % self._comp_label[tn.nid])
        if n.letter_code is not None:
            toks.append("{%s}" % n.letter_code)
        toks += [f"_{i}" for i in self._sig_open.get(tn.nid, ())]
        toks += [str(i) for i in self._rec_open.get(tn.nid, ())]
        toks += [f"<{i}" for i in self._rec_close.get(tn.nid, ())]
        toks += [f"<_{i}" for i in self._sig_close.get(tn.nid, ())]
        for inc in tn.incoming:
            toks += ["<&|", *self._render(inc), "&|"]
        if tn.children:
            bracketed = tn.children if tn.all_bracketed else tn.children[:-1]
            for ch in bracketed:
                toks += ["[", *("{%s}" % t for t in ch.in_tags), *self._render(ch), "]"]
            if not tn.all_bracketed:
                last = tn.children[-1]
                toks += [*("{%s}" % t for t in last.in_tags), *self._render(last)]
        return toks

    def run(self) -> str:
        for comp in self._component_order(self.g.material_components()):
            root_id = self._component_root(comp)
            self.roots.append(self._dfs(root_id, (), None))
            self._recompute_positions()
            self._attach_incoming(comp)
        self._assign_numbers()
        return "n|".join("".join(self._render(root)) for root in self.roots)


def serialize(g: FlowsheetGraph, policy: BranchOrderPolicy = CANONICAL) -> SfilesString:
    text = _Serializer(g, policy).run()
    return SfilesString(text, canonical=(policy.mode == CANONICAL_MODE))


# -- parsing ------------------------------------------------------------------


def parse(s) -> FlowsheetGraph:
    """Parse an SFILES 2.0 string into a flowsheet graph.

    Errors carry the byte offset of the offending token and a category
    (invalid_sfiles, dangling_recycle, dangling_signal) used by evaluation.
    """
    text = _text(s)
    if not text:
        raise ParseError("empty string", 0)
    try:
        spans = tokenize_spans(text)
    except TokenizeError as exc:
        raise ParseError(f"not tokenizable: {exc}", exc.position) from exc

    nodes: list[dict] = []
    edges: list[FlowEdge] = []
    cur: int | None = None
    stack: list[tuple[str, int]] = []
    pending: list[str] = []
    rec_open: dict[str, tuple[int, int]] = {}
    rec_close: dict[str, tuple[int, int]] = {}
    sig_open: dict[str, tuple[int, int]] = {}
    sig_close: dict[str, tuple[int, int]] = {}
    group_members: dict[int, list[int]] = defaultdict(list)

    def need_node(off, what):
        if cur is None:
            raise ParseError(f"{what} before any unit", off)

    def no_pending(off, what):
        if pending:
            raise ParseError(f"stream tag dangling before {what}", off)

    for tok, off in spans:
        if tok.startswith("("):
            inner = tok[1:-1]
            if not _CLASS_RE.fullmatch(inner):
                raise ParseError(f"unknown unit class {inner!r}", off)
            nid = len(nodes)
            nodes.append({"id": nid, "cls": inner, "letter": None, "comp": None})
            if cur is not None:
                edges.append(FlowEdge(cur, nid, MATERIAL, tuple(pending)))
                pending.clear()
            cur = nid
        elif tok.startswith("{"):
            inner = tok[1:-1]
            need_node(off, f"brace {tok}")
            if inner.isdigit():
                if nodes[cur]["cls"] not in MULTI_STREAM_CLASSES:
                    raise ParseError(
                        f"compartment label on single-stream unit ({nodes[cur]['cls']})", off
                    )
                if nodes[cur]["comp"] is not None:
                    raise ParseError("duplicate compartment label", off)
                value = int(inner)
                if value < 1:
                    raise ParseError("compartment label must be positive", off)
                nodes[cur]["comp"] = value
                group_members[value].append(cur)
            elif _LETTER_RE.fullmatch(inner):
                if nodes[cur]["cls"] != CONTROLLER_CLASS:
                    raise ParseError("letter code on a non-controller unit", off)
                if nodes[cur]["letter"] is not None:
                    raise ParseError("duplicate letter code", off)
                nodes[cur]["letter"] = inner
            elif _TAG_RE.fullmatch(inner):
                pending.append(inner)
            else:
                raise ParseError(f"unknown brace token {tok!r}", off)
        elif tok == "[":
            need_node(off, "branch opening")
            no_pending(off, "[")
            stack.append(("branch", cur))
        elif tok == "]":
            if not stack or stack[-1][0] != "branch":
                raise ParseError("unbalanced bracket", off)
            no_pending(off, "]")
            kind, junction = stack.pop()
            if cur == junction:
                raise ParseError("empty branch", off)
            cur = junction
        elif tok == "<&|":
            need_node(off, "incoming branch")
            no_pending(off, "<&|")
            stack.append(("incoming", cur))
            cur = None
        elif tok == "&|":
            if not stack or stack[-1][0] != "incoming":
                raise ParseError("incoming-branch closer without opener", off)
            if cur is None:
                raise ParseError("empty incoming branch", off)
            no_pending(off, "&|")
            kind, junction = stack.pop()
            edges.append(FlowEdge(cur, junction, MATERIAL, ()))
            cur = junction
        elif tok == "n|":
            if stack:
                raise ParseError("stream separator inside a branch", off)
            if cur is None:
                raise ParseError("empty stream before separator", off)
            no_pending(off, "n|")
            cur = None
        elif len(tok) == 1 and tok.isdigit():
            need_node(off, "recycle opener")
            no_pending(off, "recycle opener")
            if tok in rec_open:
                raise ParseError(f"duplicate recycle opener {tok}", off, "dangling_recycle")
            rec_open[tok] = (cur, off)
        elif _REC_CLOSE_RE.fullmatch(tok):
            need_node(off, "recycle closer")
            no_pending(off, "recycle closer")
            rid = tok[1:]
            if rid in rec_close:
                raise ParseError(f"duplicate recycle closer {tok}", off, "dangling_recycle")
            rec_close[rid] = (cur, off)
        elif _SIG_OPEN_RE.fullmatch(tok):
            need_node(off, "signal opener")
            no_pending(off, "signal opener")
            sid = tok[1:]
            if sid in sig_open:
                raise ParseError(f"duplicate signal opener {tok}", off, "dangling_signal")
            sig_open[sid] = (cur, off)
        elif _SIG_CLOSE_RE.fullmatch(tok):
            need_node(off, "signal closer")
            no_pending(off, "signal closer")
            sid = tok[2:]
            if sid in sig_close:
                raise ParseError(f"duplicate signal closer {tok}", off, "dangling_signal")
            sig_close[sid] = (cur, off)
        elif tok in ("&", "|"):
            raise ParseError(f"reserved token {tok!r}", off)
        else:
            # e.g. %5 or <%5: tokenizer-accepted reference forms the grammar
            # reserves but never defines
            raise ParseError(f"unsupported token {tok!r}", off)

    end = len(text)
    if stack:
        raise ParseError("unbalanced bracket at end of string", end)
    if pending:
        raise ParseError("stream tag dangling at end of string", end)
    if cur is None:
        raise ParseError("empty stream after separator", end)

    for rid, (nid, off) in rec_open.items():
        if rid not in rec_close:
            raise ParseError(f"dangling recycle opener {rid}", off, "dangling_recycle")
        edges.append(FlowEdge(nid, rec_close[rid][0], MATERIAL, ()))
    for rid, (nid, off) in rec_close.items():
        if rid not in rec_open:
            raise ParseError(f"dangling recycle closer {rid}", off, "dangling_recycle")
    for sid, (nid, off) in sig_open.items():
        if sid not in sig_close:
            raise ParseError(f"dangling signal opener {sid}", off, "dangling_signal")
        edges.append(FlowEdge(nid, sig_close[sid][0], SIGNAL, ()))
    for sid, (nid, off) in sig_close.items():
        if sid not in sig_open:
            raise ParseError(f"dangling signal closer {sid}", off, "dangling_signal")

    unit_nodes = []
    for nd in nodes:
        group = nd["comp"] if nd["comp"] is not None else None
        unit_nodes.append(
            UnitNode(
                id=nd["id"],
                unit_class=nd["cls"],
                compartment=nd["comp"],
                letter_code=nd["letter"],
                equipment_group=group,
            )
        )
    try:
        return FlowsheetGraph(unit_nodes, edges)
    except GraphError as exc:
        raise ParseError(str(exc), end) from exc


# -- canonicalization and augmentation ---------------------------------------


def canonicalize(s) -> SfilesString:
    return serialize(parse(s), CANONICAL)


def augment(s, n_variants: int, seed: int) -> list[SfilesString]:
    """Seeded random re-serializations of s. Distinct strings are preferred
    (extra seeds are drawn when variants collide), but when the string has no
    branching freedom the list is padded with repeats to length n_variants."""
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    g = parse(s)
    out: list[SfilesString] = []
    seen: set[str] = set()
    budget = max(20 * n_variants, 40)
    attempt = 0
    while len(out) < n_variants and attempt < budget:
        variant_seed = _digest(seed, "variant", attempt)
        v = serialize(g, BranchOrderPolicy(RANDOM_MODE, variant_seed))
        attempt += 1
        if v.text not in seen:
            seen.add(v.text)
            out.append(v)
    i = 0
    while len(out) < n_variants:
        out.append(out[i % len(out)])
        i += 1
    return out
