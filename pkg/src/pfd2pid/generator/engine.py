"""Synthetic flowsheet generation.

Flowsheets are assembled section by section: feed trains join at mixers, a
Markov chain then walks each open stream through reaction and separation
sections until it terminates in product conditioning. Section builders place
only material-side equipment (including valves), so all randomness lives in
the part of the flowsheet both dataset sides share. Controllers are stamped
afterwards by deterministic design heuristics keyed on the visible structure,
plus a single per-sample column control scheme choice; given a PFD and that
scheme, the P&ID side is fully determined.
"""

from __future__ import annotations

import itertools
import json
import math
import random
from collections import deque
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..codec import SerializeError, serialize
from ..graph import (
    CONTROLLER_CLASS,
    MATERIAL,
    SIGNAL,
    VALVE_CLASS,
    FlowEdge,
    FlowsheetGraph,
    UnitNode,
    strip_controls,
)
from ..pipeline import DatasetPair

_MARKOV_STATES = ("feed_section", "after_reaction", "after_separation")
_SECTION_KEYS = (
    "transition_probs",
    "feeds",
    "reaction",
    "reactor_patterns",
    "separation",
    "column_control_schemes",
    "conditioning",
)


class GenerationError(ValueError):
    """Invalid generator configuration or exhausted retry budget."""


def load_library(path=None) -> dict:
    """Read a pattern library, the packaged default when no path is given."""
    if path is None:
        text = resources.files(__package__).joinpath("library.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    lib = json.loads(text)
    missing = [k for k in _SECTION_KEYS if k not in lib]
    if missing:
        raise GenerationError(f"pattern library is missing sections: {missing}")
    return lib


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int
    patterns: dict
    max_feeds: int = 3
    branch_node_cap: int = 65
    graph_node_cap: int = 100
    n_reactor_patterns: int = 6
    n_column_control_schemes: int = 7
    strip_valves_in_input: bool = False

    def __post_init__(self):
        if not 1 <= self.max_feeds <= 3:
            raise GenerationError(f"max_feeds must be in 1..3, got {self.max_feeds}")
        if not 0 < self.branch_node_cap <= self.graph_node_cap:
            raise GenerationError(
                "need 0 < branch_node_cap <= graph_node_cap, got "
                f"{self.branch_node_cap} and {self.graph_node_cap}"
            )
        missing = [k for k in _SECTION_KEYS if k not in self.patterns]
        if missing:
            raise GenerationError(f"pattern library is missing sections: {missing}")
        rows = self.patterns["transition_probs"]
        for state in _MARKOV_STATES:
            if state not in rows:
                raise GenerationError(f"no transition row for state {state!r}")
        for state, row in rows.items():
            if any(p < 0 for p in row.values()):
                raise GenerationError(f"negative probability in row {state!r}")
            total = sum(row.values())
            if not math.isclose(total, 1.0, abs_tol=1e-9):
                raise GenerationError(
                    f"transition row {state!r} sums to {total}, expected 1"
                )
        if self.n_reactor_patterns != len(self.patterns["reactor_patterns"]):
            raise GenerationError(
                f"n_reactor_patterns={self.n_reactor_patterns} but the library "
                f"defines {len(self.patterns['reactor_patterns'])}"
            )
        if self.n_column_control_schemes != len(self.patterns["column_control_schemes"]):
            raise GenerationError(
                f"n_column_control_schemes={self.n_column_control_schemes} but the "
                f"library defines {len(self.patterns['column_control_schemes'])}"
            )
        probs = self.patterns["separation"].get("scheme_probs")
        if probs is None or len(probs) != self.n_column_control_schemes:
            raise GenerationError(
                "separation.scheme_probs must list one probability per column "
                "control scheme"
            )
        if any(p < 0 for p in probs):
            raise GenerationError("negative probability in scheme_probs")
        if not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise GenerationError(
                f"scheme_probs sums to {sum(probs)}, expected 1"
            )

    @property
    def transition_probs(self) -> dict:
        return self.patterns["transition_probs"]

    @classmethod
    def default(cls, seed: int, library_path=None, **overrides) -> "GeneratorConfig":
        lib = load_library(library_path)
        overrides.setdefault("n_reactor_patterns", len(lib["reactor_patterns"]))
        overrides.setdefault(
            "n_column_control_schemes", len(lib["column_control_schemes"])
        )
        return cls(seed=seed, patterns=lib, **overrides)


class _Builder:
    """Accumulates material-side nodes and edges while sections are stamped
    out. Controllers are not placed here; `_decorate` adds them once the
    structure is final."""

    def __init__(self, rng: random.Random, cfg: GeneratorConfig):
        self.rng = rng
        self.cfg = cfg
        self.lib = cfg.patterns
        self.nodes: list[UnitNode] = []
        self.edges: list[FlowEdge] = []
        self.n_recycles = 0
        self._next_group = 1
        # heat exchangers still missing their second stream: a reactor
        # effluent may claim an eligible one (heat integration), the rest
        # get utility streams at the end; entries are [hex_id, group, eligible]
        self.pending_hex: list[list] = []

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def unit(self, cls: str, group: int | None = None) -> int:
        nid = len(self.nodes)
        self.nodes.append(
            UnitNode(
                id=nid,
                unit_class=cls,
                compartment=1 if group is not None else None,
                letter_code=None,
                equipment_group=group,
            )
        )
        return nid

    def edge(self, a: int, b: int, tags=()) -> None:
        self.edges.append(FlowEdge(a, b, MATERIAL, tuple(tags)))

    def chance(self, p: float) -> bool:
        return self.rng.random() < p

    def pick(self, probs: dict) -> str:
        r = self.rng.random()
        acc = 0.0
        key = None
        for key, p in probs.items():
            acc += p
            if r < acc:
                return key
        return key

    def new_group(self) -> int:
        g = self._next_group
        self._next_group += 1
        return g

    def exchanger(self, cur: int, eligible: bool) -> int:
        """A heat exchanger awaiting its second side; eligible ones may be
        claimed for heat integration by a downstream reactor."""
        g = self.new_group()
        hx = self.unit("hex", group=g)
        self.edge(cur, hx)
        self.pending_hex.append([hx, g, eligible])
        return hx

    # -- sections --------------------------------------------------------

    def build_feed(self) -> int:
        """One feed train; returns its last node."""
        feeds = self.lib["feeds"]
        cur = self.unit("raw")
        machine = self.pick(feeds["machine_probs"])
        if machine != "none":
            m = self.unit(machine)
            self.edge(cur, m)
            cur = m
        if self.chance(feeds["p_valve"]):
            v = self.unit(VALVE_CLASS)
            self.edge(cur, v)
            cur = v
        if self.chance(feeds["p_preheat"]):
            cur = self.exchanger(cur, eligible=True)
        return cur

    def build_feed_section(self) -> int:
        feeds = self.lib["feeds"]
        n_feeds = min(int(self.pick(feeds["count_probs"])), self.cfg.max_feeds)
        trains = [self.build_feed() for _ in range(n_feeds)]
        cur = trains[0]
        for out in trains[1:]:
            m = self.unit("mix")
            self.edge(cur, m)
            self.edge(out, m)
            cur = m
        return cur

    def build_reaction(self, inlet: int) -> int:
        rx = self.lib["reaction"]
        patterns = self.lib["reactor_patterns"]
        pat = patterns[self.rng.randrange(len(patterns))]
        cur = inlet
        recycle = bool(pat.get("recycle")) and self.n_recycles < 9
        mix = None
        if pat.get("second_feed"):
            f2 = self.unit("raw")
            if self.chance(rx["p_second_feed_valve"]):
                v2 = self.unit(VALVE_CLASS)
                self.edge(f2, v2)
                f2 = v2
            mix = self.unit("mix")
            self.edge(cur, mix)
            self.edge(f2, mix)
            cur = mix
        if recycle and mix is None:
            mix = self.unit("mix")
            self.edge(cur, mix)
            cur = mix
        if self.chance(rx["p_inlet_valve"]):
            v = self.unit(VALVE_CLASS)
            self.edge(cur, v)
            cur = v
        r = self.unit("r")
        self.edge(cur, r)
        cur = r
        if pat.get("heat_integration"):
            pending = next((p for p in self.pending_hex if p[2]), None)
            if pending is not None:
                partner = self.unit("hex", group=pending[1])
                self.edge(cur, partner)
                cur = partner
                self.pending_hex.remove(pending)
        if pat.get("series"):
            if self.chance(rx["p_intercooler"]):
                cur = self.exchanger(cur, eligible=False)
            r2 = self.unit("r")
            self.edge(cur, r2)
            cur = r2
        if self.chance(rx["p_outlet_valve"]):
            v_out = self.unit(VALVE_CLASS)
            self.edge(cur, v_out)
            cur = v_out
        if recycle:
            splt = self.unit("splt")
            self.edge(cur, splt)
            rv = self.unit(VALVE_CLASS)
            self.edge(splt, rv)
            self.edge(rv, mix)
            self.n_recycles += 1
            cur = splt
        return cur

    def build_separation(self, inlet: int) -> list[int]:
        sep_cfg = self.lib["separation"]
        if self.chance(sep_cfg["p_feed_valve"]):
            v = self.unit(VALVE_CLASS)
            self.edge(inlet, v)
            inlet = v
        # a column spends two recycle slots (reflux and reboiler return)
        if not (self.chance(sep_cfg["p_column"]) and self.n_recycles <= 7):
            return self._build_flash(inlet)
        rect = self.unit("rect")
        self.edge(inlet, rect)
        cond = self.unit("cond")
        self.edge(rect, cond, tags=("tout",))
        drum = self.unit("sep")
        self.edge(cond, drum)
        v_dist = self.unit(VALVE_CLASS)
        self.edge(drum, v_dist)
        v_reflux = self.unit(VALVE_CLASS)
        self.edge(drum, v_reflux)
        self.edge(v_reflux, rect)
        splt = self.unit("splt")
        self.edge(rect, splt, tags=("bout",))
        v_bot = self.unit(VALVE_CLASS)
        self.edge(splt, v_bot)
        g = self.new_group()
        reb = self.unit("hex", group=g)
        self.edge(splt, reb)
        self.edge(reb, rect)
        self.n_recycles += 2
        self._utility_stream(g)
        return [v_dist, v_bot]

    def _build_flash(self, inlet: int) -> list[int]:
        drum = self.unit("sep")
        self.edge(inlet, drum)
        v_top = self.unit(VALVE_CLASS)
        self.edge(drum, v_top, tags=("tout",))
        v_bot = self.unit(VALVE_CLASS)
        self.edge(drum, v_bot, tags=("bout",))
        return [v_top, v_bot]

    def build_conditioning(self, node: int) -> None:
        cond = self.lib["conditioning"]
        cur = node
        if self.chance(cond["p_cooler"]):
            cur = self.exchanger(cur, eligible=False)
        if self.chance(cond["p_valve"]) and self.nodes[cur].unit_class != VALVE_CLASS:
            v = self.unit(VALVE_CLASS)
            self.edge(cur, v)
            cur = v
        p = self.unit("prod")
        self.edge(cur, p)

    def _utility_stream(self, group: int) -> None:
        """Supply stream for the second side of a heat exchanger."""
        u_raw = self.unit("raw")
        u_valve = self.unit(VALVE_CLASS)
        u_hex = self.unit("hex", group=group)
        u_prod = self.unit("prod")
        self.edge(u_raw, u_valve)
        self.edge(u_valve, u_hex)
        self.edge(u_hex, u_prod)

    def resolve_pending_hex(self) -> None:
        for _, g, _ in self.pending_hex:
            self._utility_stream(g)
        self.pending_hex.clear()


def _build(rng: random.Random, cfg: GeneratorConfig) -> FlowsheetGraph:
    b = _Builder(rng, cfg)
    cur = b.build_feed_section()
    outlets = deque([(cur, "feed_section")])
    while outlets:
        node, state = outlets.popleft()
        if b.n_nodes > cfg.branch_node_cap:
            choice = "conditioning"
        else:
            choice = b.pick(cfg.transition_probs[state])
        if choice == "reaction":
            outlets.append((b.build_reaction(node), "after_reaction"))
        elif choice == "separation":
            for out in b.build_separation(node):
                outlets.append((out, "after_separation"))
        else:
            b.build_conditioning(node)
    b.resolve_pending_hex()
    return FlowsheetGraph(b.nodes, b.edges)


class _Decorator:
    """Stamps controllers onto a finished material structure.

    Every rule keys on equipment the stripped input still shows, so the
    control layer is a deterministic function of the PFD except for the
    column scheme, which is drawn once per flowsheet. Rules claim valves in a
    fixed order (columns, flash drums, reactor outlets, utilities, feeds,
    recycles, products); a claimed valve is skipped by later rules.
    """

    def __init__(self, structure: FlowsheetGraph, scheme: dict):
        self.scheme = scheme
        self.nodes = list(structure.nodes)
        self.edges = list(structure.edges)
        self.cls = {n.id: n.unit_class for n in structure.nodes}
        self.group = {n.id: n.equipment_group for n in structure.nodes}
        self.succs: dict[int, list[int]] = {n.id: [] for n in structure.nodes}
        self.preds: dict[int, list[int]] = {n.id: [] for n in structure.nodes}
        self.tags: dict[tuple[int, int], tuple] = {}
        for e in structure.edges:
            self.succs[e.src].append(e.dst)
            self.preds[e.dst].append(e.src)
            self.tags[(e.src, e.dst)] = e.tags
        self.claimed: set[int] = set()
        self.utility_valves = self._find_utility_valves()

    def build(self) -> FlowsheetGraph:
        for rect in self._of_class("rect"):
            self._decorate_column(rect)
        for drum in self._of_class("sep"):
            self._decorate_flash(drum)
        for r in self._of_class("r"):
            self._decorate_reactor_outlet(r)
        self._decorate_exchangers()
        self._decorate_feed_valves()
        self._decorate_recycle_valves()
        self._decorate_product_valves()
        return FlowsheetGraph(self.nodes, self.edges)

    # -- graph helpers ---------------------------------------------------

    def _of_class(self, cls: str) -> list[int]:
        return [n.id for n in self.nodes if n.unit_class == cls]

    def _controller(self, letter: str) -> int:
        nid = len(self.nodes)
        self.nodes.append(
            UnitNode(
                id=nid,
                unit_class=CONTROLLER_CLASS,
                compartment=None,
                letter_code=letter,
                equipment_group=None,
            )
        )
        return nid

    def _stub(self, anchor: int, letter: str, valve: int) -> None:
        """Controller hanging off its anchor, acting on a valve."""
        c = self._controller(letter)
        self.edges.append(FlowEdge(anchor, c, MATERIAL))
        self.edges.append(FlowEdge(c, valve, SIGNAL))
        self.claimed.add(valve)

    def _inline(self, after: int, letter: str, valve: int) -> None:
        """Controller spliced into the stream right after `after`."""
        succ = self.succs[after][0]
        c = self._controller(letter)
        tags = self.tags[(after, succ)]
        self.edges = [
            e for e in self.edges if not (e.src == after and e.dst == succ)
        ]
        self.edges.append(FlowEdge(after, c, MATERIAL, tags))
        self.edges.append(FlowEdge(c, succ, MATERIAL))
        self.edges.append(FlowEdge(c, valve, SIGNAL))
        self.claimed.add(valve)

    def _find_utility_valves(self) -> set[int]:
        """Valves on raw->valve->hex->prod utility streams."""
        found = set()
        for v in self._of_class(VALVE_CLASS):
            if [self.cls[p] for p in self.preds[v]] != ["raw"]:
                continue
            succs = self.succs[v]
            if len(succs) == 1 and self.cls[succs[0]] == "hex":
                if [self.cls[s] for s in self.succs[succs[0]]] == ["prod"]:
                    found.add(v)
        return found

    def _hex_partner(self, hx: int) -> int | None:
        g = self.group[hx]
        for n in self.nodes:
            if n.unit_class == "hex" and n.equipment_group == g and n.id != hx:
                return n.id
        return None

    # -- design heuristics -----------------------------------------------

    def _decorate_column(self, rect: int) -> None:
        """One scheme instance: anchors on the column complex, signals to
        its four duty valves (distillate, reflux, bottoms, reboiler)."""
        cond = next(
            s for s in self.succs[rect] if "tout" in self.tags[(rect, s)]
        )
        drum = self.succs[cond][0]
        v_reflux = next(
            v for v in self.succs[drum] if rect in self.succs[v]
        )
        v_dist = next(v for v in self.succs[drum] if v != v_reflux)
        splt = next(
            s for s in self.succs[rect] if "bout" in self.tags[(rect, s)]
        )
        v_bot = next(s for s in self.succs[splt] if self.cls[s] == VALVE_CLASS)
        reb = next(s for s in self.succs[splt] if self.cls[s] == "hex")
        utility_hex = self._hex_partner(reb)
        v_duty = self.preds[utility_hex][0]
        anchors = {
            "column": rect,
            "condenser": cond,
            "reflux_drum": drum,
            "bottoms_splitter": splt,
        }
        valves = {
            "v_distillate": v_dist,
            "v_reflux": v_reflux,
            "v_bottoms": v_bot,
            "v_reboiler_duty": v_duty,
        }
        for letter, anchor, valve in self.scheme["controls"]:
            self._stub(anchors[anchor], letter, valves[valve])
        self.claimed.update(valves.values())
        self.claimed.update((reb, utility_hex))

    def _decorate_flash(self, drum: int) -> None:
        """Flash drums run pressure control overhead, level control on the
        bottoms; column reflux drums have no tagged outlets and are skipped."""
        v_top = v_bot = None
        for s in self.succs[drum]:
            tags = self.tags[(drum, s)]
            if "tout" in tags:
                v_top = s
            elif "bout" in tags:
                v_bot = s
        if v_top is None or v_bot is None:
            return
        self._stub(drum, "PC", v_top)
        self._stub(drum, "LC", v_bot)

    def _decorate_reactor_outlet(self, r: int) -> None:
        """A valve directly downstream of a reactor holds its level."""
        for v in self.succs[r]:
            if self.cls[v] == VALVE_CLASS and v not in self.claimed:
                self._stub(r, "LC", v)

    def _decorate_exchangers(self) -> None:
        """Utility-heated exchangers get a temperature controller on the
        process side acting on the utility valve: indicating on feed
        preheaters (no reactor upstream), plain elsewhere. Integrated pairs
        exchange process heat and carry no controller."""
        for hx in self._of_class("hex"):
            if hx in self.claimed or self.group[hx] is None:
                continue
            partner = self._hex_partner(hx)
            if partner is None or self.preds[hx] == [] or not self.succs[hx]:
                continue
            duty = [p for p in self.preds[partner] if p in self.utility_valves]
            if not duty:
                continue
            letter = "TIC" if self._feed_side(hx) else "TC"
            self._inline(hx, letter, duty[0])
            self.claimed.update((hx, partner))

    def _feed_side(self, hx: int) -> bool:
        """True when nothing upstream of the exchanger has reacted yet."""
        seen = set()
        queue = list(self.preds[hx])
        while queue:
            n = queue.pop()
            if n in seen:
                continue
            seen.add(n)
            if self.cls[n] == "r":
                return False
            queue.extend(self.preds[n])
        return True

    def _decorate_feed_valves(self) -> None:
        """Fresh feeds are flow-metered: raw-fed valves get an indicating
        flow controller in the stream behind them."""
        for v in self._of_class(VALVE_CLASS):
            if v in self.claimed or v in self.utility_valves:
                continue
            p = self.preds[v][0]
            while self.cls[p] in ("pump", "comp"):
                p = self.preds[p][0]
            if self.cls[p] == "raw":
                self._inline(v, "FIC", v)

    def _decorate_recycle_valves(self) -> None:
        """A valve returning a split stream to an upstream mixer holds the
        recycle flow."""
        for v in self._of_class(VALVE_CLASS):
            if v in self.claimed:
                continue
            pred = self.preds[v][0]
            succs = self.succs[v]
            if self.cls[pred] != "splt" or not succs:
                continue
            if self.cls[succs[0]] == "mix" and self._reaches(succs[0], pred):
                self._inline(v, "FC", v)

    def _decorate_product_valves(self) -> None:
        """The last valve before a product stream meters the draw."""
        for v in self._of_class(VALVE_CLASS):
            if v in self.claimed:
                continue
            succs = self.succs[v]
            if succs and self.cls[succs[0]] == "prod":
                self._inline(v, "FC", v)

    def _reaches(self, start: int, target: int) -> bool:
        seen = set()
        queue = [start]
        while queue:
            n = queue.pop()
            if n == target:
                return True
            if n in seen:
                continue
            seen.add(n)
            queue.extend(self.succs[n])
        return False


def _pick_scheme(rng: random.Random, cfg: GeneratorConfig) -> dict:
    schemes = cfg.patterns["column_control_schemes"]
    probs = cfg.patterns["separation"]["scheme_probs"]
    r = rng.random()
    acc = 0.0
    for scheme, p in zip(schemes, probs):
        acc += p
        if r < acc:
            return scheme
    return schemes[-1]


def _candidate(cfg: GeneratorConfig, attempt: int):
    """Build one candidate pair, or None when the draw violates a cap."""
    rng = random.Random(f"{cfg.seed}:{attempt}")
    structure = _build(rng, cfg)
    scheme = _pick_scheme(rng, cfg)
    pid = _Decorator(structure, scheme).build()
    if pid.n_nodes > cfg.graph_node_cap:
        return None
    try:
        serialize(pid)
    except SerializeError:
        return None
    pfd = strip_controls(pid, remove_valves=cfg.strip_valves_in_input)
    return pid, pfd


def generate_pid(cfg: GeneratorConfig) -> tuple[FlowsheetGraph, FlowsheetGraph]:
    """One (P&ID, PFD) graph pair, deterministic in cfg.seed."""
    for attempt in itertools.count():
        result = _candidate(cfg, attempt)
        if result is not None:
            return result
        if attempt >= 1000:
            raise GenerationError("no candidate satisfied the caps in 1000 attempts")


def generate_dataset(cfg: GeneratorConfig, n: int) -> list[DatasetPair]:
    """n pairs with unique canonical strings on both sides, as serialized
    records.

    Candidates are drawn from seeds derived from (cfg.seed, attempt index),
    so a fixed config yields a byte-identical dataset. Deduplication is by
    input text: the control layer is a function of the structure and the
    scheme draw, so distinct PFDs imply distinct P&IDs. The retry budget is
    20 * n attempts; exhausting it raises GenerationError.
    """
    if n < 1:
        raise GenerationError(f"dataset size must be >= 1, got {n}")
    budget = 20 * n
    pairs: list[DatasetPair] = []
    seen: set[str] = set()
    for attempt in range(budget):
        result = _candidate(cfg, attempt)
        if result is None:
            continue
        pid, pfd = result
        pfd_s = serialize(pfd)
        if pfd_s.text in seen:
            continue
        seen.add(pfd_s.text)
        pairs.append(DatasetPair(len(pairs), pfd_s, serialize(pid)))
        if len(pairs) == n:
            return pairs
    raise GenerationError(
        f"only {len(pairs)} unique flowsheets after {budget} attempts, needed {n}"
    )
