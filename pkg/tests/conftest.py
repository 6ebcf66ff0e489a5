"""Shared reference data: a small heat-integrated reactor process with a
recycle, three control loops, and a utility stream, plus a larger distillation
example. The strings and the token split are the fixed reference answers the
codec and tokenizer must reproduce exactly."""

import pytest

from pfd2pid.graph import MATERIAL, SIGNAL, FlowEdge, FlowsheetGraph, UnitNode

# P&ID of the reactor-recycle example: two feeds, heat exchanger shared with
# the utility stream, reactor level control, recycle flow control, utility
# temperature control.
REFERENCE_PID = (
    "(raw)(hex){1}(C){TC}_1(mix)<1(r)[(C){LC}_2](v)<_2(splt)[(prod)]"
    "(C){FC}_3(v)1<_3n|(raw)(v)<_1(hex){1}(prod)"
)

# Same process with controllers and signals stripped (valves kept).
REFERENCE_PFD = "(raw)(hex){1}(mix)<1(r)(v)(splt)[(prod)](v)1n|(raw)(v)(hex){1}(prod)"

# A valid re-serialization of REFERENCE_PFD with the splitter branches swapped.
REFERENCE_PFD_REORDERED = (
    "(raw)(hex){1}(mix)<1(r)(v)(splt)[(v)1](prod)n|(raw)(v)(hex){1}(prod)"
)

# Reference token split of REFERENCE_PID (33 tokens).
REFERENCE_TOKENS = [
    "(raw)", "(hex)", "{1}", "(C)", "{TC}", "_1", "(mix)", "<1", "(r)", "[",
    "(C)", "{LC}", "_2", "]", "(v)", "<_2", "(splt)", "[", "(prod)", "]",
    "(C)", "{FC}", "_3", "(v)", "1", "<_3", "n|", "(raw)", "(v)", "<_1",
    "(hex)", "{1}", "(prod)",
]

# Distillation PFD exercising incoming branches (<&| ... &|), stream tags
# (tout/bout), multiple recycles, and four independent streams.
COLUMN_PFD = (
    "(raw)(hex){1}(mix)<&|(raw)(v)&|(v)(hex){2}(rect)<1<2"
    "[{tout}(cond)(sep)[(v)(prod)](splt)[(v)(prod)](v)1]"
    "{bout}(splt)[(v)(prod)](hex){3}2"
    "n|(raw)(hex){1}(v)(prod)n|(raw)(v)(hex){2}(prod)n|(raw)(v)(hex){3}(prod)"
)


def build_reference_pid_graph() -> FlowsheetGraph:
    """Hand-built graph of REFERENCE_PID, node ids in reading order."""
    nodes = [
        UnitNode(0, "raw"),
        UnitNode(1, "hex", compartment=1, equipment_group=1),
        UnitNode(2, "C", letter_code="TC"),
        UnitNode(3, "mix"),
        UnitNode(4, "r"),
        UnitNode(5, "C", letter_code="LC"),
        UnitNode(6, "v"),
        UnitNode(7, "splt"),
        UnitNode(8, "prod"),
        UnitNode(9, "C", letter_code="FC"),
        UnitNode(10, "v"),
        UnitNode(11, "raw"),
        UnitNode(12, "v"),
        UnitNode(13, "hex", compartment=1, equipment_group=1),
        UnitNode(14, "prod"),
    ]
    material = [
        (0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (4, 6), (6, 7), (7, 8),
        (7, 9), (9, 10), (10, 3), (11, 12), (12, 13), (13, 14),
    ]
    signals = [(2, 12), (5, 6), (9, 10)]
    edges = [FlowEdge(s, d, MATERIAL) for s, d in material]
    edges += [FlowEdge(s, d, SIGNAL) for s, d in signals]
    return FlowsheetGraph(nodes, edges)


@pytest.fixture
def reference_pid_graph() -> FlowsheetGraph:
    return build_reference_pid_graph()
