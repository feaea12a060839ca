"""Streaming dataflow graph: tokens, node taxonomy, wiring, serialization.

A graph is a DAG of streaming primitives connected by typed channels.
Streams carry data tokens (coordinates, positions into the next level, or
values) punctuated by Stop(level) markers and a final Done:

* ``Stop(k)`` closes fiber levels 0..k at one point; adjacent stops are
  legal and encode empty fibers.
* The final fiber's closing stop is implicit in Done, so no stream ends
  with a stop directly before Done.
* A level-k group therefore contains one more fiber than it has stops of
  level >= its own nesting strictly inside it.

Node kinds
----------
root       emits a single position then Done; seeds outermost scanners
scan       expands parent positions into (coordinate, position) pairs for
           one storage level; adds one nesting level
vals       turns positions into stored values (absent position -> fill)
repeat     repeats its current data element once per control token;
           advances on control stops
intersect  co-iterates two (crd, payload) fibers, keeping matches
union      co-iterates two fibers, keeping all coordinates; absent side
           yields a null payload
alu        zips two value streams through an arithmetic op
map        applies a pointwise function to one value stream
reduce     folds the innermost fiber level to one value per fiber
red1       coordinate-keyed reduction: merges sibling fibers across the
           reduced level, keeping one surviving inner level
crddrop    removes coordinates whose inner group or value is empty/zero
write_crd  records one coordinate level of a result
write_val  records result values
par        splits a stream bundle round-robin across copies
ser        re-interleaves copy bundles back into one stream
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import GraphError


# --- tokens ---------------------------------------------------------------


class Stop:
    """Closes fiber levels 0..level at a single stream point."""

    __slots__ = ("level",)
    _cache: dict[int, "Stop"] = {}

    def __new__(cls, level: int):
        tok = cls._cache.get(level)
        if tok is None:
            tok = object.__new__(cls)
            tok.level = level
            cls._cache[level] = tok
        return tok

    def __repr__(self):
        return f"S{self.level}"


class _Sentinel:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return self.name


DONE = _Sentinel("Done")
NULL = _Sentinel("Null")  # absent position (e.g. missing side of a union)


def is_data(tok) -> bool:
    return not isinstance(tok, Stop) and tok is not DONE


# --- graph ----------------------------------------------------------------

CRD, REF, VAL = "crd", "ref", "val"

# kind -> (input ports, output ports); P marks payload ports that may be
# positions or values, D marks data ports that follow the incoming kind.
_PORTS = {
    "root": ((), ("ref",)),
    "scan": (("ref",), ("crd", "ref")),
    "vals": (("ref",), ("val",)),
    "repeat": (("data", "ctrl"), ("out",)),
    "intersect": (("crd0", "p0", "crd1", "p1"), ("crd", "p0", "p1")),
    "union": (("crd0", "p0", "crd1", "p1"), ("crd", "p0", "p1")),
    "alu": (("in0", "in1"), ("out",)),
    "map": (("in",), ("out",)),
    "reduce": (("in",), ("out",)),
    "red1": (("crd", "val"), ("crd", "val")),
    "crddrop": (("outer", "inner"), ("outer", "inner")),
    "write_crd": (("crd",), ()),
    "write_val": (("val",), ()),
}

_POLY = {  # ports whose stream kind is not fixed by the node kind
    ("repeat", "data"): (REF, VAL),
    ("repeat", "out"): (REF, VAL),
    ("intersect", "p0"): (REF, VAL),
    ("intersect", "p1"): (REF, VAL),
    ("union", "p0"): (REF, VAL),
    ("union", "p1"): (REF, VAL),
    ("crddrop", "inner"): (CRD, VAL),
}

_FIXED = {
    ("root", "ref"): REF,
    ("scan", "ref"): REF,
    ("scan", "crd"): CRD,
    ("vals", "ref"): REF,
    ("vals", "val"): VAL,
    ("repeat", "ctrl"): CRD,
    ("intersect", "crd0"): CRD,
    ("intersect", "crd1"): CRD,
    ("intersect", "crd"): CRD,
    ("union", "crd0"): CRD,
    ("union", "crd1"): CRD,
    ("union", "crd"): CRD,
    ("alu", "in0"): VAL,
    ("alu", "in1"): VAL,
    ("alu", "out"): VAL,
    ("map", "in"): VAL,
    ("map", "out"): VAL,
    ("reduce", "in"): VAL,
    ("reduce", "out"): VAL,
    ("red1", "crd"): CRD,
    ("red1", "val"): VAL,
    ("crddrop", "outer"): CRD,
    ("write_crd", "crd"): CRD,
    ("write_val", "val"): VAL,
}


def node_ports(kind: str, params: dict) -> tuple[tuple[str, ...], tuple[str, ...]]:
    if kind == "par":
        n = params["nstreams"]
        f = params["factor"]
        ins = tuple(f"in{i}" for i in range(n))
        outs = tuple(f"out{k}_{i}" for k in range(f) for i in range(n))
        return ins, outs
    if kind == "ser":
        n = params["nstreams"]
        f = params["factor"]
        ins = tuple(f"in{k}_{i}" for k in range(f) for i in range(n))
        outs = tuple(f"out{i}" for i in range(n))
        return ins, outs
    if kind not in _PORTS:
        raise GraphError(f"unknown node kind {kind!r}")
    return _PORTS[kind]


def port_kinds(kind: str, port: str) -> tuple[str, ...]:
    if kind in ("par", "ser"):
        return (CRD, REF, VAL)
    if (kind, port) in _POLY:
        return _POLY[(kind, port)]
    return (_FIXED[(kind, port)],)


@dataclass(frozen=True)
class Edge:
    src: str
    src_port: str
    dst: str
    dst_port: str
    kind: str  # crd | ref | val


@dataclass
class Node:
    id: str
    kind: str
    params: dict = field(default_factory=dict)


class DataflowGraph:
    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.edges: list[Edge] = []

    def add(self, kind: str, name_hint: str | None = None, **params) -> str:
        base = name_hint or kind
        nid = base
        k = 1
        while nid in self.nodes:
            nid = f"{base}_{k}"
            k += 1
        node_ports(kind, params)  # raises for unknown kinds
        self.nodes[nid] = Node(nid, kind, params)
        return nid

    def connect(self, src: str, src_port: str, dst: str, dst_port: str, kind: str):
        for nid, role in ((src, "source"), (dst, "destination")):
            if nid not in self.nodes:
                raise GraphError(f"{role} node {nid!r} does not exist")
        sn, dn = self.nodes[src], self.nodes[dst]
        s_in, s_out = node_ports(sn.kind, sn.params)
        d_in, d_out = node_ports(dn.kind, dn.params)
        if src_port not in s_out:
            raise GraphError(f"{src}:{src_port} is not an output port")
        if dst_port not in d_in:
            raise GraphError(f"{dst}:{dst_port} is not an input port")
        if kind not in port_kinds(sn.kind, src_port):
            raise GraphError(f"{src}:{src_port} cannot carry {kind} streams")
        if kind not in port_kinds(dn.kind, dst_port):
            raise GraphError(f"{dst}:{dst_port} cannot carry {kind} streams")
        self.edges.append(Edge(src, src_port, dst, dst_port, kind))

    # -- queries --

    def in_edge(self, node: str, port: str) -> Edge:
        found = [e for e in self.edges if e.dst == node and e.dst_port == port]
        if len(found) != 1:
            raise GraphError(f"{node}:{port} has {len(found)} incoming edges")
        return found[0]

    def out_edges(self, node: str, port: str) -> list[Edge]:
        return [e for e in self.edges if e.src == node and e.src_port == port]

    def kinds(self) -> dict[str, int]:
        """Multiset of node kinds, for structural assertions."""
        counts: dict[str, int] = {}
        for n in self.nodes.values():
            counts[n.kind] = counts.get(n.kind, 0) + 1
        return counts

    def validate(self):
        seen_dst = set()
        for e in self.edges:
            key = (e.dst, e.dst_port)
            if key in seen_dst:
                raise GraphError(f"{e.dst}:{e.dst_port} has multiple incoming edges")
            seen_dst.add(key)
        for node in self.nodes.values():
            ins, _ = node_ports(node.kind, node.params)
            for p in ins:
                if (node.id, p) not in seen_dst:
                    raise GraphError(f"{node.id}:{p} is not connected")
        self.topo_order()

    def topo_order(self) -> list[str]:
        succ: dict[str, set[str]] = {nid: set() for nid in self.nodes}
        indeg: dict[str, int] = {nid: 0 for nid in self.nodes}
        for e in self.edges:
            if e.dst not in succ[e.src]:
                succ[e.src].add(e.dst)
                indeg[e.dst] += 1
        ready = sorted(nid for nid, d in indeg.items() if d == 0)
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            added = []
            for m in succ[nid]:
                indeg[m] -= 1
                if indeg[m] == 0:
                    added.append(m)
            for m in sorted(added):
                # keep a stable order: insert in sorted position
                ready.append(m)
            ready.sort()
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return order

    # -- serialization --

    def to_json(self) -> str:
        doc = {
            "version": 1,
            "nodes": [
                {"id": n.id, "kind": n.kind, "params": _jsonable(n.params)}
                for n in sorted(self.nodes.values(), key=lambda n: n.id)
            ],
            "edges": [
                {
                    "src": [e.src, e.src_port],
                    "dst": [e.dst, e.dst_port],
                    "kind": e.kind,
                }
                for e in sorted(
                    self.edges, key=lambda e: (e.src, e.src_port, e.dst, e.dst_port)
                )
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DataflowGraph":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise GraphError(f"unsupported graph version {doc.get('version')!r}")
        g = cls()
        for nd in doc["nodes"]:
            params = {k: _tupled(v) for k, v in nd["params"].items()}
            g.nodes[nd["id"]] = Node(nd["id"], nd["kind"], params)
        for ed in doc["edges"]:
            g.edges.append(
                Edge(ed["src"][0], ed["src"][1], ed["dst"][0], ed["dst"][1], ed["kind"])
            )
        return g

    def to_dot(self) -> str:
        style = {CRD: "solid", REF: "dashed", VAL: "bold"}
        lines = ["digraph dataflow {", "  rankdir=TB;", "  node [shape=box];"]
        for n in sorted(self.nodes.values(), key=lambda n: n.id):
            label = n.id
            if n.kind == "alu":
                label = f"{n.id}\\n{n.params.get('op', '')}"
            elif n.kind in ("scan", "vals", "write_crd", "write_val"):
                label = f"{n.id}\\n{n.params.get('tensor', '')}"
            lines.append(f'  "{n.id}" [label="{label}"];')
        for e in sorted(self.edges, key=lambda e: (e.src, e.src_port, e.dst)):
            lines.append(
                f'  "{e.src}" -> "{e.dst}" '
                f'[style={style[e.kind]}, label="{e.src_port}"];'
            )
        lines.append("}")
        return "\n".join(lines) + "\n"


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    if isinstance(value, dict):
        return {k: _tupled(v) for k, v in value.items()}
    return value
