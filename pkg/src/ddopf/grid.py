"""Radial grid model: buses, pi-equivalent line parameters, edge ordering.

A grid is an undirected weighted graph. Edges are unordered node pairs
stored as (i, j) with i < j, and the edge list follows a canonical
lexicographic order so that every edge-indexed vector in the package has a
single well-defined layout. Direction-stamped quantities (line powers) use
two consecutive entries per edge, [value_ij, value_ji].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import yaml

from .errors import (
    CycleDetected,
    DimensionMismatch,
    Disconnected,
    EdgeOrderViolation,
    SchemaError,
    UnknownNode,
)

Edge = tuple[int, int]


@dataclass(frozen=True)
class LineParams:
    """Pi-equivalent circuit parameters of one line, in per-unit.

    g/b are the series admittance components; the four shunt values sit at
    the from- and to-ends of the pi circuit and default to zero.
    """

    g: float
    b: float
    g_shunt_from: float = 0.0
    b_shunt_from: float = 0.0
    g_shunt_to: float = 0.0
    b_shunt_to: float = 0.0

    def __post_init__(self):
        if self.g * self.g + self.b * self.b <= 0.0:
            raise ValueError("series admittance must be nonzero")
        if self.g_shunt_from < 0.0 or self.g_shunt_to < 0.0:
            raise ValueError("shunt conductances must be nonnegative")


def normalize_edge(pair: Iterable[int]) -> Edge:
    i, j = pair
    i, j = int(i), int(j)
    if i == j:
        raise ValueError(f"self-loop edge ({i}, {j}) not allowed")
    return (i, j) if i < j else (j, i)


def canonical_edge_order(edges: Iterable[Iterable[int]]) -> list[Edge]:
    """Sort edges by (i, j) with i < j inside each pair."""
    return sorted(normalize_edge(e) for e in edges)


class Grid:
    """Immutable radial-grid description.

    Node ids are arbitrary nonnegative integers; a dense index maps them to
    0..N_b-1 in sorted order. Construction validates membership and shapes
    but not topology; call :func:`validate_radial` for that.
    """

    def __init__(
        self,
        nodes: Iterable[int],
        edges: Iterable[Iterable[int]],
        lines: Mapping[tuple[int, int], LineParams],
        voltages: Mapping[int, float] | float | None = None,
    ):
        node_list = [int(n) for n in nodes]
        if any(n < 0 for n in node_list):
            raise ValueError("node ids must be nonnegative")
        if len(set(node_list)) != len(node_list):
            raise ValueError("duplicate node ids")
        self.nodes: tuple[int, ...] = tuple(sorted(node_list))
        self._node_index = {n: k for k, n in enumerate(self.nodes)}

        self.edges: tuple[Edge, ...] = tuple(normalize_edge(e) for e in edges)
        if len(set(self.edges)) != len(self.edges):
            raise ValueError("duplicate edges")
        for i, j in self.edges:
            if i not in self._node_index or j not in self._node_index:
                raise UnknownNode(f"edge ({i}, {j}) references a node not in the grid")
        self._edge_index = {e: k for k, e in enumerate(self.edges)}

        self.lines: dict[Edge, LineParams] = {}
        for key, params in lines.items():
            self.lines[normalize_edge(key)] = params
        missing = [e for e in self.edges if e not in self.lines]
        if missing:
            raise ValueError(f"missing line parameters for edges {missing}")

        if voltages is None:
            volt = {n: 1.0 for n in self.nodes}
        elif isinstance(voltages, (int, float)):
            volt = {n: float(voltages) for n in self.nodes}
        else:
            volt = {n: 1.0 for n in self.nodes}
            for n, v in voltages.items():
                if int(n) not in self._node_index:
                    raise UnknownNode(f"voltage given for unknown node {n}")
                volt[int(n)] = float(v)
        if any(v <= 0.0 for v in volt.values()):
            raise ValueError("voltage magnitudes must be positive")
        self.voltages: dict[int, float] = volt

        self._adjacency: dict[int, set[int]] = {n: set() for n in self.nodes}
        for i, j in self.edges:
            self._adjacency[i].add(j)
            self._adjacency[j].add(i)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def node_index(self, node: int) -> int:
        try:
            return self._node_index[node]
        except KeyError:
            raise UnknownNode(f"node {node} not in grid") from None

    def edge_index(self, pair: Iterable[int]) -> int:
        e = normalize_edge(pair)
        try:
            return self._edge_index[e]
        except KeyError:
            raise UnknownNode(f"edge {e} not in grid") from None

    def line(self, pair: Iterable[int]) -> LineParams:
        return self.lines[self.edges[self.edge_index(pair)]]

    def __repr__(self):
        return f"Grid(n_nodes={self.n_nodes}, n_edges={self.n_edges})"


@dataclass
class EdgeVector:
    """Edge-indexed vector tagged with its meaning.

    kind "theta" holds one angle difference per edge; kind "p_e" holds two
    directional line powers per edge, laid out [p_ij, p_ji] in edge order.
    """

    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in ("theta", "p_e"):
            raise ValueError(f"unknown edge vector kind {self.kind!r}")

    def validate(self, grid: Grid) -> None:
        expected = grid.n_edges if self.kind == "theta" else 2 * grid.n_edges
        if self.values.shape[-1] != expected:
            raise DimensionMismatch(
                f"{self.kind} vector has width {self.values.shape[-1]}, expected {expected}"
            )


def adjacent_nodes(grid: Grid, node: int) -> set[int]:
    """Return the set of nodes sharing an edge with `node`."""
    grid.node_index(node)
    return set(grid._adjacency[node])


def all_node_pairs(grid: Grid) -> list[Edge]:
    """All unordered node pairs in canonical order; length N_b*(N_b-1)/2."""
    nodes = grid.nodes
    return [(nodes[a], nodes[b]) for a in range(len(nodes)) for b in range(a + 1, len(nodes))]


def validate_radial(grid: Grid) -> None:
    """Check canonical edge order, connectivity and absence of cycles.

    Raises EdgeOrderViolation, Disconnected or CycleDetected; returns None
    when the grid is a tree in canonical form.
    """
    for k in range(1, len(grid.edges)):
        if grid.edges[k - 1] >= grid.edges[k]:
            raise EdgeOrderViolation(k)

    # Union-find over nodes; a redundant union marks a cycle.
    parent = {n: n for n in grid.nodes}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in grid.edges:
        ri, rj = find(i), find(j)
        if ri == rj:
            raise CycleDetected(_find_cycle(grid, (i, j)))
        parent[ri] = rj

    roots: dict[int, list[int]] = {}
    for n in grid.nodes:
        roots.setdefault(find(n), []).append(n)
    if len(roots) > 1:
        raise Disconnected(list(roots.values()))


def _find_cycle(grid: Grid, closing_edge: Edge) -> list[Edge]:
    """Edges of the cycle closed by `closing_edge`, for error reporting."""
    i, j = closing_edge
    # BFS from i to j avoiding the closing edge itself.
    prev: dict[int, int] = {i: i}
    queue = [i]
    while queue:
        cur = queue.pop(0)
        if cur == j:
            break
        for nxt in grid._adjacency[cur]:
            if {cur, nxt} == {i, j} or nxt in prev:
                continue
            prev[nxt] = cur
            queue.append(nxt)
    path = [j]
    while path[-1] != i:
        path.append(prev[path[-1]])
    cycle = [normalize_edge((path[k], path[k + 1])) for k in range(len(path) - 1)]
    cycle.append(normalize_edge(closing_edge))
    return cycle


# --- configuration file ------------------------------------------------------
#
# Grid YAML schema (all values IEEE-754 doubles):
#   nodes: [1, 2, ...]
#   voltages: {node: value}           # optional, default 1.0 everywhere
#   lines:
#     - nodes: [i, j]
#       g: <series conductance, pu>
#       b: <series susceptance, pu>
#       g_shunt_from / b_shunt_from / g_shunt_to / b_shunt_to: optional, pu
#
# Loading sorts the edge list into canonical order.


def load_grid(path) -> Grid:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise SchemaError("grid config must be a mapping")
    if "nodes" not in raw:
        raise SchemaError("grid config missing required key", column="nodes")
    if "lines" not in raw:
        raise SchemaError("grid config missing required key", column="lines")
    entries = raw["lines"]
    if not isinstance(entries, list):
        raise SchemaError("grid config key 'lines' must be a list", column="lines")
    edges = []
    lines = {}
    for k, entry in enumerate(entries):
        if "nodes" not in entry:
            raise SchemaError(f"line entry {k} missing 'nodes'", column="lines.nodes")
        for req in ("g", "b"):
            if req not in entry:
                raise SchemaError(f"line entry {k} missing {req!r}", column=f"lines.{req}")
        pair = normalize_edge(entry["nodes"])
        edges.append(pair)
        lines[pair] = LineParams(
            g=float(entry["g"]),
            b=float(entry["b"]),
            g_shunt_from=float(entry.get("g_shunt_from", 0.0)),
            b_shunt_from=float(entry.get("b_shunt_from", 0.0)),
            g_shunt_to=float(entry.get("g_shunt_to", 0.0)),
            b_shunt_to=float(entry.get("b_shunt_to", 0.0)),
        )
    voltages = raw.get("voltages")
    if voltages is not None:
        voltages = {int(k): float(v) for k, v in voltages.items()}
    return Grid(raw["nodes"], canonical_edge_order(edges), lines, voltages)


def save_grid(grid: Grid, path) -> None:
    doc = {
        "nodes": list(grid.nodes),
        "voltages": {int(n): float(v) for n, v in grid.voltages.items()},
        "lines": [
            {
                "nodes": list(e),
                "g": p.g,
                "b": p.b,
                "g_shunt_from": p.g_shunt_from,
                "b_shunt_from": p.b_shunt_from,
                "g_shunt_to": p.g_shunt_to,
                "b_shunt_to": p.b_shunt_to,
            }
            for e in grid.edges
            for p in [grid.lines[e]]
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
