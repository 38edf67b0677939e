"""Physical network topologies: generation, layout, SNDLib import and JSON I/O."""

import json
import math
import re
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from risknet.errors import ParameterError, ParseError
from risknet.rng import stream

LENGTH_FLOOR_KM = 1.0
EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class Link:
    id: int
    a: int
    b: int
    length_km: float = LENGTH_FLOOR_KM
    backup_capacity: float = 0.0

    def __post_init__(self):
        if self.a == self.b:
            raise ParameterError(f"link {self.id} is a self-loop on router {self.a}")
        if self.a > self.b:
            a, b = self.b, self.a
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)
        if not (self.length_km > 0 and math.isfinite(self.length_km)):
            raise ParameterError(f"link {self.id} has invalid length {self.length_km!r}")
        if not (self.backup_capacity >= 0 and math.isfinite(self.backup_capacity)):
            raise ParameterError(
                f"link {self.id} has invalid backup capacity {self.backup_capacity!r}"
            )

    @property
    def endpoints(self):
        return (self.a, self.b)

    def other(self, router):
        if router == self.a:
            return self.b
        if router == self.b:
            return self.a
        raise ParameterError(f"router {router} is not an endpoint of link {self.id}")


@dataclass(frozen=True)
class Topology:
    """Undirected, simple, connected router graph.

    Routers are the dense integers ``0..n_routers-1`` and link ids are the
    dense integers ``0..len(links)-1`` in list order. ``positions`` is the
    optional planar layout (km) the link lengths were derived from.
    """

    n_routers: int
    links: tuple
    positions: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        if self.positions is not None:
            object.__setattr__(
                self, "positions", tuple((float(x), float(y)) for x, y in self.positions)
            )
        self._validate()

    def _validate(self):
        n = self.n_routers
        if n < 1:
            raise ParameterError("topology needs at least one router")
        seen = set()
        for i, link in enumerate(self.links):
            if link.id != i:
                raise ParameterError(f"link ids must be dense and ordered; got {link.id} at {i}")
            if not (0 <= link.a < n and 0 <= link.b < n):
                raise ParameterError(f"link {link.id} references unknown router")
            if link.endpoints in seen:
                raise ParameterError(f"duplicate link between routers {link.a} and {link.b}")
            seen.add(link.endpoints)
        if self.positions is not None:
            if len(self.positions) != n:
                raise ParameterError("positions must have one entry per router")
            if not all(math.isfinite(c) for p in self.positions for c in p):
                raise ParameterError("positions must be finite")
        if not self.is_connected():
            raise ParameterError("topology is not connected")

    @cached_property
    def adjacency(self):
        """Router -> tuple of (neighbor, link id), sorted by neighbor."""
        adj = [[] for _ in range(self.n_routers)]
        for link in self.links:
            adj[link.a].append((link.b, link.id))
            adj[link.b].append((link.a, link.id))
        return tuple(tuple(sorted(nbrs)) for nbrs in adj)

    @cached_property
    def link_index(self):
        """Unordered router pair -> link id."""
        return {link.endpoints: link.id for link in self.links}

    @property
    def routers(self):
        return range(self.n_routers)

    @property
    def n_links(self):
        return len(self.links)

    def degree(self, router):
        return len(self.adjacency[router])

    def degrees(self):
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    def link_between(self, a, b):
        key = (a, b) if a < b else (b, a)
        return self.link_index.get(key)

    def is_connected(self):
        if self.n_routers == 1:
            return True
        seen = {0}
        todo = [0]
        while todo:
            r = todo.pop()
            for nbr, _ in self.adjacency[r]:
                if nbr not in seen:
                    seen.add(nbr)
                    todo.append(nbr)
        return len(seen) == self.n_routers

    def with_links(self, links):
        return replace(self, links=tuple(links))

    def with_backup_capacity(self, capacities):
        if len(capacities) != self.n_links:
            raise ParameterError("need one capacity per link")
        return self.with_links(
            replace(link, backup_capacity=float(c)) for link, c in zip(self.links, capacities)
        )

    def to_networkx(self):
        import networkx as nx

        g = nx.Graph()
        g.add_nodes_from(self.routers)
        for link in self.links:
            g.add_edge(link.a, link.b, id=link.id)
        return g


def _from_edges(n_routers, edges, positions=None):
    return Topology(
        n_routers, tuple(Link(i, a, b) for i, (a, b) in enumerate(edges)), positions
    )


# --------------------------------------------------------------------------- generation


def generate_ba(n_routers, m=2, seed=0):
    """Barabási–Albert graph grown from a complete seed graph on ``m + 1`` routers.

    Each new router attaches to ``m`` distinct existing routers drawn with
    probability proportional to their current degree; duplicate draws are
    rejected and redrawn.
    """
    if m < 2:
        raise ParameterError(f"attachment count m must be >= 2, got {m}")
    if n_routers < m + 1:
        raise ParameterError(f"need n_routers >= m + 1 = {m + 1}, got {n_routers}")
    rng = stream(seed, 0xBA)
    edges = [(a, b) for a in range(m + 1) for b in range(a + 1, m + 1)]
    degree = np.zeros(n_routers, dtype=np.float64)
    degree[: m + 1] = m
    for new in range(m + 1, n_routers):
        cum = np.cumsum(degree[:new])
        total = cum[-1]
        targets = []
        while len(targets) < m:
            pick = int(np.searchsorted(cum, rng.random() * total, side="right"))
            pick = min(pick, new - 1)
            if pick not in targets:
                targets.append(pick)
        for t in targets:
            edges.append((t, new))
            degree[t] += 1
        degree[new] = m
    return _from_edges(n_routers, edges)


def spring_layout(topology, iterations=50, scale=1000.0, seed=0):
    """Fruchterman–Reingold layout rescaled so the bounding-box diagonal is ``scale``.

    Returns an ``(n_routers, 2)`` array.
    """
    n = topology.n_routers
    rng = stream(seed, 0x5B)
    pos = rng.random((n, 2))
    if n == 1:
        return np.zeros((1, 2))
    a = np.array([link.a for link in topology.links], dtype=np.int64)
    b = np.array([link.b for link in topology.links], dtype=np.int64)
    k = math.sqrt(1.0 / n)
    temp = 0.1
    cooling = temp / (iterations + 1)
    for _ in range(iterations):
        delta = pos[:, None, :] - pos[None, :, :]
        dist = np.maximum(np.hypot(delta[..., 0], delta[..., 1]), 1e-9)
        disp = np.einsum("ijk,ij->ik", delta, k * k / dist**2)
        d_edge = pos[a] - pos[b]
        l_edge = np.maximum(np.hypot(d_edge[:, 0], d_edge[:, 1]), 1e-9)
        pull = d_edge * (l_edge / k)[:, None]
        np.add.at(disp, a, -pull)
        np.add.at(disp, b, pull)
        length = np.maximum(np.hypot(disp[:, 0], disp[:, 1]), 1e-9)
        pos = pos + disp / length[:, None] * np.minimum(length, temp)[:, None]
        temp -= cooling
    pos = pos - pos.min(axis=0)
    diag = math.hypot(*pos.max(axis=0))
    if diag == 0.0:
        return np.zeros((n, 2))
    return pos * (scale / diag)


def assign_link_lengths(topology, positions):
    """Euclidean link lengths from router positions, floored at 1 km."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (topology.n_routers, 2):
        raise ParameterError(
            f"positions must have shape ({topology.n_routers}, 2), got {positions.shape}"
        )
    links = []
    for link in topology.links:
        dx, dy = positions[link.a] - positions[link.b]
        length = max(math.hypot(dx, dy), LENGTH_FLOOR_KM)
        links.append(replace(link, length_km=length))
    return Topology(topology.n_routers, tuple(links), tuple(map(tuple, positions)))


def great_circle_km(lon1, lat1, lon2, lat2):
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlmb = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


# --------------------------------------------------------------------------- SNDLib

_SECTION_OPEN = re.compile(r"^([A-Z_]+)\s*\($")
_NODE_LINE = re.compile(r"^(\S+)\s*\(\s*(\S+)\s+(\S+)\s*\)")
_LINK_LINE = re.compile(r"^(\S+)\s*\(\s*(\S+)\s+(\S+)\s*\)")


def import_sndlib(text):
    """Parse the NODES and LINKS sections of an SNDLib native-format network.

    Router ids follow node order of appearance. Coordinates inside lon/lat
    range give great-circle lengths, anything else planar distance; lengths
    are floored at 1 km. Other sections (DEMANDS, ADMISSIBLE_PATHS, ...) are
    skipped.
    """
    nodes = {}
    coords = []
    edges = []
    edge_lines = {}
    section = None
    sections_seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("?"):
            continue
        if section is None:
            opened = _SECTION_OPEN.match(line)
            if not opened:
                raise ParseError(f"expected section header, got {line!r}", lineno)
            section = opened.group(1)
            sections_seen.add(section)
            continue
        if line == ")":
            section = None
            continue
        if section == "NODES":
            match = _NODE_LINE.match(line)
            if not match:
                raise ParseError(f"cannot parse node line {line!r}", lineno)
            name = match.group(1)
            if name in nodes:
                raise ParseError(f"duplicate node {name!r}", lineno)
            try:
                x, y = float(match.group(2)), float(match.group(3))
            except ValueError:
                raise ParseError(f"bad coordinates in {line!r}", lineno) from None
            nodes[name] = len(coords)
            coords.append((x, y))
        elif section == "LINKS":
            match = _LINK_LINE.match(line)
            if not match:
                raise ParseError(f"cannot parse link line {line!r}", lineno)
            src, dst = match.group(2), match.group(3)
            for name in (src, dst):
                if name not in nodes:
                    raise ParseError(f"link references unknown node {name!r}", lineno)
            a, b = nodes[src], nodes[dst]
            if a == b:
                raise ParseError(f"self-loop on node {src!r}", lineno)
            key = (min(a, b), max(a, b))
            if key in edge_lines:
                raise ParseError(
                    f"duplicate link {src}-{dst} (first at line {edge_lines[key]})", lineno
                )
            edge_lines[key] = lineno
            edges.append(key)
    if section is not None:
        raise ParseError(f"section {section} is not closed")
    for required in ("NODES", "LINKS"):
        if required not in sections_seen:
            raise ParseError(f"missing {required} section")
    geo = all(abs(x) <= 180.0 and abs(y) <= 90.0 for x, y in coords)
    links = []
    for i, (a, b) in enumerate(edges):
        (x1, y1), (x2, y2) = coords[a], coords[b]
        if geo:
            length = great_circle_km(x1, y1, x2, y2)
        else:
            length = math.hypot(x1 - x2, y1 - y2)
        links.append(Link(i, a, b, max(length, LENGTH_FLOOR_KM)))
    try:
        return Topology(len(coords), tuple(links))
    except ParameterError as exc:
        raise ParseError(str(exc)) from None


# --------------------------------------------------------------------------- JSON

_TOPOLOGY_KEYS = {"routers", "links", "positions"}
_LINK_KEYS = {"id", "a", "b", "length_km", "backup_capacity"}


def topology_to_dict(topology):
    doc = {
        "routers": topology.n_routers,
        "links": [
            {
                "id": link.id,
                "a": link.a,
                "b": link.b,
                "length_km": link.length_km,
                "backup_capacity": link.backup_capacity,
            }
            for link in topology.links
        ],
    }
    if topology.positions is not None:
        doc["positions"] = [list(p) for p in topology.positions]
    return doc


def _check_keys(obj, allowed, required, what):
    if not isinstance(obj, dict):
        raise ParseError(f"{what} must be a JSON object")
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"unknown field(s) in {what}: {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ParseError(f"missing field(s) in {what}: {sorted(missing)}")


def _number(value, what):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{what} must be a number, got {value!r}")
    return value


def _integer(value, what):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{what} must be an integer, got {value!r}")
    return value


def topology_from_dict(doc, extra_keys=frozenset()):
    _check_keys(doc, _TOPOLOGY_KEYS | set(extra_keys), {"routers", "links"}, "topology")
    n = _integer(doc["routers"], "routers")
    if not isinstance(doc["links"], list):
        raise ParseError("links must be a list")
    links = []
    for i, item in enumerate(doc["links"]):
        _check_keys(item, _LINK_KEYS, _LINK_KEYS, f"links[{i}]")
        try:
            links.append(
                Link(
                    _integer(item["id"], "link id"),
                    _integer(item["a"], "link endpoint"),
                    _integer(item["b"], "link endpoint"),
                    float(_number(item["length_km"], "length_km")),
                    float(_number(item["backup_capacity"], "backup_capacity")),
                )
            )
        except ParameterError as exc:
            raise ParseError(str(exc)) from None
    positions = doc.get("positions")
    if positions is not None:
        if not isinstance(positions, list) or not all(
            isinstance(p, list) and len(p) == 2 for p in positions
        ):
            raise ParseError("positions must be a list of [x, y] pairs")
        positions = [tuple(_number(c, "position") for c in p) for p in positions]
    try:
        return Topology(n, tuple(links), positions)
    except ParameterError as exc:
        raise ParseError(str(exc)) from None


def serialize(topology):
    return json.dumps(topology_to_dict(topology), indent=1)


def deserialize(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    return topology_from_dict(doc)
