"""SLA provisioning under shared backup path protection.

Builds router-disjoint working/backup path pairs, draws one pair per SLA
with a length-penalizing weight, assigns gravity-style demands and
dimensions the shared backup pools.
"""

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from itertools import combinations, islice

import networkx as nx
import numpy as np

from risknet.errors import ParameterError, ParseError
from risknet.reliability import ComponentReliability, default_reliability
from risknet.rng import stream
from risknet.topology import (
    _check_keys,
    _integer,
    _number,
    assign_link_lengths,
    generate_ba,
    spring_layout,
    topology_from_dict,
    topology_to_dict,
)

DEFAULT_XI = 0.1
DEFAULT_K_MAX = 16
DEMAND_DIVISOR = 100.0


@dataclass(frozen=True)
class Sla:
    id: int
    src: int
    dst: int
    demand: float
    working: tuple
    backup: tuple

    def __post_init__(self):
        object.__setattr__(self, "working", tuple(int(x) for x in self.working))
        object.__setattr__(self, "backup", tuple(int(x) for x in self.backup))
        if not (self.demand > 0 and math.isfinite(self.demand)):
            raise ParameterError(f"SLA {self.id} demand must be > 0, got {self.demand!r}")


@dataclass(frozen=True)
class Scenario:
    """A topology with its SLAs and per-link reliability: one simulatable instance."""

    topology: object
    slas: tuple
    reliability: tuple
    penalty_rate: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "slas", tuple(self.slas))
        object.__setattr__(self, "reliability", tuple(self.reliability))
        self.validate()

    def validate(self):
        topo = self.topology
        if len(self.reliability) != topo.n_links:
            raise ParameterError(
                f"need {topo.n_links} reliability entries, got {len(self.reliability)}"
            )
        if not (self.penalty_rate > 0 and math.isfinite(self.penalty_rate)):
            raise ParameterError("penalty rate must be positive")
        for i, sla in enumerate(self.slas):
            if sla.id != i:
                raise ParameterError(f"SLA ids must be dense and ordered; got {sla.id} at {i}")
            check_sla(topo, sla)

    @property
    def n_slas(self):
        return len(self.slas)

    @cached_property
    def demands(self):
        return np.array([s.demand for s in self.slas], dtype=np.float64)

    def with_topology(self, topology):
        return replace(self, topology=topology)


def path_routers(topology, src, links):
    """Router sequence visited by a link path starting at ``src``."""
    routers = [src]
    for lid in links:
        if not 0 <= lid < topology.n_links:
            raise ParameterError(f"unknown link id {lid}")
        routers.append(topology.links[lid].other(routers[-1]))
    return routers


def check_sla(topology, sla):
    """Raise ParameterError unless the SLA's paths are simple, connect src to dst,
    share no link and share no router apart from the endpoints."""
    if sla.src == sla.dst:
        raise ParameterError(f"SLA {sla.id} has src == dst")
    if not sla.working or not sla.backup:
        raise ParameterError(f"SLA {sla.id} has an empty path")
    inner = []
    for name, links in (("working", sla.working), ("backup", sla.backup)):
        routers = path_routers(topology, sla.src, links)
        if routers[-1] != sla.dst:
            raise ParameterError(f"SLA {sla.id} {name} path does not end at dst")
        if len(set(routers)) != len(routers):
            raise ParameterError(f"SLA {sla.id} {name} path is not simple")
        inner.append(set(routers[1:-1]))
    if set(sla.working) & set(sla.backup):
        raise ParameterError(f"SLA {sla.id} paths share a link")
    if inner[0] & inner[1]:
        raise ParameterError(f"SLA {sla.id} paths share a router")


# --------------------------------------------------------------------------- paths


def _links_of(topology, routers):
    return tuple(topology.link_between(u, v) for u, v in zip(routers, routers[1:]))


def _bfs_path(topology, src, dst, banned_routers, banned_links):
    prev = {src: None}
    queue = deque([src])
    while queue:
        r = queue.popleft()
        if r == dst:
            break
        for nbr, lid in topology.adjacency[r]:
            if nbr in prev or nbr in banned_routers or lid in banned_links:
                continue
            prev[nbr] = r
            queue.append(nbr)
    if dst not in prev:
        return None
    routers = [dst]
    while prev[routers[-1]] is not None:
        routers.append(prev[routers[-1]])
    return routers[::-1]


def candidate_pairs(topology, src, dst, k_max=DEFAULT_K_MAX, max_working=None):
    """Router-disjoint (working, backup) link-path pairs between ``src`` and ``dst``.

    Working paths are enumerated shortest-first by hop count; each gets the
    hop-shortest backup in the graph with the working path's inner routers
    and links removed. Working paths without such a backup are dropped.
    """
    if src == dst:
        raise ParameterError("src and dst must differ")
    if max_working is None:
        max_working = 4 * k_max
    graph = topology.to_networkx()
    pairs = []
    for routers in islice(nx.shortest_simple_paths(graph, src, dst), max_working):
        working = _links_of(topology, routers)
        backup = _bfs_path(topology, src, dst, set(routers[1:-1]), set(working))
        if backup is None:
            continue
        pairs.append((working, _links_of(topology, backup)))
        if len(pairs) >= k_max:
            break
    return pairs


def pair_probabilities(candidates, xi=DEFAULT_XI):
    if not candidates:
        raise ParameterError("no candidate pairs to sample from")
    if xi < 0:
        raise ParameterError(f"xi must be >= 0, got {xi}")
    hops = np.array([len(w) + len(b) for w, b in candidates], dtype=np.float64)
    logits = -xi * (hops - hops.min())
    weights = np.exp(logits)
    return weights / weights.sum()


def sample_pair(candidates, xi, rng):
    """Draw a pair with probability proportional to exp(-xi * total hop count)."""
    p = pair_probabilities(candidates, xi)
    k = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return candidates[min(k, len(candidates) - 1)]


# --------------------------------------------------------------------------- demands


def router_sizes(topology, rng):
    """One size per router, uniform on [10 (d - 1), 10 (d + 1)] for degree d."""
    deg = topology.degrees().astype(np.float64)
    return rng.uniform(10.0 * (deg - 1.0), 10.0 * (deg + 1.0))


def demand_from_sizes(size_a, size_b):
    return size_a * size_b / DEMAND_DIVISOR


def assign_demands(topology, rng):
    """Demand for every unordered router pair ``(src, dst)`` with ``src < dst``."""
    sizes = router_sizes(topology, rng)
    return {
        (a, b): float(demand_from_sizes(sizes[a], sizes[b]))
        for a, b in combinations(range(topology.n_routers), 2)
    }


def build_slas(topology, pair_fraction=1.0, xi=DEFAULT_XI, rng=None, k_max=DEFAULT_K_MAX):
    """SLAs for (a subsample of) all router pairs.

    Returns ``(slas, skipped)`` where ``skipped`` counts pairs that had no
    router-disjoint path pair.
    """
    if not 0 < pair_fraction <= 1:
        raise ParameterError(f"pair_fraction must be in (0, 1], got {pair_fraction}")
    if rng is None:
        rng = stream(0)
    demands = assign_demands(topology, rng)
    slas = []
    skipped = 0
    for (a, b), demand in demands.items():
        if pair_fraction < 1.0 and rng.random() >= pair_fraction:
            continue
        candidates = candidate_pairs(topology, a, b, k_max)
        if not candidates:
            skipped += 1
            continue
        working, backup = sample_pair(candidates, xi, rng)
        if demand <= 0:
            skipped += 1
            continue
        slas.append(Sla(len(slas), a, b, demand, working, backup))
    return slas, skipped


def backup_requirements(topology, slas):
    """Exact single-failure SBPP requirement per link (before scaling)."""
    need = np.zeros(topology.n_links)
    load = [dict() for _ in range(topology.n_links)]
    for sla in slas:
        for b in sla.backup:
            per_failure = load[b]
            for f in sla.working:
                per_failure[f] = per_failure.get(f, 0.0) + sla.demand
    for lid, per_failure in enumerate(load):
        if per_failure:
            need[lid] = max(per_failure.values())
    return need


def reserve_backup_capacity(scenario, rho):
    """Backup pool of each link = rho * worst single-link-failure load on it."""
    if not rho > 0:
        raise ParameterError(f"rho must be > 0, got {rho}")
    need = backup_requirements(scenario.topology, scenario.slas)
    return scenario.with_topology(scenario.topology.with_backup_capacity(rho * need))


# --------------------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class ScenarioConfig:
    m: int = 2
    layout_iterations: int = 50
    layout_scale_km: float = 1000.0
    xi: float = DEFAULT_XI
    pair_fraction: float = 1.0
    k_max: int = DEFAULT_K_MAX
    rho_range: tuple = (0.5, 1.0)
    lambda_per_km: float = 0.002
    alpha_range: tuple = (1.5, 2.5)
    beta_range: tuple = (0.5, 4.0)
    penalty_rate: float = 1.0


def make_scenario(n_routers, seed, config=ScenarioConfig(), rho=None):
    """Full generation chain: BA graph, layout, lengths, SLAs, reliability, backup pools."""
    topo = generate_ba(n_routers, config.m, seed)
    pos = spring_layout(topo, config.layout_iterations, config.layout_scale_km, seed)
    topo = assign_link_lengths(topo, pos)
    return provision(topo, seed, config, rho)


def provision(topo, seed, config=ScenarioConfig(), rho=None):
    """SLAs, reliability and backup pools on a topology that already has link lengths."""
    slas, skipped = build_slas(
        topo, config.pair_fraction, config.xi, stream(seed, 1), config.k_max
    )
    rel_rng = stream(seed, 2)
    reliability = [
        default_reliability(
            link, rel_rng, config.lambda_per_km, config.alpha_range, config.beta_range
        )
        for link in topo.links
    ]
    if rho is None:
        rho = float(stream(seed, 3).uniform(*config.rho_range))
    meta = {"seed": int(seed), "n_routers": int(topo.n_routers), "rho": rho, "skipped": skipped}
    scenario = Scenario(topo, slas, reliability, config.penalty_rate, meta)
    return reserve_backup_capacity(scenario, rho)


# --------------------------------------------------------------------------- JSON

_SLA_KEYS = {"id", "src", "dst", "demand", "working", "backup"}
_REL_KEYS = {"link", "lambda_per_year", "pareto_alpha", "pareto_beta_h"}
_SCENARIO_EXTRA = {"slas", "reliability", "penalty_rate", "meta"}


def scenario_to_dict(scenario):
    doc = topology_to_dict(scenario.topology)
    doc["slas"] = [
        {
            "id": s.id,
            "src": s.src,
            "dst": s.dst,
            "demand": s.demand,
            "working": list(s.working),
            "backup": list(s.backup),
        }
        for s in scenario.slas
    ]
    doc["reliability"] = [
        {
            "link": i,
            "lambda_per_year": r.lambda_per_year,
            "pareto_alpha": r.pareto_alpha,
            "pareto_beta_h": r.pareto_beta_h,
        }
        for i, r in enumerate(scenario.reliability)
    ]
    doc["penalty_rate"] = scenario.penalty_rate
    if scenario.meta:
        doc["meta"] = scenario.meta
    return doc


def scenario_from_dict(doc):
    topo = topology_from_dict(doc, extra_keys=_SCENARIO_EXTRA)
    for key in ("slas", "reliability"):
        if not isinstance(doc.get(key), list):
            raise ParseError(f"scenario needs a '{key}' list")
    try:
        slas = []
        for i, item in enumerate(doc["slas"]):
            _check_keys(item, _SLA_KEYS, _SLA_KEYS, f"slas[{i}]")
            slas.append(
                Sla(
                    _integer(item["id"], "sla id"),
                    _integer(item["src"], "src"),
                    _integer(item["dst"], "dst"),
                    float(_number(item["demand"], "demand")),
                    [_integer(x, "link id") for x in item["working"]],
                    [_integer(x, "link id") for x in item["backup"]],
                )
            )
        rel = [None] * topo.n_links
        for i, item in enumerate(doc["reliability"]):
            _check_keys(item, _REL_KEYS, _REL_KEYS, f"reliability[{i}]")
            lid = _integer(item["link"], "reliability link")
            if not 0 <= lid < topo.n_links or rel[lid] is not None:
                raise ParseError(f"reliability[{i}] has bad or repeated link {lid}")
            rel[lid] = ComponentReliability(
                float(_number(item["lambda_per_year"], "lambda_per_year")),
                float(_number(item["pareto_alpha"], "pareto_alpha")),
                float(_number(item["pareto_beta_h"], "pareto_beta_h")),
            )
        if any(r is None for r in rel):
            raise ParseError("reliability entry missing for some link")
        return Scenario(
            topo,
            slas,
            rel,
            float(_number(doc.get("penalty_rate", 1.0), "penalty_rate")),
            dict(doc.get("meta", {})),
        )
    except ParameterError as exc:
        raise ParseError(str(exc)) from None


def save_scenario(scenario, path):
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=1)


def load_scenario(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    return scenario_from_dict(doc)
