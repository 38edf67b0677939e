"""Bipartite SLA/component metagraph, raw feature extraction and z-score normalization."""

from dataclasses import dataclass

import numpy as np

from risknet.errors import ParameterError

COMPONENT_COLUMNS = ("lambda_per_year", "pareto_alpha", "pareto_beta_h", "backup_capacity")
SLA_COLUMNS = ("demand",)
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class MetaGraph:
    """Typed incidence between SLAs and components.

    ``edges_working`` and ``edges_backup`` are ``(E, 2)`` int arrays of
    ``(sla index, component index)`` rows.
    """

    n_components: int
    n_slas: int
    edges_working: np.ndarray
    edges_backup: np.ndarray

    def __post_init__(self):
        for name in ("edges_working", "edges_backup"):
            edges = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2)
            if edges.size and (
                edges[:, 0].min() < 0
                or edges[:, 0].max() >= self.n_slas
                or edges[:, 1].min() < 0
                or edges[:, 1].max() >= self.n_components
            ):
                raise ParameterError(f"{name} endpoint out of range")
            edges.setflags(write=False)
            object.__setattr__(self, name, edges)

    def __eq__(self, other):
        if not isinstance(other, MetaGraph):
            return NotImplemented
        return (
            self.n_components == other.n_components
            and self.n_slas == other.n_slas
            and np.array_equal(self.edges_working, other.edges_working)
            and np.array_equal(self.edges_backup, other.edges_backup)
        )

    __hash__ = None


@dataclass(frozen=True)
class FeatureSet:
    component: np.ndarray  # (n_components, 4)
    sla: np.ndarray  # (n_slas, 1)

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return np.array_equal(self.component, other.component) and np.array_equal(
            self.sla, other.sla
        )

    __hash__ = None


def _edges(slas, attr):
    counts = np.fromiter((len(getattr(s, attr)) for s in slas), np.int64, len(slas))
    links = np.fromiter(
        (lid for s in slas for lid in sorted(getattr(s, attr))), np.int64, int(counts.sum())
    )
    ids = np.repeat(np.fromiter((s.id for s in slas), np.int64, len(slas)), counts)
    return np.column_stack([ids, links])


def build_metagraph(scenario):
    """Exact incidence, ordered by SLA id then link id."""
    return MetaGraph(
        scenario.topology.n_links,
        scenario.n_slas,
        _edges(scenario.slas, "working"),
        _edges(scenario.slas, "backup"),
    )


def extract_features(scenario):
    comp = np.array(
        [
            (r.lambda_per_year, r.pareto_alpha, r.pareto_beta_h, link.backup_capacity)
            for r, link in zip(scenario.reliability, scenario.topology.links)
        ],
        dtype=np.float64,
    ).reshape(-1, len(COMPONENT_COLUMNS))
    sla = np.array([[s.demand] for s in scenario.slas], dtype=np.float64).reshape(-1, 1)
    return FeatureSet(comp, sla)


def union(graphs, features=None):
    """Disjoint union of metagraphs (and feature sets) with index offsets.

    Returns ``(graph, features_or_None, sla_offsets)`` where ``sla_offsets``
    has one more entry than ``graphs``.
    """
    work, back = [], []
    c_off = s_off = 0
    sla_offsets = [0]
    for g in graphs:
        work.append(g.edges_working + (s_off, c_off))
        back.append(g.edges_backup + (s_off, c_off))
        c_off += g.n_components
        s_off += g.n_slas
        sla_offsets.append(s_off)
    merged = MetaGraph(
        c_off,
        s_off,
        np.concatenate(work) if work else np.zeros((0, 2), np.int64),
        np.concatenate(back) if back else np.zeros((0, 2), np.int64),
    )
    feats = None
    if features is not None:
        feats = FeatureSet(
            np.concatenate([f.component for f in features]).reshape(-1, len(COMPONENT_COLUMNS)),
            np.concatenate([f.sla for f in features]).reshape(-1, len(SLA_COLUMNS)),
        )
    return merged, feats, np.array(sla_offsets)


def permute_slas(graph, features, perm):
    """Relabel SLA ``i`` as ``perm[i]``."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    g = MetaGraph(
        graph.n_components,
        graph.n_slas,
        np.column_stack([perm[graph.edges_working[:, 0]], graph.edges_working[:, 1]]),
        np.column_stack([perm[graph.edges_backup[:, 0]], graph.edges_backup[:, 1]]),
    )
    return g, FeatureSet(features.component, features.sla[inv])


def permute_components(graph, features, perm):
    """Relabel component ``i`` as ``perm[i]``."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    g = MetaGraph(
        graph.n_components,
        graph.n_slas,
        np.column_stack([graph.edges_working[:, 0], perm[graph.edges_working[:, 1]]]),
        np.column_stack([graph.edges_backup[:, 0], perm[graph.edges_backup[:, 1]]]),
    )
    return g, FeatureSet(features.component[inv], features.sla)


# --------------------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormStats:
    component_mean: np.ndarray
    component_std: np.ndarray
    sla_mean: np.ndarray
    sla_std: np.ndarray
    label_mean: float
    label_std: float

    def to_dict(self):
        return {
            "component_mean": self.component_mean.tolist(),
            "component_std": self.component_std.tolist(),
            "sla_mean": self.sla_mean.tolist(),
            "sla_std": self.sla_std.tolist(),
            "label_mean": self.label_mean,
            "label_std": self.label_std,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            np.array(doc["component_mean"], dtype=np.float64),
            np.array(doc["component_std"], dtype=np.float64),
            np.array(doc["sla_mean"], dtype=np.float64),
            np.array(doc["sla_std"], dtype=np.float64),
            float(doc["label_mean"]),
            float(doc["label_std"]),
        )

    @classmethod
    def identity(cls):
        return cls(np.zeros(4), np.ones(4), np.zeros(1), np.ones(1), 0.0, 1.0)


def _mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ParameterError("cannot fit normalizer on empty data")
    mean = values.mean(axis=0)
    std = np.maximum(values.std(axis=0), STD_FLOOR)
    return mean, std


def fit_normalizer(features, labels):
    """Column-wise stats for features; one global scalar pair for labels.

    ``features`` is an iterable of FeatureSet (one per training scenario),
    ``labels`` an iterable of label arrays (any shape).
    """
    features = list(features)
    c_mean, c_std = _mean_std(np.concatenate([f.component for f in features]))
    s_mean, s_std = _mean_std(np.concatenate([f.sla for f in features]))
    y = np.concatenate([np.ravel(v) for v in labels])
    y_mean, y_std = _mean_std(y)
    return NormStats(c_mean, c_std, s_mean, s_std, float(y_mean), float(y_std))


def apply_normalizer(stats, features):
    return FeatureSet(
        (features.component - stats.component_mean) / stats.component_std,
        (features.sla - stats.sla_mean) / stats.sla_std,
    )


def normalize_labels(stats, y):
    return (np.asarray(y, dtype=np.float64) - stats.label_mean) / stats.label_std


def denormalize_labels(stats, z):
    return np.asarray(z, dtype=np.float64) * stats.label_std + stats.label_mean


def invert_normalizer(stats, features):
    return FeatureSet(
        features.component * stats.component_std + stats.component_mean,
        features.sla * stats.sla_std + stats.sla_mean,
    )
