"""Dataset generation and the Adam training loop."""

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from risknet import model as mdl
from risknet.errors import DataError, NumericalError, ParameterError
from risknet.features import (
    apply_normalizer,
    build_metagraph,
    extract_features,
    fit_normalizer,
    normalize_labels,
    union,
    NormStats,
)
from risknet.provisioning import ScenarioConfig, make_scenario, scenario_from_dict, scenario_to_dict
from risknet.risk import baseline_nll
from risknet.rng import stream
from risknet.simulator import DEFAULT_BLOCK_YEARS, PenaltyTable, simulate

log = logging.getLogger(__name__)

MANIFEST_VERSION = "risknet-dataset-1"
SPLITS = ("train", "test", "validation")


@dataclass(frozen=True)
class TrainConfig:
    n_topologies: int = 60
    router_range: tuple = (10, 40)
    years_per_topology: int = 100
    batch_size: int = 64
    lr0: float = 1e-4
    warm_epochs: int = 20
    decay: float = 0.99
    max_epochs: int = 60
    max_steps: int = None
    patience: int = 10
    seed: int = 0
    split_fractions: tuple = (0.8, 0.1, 0.1)
    block_years: int = DEFAULT_BLOCK_YEARS
    sim_timeout_s: float = None
    workers: int = 1
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    hyper: mdl.Hyper = field(default_factory=mdl.Hyper)

    def __post_init__(self):
        lo, hi = self.router_range
        if not 3 <= lo <= hi <= 1000:
            raise ParameterError(f"router_range must lie within [3, 1000], got {self.router_range}")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.n_topologies < 1 or self.years_per_topology < 1:
            raise ParameterError("need at least one topology and one year")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ParameterError("split fractions must be non-negative and sum to 1")

    def to_dict(self):
        doc = asdict(self)
        doc["scenario"] = asdict(self.scenario)
        doc["hyper"] = self.hyper.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "scenario" in doc:
            sc = dict(doc["scenario"])
            for key in ("rho_range", "alpha_range", "beta_range"):
                if key in sc:
                    sc[key] = tuple(sc[key])
            doc["scenario"] = ScenarioConfig(**sc)
        if "hyper" in doc:
            doc["hyper"] = mdl.Hyper.from_dict(doc["hyper"])
        for key in ("router_range", "split_fractions"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def desk_config(**overrides):
    """Desk-scale defaults: 60 topologies of 10-20 routers, 100 years each."""
    base = dict(n_topologies=60, router_range=(10, 20), years_per_topology=100)
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------- dataset


@dataclass
class Dataset:
    """Scenarios, their penalty tables and the topology-level split."""

    scenarios: list
    tables: list
    splits: dict
    stats: NormStats
    dropped: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def examples(self, split):
        return [
            (i, y) for i in self.splits[split] for y in range(self.tables[i].years)
        ]

    def labels(self, split):
        return [self.tables[i].penalties for i in self.splits[split]]


def _topology_job(args):
    config, index = args
    lo, hi = config.router_range
    n_routers = int(stream(config.seed, index, 0x10).integers(lo, hi + 1))
    scen_seed = int(stream(config.seed, index, 0x11).integers(0, 2**63 - 1))
    scenario = make_scenario(n_routers, scen_seed, config.scenario)
    start = time.perf_counter()
    sim_seed = int(stream(config.seed, index, 0x12).integers(0, 2**63 - 1))
    table = simulate(scenario, config.years_per_topology, sim_seed, config.block_years)
    elapsed = time.perf_counter() - start
    if config.sim_timeout_s is not None and elapsed > config.sim_timeout_s:
        return index, scenario, None, elapsed
    return index, scenario, table, elapsed


def split_topologies(n, fractions, seed):
    order = stream(seed, 0x5917).permutation(n)
    _, f_test, f_val = fractions
    n_test = int(round(f_test * n))
    n_val = int(round(f_val * n))
    if n >= 3:
        n_test = max(n_test, 1 if f_test > 0 else 0)
        n_val = max(n_val, 1 if f_val > 0 else 0)
    n_train = n - n_test - n_val
    if n_train < 1:
        raise ParameterError("not enough topologies for a non-empty training split")
    return {
        "train": sorted(order[:n_train].tolist()),
        "test": sorted(order[n_train : n_train + n_test].tolist()),
        "validation": sorted(order[n_train + n_test :].tolist()),
    }


def build_dataset(config, out_dir=None):
    """Generate, simulate and split ``config.n_topologies`` scenarios."""
    jobs = [(config, i) for i in range(config.n_topologies)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_topology_job, jobs))
    else:
        results = [_topology_job(job) for job in jobs]
    scenarios, tables, dropped = [], [], []
    for index, scenario, table, elapsed in results:
        if table is None or scenario.n_slas == 0:
            log.warning("topology %d dropped (%.1fs, %d SLAs)", index, elapsed, scenario.n_slas)
            dropped.append(index)
            continue
        scenarios.append(scenario)
        tables.append(table)
    splits = split_topologies(len(scenarios), config.split_fractions, config.seed)
    train = splits["train"]
    stats = fit_normalizer(
        [extract_features(scenarios[i]) for i in train], [tables[i].penalties for i in train]
    )
    # the worker count changes how, not what, so it stays out of the manifest
    recorded = {k: v for k, v in config.to_dict().items() if k != "workers"}
    data = Dataset(scenarios, tables, splits, stats, dropped, recorded)
    if out_dir is not None:
        save_dataset(data, out_dir)
    return data


def _sha(text):
    return hashlib.sha256(text.encode()).hexdigest()


def _json_doc(text, name):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{name}: {exc}") from None


def save_dataset(data, out_dir):
    os.makedirs(os.path.join(out_dir, "scenarios"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "penalties"), exist_ok=True)
    split_of = {i: name for name, ids in data.splits.items() for i in ids}
    entries = []
    for i, (scenario, table) in enumerate(zip(data.scenarios, data.tables)):
        s_rel = f"scenarios/s{i:05d}.json"
        p_rel = f"penalties/s{i:05d}.csv"
        s_text = json.dumps(scenario_to_dict(scenario), indent=1)
        p_text = table.to_csv()
        with open(os.path.join(out_dir, s_rel), "w") as fh:
            fh.write(s_text)
        with open(os.path.join(out_dir, p_rel), "w") as fh:
            fh.write(p_text)
        entries.append(
            {
                "id": i,
                "scenario": s_rel,
                "penalties": p_rel,
                "years": table.years,
                "n_slas": scenario.n_slas,
                "split": split_of[i],
                "sha256": {"scenario": _sha(s_text), "penalties": _sha(p_text)},
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "config": data.config,
        "scenarios": entries,
        "splits": data.splits,
        "norm_stats": data.stats.to_dict(),
        "dropped": data.dropped,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_dataset(path):
    """Load a dataset directory (or its manifest.json)."""
    root = path if os.path.isdir(path) else os.path.dirname(path)
    try:
        with open(os.path.join(root, "manifest.json")) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest in {root}: {exc}") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')!r}")
    scenarios, tables = [], []
    for entry in manifest["scenarios"]:
        texts = {}
        for key in ("scenario", "penalties"):
            with open(os.path.join(root, entry[key])) as fh:
                texts[key] = fh.read()
            if _sha(texts[key]) != entry["sha256"][key]:
                raise DataError(f"{entry[key]}: content does not match its manifest hash")
        scenarios.append(scenario_from_dict(_json_doc(texts["scenario"], entry["scenario"])))
        tables.append(PenaltyTable.from_csv(texts["penalties"]))
        if tables[-1].n_slas != scenarios[-1].n_slas:
            raise DataError(f"scenario {entry['id']}: penalty table does not match SLA count")
    return Dataset(
        scenarios,
        tables,
        {k: list(v) for k, v in manifest["splits"].items()},
        NormStats.from_dict(manifest["norm_stats"]),
        manifest.get("dropped", []),
        manifest.get("config", {}),
    )


def dataset_from_scenarios(scenarios, tables, splits=None):
    """Wrap already simulated scenarios as a Dataset (all-train unless ``splits`` given)."""
    if splits is None:
        idx = list(range(len(scenarios)))
        splits = {"train": idx, "test": [], "validation": []}
    train = splits["train"]
    stats = fit_normalizer(
        [extract_features(scenarios[i]) for i in train], [tables[i].penalties for i in train]
    )
    return Dataset(list(scenarios), list(tables), splits, stats)


# --------------------------------------------------------------------------- prepared tensors


@dataclass
class Prepared:
    graphs: list
    features: list
    labels: list  # normalized (years, n_slas) per scenario


def prepare(data, stats=None):
    stats = data.stats if stats is None else stats
    return Prepared(
        [build_metagraph(s) for s in data.scenarios],
        [apply_normalizer(stats, extract_features(s)) for s in data.scenarios],
        [normalize_labels(stats, t.penalties) for t in data.tables],
    )


def make_batch(prep, examples):
    """Disjoint union of the examples' metagraphs with their label vectors."""
    graph, feats, offsets = union(
        [prep.graphs[i] for i, _ in examples], [prep.features[i] for i, _ in examples]
    )
    labels = np.concatenate([prep.labels[i][y] for i, y in examples])
    return graph, feats, labels, offsets


def evaluate(params, hyper, prep, scenario_ids):
    """Eval-mode NLL pooled over all (example, SLA) entries, with the baseline.

    Returns ``(model_nll, baseline_nll, n_entries)``; one forward per scenario
    scores all of its years.
    """
    total = 0.0
    count = 0
    labels = []
    for i in scenario_ids:
        pred = mdl.predict(params, hyper, prep.graphs[i], prep.features[i])
        y = prep.labels[i]
        total += float(-mdl.student_t_logpdf(y, pred.mu, pred.sigma, hyper.nu).sum())
        count += y.size
        labels.append(y.ravel())
    if count == 0:
        return math.nan, math.nan, 0
    return total / count, baseline_nll(np.concatenate(labels), hyper.nu), count


# --------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params):
        return cls(mdl.zeros_like(params), mdl.zeros_like(params))


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update; returns new ``(params, state)``."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_params[name] = theta - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, m=new_m, v=new_v, step=step)


def lr_schedule(epoch, config):
    if epoch < config.warm_epochs:
        return config.lr0
    return config.lr0 * config.decay ** (epoch - config.warm_epochs + 1)


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: dict
    hyper: mdl.Hyper
    stats: NormStats
    metrics: list
    best_epoch: int
    steps: int


METRIC_FIELDS = ("epoch", "lr", "train_loss", "test_loss", "val_loss", "seconds")


def metrics_csv(metrics):
    lines = [",".join(METRIC_FIELDS)]
    for row in metrics:
        lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                              for k in METRIC_FIELDS))
    return "\n".join(lines) + "\n"


def _dump_batch(path, examples, value):
    with open(path, "w") as fh:
        json.dump({"loss": repr(value), "examples": [list(map(int, e)) for e in examples]}, fh)


def train(config, data, hyper=None, init=None, out_dir=None, progress=None):
    """Adam over shuffled training examples with best-validation retention.

    ``progress`` is an optional callable receiving each metrics row.
    """
    hyper = config.hyper if hyper is None else hyper
    prep = prepare(data)
    params = mdl.init_params(hyper, config.seed) if init is None else dict(init)
    opt = AdamState.zeros(params)
    examples = data.examples("train")
    if not examples:
        raise ParameterError("training split is empty")
    val_ids = data.splits.get("validation") or []
    best = (math.inf, params, -1)
    metrics = []
    stale = 0
    steps = 0
    for epoch in range(config.max_epochs):
        start = time.perf_counter()
        lr = lr_schedule(epoch, config)
        order = stream(config.seed, 0xE0, epoch).permutation(len(examples))
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = [examples[j] for j in order[lo : lo + config.batch_size]]
            graph, feats, labels, offsets = make_batch(prep, batch)
            try:
                value, grads = mdl.gradients(
                    params, hyper, graph, feats, labels, offsets,
                    rng=stream(config.seed, 0xD0, epoch, b),
                )
            except NumericalError:
                if out_dir:
                    _dump_batch(os.path.join(out_dir, "bad_batch.json"), batch, math.nan)
                raise
            if not math.isfinite(value):
                if out_dir:
                    _dump_batch(os.path.join(out_dir, "bad_batch.json"), batch, value)
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            params, opt = adam_step(params, grads, opt, lr)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        train_loss = evaluate(params, hyper, prep, data.splits["train"])[0]
        test_loss = evaluate(params, hyper, prep, data.splits.get("test") or [])[0]
        val_loss = evaluate(params, hyper, prep, val_ids)[0]
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": train_loss,
            "test_loss": test_loss,
            "val_loss": val_loss,
            "seconds": round(time.perf_counter() - start, 3),
        }
        metrics.append(row)
        if progress is not None:
            progress(row)
        score = val_loss if val_ids else train_loss
        if score < best[0]:
            best = (score, params, epoch)
            stale = 0
        else:
            stale += 1
        if out_dir is not None:
            with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
                fh.write(metrics_csv(metrics))
            if best[2] == epoch:
                mdl.save_checkpoint(
                    os.path.join(out_dir, "checkpoint.json"), params, hyper, data.stats,
                    {"epoch": epoch, "val_loss": val_loss},
                )
        if stale >= config.patience:
            break
        if config.max_steps is not None and steps >= config.max_steps:
            break
    return TrainResult(best[1], hyper, data.stats, metrics, best[2], steps)
