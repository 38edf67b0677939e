"""Command-line interface: ``risknet <command> [options]``.

Artifacts go to ``--out`` when given, otherwise to stdout. Every command also
emits a single-line JSON summary (stdout, or stderr when stdout carries the
artifact). Exit status is 0 on success, 1 on usage errors, 2 on data errors.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from risknet import __version__
from risknet import model as mdl
from risknet import risk
from risknet.errors import DataError, NumericalError, ParameterError, ParseError
from risknet.features import build_metagraph, extract_features, apply_normalizer, NormStats
from risknet.provisioning import (
    ScenarioConfig,
    load_scenario,
    make_scenario,
    provision,
    scenario_to_dict,
)
from risknet.simulator import simulate
from risknet.topology import import_sndlib, topology_to_dict
from risknet import training

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(parser, suppress):
    # subcommands repeat the global flags so they may appear on either side
    def default(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--seed", type=int, default=default(0), help="master seed (default 0)")
    parser.add_argument("--threads", type=int, default=default(1),
                        help="worker processes for simulation and dataset generation")
    parser.add_argument("--out", default=default(None), help="output file or directory")


def build_parser():
    parser = _Parser(prog="risknet", description="SLA penalty risk estimation for SBPP networks.")
    parser.add_argument("--version", action="version", version=__version__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        return p

    p = command("generate", "Generate a provisioned random BA scenario (JSON).")
    p.add_argument("--routers", type=int, required=True)
    p.add_argument("--rho", type=float, help="backup reservation factor (default: drawn)")
    p.add_argument("--xi", type=float, default=ScenarioConfig.xi)
    p.add_argument("--pair-fraction", type=float, default=ScenarioConfig.pair_fraction)
    p.add_argument("--m", type=int, default=ScenarioConfig.m, help="BA attachment count")

    p = command("simulate", "Simulate yearly SLA penalties (CSV).")
    p.add_argument("--scenario", required=True)
    p.add_argument("--years", type=int, required=True)
    p.add_argument("--block-years", type=int, default=training.DEFAULT_BLOCK_YEARS)
    p.add_argument("--dense", action="store_true", help="write zero rows too")

    p = command("build-dataset", "Generate and simulate a training dataset directory.")
    p.add_argument("--topologies", type=int, default=60)
    p.add_argument("--routers", type=int, nargs=2, metavar=("LO", "HI"), default=(10, 20))
    p.add_argument("--years", type=int, default=100)
    p.add_argument("--timeout", type=float, help="per-topology simulation timeout in seconds")

    p = command("train", "Train the model on a dataset directory.")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--warm-epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--iterations", type=int, default=mdl.Hyper.T, help="message-passing rounds T")

    p = command("evaluate", "Model and baseline NLL on a dataset split.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="validation", choices=training.SPLITS)

    p = command("predict", "Per-SLA Student-t parameters for a scenario (JSON).")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--mc-passes", type=int, default=0, help="MC-dropout passes (0: eval mode)")
    p.add_argument("--repeat", type=int, default=1,
                   help="time this many identical passes and report the median")

    p = command("risk", "Per-SLA VaR and CVaR with the network bound (JSON).")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--p", type=float, default=0.05, help="tail probability")
    p.add_argument("--normalized", action="store_true", help="report in normalized units")

    p = command("ppplot", "Calibration curve on a dataset split (CSV q,q_hat,n).")
    p.add_argument("--ckpt", help="checkpoint; omit for the standard-t baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="validation", choices=training.SPLITS)
    p.add_argument("--baseline", action="store_true", help="score the standard-t baseline")

    p = command("import-sndlib", "Convert an SNDLib native file to topology or scenario JSON.")
    p.add_argument("file")
    p.add_argument("--provision", action="store_true",
                   help="add SLAs, reliability and backup pools (seeded by --seed)")
    p.add_argument("--rho", type=float)
    return parser


# --------------------------------------------------------------------------- helpers


class _Io:
    """Routes the artifact and the JSON summary line."""

    def __init__(self, out):
        self.out = out

    def artifact(self, text):
        if self.out:
            with open(self.out, "w") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)

    def summary(self, doc):
        stream = sys.stdout if self.out else sys.stderr
        stream.write(json.dumps(doc) + "\n")


def _summary_only(doc):
    sys.stdout.write(json.dumps(doc) + "\n")


def _load_checkpoint(path):
    try:
        params, hyper, stats = mdl.load_checkpoint(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed checkpoint {path}: {exc}") from None
    return params, hyper, stats or NormStats.identity()


def _predict(params, hyper, stats, scenario, mc_passes=0, seed=0):
    graph = build_metagraph(scenario)
    feats = apply_normalizer(stats, extract_features(scenario))
    if mc_passes:
        return mdl.predict_mc_dropout(params, hyper, graph, feats, mc_passes, seed)
    return mdl.predict(params, hyper, graph, feats)


def _split_arrays(params, hyper, prep, ids):
    mus, sigmas, labels = [], [], []
    for i in ids:
        y = prep.labels[i]
        if params is None:
            mu, sigma = np.zeros_like(y), np.ones_like(y)
        else:
            pred = mdl.predict(params, hyper, prep.graphs[i], prep.features[i])
            mu, sigma = np.broadcast_to(pred.mu, y.shape), np.broadcast_to(pred.sigma, y.shape)
        mus.append(np.ravel(mu))
        sigmas.append(np.ravel(sigma))
        labels.append(np.ravel(y))
    if not labels:
        raise DataError("the requested split is empty")
    return np.concatenate(mus), np.concatenate(sigmas), np.concatenate(labels)


# --------------------------------------------------------------------------- commands


def cmd_generate(args):
    config = ScenarioConfig(m=args.m, xi=args.xi, pair_fraction=args.pair_fraction)
    start = time.perf_counter()
    scenario = make_scenario(args.routers, args.seed, config, args.rho)
    seconds = time.perf_counter() - start
    _Io(args.out).artifact(json.dumps(scenario_to_dict(scenario), indent=1) + "\n")
    _Io(args.out).summary(
        {"command": "generate", "routers": scenario.topology.n_routers,
         "links": scenario.topology.n_links, "slas": scenario.n_slas, "seconds": seconds}
    )


def cmd_simulate(args):
    scenario = load_scenario(args.scenario)
    start = time.perf_counter()
    table = simulate(scenario, args.years, args.seed, args.block_years, workers=args.threads)
    seconds = time.perf_counter() - start
    io = _Io(args.out)
    io.artifact(table.to_csv(dense=args.dense))
    io.summary(
        {"command": "simulate", "years": args.years, "slas": table.n_slas,
         "total_penalty": float(table.penalties.sum()), "seconds": seconds}
    )


def cmd_build_dataset(args):
    if not args.out:
        raise UsageError("build-dataset needs --out DIR")
    config = training.desk_config(
        n_topologies=args.topologies, router_range=tuple(args.routers),
        years_per_topology=args.years, seed=args.seed, workers=args.threads,
        sim_timeout_s=args.timeout,
    )
    start = time.perf_counter()
    data = training.build_dataset(config, args.out)
    _summary_only(
        {"command": "build-dataset", "topologies": len(data.scenarios),
         "dropped": data.dropped, "splits": {k: len(v) for k, v in data.splits.items()},
         "seconds": time.perf_counter() - start}
    )


def cmd_train(args):
    if not args.out:
        raise UsageError("train needs --out DIR")
    data = training.load_dataset(args.data)
    hyper = mdl.Hyper(T=args.iterations)
    config = training.TrainConfig(
        lr0=args.lr, warm_epochs=args.warm_epochs, batch_size=args.batch_size,
        max_epochs=args.epochs, max_steps=args.max_steps, patience=args.patience,
        seed=args.seed, hyper=hyper,
    )
    os.makedirs(args.out, exist_ok=True)
    start = time.perf_counter()
    result = training.train(
        config, data, out_dir=args.out,
        progress=lambda row: sys.stderr.write(json.dumps(row) + "\n"),
    )
    best = result.metrics[result.best_epoch]
    _summary_only(
        {"command": "train", "epochs": len(result.metrics), "steps": result.steps,
         "best_epoch": result.best_epoch, "val_loss": best["val_loss"],
         "checkpoint": os.path.join(args.out, "checkpoint.json"),
         "seconds": time.perf_counter() - start}
    )


def cmd_evaluate(args):
    params, hyper, stats = _load_checkpoint(args.ckpt)
    data = training.load_dataset(args.data)
    prep = training.prepare(data, stats)
    ids = data.splits.get(args.split) or []
    if not ids:
        raise DataError(f"split {args.split!r} is empty")
    model_nll, base, n = training.evaluate(params, hyper, prep, ids)
    doc = {"command": "evaluate", "split": args.split, "n": n, "model_nll": model_nll,
           "baseline_nll": base, "bits": risk.information_gain_bits(model_nll, base)}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh)
    _summary_only(doc)


def cmd_predict(args):
    params, hyper, stats = _load_checkpoint(args.ckpt)
    scenario = load_scenario(args.scenario)
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    times = []
    for _ in range(args.repeat):
        start = time.perf_counter()
        pred = _predict(params, hyper, stats, scenario, args.mc_passes, args.seed)
        times.append(time.perf_counter() - start)
    seconds = float(np.median(times))
    doc = {
        "nu": pred.nu,
        "mu": pred.mu.tolist(),
        "sigma": pred.sigma.tolist(),
        "label_mean": stats.label_mean,
        "label_std": stats.label_std,
    }
    io = _Io(args.out)
    io.artifact(json.dumps(doc) + "\n")
    io.summary({"command": "predict", "slas": len(pred.mu), "seconds": seconds})


def cmd_risk(args):
    params, hyper, stats = _load_checkpoint(args.ckpt)
    scenario = load_scenario(args.scenario)
    start = time.perf_counter()
    pred = _predict(params, hyper, stats, scenario)
    report = risk.risk_report(pred, args.p, stats, args.normalized)
    seconds = time.perf_counter() - start
    io = _Io(args.out)
    io.artifact(json.dumps(report.to_dict()) + "\n")
    io.summary({"command": "risk", "p": args.p, "network_cvar_bound": report.network_bound,
                "seconds": seconds})


def cmd_ppplot(args):
    data = training.load_dataset(args.data)
    if args.baseline or not args.ckpt:
        params, hyper, stats = None, None, data.stats
    else:
        params, hyper, stats = _load_checkpoint(args.ckpt)
    prep = training.prepare(data, stats)
    mu, sigma, y = _split_arrays(params, hyper, prep, data.splits.get(args.split) or [])
    pp = risk.ppplot(mu, sigma, y)
    io = _Io(args.out)
    io.artifact(pp.to_csv())
    io.summary({"command": "ppplot", "n": pp.n, "max_deviation": pp.max_deviation()})


def cmd_import_sndlib(args):
    with open(args.file) as fh:
        topo = import_sndlib(fh.read())
    if args.provision:
        scenario = provision(topo, args.seed, ScenarioConfig(), args.rho)
        doc = scenario_to_dict(scenario)
        summary = {"slas": scenario.n_slas}
    else:
        doc = topology_to_dict(topo)
        summary = {}
    io = _Io(args.out)
    io.artifact(json.dumps(doc, indent=1) + "\n")
    io.summary({"command": "import-sndlib", "routers": topo.n_routers, "links": topo.n_links,
                **summary})


COMMANDS = {
    "generate": cmd_generate,
    "simulate": cmd_simulate,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "risk": cmd_risk,
    "ppplot": cmd_ppplot,
    "import-sndlib": cmd_import_sndlib,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except (ParameterError, ParseError, DataError, NumericalError, OSError,
            json.JSONDecodeError) as exc:
        sys.stderr.write(f"risknet: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
