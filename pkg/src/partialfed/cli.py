"""``partialfed`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime error. ``UFPA_LOG`` sets the
log level (``debug``, ``info``, ``warning``...; default ``warning``).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

from . import transport
from .config import build_partition, load_document, override, setup_from_dict
from .errors import ConfigError, PartialFedError
from .evaluation import map50, read_detections
from .orchestrator import (
    Carrier,
    ExperimentResult,
    FederatedClient,
    client_loop,
    read_summary_csv,
    round_series,
    run_experiment,
    serve_seed_set,
    summarize,
    write_artifacts,
)
from .partitioning import class_histogram, materialize, read_manifest, synthetic_manifest
from .schema import accounting_table, comm_report, load_schema, parse_strategy
from .trainer import ground_truth

log = logging.getLogger("partialfed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt_stat(mean, std):
    if mean is None:
        return "n/a"
    return f"{mean:.4f} ± {std:.4f}"


def _print_summary(rows, metric="mAP50", out=None):
    out = out or sys.stdout
    width = max([len("strategy")] + [len(r.strategy) for r in rows])
    cells = [(_fmt_stat(r.id_mean, r.id_std), _fmt_stat(r.cd_mean, r.cd_std)) for r in rows]
    cw = max([len(metric) + 3] + [len(c) for pair in cells for c in pair])
    print(f"{'strategy':<{width}}  {metric + '_ID':>{cw}}  {metric + '_CD':>{cw}}  runs", file=out)
    for r, (id_cell, cd_cell) in zip(rows, cells):
        print(f"{r.strategy:<{width}}  {id_cell:>{cw}}  {cd_cell:>{cw}}  {r.n_runs}", file=out)


def _metric_label(metric):
    return "mAP50" if metric == "map50" else metric


# account ------------------------------------------------------------------------

def cmd_account(args):
    schema = load_schema(args.schema)
    if args.all:
        print(f"{'strategy':<16} {'transmitted':>12} {'saved':>22}")
        for name, rep in accounting_table(schema):
            print(f"{name:<16} {rep.transmitted:>12,} {rep.format_saved():>22}")
        return 0
    if args.strategy is None:
        raise UsageError("account: give a strategy name or --all")
    try:
        strategy = parse_strategy(args.strategy)
    except ConfigError as exc:
        raise UsageError(f"account: {exc}") from None
    rep = comm_report(schema, strategy)
    print(f"strategy {strategy.mask_name}")
    print(f"transmitted {rep.transmitted:,} of {rep.total:,}")
    print(f"saved {rep.format_saved()}")
    return 0


# partition ----------------------------------------------------------------------

def _partition_doc(args):
    if args.config:
        doc, base = load_document(args.config)
    else:
        doc, base = {}, Path(".")
    if args.mode:
        doc = override(doc, "partition.mode", args.mode)
    if args.seed is not None:
        doc = override(doc, "partition.seed", args.seed)
    if args.clients is not None:
        doc = override(doc, "experiment.n_clients", args.clients)
    return doc, base


def cmd_partition(args):
    doc, base = _partition_doc(args)
    if args.manifest:
        manifest = read_manifest(args.manifest)
    elif doc.get("partition", {}).get("manifest", "synthetic") != "synthetic":
        manifest = read_manifest(base / doc["partition"]["manifest"])
    else:
        p = doc.get("partition", {})
        manifest = synthetic_manifest(int(p.get("synthetic_videos", 18)), seed=int(p.get("synthetic_seed", 0)))
    n_clients = int(doc.get("experiment", {}).get("n_clients", 3))
    spec = build_partition(doc, manifest, n_clients)
    for c in spec.clients:
        frames = manifest.frames_of(c.train)
        print(f"{c.client_id}\ttrain={','.join(c.train)}\tvalid={','.join(c.valid)}\t"
              f"test={','.join(c.test)}\tframes={len(frames)}"
              + ("" if c.allowed_classes is None else f"\tallowed={','.join(map(str, sorted(c.allowed_classes)))}"))
    if args.out:
        written = materialize(spec, manifest, args.out)
        log.info("wrote %d manifests under %s", len(written), args.out)
        if spec.clients and any(c.allowed_classes is not None for c in spec.clients):
            for c in spec.clients:
                hist = class_histogram(read_manifest(Path(args.out) / f"{c.client_id}_train.tsv").frames)
                log.info("%s train classes %s", c.client_id, dict(sorted(hist.items())))
    return 0


# simulate / serve / client --------------------------------------------------------

def _setup(args):
    doc, base = load_document(args.config)
    if getattr(args, "strategy", None):
        doc = override(doc, "experiment.strategy", args.strategy)
        doc.get("experiment", {}).pop("rule", None)
    if getattr(args, "clients", None) is not None:
        doc = override(doc, "experiment.n_clients", args.clients)
    if getattr(args, "mode", None):
        doc = override(doc, "partition.mode", args.mode)
    if getattr(args, "seed", None) is not None:
        doc = override(doc, "experiment.seeds", [args.seed])
    if getattr(args, "schema", None):
        doc = override(doc, "schema.path", args.schema)
        doc["schema"].pop("toy", None)
    if getattr(args, "timeout_secs", None) is not None:
        doc = override(doc, "transport.timeout_secs", args.timeout_secs)
    if getattr(args, "bind", None):
        doc = override(doc, "transport.bind", args.bind)
    return setup_from_dict(doc, base)


def cmd_simulate(args):
    setup = _setup(args)
    started = time.time()
    result = run_experiment(setup.config, setup.clients, setup.trainer_factory, setup.schema,
                            carrier=Carrier(args.carrier))
    if args.out:
        write_artifacts(result, args.out, {
            "name": setup.name, "config": str(args.config), "carrier": args.carrier,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        })
    _print_summary([result.summary], _metric_label(result.runs[0].matrix.metric))
    last = result.runs[-1].reports[-1]
    print(f"cumulative transmitted (last seed set): {last.cumulative_transmitted:,} scalars")
    return 0


def cmd_serve(args):
    setup = _setup(args)
    cfg = setup.config
    metric = setup.trainer_factory().metric_name
    ids = [c.client_id for c in setup.clients]
    server = transport.serve(setup.bind)
    print(f"listening on {server.address}", flush=True)
    runs = []
    try:
        seed_sets = cfg.seed_sets()
        for i, seeds in enumerate(seed_sets):
            runs.append(serve_seed_set(server, cfg, setup.schema, ids, seeds, metric,
                                       more=i < len(seed_sets) - 1))
    finally:
        server.close()
    result = ExperimentResult(cfg, runs, summarize([r.matrix for r in runs], cfg.strategy.name))
    if args.out:
        write_artifacts(result, args.out, {"name": setup.name, "config": str(args.config), "carrier": "socket"})
    _print_summary([result.summary], _metric_label(metric))
    return 0


def _connect_retrying(address, schema, timeout):
    deadline = time.monotonic() + timeout
    while True:
        try:
            return transport.connect(address, schema, timeout=timeout)
        except (ConnectionRefusedError, OSError):
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.1)


def cmd_client(args):
    setup = _setup(args)
    address = args.connect or setup.bind
    timeout = setup.config.timeout_secs
    trainer = setup.trainer_factory()

    def client_for(cfg):
        return FederatedClient(setup.clients[cfg["client_index"]], trainer, setup.schema, setup.clients)

    while True:
        session = _connect_retrying(address, setup.schema, timeout)
        done = client_loop(session, client_for, requested_id=args.id or "", timeout=timeout)
        log.info("finished seed set %s", done.get("seed_set"))
        if not done.get("more"):
            return 0


# eval / report --------------------------------------------------------------------

def cmd_eval(args):
    dets = read_detections(args.detections)
    manifest = read_manifest(args.manifest)
    result = map50(dets, ground_truth(manifest.frames))
    for cls, ap in sorted(result.per_class.items()):
        name = manifest.class_names[cls] if cls < manifest.n_classes else str(cls)
        print(f"AP50 {name}\t{ap:.6f}")
    print(f"mAP50 {result.mean:.6f}")
    return 0


def _summary_paths(inputs):
    for item in inputs:
        p = Path(item)
        yield p / "summary.csv" if p.is_dir() else p


def cmd_report(args):
    rows, series = [], []
    for path in _summary_paths(args.inputs):
        got = read_summary_csv(path)
        rows.extend(got)
        round_csvs = sorted(path.parent.glob("rounds_*.csv"))
        if round_csvs:
            name = got[0].strategy if got else path.parent.name
            series.extend((name, *point) for point in round_series(round_csvs))
    metrics = {r.metric for r in rows}
    label = _metric_label(metrics.pop()) if len(metrics) == 1 else "metric"
    _print_summary(rows, label)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "table.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", f"{label}_ID", f"{label}_CD"])
            for r in rows:
                w.writerow([r.strategy, _fmt_stat(r.id_mean, r.id_std), _fmt_stat(r.cd_mean, r.cd_std)])
        with (out / "series.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", "round", "mean", "std", "n"])
            for name, r, mean, std, n in series:
                w.writerow([name, r, repr(mean), repr(std), n])
    return 0


# entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="partialfed", description="Component-wise partial aggregation for federated training.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("account", help="parameters transmitted and saved per client per round")
    p.add_argument("schema", nargs="?", default="yolov11n.schema")
    p.add_argument("strategy", nargs="?")
    p.add_argument("--schema", dest="schema_flag")
    p.add_argument("--strategy", dest="strategy_flag")
    p.add_argument("--all", action="store_true", help="print every mask")
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("partition", help="split a manifest across clients")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=["iid", "group", "length"])
    p.add_argument("--clients", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_partition)

    def run_flags(p, carrier=False):
        p.add_argument("--config", required=True)
        p.add_argument("--schema")
        p.add_argument("--strategy")
        p.add_argument("--mode", choices=["iid", "group", "length"])
        p.add_argument("--clients", type=int)
        p.add_argument("--seed", type=int, help="run a single seed set starting at this seed")
        p.add_argument("--timeout-secs", type=float)
        if carrier:
            p.add_argument("--carrier", choices=[c.value for c in Carrier], default="loopback")

    p = sub.add_parser("simulate", help="run an experiment with in-process clients")
    run_flags(p, carrier=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="run the server for external client processes")
    run_flags(p)
    p.add_argument("--bind")
    p.add_argument("--out")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="run one client process")
    run_flags(p)
    p.add_argument("--connect")
    p.add_argument("--id", help="client id to request (default: assigned by the server)")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("eval", help="mAP50 of a detections file against a manifest")
    p.add_argument("--detections", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render summary CSVs as a results table")
    p.add_argument("inputs", nargs="+", help="artifact directories or summary.csv files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_logging():
    level = os.environ.get("UFPA_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command == "account":
            args.schema = args.schema_flag or args.schema
            args.strategy = args.strategy_flag or args.strategy
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PartialFedError, OSError, TimeoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
