"""Round loop, client runtime, aggregation dispatch and reporting.

Every run goes through the wire protocol. With the loopback carrier the
clients are threads exchanging frames over in-process queues; with the socket
carrier they talk TCP (threads here, or separate ``partialfed client``
processes). The server logic is identical either way, which is what makes
the two carriers produce byte-identical reports.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import transport
from .aggregation import ClientUpdate, aggregate, merge
from .errors import ClientFailure, ConfigError, PartialFedError, ProtocolError
from .evaluation import EvalMatrix
from .schema import (
    ALL_COMPONENTS,
    ModelSchema,
    Strategy,
    bits_to_mask,
    comm_report,
    mask_to_bits,
)
from .trainer import Trainer, initial_params, select_best_checkpoint

log = logging.getLogger(__name__)


class Weighting(str, enum.Enum):
    SAMPLE_COUNT = "sample-count"
    UNIFORM = "uniform"


class BestCheckpoint(str, enum.Enum):
    PER_CLIENT = "per-client"
    SINGLE_BEST_CLIENT = "single_best_client"


def parse_seed_set(value, n_clients: int) -> tuple:
    """``"012"`` -> ``(0, 1, 2)``; a list gives per-client seeds; an int ``s`` gives ``(s, s+1, ...)``."""
    if isinstance(value, str):
        text = value.strip()
        if text.isdigit() and len(text) == n_clients:
            return tuple(int(ch) for ch in text)
        parts = [p for p in text.replace(",", "-").split("-") if p]
        if len(parts) == n_clients and all(p.strip().isdigit() for p in parts):
            return tuple(int(p) for p in parts)
        raise ConfigError(f"seed set {value!r} does not give one seed per client ({n_clients})", key="experiment.seeds")
    if isinstance(value, (list, tuple)):
        if len(value) != n_clients:
            raise ConfigError(f"seed set {value!r} has {len(value)} seeds, need {n_clients}", key="experiment.seeds")
        return tuple(int(v) for v in value)
    if isinstance(value, (int, np.integer)):
        return tuple(int(value) + k for k in range(n_clients))
    raise ConfigError(f"cannot interpret seed set {value!r}", key="experiment.seeds")


def seed_label(seeds: tuple) -> str:
    if all(0 <= s <= 9 for s in seeds):
        return "".join(str(s) for s in seeds)
    return "-".join(str(s) for s in seeds)


@dataclass(frozen=True)
class ExperimentConfig:
    rounds: int = 20
    local_epochs: int = 20
    batch_size: int = 8
    strategy: Strategy = Strategy(ALL_COMPONENTS)
    seeds: tuple = ("012", "345", "678")
    n_clients: int = 3
    weighting: Weighting = Weighting.SAMPLE_COUNT
    best_checkpoint: BestCheckpoint = BestCheckpoint.PER_CLIENT
    skip_final_aggregation: bool = True
    tolerate_client_failure: bool = False
    early_stopping_patience: int = 100
    timeout_secs: float = 600.0
    init_seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        for key in ("rounds", "local_epochs", "batch_size", "n_clients"):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", key=f"experiment.{key}")
        if not isinstance(self.strategy, Strategy):
            raise ConfigError("strategy must be a Strategy", key="experiment.strategy")
        try:
            object.__setattr__(self, "weighting", Weighting(self.weighting))
        except ValueError:
            raise ConfigError(f"unknown weighting {self.weighting!r}", key="experiment.weighting") from None
        try:
            object.__setattr__(self, "best_checkpoint", BestCheckpoint(self.best_checkpoint))
        except ValueError:
            raise ConfigError(f"unknown best_checkpoint mode {self.best_checkpoint!r}",
                              key="experiment.best_checkpoint") from None
        if not self.seeds:
            raise ConfigError("at least one seed set is required", key="experiment.seeds")
        object.__setattr__(self, "seeds", tuple(self.seed_sets()))
        if self.timeout_secs <= 0:
            raise ConfigError("must be positive", key="transport.timeout_secs")

    def seed_sets(self) -> list:
        return [parse_seed_set(s, self.n_clients) for s in self.seeds]

    def aggregates_in(self, round_idx: int) -> bool:
        return not (self.skip_final_aggregation and round_idx == self.rounds - 1)


def round_seed(client_seed: int, round_idx: int) -> int:
    return int(np.random.SeedSequence([int(client_seed), int(round_idx)]).generate_state(1)[0])


# Client runtime ----------------------------------------------------------------------

@dataclass
class ClientRoundRecord:
    round_idx: int
    pre_metric: float
    best_epoch: int = None
    best_metric: float = None
    failed: bool = False


class FederatedClient:
    """Client-side state: the local model, the trainer and the client's data.

    ``peers`` are the data handles of every client (in matrix order) and are
    only read to score the final model on everyone's test split.
    """

    def __init__(self, data, trainer: Trainer, schema: ModelSchema, peers: Sequence = ()):
        self.data = data
        self.trainer = trainer
        self.schema = schema
        self.peers = list(peers)
        self.model = None
        self.cfg = None
        self.history = []

    @property
    def client_id(self):
        return self.data.client_id

    def configure(self, cfg: dict):
        if cfg["schema_name"] != self.schema.name or cfg["schema_total"] != self.schema.total:
            raise ConfigError(f"server schema {cfg['schema_name']} ({cfg['schema_total']}) "
                              f"does not match local {self.schema.name} ({self.schema.total})")
        self.cfg = cfg
        self.mask = bits_to_mask(cfg["mask"])
        self.model = initial_params(self.schema, seed=cfg["init_seed"], scale=cfg["init_scale"])
        self.history = []
        if hasattr(self.trainer, "patience") and cfg.get("patience") is not None:
            self.trainer.patience = cfg["patience"]

    def local_round(self, round_idx: int) -> transport.UpdatePayload:
        """Validate, train, keep the best epoch and package its masked blocks."""
        record = ClientRoundRecord(round_idx, float(self.trainer.evaluate(self.model, self.data, "valid")))
        self.history.append(record)
        seed = round_seed(self.cfg["client_seed"], round_idx)
        best = select_best_checkpoint(self.trainer.epochs(self.model, self.data, self.cfg["local_epochs"], seed))
        record.best_epoch, record.best_metric = best.epoch, float(best.metric)
        self.model = best.params
        return transport.UpdatePayload(
            self.client_id, round_idx, float(self.data.n_train), record.best_metric,
            self.mask, self.model.restrict(self.mask),
        )

    def mark_failed(self, round_idx):
        if not self.history or self.history[-1].round_idx != round_idx:
            self.history.append(ClientRoundRecord(round_idx, math.nan))
        self.history[-1].failed = True

    def apply_global(self, payload: transport.UpdatePayload):
        self.model = merge(self.model, payload.params, self.mask)

    def final_report(self) -> dict:
        return {
            "client_id": self.client_id,
            "history": [
                {"round": r.round_idx, "pre_metric": r.pre_metric, "best_epoch": r.best_epoch,
                 "best_metric": r.best_metric, "failed": r.failed}
                for r in self.history
            ],
            "eval_row": [float(self.trainer.evaluate(self.model, peer, "test")) for peer in self.peers],
        }


def client_loop(session: transport.ClientSession, client_for, requested_id="", timeout=None) -> dict:
    """Drive one client through a full session; return the server's DONE document.

    ``client_for(cfg)`` returns the :class:`FederatedClient` for the
    ROUND_CONFIG the server sent.
    """
    cfg = session.hello(requested_id, timeout)
    client = client_for(cfg)
    session.schema = client.schema
    try:
        client.configure(cfg)
    except PartialFedError as exc:
        session.send_failure(str(exc))
        session.close()
        raise
    for r in range(cfg["rounds"]):
        try:
            payload = client.local_round(r)
        except Exception as exc:  # reported to the server; it decides whether to continue
            log.exception("client %s failed in round %d", client.client_id, r)
            client.mark_failed(r)
            session.send_failure(f"{type(exc).__name__}: {exc}")
        else:
            session.send_update(payload)
        if r < cfg["rounds"] - 1 or not cfg["skip_final_aggregation"]:
            client.apply_global(session.recv_global(timeout))
    done = session.recv_done(timeout)
    session.send_done(client.final_report())
    session.close()
    return done


# Server -------------------------------------------------------------------------------

@dataclass
class RoundReport:
    round_idx: int
    client_ids: list
    val_metrics: list
    pre_metrics: list
    best_epochs: list
    participants: int
    aggregated: bool
    transmitted: int
    cumulative_transmitted: int
    down_transmitted: int
    saved_per_client: int
    saved_pct: str
    upload_tensor_bytes: int
    upload_wire_bytes: int
    down_wire_bytes: int
    wall_time: float = 0.0

    def row(self) -> list:
        return [
            self.round_idx, self.participants, int(self.aggregated), self.transmitted,
            self.cumulative_transmitted, self.down_transmitted, self.saved_per_client, self.saved_pct,
            self.upload_tensor_bytes, self.upload_wire_bytes, self.down_wire_bytes,
            *[_num(v) for v in self.val_metrics],
            *[_num(v) for v in self.pre_metrics],
            *["" if e is None else e for e in self.best_epochs],
        ]

    @staticmethod
    def header(client_ids) -> list:
        return [
            "round", "participants", "aggregated", "transmitted", "cumulative_transmitted",
            "down_transmitted", "saved_per_client", "saved_pct", "upload_tensor_bytes",
            "upload_wire_bytes", "down_wire_bytes",
            *[f"val_metric_{c}" for c in client_ids],
            *[f"pre_metric_{c}" for c in client_ids],
            *[f"best_epoch_{c}" for c in client_ids],
        ]


def _num(v):
    return "" if v is None else repr(float(v))


@dataclass
class ServerState:
    config: ExperimentConfig
    schema: ModelSchema
    sessions: list  # ServerSession per client, matrix order
    client_ids: list
    cumulative: int = 0
    aggregations: int = 0
    reports: list = field(default_factory=list)


def round_config(config: ExperimentConfig, schema: ModelSchema, client_ids, index: int, seeds: tuple) -> dict:
    return {
        "client_index": index,
        "clients": list(client_ids),
        "client_seed": seeds[index],
        "seed_set": seed_label(seeds),
        "rounds": config.rounds,
        "local_epochs": config.local_epochs,
        "batch_size": config.batch_size,
        "mask": mask_to_bits(config.strategy.components),
        "rule": config.strategy.rule.value,
        "skip_final_aggregation": config.skip_final_aggregation,
        "best_checkpoint": config.best_checkpoint.value,
        "patience": config.early_stopping_patience,
        "init_seed": int(np.random.SeedSequence([config.init_seed, *seeds]).generate_state(1)[0]),
        "init_scale": config.init_scale,
        "schema_name": schema.name,
        "schema_total": schema.total,
    }


def run_round(state: ServerState, round_idx: int):
    """Collect one UPDATE per client, aggregate the masked blocks, broadcast.

    In the final round with ``skip_final_aggregation`` the updates are still
    collected (they are the deployable per-client checkpoints) but nothing is
    aggregated or sent back.
    """
    cfg = state.config
    started = time.perf_counter()
    mask = cfg.strategy.components
    updates = []
    metrics = []
    before = [(s.stats.upload_tensor_bytes, s.stats.upload_wire_bytes, s.stats.down_wire_bytes) for s in state.sessions]
    for session in state.sessions:
        try:
            payload = session.recv_update(round_idx, timeout=cfg.timeout_secs)
        except (ClientFailure, TimeoutError) as exc:
            if not cfg.tolerate_client_failure:
                raise ClientFailure(session.client_id, round_idx, str(exc)) from exc
            log.warning("round %d: dropping client %s (%s)", round_idx, session.client_id, exc)
            metrics.append(None)
            continue
        weight = payload.weight if cfg.weighting is Weighting.SAMPLE_COUNT else 1.0
        updates.append(ClientUpdate(payload.client_id, payload.params, weight, payload.val_metric))
        metrics.append(payload.val_metric)
    if not updates:
        raise ClientFailure("*", round_idx, "no client delivered an update")

    aggregated = cfg.aggregates_in(round_idx)
    if aggregated:
        if cfg.best_checkpoint is BestCheckpoint.SINGLE_BEST_CLIENT:
            chosen = max(updates, key=lambda u: u.val_metric)  # first maximum wins
            glob = chosen.params.restrict(mask)
        else:
            if cfg.weighting is Weighting.SAMPLE_COUNT and sum(u.weight for u in updates) == 0:
                updates = [replace(u, weight=1.0) for u in updates]
            glob = aggregate(updates, mask, cfg.strategy.rule)
        payload = transport.UpdatePayload("", round_idx, float(sum(u.weight for u in updates)), 0.0, mask, glob)
        for session in state.sessions:
            session.send_global(payload)
        state.aggregations += 1

    per_client = comm_report(state.schema, cfg.strategy)
    transmitted = per_client.transmitted * len(updates)
    state.cumulative += transmitted
    deltas = [
        (s.stats.upload_tensor_bytes - b[0], s.stats.upload_wire_bytes - b[1], s.stats.down_wire_bytes - b[2])
        for s, b in zip(state.sessions, before)
    ]
    report = RoundReport(
        round_idx=round_idx,
        client_ids=list(state.client_ids),
        val_metrics=metrics,
        pre_metrics=[None] * len(state.sessions),
        best_epochs=[None] * len(state.sessions),
        participants=len(updates),
        aggregated=aggregated,
        transmitted=transmitted,
        cumulative_transmitted=state.cumulative,
        down_transmitted=per_client.transmitted * len(state.sessions) if aggregated else 0,
        saved_per_client=per_client.saved,
        saved_pct=str(per_client.saved_pct),
        upload_tensor_bytes=sum(d[0] for d in deltas),
        upload_wire_bytes=sum(d[1] for d in deltas),
        down_wire_bytes=sum(d[2] for d in deltas),
        wall_time=time.perf_counter() - started,
    )
    state.reports.append(report)
    return state, report


@dataclass
class RunResult:
    seed_set: str
    reports: list
    matrix: EvalMatrix
    client_reports: list
    models: dict = None  # only when clients ran in this process
    aggregations: int = 0
    wall_time: float = 0.0
    transcripts: dict = None
    traffic: dict = None  # client id -> TrafficStats, counted on the server side


def _serve_run(state: ServerState, more: bool, seeds: tuple, metric: str) -> RunResult:
    started = time.perf_counter()
    for r in range(state.config.rounds):
        run_round(state, r)
    finals = [s.finish({"more": more, "seed_set": seed_label(seeds)}, timeout=state.config.timeout_secs)
              for s in state.sessions]
    for s in state.sessions:
        s.close()
    for k, final in enumerate(finals):
        if final.get("client_id") != state.client_ids[k]:
            raise ProtocolError("done", f"DONE from {final.get('client_id')!r}, expected {state.client_ids[k]!r}")
        by_round = {h["round"]: h for h in final["history"]}
        for report in state.reports:
            h = by_round.get(report.round_idx)
            if h is not None:
                report.pre_metrics[k] = h["pre_metric"]
                report.best_epochs[k] = h["best_epoch"]
    matrix = EvalMatrix(list(state.client_ids), [f["eval_row"] for f in finals], metric=metric,
                        seed_set=seed_label(seeds))
    traffic = {cid: s.stats for cid, s in zip(state.client_ids, state.sessions)}
    return RunResult(seed_label(seeds), state.reports, matrix, finals, aggregations=state.aggregations,
                     wall_time=time.perf_counter() - started, traffic=traffic)


class Carrier(str, enum.Enum):
    LOOPBACK = "loopback"
    SOCKET = "socket"


def _start_client_threads(clients, targets, connect_fn):
    threads, errors = [], []

    def work(client, requested):
        try:
            session = connect_fn(client)
            client_loop(session, lambda cfg, c=client: c, requested_id=requested)
        except Exception as exc:  # surfaced to the caller after join
            errors.append((client.client_id, exc))

    for client, requested in zip(clients, targets):
        t = threading.Thread(target=work, args=(client, requested), name=f"client-{client.client_id}", daemon=True)
        t.start()
        threads.append(t)
    return threads, errors


def run_seed_set(config: ExperimentConfig, clients: Sequence, trainer_factory, schema: ModelSchema,
                 seeds: tuple, carrier=Carrier.LOOPBACK, record=False, more=False) -> RunResult:
    """One complete run for one seed set with in-process clients.

    ``trainer_factory()`` builds a fresh trainer per client so no trainer
    instance is shared between concurrently running clients.
    """
    carrier = Carrier(carrier)
    if len(clients) != config.n_clients:
        raise ConfigError(f"partition has {len(clients)} clients, config expects {config.n_clients}",
                          key="experiment.n_clients")
    runtimes = [FederatedClient(data, trainer_factory(), schema, clients) for data in clients]
    ids = [c.client_id for c in clients]
    metric = runtimes[0].trainer.metric_name
    sessions = [None] * len(clients)
    transcripts = None

    if carrier is Carrier.LOOPBACK:
        pairs = [transport.loopback_pair(record) for _ in clients]
        threads, errors = _start_client_threads(runtimes, ids, lambda c: transport.ClientSession(pairs[ids.index(c.client_id)][1]))
        for k, (server_side, _) in enumerate(pairs):
            sessions[k] = transport.ServerSession(server_side, schema)
            requested = sessions[k].accept_hello(config.timeout_secs)
            if requested not in ("", ids[k]):
                raise ProtocolError("hello", f"loopback client {k} asked to be {requested!r}")
        if record:
            transcripts = {ids[k]: pairs[k][0] for k in range(len(ids))}
    else:
        server = transport.serve("127.0.0.1:0", record=record)
        try:
            threads, errors = _start_client_threads(
                runtimes, ids, lambda c: transport.connect(server.address, timeout=config.timeout_secs))
            pending = list(range(len(ids)))
            while pending:
                session, requested = server.accept(schema, timeout=config.timeout_secs)
                k = ids.index(requested) if requested in ids and sessions[ids.index(requested)] is None else pending[0]
                sessions[k] = session
                pending.remove(k)
        finally:
            server.close()
        if record:
            transcripts = {ids[k]: sessions[k].channel for k in range(len(ids))}

    for k, session in enumerate(sessions):
        session.send_config(ids[k], round_config(config, schema, ids, k, seeds))
    state = ServerState(config, schema, sessions, ids)
    try:
        result = _serve_run(state, more, seeds, metric)
    except BaseException:
        for s in sessions:
            s.close()
        raise
    finally:
        for t in threads:
            t.join(timeout=config.timeout_secs)
    if errors:
        cid, exc = errors[0]
        raise ClientFailure(cid, -1, f"client thread raised {type(exc).__name__}: {exc}") from exc
    result.models = {rt.client_id: rt.model for rt in runtimes}
    if transcripts is not None:
        result.transcripts = {cid: (bytes(ch.recv_log), bytes(ch.sent_log)) for cid, ch in transcripts.items()}
    return result


def serve_seed_set(server: transport.SocketServer, config: ExperimentConfig, schema: ModelSchema,
                   client_ids: Sequence, seeds: tuple, metric: str, more=False) -> RunResult:
    """Server half of a run whose clients are external processes."""
    sessions = [None] * len(client_ids)
    pending = list(range(len(client_ids)))
    while pending:
        session, requested = server.accept(schema, timeout=config.timeout_secs)
        if requested in client_ids and sessions[list(client_ids).index(requested)] is None:
            k = list(client_ids).index(requested)
        elif requested == "":
            k = pending[0]
        else:
            try:
                session.channel.send(transport.error_message(transport.ErrorCode.REJECTED, f"unknown or duplicate client {requested!r}"))
            finally:
                session.close()
            continue
        sessions[k] = session
        pending.remove(k)
    for k, session in enumerate(sessions):
        session.send_config(client_ids[k], round_config(config, schema, client_ids, k, seeds))
    state = ServerState(config, schema, sessions, list(client_ids))
    try:
        return _serve_run(state, more, seeds, metric)
    except BaseException:
        for s in sessions:
            s.close()
        raise


# Experiments and summaries ---------------------------------------------------------------

@dataclass
class SummaryRow:
    strategy: str
    id_mean: float
    id_std: float
    cd_mean: float
    cd_std: float
    n_runs: int
    metric: str = "map50"

    def row(self):
        return [self.strategy, _num(self.id_mean), _num(self.id_std), _num(self.cd_mean), _num(self.cd_std), self.n_runs,
                self.metric]

    header = ["strategy", "id_mean", "id_std", "cd_mean", "cd_std", "n_runs", "metric"]


def summarize(runs: Sequence[EvalMatrix], strategy="") -> SummaryRow:
    """Pool diagonal (ID) and off-diagonal (CD) cells over clients and seeds.

    Standard deviations are sample deviations; a single value has std 0. CD
    is ``None`` when no run has more than one client.
    """
    if not runs:
        raise ValueError("summarize needs at least one run")
    id_vals = [v for m in runs for v in m.id_values]
    cd_vals = [v for m in runs for v in m.cd_values]

    def stats(vals):
        if not vals:
            return None, None
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0

    id_mean, id_std = stats(id_vals)
    cd_mean, cd_std = stats(cd_vals)
    return SummaryRow(str(strategy), id_mean, id_std, cd_mean, cd_std, len(runs), runs[0].metric)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list
    summary: SummaryRow


def run_experiment(config: ExperimentConfig, clients: Sequence, trainer_factory, schema: ModelSchema,
                   carrier=Carrier.LOOPBACK, record=False) -> ExperimentResult:
    """Run every seed set and summarize the per-run evaluation matrices."""
    runs = []
    seed_sets = config.seed_sets()
    for i, seeds in enumerate(seed_sets):
        log.info("seed set %s (%d/%d)", seed_label(seeds), i + 1, len(seed_sets))
        runs.append(run_seed_set(config, clients, trainer_factory, schema, seeds, carrier, record,
                                 more=i < len(seed_sets) - 1))
    return ExperimentResult(config, runs, summarize([r.matrix for r in runs], config.strategy.name))


def write_round_csv(path, reports: Sequence[RoundReport]):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RoundReport.header(reports[0].client_ids))
        for r in reports:
            w.writerow(r.row())


def write_summary_csv(path, rows: Sequence[SummaryRow]):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SummaryRow.header)
        for r in rows:
            w.writerow(r.row())


def read_summary_csv(path) -> list:
    def num(v):
        return None if v == "" else float(v)

    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            SummaryRow(r["strategy"], num(r["id_mean"]), num(r["id_std"]), num(r["cd_mean"]), num(r["cd_std"]),
                       int(r["n_runs"]), r.get("metric") or "map50")
            for r in csv.DictReader(fh)
        ]


def write_artifacts(result: ExperimentResult, out_dir, metadata: dict = None) -> list:
    """Per-seed-set round and matrix CSVs, the aggregate summary, and a timing sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for run in result.runs:
        p = out_dir / f"rounds_{run.seed_set}.csv"
        write_round_csv(p, run.reports)
        written.append(p)
        p = out_dir / f"eval_{run.seed_set}.csv"
        run.matrix.to_csv(p)
        written.append(p)
    p = out_dir / "summary.csv"
    write_summary_csv(p, [result.summary])
    written.append(p)
    side = dict(metadata or {})
    side["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    side["runs"] = [
        {"seed_set": r.seed_set, "wall_time": r.wall_time, "round_wall_times": [rep.wall_time for rep in r.reports]}
        for r in result.runs
    ]
    (out_dir / "metadata.json").write_text(json.dumps(side, indent=2) + "\n", encoding="utf-8")
    return written


def round_series(round_csvs: Sequence) -> list:
    """Per-round mean and sample std of client validation metrics across files (seed sets)."""
    by_round = {}
    for path in round_csvs:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                vals = [float(v) for k, v in row.items() if k.startswith("val_metric_") and v not in ("", "nan")]
                by_round.setdefault(int(row["round"]), []).extend(vals)
    out = []
    for r in sorted(by_round):
        arr = np.asarray(by_round[r], dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out.append((r, float(arr.mean()) if arr.size else math.nan, std, int(arr.size)))
    return out

