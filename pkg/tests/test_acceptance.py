"""Exit criteria. Run with ``pytest -m acceptance -s`` for the PASS/FAIL lines.

Each test prints exactly one ``criterion N: PASS|FAIL`` line (even when
output capture is on) and enforces its own runtime budget.
"""
import math
import random
import re
import threading
import time
from contextlib import contextmanager
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import quadratic_factory, toy_clients
from oracles import ap_oracle, map50_oracle, naive_median, naive_weighted_mean
from partialfed import transport
from partialfed.aggregation import ClientUpdate, aggregate, fed_avg, fed_median, merge
from partialfed.cli import main
from partialfed.config import load_setup
from partialfed.evaluation import BBox, Detection, average_precision, map50
from partialfed.orchestrator import (
    Carrier,
    ExperimentConfig,
    FederatedClient,
    client_loop,
    run_experiment,
    run_seed_set,
    serve_seed_set,
    write_artifacts,
)
from partialfed.partitioning import (
    apply_lmo,
    class_histogram,
    curation_groups,
    partition_by_group,
    partition_by_length,
    partition_iid,
    split_frames,
    synthetic_manifest,
)
from partialfed.schema import MASKS, AggRule, Component, ParameterSet, load_schema, parse_strategy, toy_schema
from partialfed.trainer import Checkpoint, Trainer

pytestmark = pytest.mark.acceptance

README = Path(__file__).resolve().parents[1] / "README.md"
B, N, H = Component.BACKBONE, Component.NECK, Component.HEAD


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def check(number, budget_s):
        started = time.perf_counter()
        status, detail = "FAIL", ""
        try:
            yield
            elapsed = time.perf_counter() - started
            if elapsed >= budget_s:
                detail = f" (over budget: {elapsed:.2f}s >= {budget_s}s)"
                raise AssertionError(f"criterion {number} took {elapsed:.2f}s, budget {budget_s}s")
            status, detail = "PASS", f" ({elapsed:.2f}s, budget {budget_s}s)"
        finally:
            with capsys.disabled():
                print(f"\ncriterion {number}: {status}{detail}")
    return check


# 1 ----------------------------------------------------------------------------------

TABLE = [
    ("FA", 0, "0.00"),
    ("FedBackbone", 1_034_061, "39.17"),
    ("FedNeck", 2_073_798, "78.56"),
    ("FedHead", 2_171_791, "82.27"),
    ("FedNeckHead", 1_605_764, "60.83"),
    ("FedBackboneHead", 566_027, "21.44"),
    ("FedBackboneNeck", 468_034, "17.73"),
]


def test_c1_accounting_table(criterion, capsys):
    with criterion(1, 1.0):
        assert main(["account", "--all"]) == 0
        rows = capsys.readouterr().out.splitlines()[1:]
        assert len(rows) == 7
        for line, (name, saved, pct) in zip(rows, TABLE):
            m = re.fullmatch(r"(\S+)\s+([\d,]+)\s+([\d,]+) \(([\d.]+)%\)", line.strip())
            assert m, line
            assert m.group(1) == name
            assert int(m.group(3).replace(",", "")) == saved
            assert abs(float(m.group(4)) - float(pct)) <= 0.01
            exact = Decimal(saved * 100) / Decimal(2_639_825)
            assert m.group(4) == str(exact.quantize(Decimal("0.01"), ROUND_HALF_UP))
        assert 566_027 + 468_034 == 1_034_061


# 2 ----------------------------------------------------------------------------------

AGG_SCHEMA = toy_schema(3, 2, 2)
CASES = 1000
many = settings(max_examples=CASES, deadline=None, database=None, suppress_health_check=list(HealthCheck))


@st.composite
def update_sets(draw):
    n = draw(st.integers(1, 6))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    scale = draw(st.sampled_from([1e-3, 1.0, 1e3]))
    weights = [float(w) for w in rng.integers(0, 50, size=n)]
    if not any(weights):
        weights[0] = 1.0
    return [ClientUpdate(f"c{k}", ParameterSet.random(AGG_SCHEMA, rng, scale=scale), weights[k]) for k in range(n)]


masks = st.sampled_from(list(MASKS.values()))


def test_c2_aggregation_algebra(criterion):
    counts = dict.fromkeys(["avg_oracle", "permutation", "median_bounds", "merge"], 0)

    @many
    @given(update_sets(), masks)
    def avg_oracle(updates, mask):
        counts["avg_oracle"] += 1
        out = fed_avg(updates, mask)
        for spec in AGG_SCHEMA.masked_blocks(mask):
            for i in range(spec.size):
                vals = [u.params[spec.name][i] for u in updates]
                expect = naive_weighted_mean(vals, [u.weight for u in updates])
                # relative 1e-6; the absolute floor only matters when the exact mean cancels to ~0
                floor = 1e-12 * max(abs(float(v)) for v in vals)
                assert abs(float(out[spec.name][i]) - expect) <= 1e-6 * abs(expect) + floor

    @many
    @given(update_sets(), st.randoms(use_true_random=False), masks)
    def permutation(updates, rnd, mask):
        counts["permutation"] += 1
        shuffled = list(updates)
        rnd.shuffle(shuffled)
        med_a, med_b = fed_median(updates, mask), fed_median(shuffled, mask)
        assert med_a.bit_equal(med_b)
        avg_a, avg_b = fed_avg(updates, mask), fed_avg(shuffled, mask)
        for name in avg_a.names():
            assert np.max(np.abs(avg_a[name].astype(np.float64) - avg_b[name])) <= 1e-9

    @many
    @given(update_sets(), masks)
    def median_bounds(updates, mask):
        counts["median_bounds"] += 1
        out = fed_median(updates, mask)
        for spec in AGG_SCHEMA.masked_blocks(mask):
            stack = np.stack([u.params[spec.name] for u in updates])
            assert np.all(stack.min(axis=0) <= out[spec.name]) and np.all(out[spec.name] <= stack.max(axis=0))
            for i in range(spec.size):
                assert out[spec.name][i] == np.float32(naive_median(stack[:, i]))

    @many
    @given(update_sets(), masks, st.sampled_from(list(AggRule)))
    def merge_bits(updates, mask, rule):
        counts["merge"] += 1
        local = updates[0].params
        out = merge(local, aggregate(updates, mask, rule), mask)
        for spec in AGG_SCHEMA.blocks:
            if spec.component not in mask:
                assert out[spec.name].tobytes() == local[spec.name].tobytes()

    with criterion(2, 30.0):
        for prop in (avg_oracle, permutation, median_bounds, merge_bits):
            prop()
        assert all(c >= CASES for c in counts.values()), counts


# 3 ----------------------------------------------------------------------------------

def test_c3_analytic_convergence(criterion):
    schema = toy_schema(8, 4, 4)
    clients = toy_clients(schema)
    targets = {spec.name: np.stack([c.target[spec.name].astype(np.float64) for c in clients]) for spec in schema.blocks}

    def one_round(strategy):
        cfg = ExperimentConfig(rounds=1, local_epochs=1, strategy=parse_strategy(strategy), seeds=("012",),
                               n_clients=3, weighting="uniform", skip_final_aggregation=False)
        return run_seed_set(cfg, clients, quadratic_factory(lr=1.0), schema, (0, 1, 2)).models

    with criterion(3, 5.0):
        for strategy, reduce in (("FedAvg", lambda a: a.mean(axis=0)), ("FedMedian", lambda a: np.median(a, axis=0))):
            models = one_round(strategy)
            for spec in schema.blocks:
                for m in models.values():
                    assert np.max(np.abs(m[spec.name] - reduce(targets[spec.name]))) <= 1e-6
        models = one_round("FedBackboneNeck")
        for spec in schema.blocks:
            for k, c in enumerate(clients):
                want = targets[spec.name][k] if spec.component is H else targets[spec.name].mean(axis=0)
                assert np.max(np.abs(models[c.client_id][spec.name] - want)) <= 1e-6


# 4 ----------------------------------------------------------------------------------

def test_c4_communication_ledger(criterion):
    schema = load_schema("yolov11n")
    clients = toy_clients(schema)

    def run(strategy):
        cfg = ExperimentConfig(rounds=20, local_epochs=1, strategy=parse_strategy(strategy), seeds=("012",),
                               n_clients=3, weighting="uniform", skip_final_aggregation=True)
        return run_seed_set(cfg, clients, quadratic_factory(lr=1.0), schema, (0, 1, 2))

    with criterion(4, 60.0):
        partial = run("FedBackboneNeck")
        per_client = {cid: t.upload_tensor_bytes // 4 for cid, t in partial.traffic.items()}
        assert all(t.upload_tensor_bytes % 4 == 0 for t in partial.traffic.values())
        assert per_client == {c.client_id: 20 * (2_639_825 - 468_034) for c in clients}
        assert sum(r.upload_tensor_bytes for r in partial.reports) == 4 * 3 * 20 * 2_171_791
    full = run("FedAvg")  # reference run, outside the timed budget
    full_per_client = {cid: t.upload_tensor_bytes // 4 for cid, t in full.traffic.items()}
    for cid in per_client:
        assert full_per_client[cid] == 20 * 2_639_825
        assert abs((1 - per_client[cid] / full_per_client[cid]) - 0.1773) <= 1e-4


# 5 ----------------------------------------------------------------------------------

@st.composite
def instances(draw):
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))

    def rand_box():
        w, h = rng.uniform(0.05, 0.6, size=2)
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        return float(x), float(y), float(x + w), float(y + h)

    frames = [("v", int(f)) for f in range(int(rng.integers(1, 3)))]
    gts = [(frames[int(rng.integers(len(frames)))], int(rng.integers(3)), rand_box())
           for _ in range(draw(st.integers(0, 5)))]
    dets = []
    for _ in range(draw(st.integers(0, 5))):
        if gts and rng.random() < 0.6:
            f, c, b = gts[int(rng.integers(len(gts)))]
            j = rng.normal(0, 0.04, size=4)
            x1, y1 = min(b[0] + j[0], b[2] - 0.01), min(b[1] + j[1], b[3] - 0.01)
            bb = (max(0.0, x1), max(0.0, y1), min(1.0, max(b[2] + j[2], x1 + 0.01)), min(1.0, max(b[3] + j[3], y1 + 0.01)))
        else:
            f, c, bb = frames[int(rng.integers(len(frames)))], int(rng.integers(3)), rand_box()
        conf = float(rng.choice([0.3, 0.6])) if rng.random() < 0.3 else float(rng.random())
        dets.append((f, c, conf, bb))
    return dets, gts


def test_c5_map50_oracle(criterion):
    seen = [0]

    @settings(max_examples=1000, deadline=None, database=None, suppress_health_check=list(HealthCheck))
    @given(instances())
    def equivalence(inst):
        seen[0] += 1
        dets, gts = inst
        g = {}
        for f, c, b in gts:
            g.setdefault(f, []).append((c, BBox(*b)))
        got = map50([Detection(f, c, BBox(*b), conf) for f, c, conf, b in dets], g).mean
        assert abs(got - map50_oracle(dets, gts)) <= 1e-9

    with criterion(5, 10.0):
        assert math.isclose(average_precision([True, False, True], 2), 5 / 6, abs_tol=1e-12)
        assert math.isclose(ap_oracle([True, False, True], 2), 5 / 6, abs_tol=1e-12)
        equivalence()
        assert seen[0] >= 1000


# 6 ----------------------------------------------------------------------------------

def test_c6_partition_invariants(criterion):
    manifest = synthetic_manifest(18, seed=5)
    videos = {fr.video_id for fr in manifest.frames}

    def build(mode, seed):
        if mode == "iid":
            return partition_iid(manifest, 3, seed)
        if mode == "group":
            return partition_by_group(manifest, curation_groups(manifest, "m2cai", 3), 3)
        if mode == "length":
            return partition_by_length(manifest, 3)
        r = random.Random(seed)
        allowed = {k: set(r.sample(range(manifest.n_classes), r.randint(1, manifest.n_classes))) for k in (1, 2)}
        return apply_lmo(partition_iid(manifest, 3, seed), allowed)

    @settings(max_examples=200, deadline=None, database=None)
    @given(st.sampled_from(["iid", "group", "length", "lmo"]), st.integers(0, 2**31))
    def invariants(mode, seed):
        spec = build(mode, seed)
        sets = [set(c.train) for c in spec.clients]
        assert sum(map(len, sets)) == len(set.union(*sets)) == len(videos)
        frames = [fr for k in range(3) for fr in split_frames(spec, manifest, k, "train")]
        assert sorted(fr.key for fr in frames) == sorted(fr.key for fr in manifest.frames)
        for k, c in enumerate(spec.clients):
            if c.allowed_classes is not None:
                assert set(class_histogram(split_frames(spec, manifest, k, "train"))) <= c.allowed_classes
        assert build(mode, seed) == spec

    with criterion(6, 5.0):
        invariants()


# 7 ----------------------------------------------------------------------------------

def test_c7_carrier_equivalence(criterion, tmp_path):
    with criterion(7, 30.0):
        setup = load_setup("quickstart.cfg")
        for carrier in Carrier:
            result = run_experiment(setup.config, setup.clients, setup.trainer_factory, setup.schema, carrier=carrier)
            write_artifacts(result, tmp_path / carrier.value)
        names = sorted(p.name for p in (tmp_path / "loopback").glob("*.csv") if not p.name.startswith("eval_"))
        assert "summary.csv" in names and any(n.startswith("rounds_") for n in names)
        for name in names:
            assert (tmp_path / "loopback" / name).read_bytes() == (tmp_path / "socket" / name).read_bytes()


# 8 ----------------------------------------------------------------------------------

class ExternalTrainer(Trainer):
    """Stand-in for a real detector trainer: plain gradient steps on its own objective."""

    metric_name = "score"

    def __init__(self, step=0.25):
        self.step = step

    def epochs(self, params, data, epochs, seed):
        w = params
        for e in range(epochs):
            w = ParameterSet(w.schema, {n: (a - self.step * (a - data.target[n])).astype(np.float32) for n, a in w.items()})
            yield Checkpoint(e, w, self.evaluate(w, data))

    def evaluate(self, params, data, split="valid"):
        return -float(sum(np.sum((a.astype(np.float64) - data.target[n]) ** 2) for n, a in params.items()))


def test_c8_non_reproducibility_and_trainer_recipe(criterion):
    with criterion(8, 30.0):
        text = README.read_text(encoding="utf-8")
        assert "## Plugging in a real trainer" in text
        assert "not reproducible" in text
        # the recipe: a custom Trainer behind FederatedClient, talking to a server over a socket
        schema = toy_schema(6, 3, 3)
        clients = toy_clients(schema)
        cfg = ExperimentConfig(rounds=3, local_epochs=2, strategy=parse_strategy("FedBackboneNeck"), seeds=("012",),
                               n_clients=3, timeout_secs=20)
        server = transport.serve("127.0.0.1:0")
        errors = []

        def client(k):
            try:
                session = transport.connect(server.address, schema)
                fc = FederatedClient(clients[k], ExternalTrainer(), schema, clients)
                client_loop(session, lambda _cfg: fc, requested_id=clients[k].client_id, timeout=20)
            except Exception as exc:  # pragma: no cover - reported below
                errors.append(exc)

        threads = [threading.Thread(target=client, args=(k,)) for k in range(3)]
        for t in threads:
            t.start()
        try:
            run = serve_seed_set(server, cfg, schema, [c.client_id for c in clients], (0, 1, 2), "score")
        finally:
            server.close()
        for t in threads:
            t.join(20)
        assert not errors, errors
        assert len(run.reports) == 3 and run.matrix.metric == "score"
        assert all(t.upload_tensor_bytes == 4 * 3 * 9 for t in run.traffic.values())
