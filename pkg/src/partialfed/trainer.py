"""Local-training contract and the two built-in trainers.

``QuadraticTrainer`` runs gradient descent on ``0.5 * ||w - t||^2`` towards a
client-specific target ``t``, so federated fixed points can be checked
analytically. ``MockDetector`` trains the same way but scores itself with
real mAP50 over detections it fabricates from the ground truth, which drives
the evaluation pipeline end to end.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation
from .evaluation import BBox, Detection, map50
from .schema import ParameterSet


@dataclass(frozen=True)
class Checkpoint:
    epoch: int
    params: ParameterSet
    metric: float


class Trainer:
    """Base class. Subclasses implement :meth:`epochs` and :meth:`evaluate`.

    ``epochs`` yields one checkpoint per finished epoch and may stop early.
    Implementations must be deterministic in ``(params, data, epochs, seed)``
    and keep no state between calls.
    """

    metric_name = "metric"

    def epochs(self, params: ParameterSet, data, epochs: int, seed) -> Iterator[Checkpoint]:
        raise NotImplementedError

    def evaluate(self, params: ParameterSet, data, split: str = "valid") -> float:
        raise NotImplementedError

    def train(self, params, data, epochs, seed):
        """Run all epochs; return the last parameters and the metric trace."""
        last, trace = params, []
        for ckpt in self.epochs(params, data, epochs, seed):
            last = ckpt.params
            trace.append(ckpt.metric)
        return last, trace


def select_best_checkpoint(trace: Iterable) -> Checkpoint:
    """Highest metric wins; ties go to the earliest epoch.

    Accepts checkpoints or ``(params, metric)`` pairs and consumes generators
    lazily, holding only the current best.
    """
    best = None
    for i, item in enumerate(trace):
        if not isinstance(item, Checkpoint):
            params, metric = item
            item = Checkpoint(i, params, float(metric))
        if best is None or item.metric > best.metric:
            best = item
    if best is None:
        raise ContractViolation("cannot select a checkpoint from an empty trace")
    return best


# Quadratic toy task ---------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticTask:
    target: ParameterSet
    learning_rate: float = 0.5
    noise_scale: float = 0.0

    def __post_init__(self):
        _check_hyperparams(self.learning_rate, self.noise_scale)


def _check_hyperparams(lr, noise_scale):
    if not 0.0 < lr <= 1.0:
        raise ConfigError(f"learning rate must be in (0, 1], got {lr}", key="trainer.lr")
    if not noise_scale >= 0.0:
        raise ConfigError("noise_scale must be >= 0", key="trainer.noise_scale")


def distance(params: ParameterSet, target: ParameterSet) -> float:
    total = 0.0
    for name, arr in params.items():
        d = arr.astype(np.float64) - target[name]
        total += float(np.dot(d.ravel(), d.ravel()))
    return math.sqrt(total)


def toy_epochs(params: ParameterSet, task: QuadraticTask, epochs: int, seed=0) -> Iterator[Checkpoint]:
    """Gradient steps ``w <- w - lr * (w - t + noise)``; metric is ``-||w - t||``.

    The trajectory is carried in float64 and each snapshot is rounded to the
    schema's float32.
    """
    if epochs < 1:
        raise ConfigError("epochs must be >= 1", key="local_epochs")
    rng = np.random.default_rng(seed) if task.noise_scale else None
    lr = task.learning_rate
    names = params.names()
    w = {n: params[n].astype(np.float64) for n in names}
    t = {n: task.target[n].astype(np.float64) for n in names}
    for epoch in range(epochs):
        sq = 0.0
        for n in names:
            # w - lr*(w - t + noise), rearranged to run in place
            d = np.subtract(w[n], t[n])
            if rng is not None:
                noise = rng.standard_normal(d.shape, dtype=np.float32)
                d += task.noise_scale * noise
            d *= lr
            w[n] -= d
            np.subtract(w[n], t[n], out=d)
            d = d.ravel()
            sq += float(np.dot(d, d))
        snapshot = ParameterSet(params.schema, {n: w[n].astype(np.float32) for n in names}, copy=False)
        yield Checkpoint(epoch, snapshot, -math.sqrt(sq))


def toy_train(params, task: QuadraticTask, epochs: int, seed=0):
    last, trace = params, []
    for ckpt in toy_epochs(params, task, epochs, seed):
        last = ckpt.params
        trace.append(ckpt.metric)
    return last, trace


class QuadraticTrainer(Trainer):
    metric_name = "neg_distance"

    def __init__(self, lr=0.5, noise_scale=0.0):
        _check_hyperparams(lr, noise_scale)
        self.lr = lr
        self.noise_scale = noise_scale

    def task(self, data) -> QuadraticTask:
        if data.target is None:
            raise ContractViolation(f"client {data.client_id!r} has no quadratic target")
        return QuadraticTask(data.target, self.lr, self.noise_scale)

    def epochs(self, params, data, epochs, seed):
        return toy_epochs(params, self.task(data), epochs, seed)

    def evaluate(self, params, data, split="valid"):
        return -distance(params, self.task(data).target)


def make_targets(schema, n_clients, seed=0, spread=1.0, center=0.0) -> list:
    """Per-client quadratic optima ``center + spread * N(0, 1)``."""
    out = []
    for k in range(n_clients):
        rng = np.random.default_rng([int(seed), k])
        out.append(ParameterSet(
            schema,
            {b.name: (center + spread * rng.standard_normal(b.shape)).astype(np.float32) for b in schema.blocks},
            copy=False,
        ))
    return out


def initial_params(schema, seed=0, scale=1.0) -> ParameterSet:
    return ParameterSet.random(schema, np.random.default_rng([int(seed), 0x1417]), scale=scale)


# Mock detector ---------------------------------------------------------------------

def params_digest(params: ParameterSet) -> int:
    h = hashlib.blake2b(digest_size=8)
    for name, arr in params.items():
        h.update(name.encode())
        h.update(arr.tobytes())
    return int.from_bytes(h.digest(), "little")


def _key_int(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def mock_detect(params: ParameterSet, frames: Sequence, jitter: float, conf_threshold=0.0,
                reference: ParameterSet = None) -> list:
    """One detection per ground-truth box, displaced by a params-seeded jitter.

    Each box moves along x and y by a random sign times ``scale * U(0.5, 1)``
    of its own width/height, where ``scale = jitter * (1 + rms(params - reference))``.
    Confidence is ``exp(-mean relative shift)``. Boxes pushed fully outside the
    image are dropped, and so are detections below ``conf_threshold``.
    """
    scale = float(jitter)
    if reference is not None and scale:
        scale *= 1.0 + distance(params, reference) / math.sqrt(params.size)
    digest = params_digest(params)
    out = []
    for fr in frames:
        rng = np.random.default_rng([digest, _key_int(fr.video_id), int(fr.frame_id)])
        for class_id, box in fr.annotations:
            sx, sy = rng.choice((-1.0, 1.0), size=2)
            ux, uy = scale * rng.uniform(0.5, 1.0, size=2)
            w, h = box.x2 - box.x1, box.y2 - box.y1
            x1, x2 = box.x1 + sx * ux * w, box.x2 + sx * ux * w
            y1, y2 = box.y1 + sy * uy * h, box.y2 + sy * uy * h
            x1, y1, x2, y2 = max(x1, 0.0), max(y1, 0.0), min(x2, 1.0), min(y2, 1.0)
            if not (x1 < x2 and y1 < y2):
                continue
            conf = math.exp(-(ux + uy) / 2.0)
            if conf < conf_threshold:
                continue
            out.append(Detection(fr.key, int(class_id), BBox(x1, y1, x2, y2), conf))
    return out


def ground_truth(frames: Sequence) -> dict:
    return {fr.key: list(fr.annotations) for fr in frames}


class MockDetector(Trainer):
    """Quadratic training with mAP50 validation over fabricated detections.

    Honors ``patience``: training stops once that many consecutive epochs
    pass without a validation improvement.
    """

    metric_name = "map50"

    def __init__(self, jitter=0.1, conf_threshold=0.0, lr=0.5, noise_scale=0.0, patience=None):
        self.jitter = float(jitter)
        self.conf_threshold = float(conf_threshold)
        self.patience = patience
        self._quadratic = QuadraticTrainer(lr, noise_scale)

    def detect(self, params, data, split="test") -> list:
        return mock_detect(params, data.split(split), self.jitter, self.conf_threshold, data.target)

    def evaluate(self, params, data, split="valid"):
        frames = data.split(split)
        return map50(self.detect(params, data, split), ground_truth(frames)).mean

    def epochs(self, params, data, epochs, seed):
        best, stale = -math.inf, 0
        for ckpt in self._quadratic.epochs(params, data, epochs, seed):
            metric = self.evaluate(ckpt.params, data, "valid")
            yield Checkpoint(ckpt.epoch, ckpt.params, metric)
            if metric > best:
                best, stale = metric, 0
            else:
                stale += 1
                if self.patience is not None and stale >= self.patience:
                    return


def make_trainer(kind="quadratic", lr=0.5, noise_scale=0.0, jitter=0.1, conf_threshold=0.0, patience=None) -> Trainer:
    if kind == "quadratic":
        return QuadraticTrainer(lr, noise_scale)
    if kind == "mock_detector":
        return MockDetector(jitter, conf_threshold, lr, noise_scale, patience)
    raise ConfigError(f"unknown trainer {kind!r}; expected 'quadratic' or 'mock_detector'", key="trainer.kind")
