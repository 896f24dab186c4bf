from functools import partial

import pytest

from partialfed.partitioning import ClientData, FrameRecord
from partialfed.trainer import QuadraticTrainer, make_targets


def toy_clients(schema, n=3, target_seed=7, train_sizes=None, spread=1.0):
    """Client handles with quadratic targets and ``train_sizes`` dummy training frames."""
    targets = make_targets(schema, n, seed=target_seed, spread=spread)
    sizes = train_sizes or [4] * n
    out = []
    for k in range(n):
        frames = tuple(FrameRecord(f"v{k}", f, "synthetic") for f in range(sizes[k]))
        out.append(ClientData(f"client{k}", k, {"train": frames, "valid": frames[:1], "test": frames[:1]},
                              targets[k]))
    return out


def quadratic_factory(lr=1.0, noise_scale=0.0):
    return partial(QuadraticTrainer, lr, noise_scale)


@pytest.fixture
def clients_for():
    return toy_clients
