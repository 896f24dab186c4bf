"""FedAvg / FedMedian over masked parameter subsets, and the client-side merge.

The server only ever sees the masked components of each update. Unmasked
components stay on the client and are spliced back in by :func:`merge`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AggregationInputError, SchemaViolation
from .schema import AggRule, ParameterSet


@dataclass(frozen=True)
class ClientUpdate:
    client_id: str
    params: ParameterSet
    weight: float = 1.0
    val_metric: float = 0.0

    def __post_init__(self):
        if not self.weight >= 0:
            raise AggregationInputError(f"client {self.client_id!r}: weight must be >= 0, got {self.weight}")


def _masked_inputs(updates: Sequence[ClientUpdate], mask):
    if not updates:
        raise AggregationInputError("no client updates to aggregate")
    schema = updates[0].params.schema
    blocks = schema.masked_blocks(mask)
    for u in updates:
        if u.params.schema != schema:
            raise SchemaViolation(f"client {u.client_id!r} uses schema {u.params.schema.name!r}, expected {schema.name!r}")
        for spec in blocks:
            if spec.name not in u.params:
                raise SchemaViolation(f"client {u.client_id!r} update lacks masked block {spec.name!r}")
    return schema, blocks


def fed_avg(updates: Sequence[ClientUpdate], mask) -> ParameterSet:
    """Weighted coordinate-wise mean of the masked blocks.

    Accumulates in float64 and rounds once to float32 at the end. Updates are
    summed in a canonical order (weight, then content hash), so the result is
    bit-identical under any reordering of ``updates``.
    """
    schema, blocks = _masked_inputs(updates, mask)
    updates = sorted(updates, key=lambda u: (u.weight, u.params.restrict(mask).digest()))
    weights = np.array([u.weight for u in updates], dtype=np.float64)
    total = weights.sum()
    if not total > 0:
        raise AggregationInputError("sum of client weights is zero")
    out = {}
    for spec in blocks:
        acc = np.zeros(spec.shape, dtype=np.float64)
        for w, u in zip(weights, updates):
            if w:
                acc += w * u.params[spec.name].astype(np.float64)
        out[spec.name] = (acc / total).astype(np.float32)
    return ParameterSet(schema, out, copy=False)


def fed_median(updates: Sequence[ClientUpdate], mask) -> ParameterSet:
    """Unweighted coordinate-wise median; even counts take the midpoint of the middle pair."""
    schema, blocks = _masked_inputs(updates, mask)
    out = {}
    for spec in blocks:
        stack = np.stack([u.params[spec.name] for u in updates]).astype(np.float64)
        out[spec.name] = np.median(stack, axis=0).astype(np.float32)
    return ParameterSet(schema, out, copy=False)


def aggregate(updates: Sequence[ClientUpdate], mask, rule=AggRule.AVERAGE) -> ParameterSet:
    if AggRule(rule) is AggRule.MEDIAN:
        return fed_median(updates, mask)
    return fed_avg(updates, mask)


def merge(local: ParameterSet, aggregated: ParameterSet, mask) -> ParameterSet:
    """Take masked blocks from ``aggregated`` and every other block from ``local``."""
    if not local.is_full:
        raise SchemaViolation("merge needs a full local parameter set")
    if aggregated.schema != local.schema:
        raise SchemaViolation("aggregated and local parameters use different schemas")
    masked = [b.name for b in local.schema.masked_blocks(mask)]
    if sorted(aggregated.names()) != sorted(masked):
        raise SchemaViolation(
            f"aggregated blocks {aggregated.names()} do not match mask coverage {masked}"
        )
    return ParameterSet(
        local.schema,
        {b.name: (aggregated[b.name] if b.name in aggregated else local[b.name]) for b in local.schema.blocks},
        copy=False,
    )
