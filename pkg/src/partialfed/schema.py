"""Modular parameter layout, strategy masks and communication accounting.

A :class:`ModelSchema` is an ordered list of named tensor blocks, each tagged
with the detector component it belongs to. Everything that moves parameters
around (aggregation, the wire codec, the accounting report) walks blocks in
schema order, so the order is the canonical serialization order.
"""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, SchemaViolation

try:  # pragma: no cover - depends on interpreter version
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

WIRE_DTYPE = np.dtype("<f4")
SCALAR_BYTES = WIRE_DTYPE.itemsize


class Component(str, enum.Enum):
    BACKBONE = "backbone"
    NECK = "neck"
    HEAD = "head"

    @property
    def bit(self) -> int:
        return 1 << _COMPONENT_ORDER.index(self)


_COMPONENT_ORDER = (Component.BACKBONE, Component.NECK, Component.HEAD)
ALL_COMPONENTS = frozenset(_COMPONENT_ORDER)


def mask_to_bits(mask: Iterable[Component]) -> int:
    bits = 0
    for c in mask:
        bits |= Component(c).bit
    return bits


def bits_to_mask(bits: int) -> frozenset:
    if bits & ~0b111:
        raise SchemaViolation(f"mask bitfield {bits:#x} has bits outside backbone/neck/head")
    return frozenset(c for c in _COMPONENT_ORDER if bits & c.bit)


def sort_components(mask: Iterable[Component]) -> list:
    return [c for c in _COMPONENT_ORDER if c in set(mask)]


@dataclass(frozen=True)
class BlockSpec:
    name: str
    component: Component
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "component", Component(self.component))
        shape = tuple(int(d) for d in self.shape)
        if not shape or any(d < 1 for d in shape):
            raise SchemaViolation(f"block {self.name!r}: shape must be non-empty with dims >= 1, got {self.shape}")
        object.__setattr__(self, "shape", shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class ModelSchema:
    name: str
    blocks: tuple

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if not blocks:
            raise SchemaViolation(f"schema {self.name!r} has no blocks")
        names = [b.name for b in blocks]
        if len(set(names)) != len(names):
            raise SchemaViolation(f"schema {self.name!r} has duplicate block names")
        object.__setattr__(self, "blocks", blocks)

    @property
    def total(self) -> int:
        return sum(b.size for b in self.blocks)

    @property
    def components(self) -> frozenset:
        return frozenset(b.component for b in self.blocks)

    def block(self, name: str) -> BlockSpec:
        for b in self.blocks:
            if b.name == name:
                return b
        raise SchemaViolation(f"schema {self.name!r} has no block {name!r}")

    def masked_blocks(self, mask: Iterable[Component]) -> list:
        """Blocks of ``mask`` in schema order.

        Raises :class:`SchemaViolation` when the mask selects nothing in this
        schema, since an empty transfer is never a meaningful request.
        """
        mask = frozenset(Component(c) for c in mask)
        selected = [b for b in self.blocks if b.component in mask]
        if not selected:
            raise SchemaViolation(
                f"mask {sorted(c.value for c in mask)} selects no blocks of schema {self.name!r}"
            )
        return selected

    def masked_size(self, mask: Iterable[Component]) -> int:
        return sum(b.size for b in self.masked_blocks(mask))


def component_counts(schema: ModelSchema) -> dict:
    counts = {c: 0 for c in _COMPONENT_ORDER}
    for b in schema.blocks:
        counts[b.component] += b.size
    return counts


# Strategies -----------------------------------------------------------------

class AggRule(str, enum.Enum):
    AVERAGE = "average"
    MEDIAN = "median"


B, N, H = Component.BACKBONE, Component.NECK, Component.HEAD

# Table order used by the accounting report.
MASKS = {
    "FA": frozenset({B, N, H}),
    "FedBackbone": frozenset({B}),
    "FedNeck": frozenset({N}),
    "FedHead": frozenset({H}),
    "FedNeckHead": frozenset({N, H}),
    "FedBackboneHead": frozenset({B, H}),
    "FedBackboneNeck": frozenset({B, N}),
}
_RULE_SUFFIX = {AggRule.AVERAGE: "Avg", AggRule.MEDIAN: "Median"}


@dataclass(frozen=True)
class Strategy:
    components: frozenset
    rule: AggRule = AggRule.AVERAGE

    def __post_init__(self):
        comps = frozenset(Component(c) for c in self.components)
        if not comps:
            raise ConfigError("strategy must aggregate at least one component")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "rule", AggRule(self.rule))

    @property
    def mask_name(self) -> str:
        for name, mask in MASKS.items():
            if mask == self.components:
                return name
        raise AssertionError("unreachable: every non-empty mask is named")

    @property
    def name(self) -> str:
        """Name in the ``FedBackboneNeckAvg`` style; full aggregation is ``FedAvg``/``FedMedian``."""
        suffix = _RULE_SUFFIX[self.rule]
        if self.components == ALL_COMPONENTS:
            return "Fed" + suffix
        return self.mask_name + suffix

    def __str__(self):
        return self.name


def all_strategies() -> list:
    return [Strategy(mask, rule) for mask in MASKS.values() for rule in AggRule]


def parse_strategy(name: str, rule=None) -> Strategy:
    """Parse ``FA``, ``FedNeck``, ``FedAvg``, ``FedMedian`` or ``FedNeckHeadMedian``.

    A bare mask name uses ``rule`` (average when omitted).
    """
    text = name.strip()
    if text in ("FedAvg", "FedMedian"):
        return Strategy(MASKS["FA"], AggRule.AVERAGE if text == "FedAvg" else AggRule.MEDIAN)
    if text in MASKS:
        return Strategy(MASKS[text], AggRule(rule) if rule else AggRule.AVERAGE)
    for r, suffix in _RULE_SUFFIX.items():
        base = text[: -len(suffix)]
        if text.endswith(suffix) and base in MASKS:
            if rule is not None and AggRule(rule) != r:
                raise ConfigError(f"strategy {text!r} conflicts with rule {rule!r}")
            return Strategy(MASKS[base], r)
    valid = sorted(MASKS) + sorted(s.name for s in all_strategies())
    raise ConfigError(f"unknown strategy {name!r}; valid names: {', '.join(dict.fromkeys(valid))}")


# Accounting -----------------------------------------------------------------

@dataclass(frozen=True)
class CommReport:
    transmitted: int
    saved: int
    total: int

    @property
    def saved_pct(self) -> Decimal:
        exact = Decimal(100 * self.saved) / Decimal(self.total)
        return exact.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)

    def format_saved(self) -> str:
        return f"{self.saved:,} ({self.saved_pct}%)"


def comm_report(schema: ModelSchema, strategy: Strategy) -> CommReport:
    counts = component_counts(schema)
    transmitted = sum(counts[c] for c in strategy.components)
    return CommReport(transmitted=transmitted, saved=schema.total - transmitted, total=schema.total)


def accounting_table(schema: ModelSchema) -> list:
    """One ``(mask name, CommReport)`` row per mask, in table order."""
    return [(name, comm_report(schema, Strategy(mask))) for name, mask in MASKS.items()]


# Parameter sets ---------------------------------------------------------------

class ParameterSet:
    """Float32 arrays for some or all blocks of a schema.

    A full set covers every block. A masked subset covers exactly the blocks
    of some components. Arrays are made read-only on construction so
    snapshots can be shared without defensive copies.
    """

    __slots__ = ("schema", "_blocks")

    def __init__(self, schema: ModelSchema, blocks: Mapping, copy: bool = True):
        self.schema = schema
        by_name = {}
        for spec in schema.blocks:
            if spec.name not in blocks:
                continue
            raw = blocks[spec.name]
            arr = np.array(raw, dtype=np.float32) if copy else np.asarray(raw, dtype=np.float32)
            if arr.shape != spec.shape:
                if arr.size != spec.size:
                    raise SchemaViolation(
                        f"block {spec.name!r}: expected shape {spec.shape}, got {arr.shape}"
                    )
                arr = arr.reshape(spec.shape)
            arr.flags.writeable = False
            by_name[spec.name] = arr
        unknown = set(blocks) - set(by_name)
        if unknown:
            raise SchemaViolation(f"blocks not in schema {schema.name!r}: {sorted(unknown)}")
        if not by_name:
            raise SchemaViolation("parameter set has no blocks")
        covered = {schema.block(n).component for n in by_name}
        for spec in schema.blocks:
            if spec.component in covered and spec.name not in by_name:
                raise SchemaViolation(
                    f"component {spec.component.value!r} is only partially present (missing {spec.name!r})"
                )
        self._blocks = by_name

    @classmethod
    def full(cls, schema, fill=0.0):
        return cls(schema, {b.name: np.full(b.shape, fill, np.float32) for b in schema.blocks}, copy=False)

    @classmethod
    def random(cls, schema, rng, scale=1.0):
        return cls(
            schema,
            {b.name: (rng.standard_normal(b.shape) * scale).astype(np.float32) for b in schema.blocks},
            copy=False,
        )

    @classmethod
    def from_flat(cls, schema, flat, mask=ALL_COMPONENTS):
        flat = np.asarray(flat, dtype=np.float32).ravel()
        blocks, offset = {}, 0
        for spec in schema.masked_blocks(mask):
            blocks[spec.name] = flat[offset: offset + spec.size].reshape(spec.shape)
            offset += spec.size
        if offset != flat.size:
            raise SchemaViolation(f"flat vector has {flat.size} scalars, mask needs {offset}")
        return cls(schema, blocks)

    @property
    def components(self) -> frozenset:
        return frozenset(self.schema.block(n).component for n in self._blocks)

    @property
    def is_full(self) -> bool:
        return len(self._blocks) == len(self.schema.blocks)

    def __getitem__(self, name):
        return self._blocks[name]

    def __contains__(self, name):
        return name in self._blocks

    def names(self):
        return list(self._blocks)

    def items(self):
        return self._blocks.items()

    @property
    def size(self) -> int:
        return sum(a.size for a in self._blocks.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._blocks.values()])

    def restrict(self, mask) -> "ParameterSet":
        names = [b.name for b in self.schema.masked_blocks(mask)]
        missing = [n for n in names if n not in self._blocks]
        if missing:
            raise SchemaViolation(f"cannot restrict: blocks {missing} absent")
        return ParameterSet(self.schema, {n: self._blocks[n] for n in names}, copy=False)

    def map(self, fn) -> "ParameterSet":
        return ParameterSet(self.schema, {n: fn(a) for n, a in self._blocks.items()}, copy=False)

    def digest(self) -> bytes:
        """Content hash over block names and raw bytes."""
        h = hashlib.blake2b(digest_size=16)
        for name, arr in self._blocks.items():
            h.update(name.encode())
            h.update(arr.tobytes())
        return h.digest()

    def bit_equal(self, other: "ParameterSet") -> bool:
        if self.names() != other.names():
            return False
        return all(a.tobytes() == other[n].tobytes() for n, a in self._blocks.items())

    def __repr__(self):
        comps = ",".join(c.value for c in sort_components(self.components))
        return f"ParameterSet({self.schema.name}, [{comps}], {self.size} scalars)"


def pack(params: ParameterSet, mask) -> bytes:
    """Masked blocks in schema order as little-endian f32 bytes."""
    chunks = []
    for spec in params.schema.masked_blocks(mask):
        if spec.name not in params:
            raise SchemaViolation(f"parameter set lacks masked block {spec.name!r}")
        chunks.append(params[spec.name].astype(WIRE_DTYPE, copy=False).tobytes())
    return b"".join(chunks)


def unpack(buf: bytes, schema: ModelSchema, mask) -> ParameterSet:
    blocks = schema.masked_blocks(mask)
    expected = SCALAR_BYTES * sum(b.size for b in blocks)
    if len(buf) != expected:
        raise SchemaViolation(f"buffer has {len(buf)} bytes, mask needs {expected}")
    out, offset = {}, 0
    for spec in blocks:
        n = spec.size * SCALAR_BYTES
        out[spec.name] = np.frombuffer(buf, WIRE_DTYPE, spec.size, offset).astype(np.float32).reshape(spec.shape)
        offset += n
    return ParameterSet(schema, out, copy=False)


# Schema files -------------------------------------------------------------------

def schema_from_dict(doc: Mapping, default_name="schema") -> ModelSchema:
    try:
        blocks = [
            BlockSpec(str(b["name"]), Component(b["component"]), tuple(b["shape"]))
            for b in doc["blocks"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed schema document: {exc}") from exc
    return ModelSchema(str(doc.get("name", default_name)), tuple(blocks))


def load_schema(path) -> ModelSchema:
    """Load a schema file. ``yolov11n`` or ``yolov11n.schema`` resolve to the bundled fixture."""
    path = str(path)
    candidate = Path(path)
    if not candidate.exists():
        bundled = path if path.endswith(".schema") else path + ".schema"
        ref = resources.files("partialfed") / "data" / Path(bundled).name
        if not ref.is_file():
            raise ConfigError(f"schema file not found: {path}")
        text = ref.read_text(encoding="utf-8")
    else:
        text = candidate.read_text(encoding="utf-8")
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse schema {path}: {exc}") from exc
    return schema_from_dict(doc, default_name=Path(path).stem)


def dump_schema(schema: ModelSchema) -> str:
    lines = [f'name = "{schema.name}"', ""]
    for b in schema.blocks:
        lines += [
            "[[blocks]]",
            f'name = "{b.name}"',
            f'component = "{b.component.value}"',
            f"shape = [{', '.join(str(d) for d in b.shape)}]",
            "",
        ]
    return "\n".join(lines)


def toy_schema(backbone=8, neck=4, head=4, name="toy") -> ModelSchema:
    """One flat block per component; sizes of zero omit the component."""
    blocks = [
        BlockSpec(comp.value, comp, (size,))
        for comp, size in zip(_COMPONENT_ORDER, (backbone, neck, head))
        if size
    ]
    return ModelSchema(name, tuple(blocks))


def yolov11n_schema() -> ModelSchema:
    return load_schema("yolov11n.schema")
