"""Experiment config files (TOML) and the objects they describe.

Relative paths inside a config resolve against the config file's directory.
Schema names without a file (``yolov11n``) resolve to bundled fixtures.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .orchestrator import ExperimentConfig
from .partitioning import (
    ClientData,
    apply_lmo,
    client_data,
    client_name,
    curation_groups,
    make_holdout,
    partition_by_group,
    partition_by_length,
    partition_iid,
    read_manifest,
    synthetic_manifest,
)
from .schema import load_schema, parse_strategy, toy_schema
from .trainer import make_targets, make_trainer

try:  # pragma: no cover
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

SECTIONS = {
    "experiment": {
        "name", "rounds", "local_epochs", "batch_size", "strategy", "rule", "seeds", "n_clients",
        "weighting", "best_checkpoint", "skip_final_aggregation", "tolerate_client_failure",
        "early_stopping_patience", "init_seed", "init_scale",
    },
    "schema": {"path", "toy"},
    "trainer": {"kind", "lr", "noise_scale", "jitter", "conf_threshold", "target_seed", "target_spread"},
    "partition": {
        "manifest", "synthetic_videos", "synthetic_seed", "mode", "seed", "valid_per_client",
        "test_per_client", "primary_prefix", "lmo",
    },
    "transport": {"bind", "timeout_secs"},
}


@dataclass
class Setup:
    name: str
    config: ExperimentConfig
    schema: object
    manifest: object
    partition: object
    clients: list
    trainer_factory: object
    trainer_kind: str
    bind: str
    base_dir: Path


def _check_keys(doc):
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError("unknown section", key=section)
        if not isinstance(body, dict):
            raise ConfigError("must be a table", key=section)
        for key in body:
            if key not in SECTIONS[section]:
                raise ConfigError("unknown key", key=f"{section}.{key}")


def _get(doc, path, default=None, kind=None):
    section, key = path.split(".")
    value = doc.get(section, {}).get(key, default)
    if kind is not None and value is not None and not isinstance(value, kind):
        raise ConfigError(f"expected {getattr(kind, '__name__', kind)}, got {value!r}", key=path)
    return value


def experiment_config(doc) -> ExperimentConfig:
    exp = doc.get("experiment", {})
    try:
        strategy = parse_strategy(exp.get("strategy", "FedAvg"), exp.get("rule"))
    except ConfigError as exc:
        raise ConfigError(str(exc), key="experiment.strategy") from None
    kwargs = {k: exp[k] for k in (
        "rounds", "local_epochs", "batch_size", "n_clients", "weighting", "best_checkpoint",
        "skip_final_aggregation", "tolerate_client_failure", "early_stopping_patience",
        "init_seed", "init_scale",
    ) if k in exp}
    if "seeds" in exp:
        kwargs["seeds"] = tuple(exp["seeds"])
    timeout = _get(doc, "transport.timeout_secs", None, (int, float))
    if timeout is not None:
        kwargs["timeout_secs"] = float(timeout)
    return ExperimentConfig(strategy=strategy, **kwargs)


def _load_schema(doc, base_dir):
    section = doc.get("schema", {})
    if "toy" in section:
        sizes = section["toy"]
        if not isinstance(sizes, list) or len(sizes) != 3:
            raise ConfigError("expected [backbone, neck, head] sizes", key="schema.toy")
        return toy_schema(*sizes)
    path = section.get("path", "yolov11n")
    candidate = base_dir / path
    return load_schema(candidate if candidate.exists() else path)


def build_partition(doc, manifest, n_clients):
    """PartitionSpec from the ``[partition]`` section of a config document."""
    p = doc.get("partition", {})
    mode = p.get("mode", "iid")
    seed = int(p.get("seed", 0))
    valid_k, test_k = int(p.get("valid_per_client", 1)), int(p.get("test_per_client", 1))
    group = None
    if mode == "group":
        group = curation_groups(manifest, p.get("primary_prefix", "m2cai"), n_clients)
    holdout = None
    if valid_k or test_k:
        holdout = make_holdout(manifest, n_clients, valid_k, test_k, seed=seed, group_of=group)
    if mode == "iid":
        spec = partition_iid(manifest, n_clients, seed, holdout)
    elif mode == "group":
        spec = partition_by_group(manifest, group, n_clients, holdout)
    elif mode == "length":
        spec = partition_by_length(manifest, n_clients, holdout)
    else:
        raise ConfigError(f"unknown partition mode {mode!r}; expected iid, group or length", key="partition.mode")
    lmo = p.get("lmo")
    if lmo:
        spec = apply_lmo(spec, {(client_name(int(k)) if str(k).isdigit() else k): v for k, v in lmo.items()})
    return spec


def setup_from_dict(doc: dict, base_dir=".") -> Setup:
    base_dir = Path(base_dir)
    _check_keys(doc)
    config = experiment_config(doc)
    schema = _load_schema(doc, base_dir)

    source = _get(doc, "partition.manifest", "synthetic", str)
    if source == "synthetic":
        manifest = synthetic_manifest(
            int(_get(doc, "partition.synthetic_videos", 18)), seed=int(_get(doc, "partition.synthetic_seed", 0))
        )
    else:
        manifest = read_manifest(base_dir / source)
    spec = build_partition(doc, manifest, config.n_clients)

    t = doc.get("trainer", {})
    kind = t.get("kind", "quadratic")
    factory = partial(
        make_trainer, kind, lr=float(t.get("lr", 0.5)), noise_scale=float(t.get("noise_scale", 0.0)),
        jitter=float(t.get("jitter", 0.1)), conf_threshold=float(t.get("conf_threshold", 0.0)),
        patience=config.early_stopping_patience,
    )
    factory()  # validate hyperparameters up front
    targets = make_targets(schema, config.n_clients, seed=int(t.get("target_seed", 7)),
                           spread=float(t.get("target_spread", 1.0)))
    clients = [
        ClientData(c.client_id, c.index, c.frames, target)
        for c, target in zip(client_data(spec, manifest), targets)
    ]
    return Setup(
        name=str(_get(doc, "experiment.name", "experiment")),
        config=config, schema=schema, manifest=manifest, partition=spec, clients=clients,
        trainer_factory=factory, trainer_kind=kind,
        bind=str(_get(doc, "transport.bind", "127.0.0.1:7400")), base_dir=base_dir,
    )


def load_document(path):
    """Parse a config file; returns ``(doc, base_dir)``.

    A missing path falls back to a bundled config of the same file name.
    """
    path = Path(path)
    if not path.exists():
        bundled = resources.files("partialfed") / "data" / path.name
        if not bundled.is_file():
            raise ConfigError(f"config file not found: {path}")
        text, base = bundled.read_text(encoding="utf-8"), Path(".")
    else:
        text, base = path.read_text(encoding="utf-8"), path.parent
    try:
        return tomllib.loads(text), base
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def override(doc: dict, path: str, value) -> dict:
    """Set ``section.key`` in a copy of ``doc`` (used for command-line overrides)."""
    section, key = path.split(".")
    out = {k: dict(v) for k, v in doc.items()}
    out.setdefault(section, {})[key] = value
    return out


def load_setup(path) -> Setup:
    doc, base = load_document(path)
    return setup_from_dict(doc, base)
