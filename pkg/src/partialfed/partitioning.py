"""Client data splits built from a frame manifest.

The partition unit is always the video: a video's frames never land in two
clients or in two splits, which is what prevents temporal leakage between
adjacent frames.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import PartitionError
from .evaluation import BBox

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")

SURGICAL_TOOLS = ("grasper", "bipolar", "hook", "scissors", "clipper", "irrigator", "specimen_bag")


@dataclass(frozen=True)
class FrameRecord:
    video_id: str
    frame_id: int
    source_tag: str
    annotations: tuple = ()  # ((class_id, BBox), ...)

    @property
    def key(self):
        return (self.video_id, self.frame_id)

    def keep_classes(self, allowed) -> "FrameRecord":
        if allowed is None:
            return self
        return replace(self, annotations=tuple(a for a in self.annotations if a[0] in allowed))


@dataclass(frozen=True)
class DatasetManifest:
    frames: tuple
    class_names: tuple

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        seen = set()
        for fr in self.frames:
            if fr.key in seen:
                raise PartitionError(f"duplicate frame {fr.key}")
            seen.add(fr.key)
            for class_id, box in fr.annotations:
                if not 0 <= class_id < len(self.class_names):
                    raise PartitionError(f"frame {fr.key}: class id {class_id} out of range")
                if not box.is_normalized():
                    raise PartitionError(f"frame {fr.key}: box {box} not normalized to [0, 1]")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def videos(self) -> list:
        """Video ids in order of first appearance."""
        return list(dict.fromkeys(fr.video_id for fr in self.frames))

    def frame_counts(self) -> Counter:
        return Counter(fr.video_id for fr in self.frames)

    def source_tags(self) -> dict:
        return {fr.video_id: fr.source_tag for fr in self.frames}

    def frames_of(self, videos) -> list:
        videos = set(videos)
        return [fr for fr in self.frames if fr.video_id in videos]


# Manifest file format ----------------------------------------------------------

def _format_frame(fr: FrameRecord) -> str:
    anns = ";".join(
        f"{c},{b.x1!r},{b.y1!r},{b.x2!r},{b.y2!r}" for c, b in fr.annotations
    )
    return f"{fr.video_id}\t{fr.frame_id}\t{fr.source_tag}\t{anns}"


def write_manifest(path, frames: Sequence[FrameRecord], class_names=None):
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        if class_names:
            fh.write("#classes\t" + "\t".join(class_names) + "\n")
        for fr in frames:
            fh.write(_format_frame(fr) + "\n")
    return path


def read_manifest(path, class_names=None) -> DatasetManifest:
    """Parse a manifest file.

    An optional ``#classes<TAB>name<TAB>...`` first line names the classes;
    otherwise ``class_names`` is used, or ``class0..classK`` for the largest id seen.
    """
    path = Path(path)
    frames, header = [], None
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise PartitionError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("#classes\t"):
                header = line.split("\t")[1:]
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise PartitionError(f"{path}:{lineno}: expected 4 tab-separated fields")
        vid, fid, tag = parts[:3]
        anns = []
        if len(parts) == 4 and parts[3]:
            for item in parts[3].split(";"):
                try:
                    c, *xyxy = item.split(",")
                    anns.append((int(c), BBox(*map(float, xyxy))))
                except (ValueError, TypeError) as exc:
                    raise PartitionError(f"{path}:{lineno}: bad annotation {item!r}") from exc
        frames.append(FrameRecord(vid, int(fid), tag, tuple(anns)))
    names = class_names or header
    if names is None:
        top = max((c for fr in frames for c, _ in fr.annotations), default=-1)
        names = [f"class{i}" for i in range(top + 1)]
    return DatasetManifest(tuple(frames), tuple(names))


def synthetic_manifest(n_videos=18, seed=0, n_primary=6, class_names=SURGICAL_TOOLS,
                       min_frames=4, max_frames=40) -> DatasetManifest:
    """Random manifest shaped like the two-source laparoscopic tool datasets.

    The first ``n_primary`` videos (``v01``...) carry the ``m2cai16`` source tag,
    the rest (``VID01``...) the ``cholectrack20`` tag.
    """
    rng = np.random.default_rng(seed)
    frames = []
    for k in range(n_videos):
        if k < n_primary:
            vid, tag = f"v{k + 1:02d}", "m2cai16-tool-locations"
        else:
            vid, tag = f"VID{k - n_primary + 1:02d}", "cholectrack20"
        for fid in range(int(rng.integers(min_frames, max_frames + 1))):
            anns = []
            for _ in range(int(rng.integers(1, 4))):
                w, h = rng.uniform(0.05, 0.3, size=2)
                x1, y1 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
                anns.append((int(rng.integers(len(class_names))),
                             BBox(float(x1), float(y1), float(x1 + w), float(y1 + h))))
            frames.append(FrameRecord(vid, fid, tag, tuple(anns)))
    return DatasetManifest(tuple(frames), tuple(class_names))


# Partition spec -------------------------------------------------------------------

def client_name(index: int) -> str:
    return f"client{index}"


@dataclass(frozen=True)
class ClientSplit:
    client_id: str
    train: tuple
    valid: tuple = ()
    test: tuple = ()
    allowed_classes: frozenset = None

    def videos(self, split):
        return getattr(self, split)


@dataclass(frozen=True)
class PartitionSpec:
    clients: tuple
    seed: int = 0
    n_classes: int = 0
    mode: str = ""

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise PartitionError("duplicate client ids")
        owner = {}
        for c in self.clients:
            for v in c.train:
                if v in owner:
                    raise PartitionError(f"training video {v!r} assigned to {owner[v]} and {c.client_id}")
                owner[v] = c.client_id
            seen = {}
            for split in SPLITS:
                for v in c.videos(split):
                    if v in seen and seen[v] != split:
                        raise PartitionError(f"{c.client_id}: video {v!r} in both {seen[v]} and {split}")
                    seen[v] = split
            if c.allowed_classes is not None:
                if not c.allowed_classes:
                    raise PartitionError(f"{c.client_id}: allowed class set is empty")
                if self.n_classes and not all(0 <= k < self.n_classes for k in c.allowed_classes):
                    raise PartitionError(f"{c.client_id}: allowed classes out of range")

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def client(self, key) -> ClientSplit:
        if isinstance(key, int):
            return self.clients[key]
        for c in self.clients:
            if c.client_id == key:
                return c
        raise PartitionError(f"unknown client {key!r}")

    def to_json(self) -> str:
        doc = {
            "mode": self.mode,
            "seed": self.seed,
            "n_classes": self.n_classes,
            "clients": [
                {
                    "client_id": c.client_id,
                    "train": list(c.train),
                    "valid": list(c.valid),
                    "test": list(c.test),
                    "allowed_classes": None if c.allowed_classes is None else sorted(c.allowed_classes),
                }
                for c in self.clients
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text) -> "PartitionSpec":
        doc = json.loads(text)
        clients = [
            ClientSplit(
                c["client_id"], tuple(c["train"]), tuple(c.get("valid", ())), tuple(c.get("test", ())),
                None if c.get("allowed_classes") is None else frozenset(c["allowed_classes"]),
            )
            for c in doc["clients"]
        ]
        return cls(tuple(clients), doc.get("seed", 0), doc.get("n_classes", 0), doc.get("mode", ""))


# Evaluation holdout ---------------------------------------------------------------

@dataclass(frozen=True)
class Holdout:
    """Fixed per-client validation and test videos, shared by every setting."""

    valid: tuple
    test: tuple

    @property
    def videos(self) -> set:
        return {v for group in self.valid + self.test for v in group}


def make_holdout(manifest: DatasetManifest, n_clients, valid_per_client=1, test_per_client=1,
                 seed=0, group_of: Mapping = None) -> Holdout:
    """Pick validation/test videos for each client.

    Without ``group_of`` the videos are drawn from a seeded shuffle of the
    whole manifest. With it, each client's held-out videos come from its own
    group so curation-based clients are evaluated on their own source.
    """
    rng = np.random.default_rng(seed)
    videos = manifest.videos()
    need = valid_per_client + test_per_client
    valid, test = [], []
    if group_of is None:
        order = [videos[i] for i in rng.permutation(len(videos))]
        if len(order) < need * n_clients:
            raise PartitionError(f"{len(order)} videos cannot supply {need} held-out videos to {n_clients} clients")
        for k in range(n_clients):
            chunk = order[k * need:(k + 1) * need]
            valid.append(tuple(chunk[:valid_per_client]))
            test.append(tuple(chunk[valid_per_client:]))
    else:
        for k in range(n_clients):
            own = [v for v in videos if _group_index(group_of.get(v)) == k]
            own = [own[i] for i in rng.permutation(len(own))]
            if len(own) < need:
                raise PartitionError(f"group {k} has {len(own)} videos, needs {need} held out")
            valid.append(tuple(own[:valid_per_client]))
            test.append(tuple(own[valid_per_client:need]))
    return Holdout(tuple(valid), tuple(test))


def _group_index(value):
    if value is None or isinstance(value, (int, np.integer)):
        return value
    if isinstance(value, str) and value.startswith("client") and value[6:].isdigit():
        return int(value[6:])
    raise PartitionError(f"cannot interpret client reference {value!r}")


def _training_pool(manifest, holdout):
    held = holdout.videos if holdout is not None else set()
    return [v for v in manifest.videos() if v not in held]


def _build(manifest, assignment, n_clients, holdout, seed, mode) -> PartitionSpec:
    if holdout is not None and (len(holdout.valid) != n_clients or len(holdout.test) != n_clients):
        raise PartitionError(f"holdout covers {len(holdout.valid)} clients, partition has {n_clients}")
    clients = []
    for k in range(n_clients):
        clients.append(ClientSplit(
            client_name(k),
            tuple(assignment[k]),
            holdout.valid[k] if holdout else (),
            holdout.test[k] if holdout else (),
        ))
    return PartitionSpec(tuple(clients), seed=seed, n_classes=manifest.n_classes, mode=mode)


def partition_iid(manifest: DatasetManifest, n_clients: int, seed: int = 0, holdout: Holdout = None) -> PartitionSpec:
    """Shuffle the training videos with a seeded RNG and deal them round-robin."""
    pool = _training_pool(manifest, holdout)
    if n_clients <= 0 or n_clients > len(pool):
        raise PartitionError(f"cannot deal {len(pool)} videos to {n_clients} clients")
    order = [pool[i] for i in np.random.default_rng(seed).permutation(len(pool))]
    return _build(manifest, [order[k::n_clients] for k in range(n_clients)], n_clients, holdout, seed, "iid")


def partition_by_group(manifest: DatasetManifest, group_of: Mapping, n_clients: int = None,
                       holdout: Holdout = None) -> PartitionSpec:
    """Assign each training video to the client ``group_of`` names for it."""
    pool = _training_pool(manifest, holdout)
    missing = [v for v in pool if v not in group_of]
    if missing:
        raise PartitionError(f"videos without a client assignment: {missing}")
    index = {v: _group_index(group_of[v]) for v in pool}
    if n_clients is None:
        n_clients = max(index.values(), default=-1) + 1
    if n_clients <= 0 or any(not 0 <= k < n_clients for k in index.values()):
        raise PartitionError(f"group assignment references clients outside 0..{n_clients - 1}")
    assignment = [[v for v in pool if index[v] == k] for k in range(n_clients)]
    for k, vids in enumerate(assignment):
        if not vids:
            log.warning("client %d receives no training videos", k)
    return _build(manifest, assignment, n_clients, holdout, 0, "group")


def curation_groups(manifest: DatasetManifest, primary_prefix="m2cai", n_clients=3) -> dict:
    """Videos whose source tag starts with ``primary_prefix`` go to client 0; the rest,
    sorted by id, are dealt round-robin to clients ``1..n_clients-1``."""
    if n_clients < 2:
        raise PartitionError("curation grouping needs at least 2 clients")
    tags = manifest.source_tags()
    primary = [v for v in manifest.videos() if tags[v].startswith(primary_prefix)]
    rest = sorted(v for v in manifest.videos() if not tags[v].startswith(primary_prefix))
    group = {v: 0 for v in primary}
    for i, v in enumerate(rest):
        group[v] = 1 + i % (n_clients - 1)
    return group


def partition_by_length(manifest: DatasetManifest, n_clients: int, holdout: Holdout = None) -> PartitionSpec:
    """Sort training videos longest first (ties by id) and cut into contiguous tiers."""
    pool = _training_pool(manifest, holdout)
    if n_clients < 2:
        raise PartitionError("length partition needs at least 2 clients")
    if n_clients > len(pool):
        raise PartitionError(f"cannot split {len(pool)} videos into {n_clients} tiers")
    counts = manifest.frame_counts()
    ordered = sorted(pool, key=lambda v: (-counts[v], v))
    tiers = [list(t) for t in np.array_split(np.array(ordered, dtype=object), n_clients)]
    return _build(manifest, tiers, n_clients, holdout, 0, "length")


def apply_lmo(spec: PartitionSpec, allowed: Mapping) -> PartitionSpec:
    """Restrict training annotations of some clients to the given class sets.

    Clients not named keep their current restriction. Sets equal to the full
    class range are stored as "unrestricted". Restrictions only ever narrow.
    """
    by_id = {c.client_id: c for c in spec.clients}
    updated = dict(by_id)
    for key, classes in allowed.items():
        cid = client_name(key) if isinstance(key, (int, np.integer)) else key
        if cid not in by_id:
            raise PartitionError(f"unknown client {key!r}")
        classes = frozenset(int(k) for k in classes)
        if not classes:
            raise PartitionError(f"{cid}: allowed class set is empty")
        current = by_id[cid].allowed_classes
        if current is not None:
            classes = classes & current
            if not classes:
                raise PartitionError(f"{cid}: restriction leaves no classes")
        if spec.n_classes and classes >= frozenset(range(spec.n_classes)):
            classes = None
        updated[cid] = replace(by_id[cid], allowed_classes=classes)
    if updated == by_id:
        return spec
    return replace(spec, clients=tuple(updated[c.client_id] for c in spec.clients),
                   mode=spec.mode if spec.mode.endswith("+lmo") else spec.mode + "+lmo")


# Client data handles ------------------------------------------------------------

@dataclass
class ClientData:
    """Everything a trainer may read about one client."""

    client_id: str
    index: int
    frames: dict = field(default_factory=dict)  # split -> tuple of FrameRecord
    target: object = None  # ParameterSet optimum for the quadratic task

    @property
    def n_train(self) -> int:
        return len(self.frames.get("train", ()))

    def split(self, name) -> tuple:
        return self.frames.get(name, ())


def split_frames(spec: PartitionSpec, manifest: DatasetManifest, client, split) -> list:
    """Frames of one client split; LMO filtering applies to training frames only."""
    c = spec.client(client)
    frames = manifest.frames_of(c.videos(split))
    if split == "train":
        frames = [fr.keep_classes(c.allowed_classes) for fr in frames]
    return frames


def client_data(spec: PartitionSpec, manifest: DatasetManifest) -> list:
    return [
        ClientData(c.client_id, k, {s: tuple(split_frames(spec, manifest, k, s)) for s in SPLITS})
        for k, c in enumerate(spec.clients)
    ]


def materialize(spec: PartitionSpec, manifest: DatasetManifest, out_dir) -> list:
    """Write ``<client>_<split>.tsv`` for every client and split, plus ``partition.json``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for k, c in enumerate(spec.clients):
            for split in SPLITS:
                path = out_dir / f"{c.client_id}_{split}.tsv"
                write_manifest(path, split_frames(spec, manifest, k, split), manifest.class_names)
                written.append(path)
        (out_dir / "partition.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    except OSError as exc:
        raise PartitionError(f"cannot write partition files under {out_dir}: {exc}") from exc
    return written


def class_histogram(frames) -> Counter:
    return Counter(c for fr in frames for c, _ in fr.annotations)
