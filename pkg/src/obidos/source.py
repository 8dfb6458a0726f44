"""Data-source connectors with exact transfer accounting.

A source is a hierarchy of entries (see :class:`~obidos.model.GranularitySchema`)
that can be listed, whose per-entry metadata can be fetched, and whose leaf
images can be downloaded. Every public call is charged to the source's
:class:`TransferStats`; nothing moves without being counted.

On-disk layout of a filesystem source::

    <root>/source.toml                      source_id, levels, leaf
    <root>/<C>/meta.json                    collection metadata
    <root>/<C>/<P>/meta.json                patient metadata
    <root>/<C>/<P>/<S>/meta.json            study metadata
    <root>/<C>/<P>/<S>/<R>/meta.json        series metadata
    <root>/<C>/<P>/<S>/<R>/<I>.meta         image metadata
    <root>/<C>/<P>/<S>/<R>/<I>.blob         image payload (opaque bytes)
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import GeneratorRefused, PathNotFound, SourceUnavailable
from .model import (
    DEFAULT_SCHEMA,
    ROOT,
    EntryPath,
    GranularitySchema,
    MetadataRecord,
    UserQuery,
    VirtualReplica,
    canonical_json,
)

DESCRIPTOR_FILE = "source.toml"
META_FILE = "meta.json"
BASE_TIMESTAMP = 1514764800000  # 2018-01-01T00:00:00Z, fixed so generated trees are reproducible


@dataclass(frozen=True)
class SourceDescriptor:
    source_id: str
    schema: GranularitySchema = DEFAULT_SCHEMA
    root_uri: str = ""
    access: str | None = None


@dataclass
class TransferStats:
    metadata_requests: int = 0
    metadata_bytes: int = 0
    blob_requests: int = 0
    blob_bytes: int = 0
    listing_requests: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def charge(self, **amounts: int) -> None:
        with self._lock:
            for name, amount in amounts.items():
                setattr(self, name, getattr(self, name) + amount)

    def snapshot(self) -> TransferStats:
        with self._lock:
            return TransferStats(**self.as_dict())

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self) if not f.name.startswith("_")}

    def __sub__(self, other: TransferStats) -> TransferStats:
        a, b = self.as_dict(), other.as_dict()
        return TransferStats(**{k: a[k] - b[k] for k in a})

    def __add__(self, other: TransferStats) -> TransferStats:
        a, b = self.as_dict(), other.as_dict()
        return TransferStats(**{k: a[k] + b[k] for k in a})

    @property
    def requests(self) -> int:
        return self.metadata_requests + self.blob_requests + self.listing_requests

    @property
    def bytes(self) -> int:
        return self.metadata_bytes + self.blob_bytes

    def is_zero(self) -> bool:
        return not any(self.as_dict().values())


@dataclass(frozen=True)
class RemoteProfile:
    per_request_latency: float = 0.020  # seconds
    per_byte_latency: float = 10e-9  # seconds per byte

    def __post_init__(self):
        if self.per_request_latency < 0 or self.per_byte_latency < 0:
            raise ValueError("latencies must be non-negative")

    def delay(self, nbytes: int) -> float:
        return self.per_request_latency + nbytes * self.per_byte_latency


class Source:
    """Base connector: subclasses implement the ``_read_*``/``_list`` primitives."""

    def __init__(self, descriptor: SourceDescriptor, stats: TransferStats | None = None):
        self.descriptor = descriptor
        self.stats = stats if stats is not None else TransferStats()

    @property
    def source_id(self) -> str:
        return self.descriptor.source_id

    @property
    def schema(self) -> GranularitySchema:
        return self.descriptor.schema

    # primitives
    def _list(self, path: EntryPath) -> list[str]:
        raise NotImplementedError

    def _read_metadata(self, path: EntryPath) -> bytes:
        raise NotImplementedError

    def _read_blob(self, path: EntryPath) -> bytes:
        raise NotImplementedError

    # accounted operations
    def list_children(self, path: EntryPath = ROOT) -> list[str]:
        self.schema.validate(path)
        if path.depth > self.schema.n:
            raise PathNotFound(f"{self.source_id}:{path} is an image and has no children")
        children = self._list(path)
        self.stats.charge(listing_requests=1)
        return children

    def fetch_metadata(self, path: EntryPath) -> MetadataRecord:
        self.schema.validate(path)
        if path.depth == 0:
            raise PathNotFound(f"{self.source_id}: the root has no metadata")
        raw = self._read_metadata(path)
        self.stats.charge(metadata_requests=1, metadata_bytes=len(raw))
        return parse_metadata(path, raw)

    def fetch_blob(self, path: EntryPath) -> tuple[bytes, str]:
        self.schema.validate(path)
        if path.depth != self.schema.n + 1:
            raise PathNotFound(f"{self.source_id}:{path} is not an image")
        data = self._read_blob(path)
        self.stats.charge(blob_requests=1, blob_bytes=len(data))
        return data, hashlib.sha256(data).hexdigest()

    def walk(self, path: EntryPath = ROOT) -> Iterator[EntryPath]:
        """Breadth-first enumeration of ``path``'s subtree (``path`` itself excluded)."""
        frontier = [path]
        while frontier:
            nxt = []
            for node in frontier:
                level = self.schema.level_at(node.depth + 1)
                for child_id in self.list_children(node):
                    child = node.child(level, child_id)
                    yield child
                    if child.depth <= self.schema.n:
                        nxt.append(child)
            frontier = nxt

    def source_query(self, scope: VirtualReplica, q: UserQuery) -> list[EntryPath]:
        return [record.path for record in self.query_records(scope, q)]

    def query_records(self, scope: VirtualReplica, q: UserQuery) -> list[MetadataRecord]:
        """Run ``q`` at the source, charging one listing per internal node and one fetch per candidate."""
        if scope.source_id != self.source_id:
            raise ValueError(f"scope {scope} does not belong to source {self.source_id}")
        target = self.schema.depth_of(q.target_level)
        if scope.path.depth > target:
            return []
        frontier = [scope.path]
        for depth in range(scope.path.depth + 1, target + 1):
            level = self.schema.level_at(depth)
            frontier = [node.child(level, cid) for node in frontier for cid in self.list_children(node)]
        hits = []
        for candidate in frontier:
            record = self.fetch_metadata(candidate)
            if q.matches(record.attributes):
                hits.append(record)
        return hits


def parse_metadata(path: EntryPath, raw: bytes) -> MetadataRecord:
    doc = json.loads(raw)
    return MetadataRecord(
        path=path,
        attributes=doc["attributes"],
        last_modified=int(doc["last_modified"]),
        size_bytes=len(raw),
        blob_ref=doc.get("blob_sha256"),
    )


class FilesystemSource(Source):
    def __init__(self, root: str | Path, stats: TransferStats | None = None):
        self.root = Path(root)
        try:
            desc = tomllib.loads((self.root / DESCRIPTOR_FILE).read_text())
        except FileNotFoundError:
            raise SourceUnavailable(f"no {DESCRIPTOR_FILE} under {self.root}") from None
        schema = GranularitySchema(tuple(desc["levels"]), desc.get("leaf", "image"))
        super().__init__(SourceDescriptor(desc["source_id"], schema, self.root.resolve().as_uri()), stats)
        self.available = True

    def _check(self) -> None:
        if not self.available or not self.root.is_dir():
            raise SourceUnavailable(f"source {self.source_id} at {self.root} is unreachable")

    def _dir(self, path: EntryPath) -> Path:
        return self.root.joinpath(*path.ids)

    def _list(self, path: EntryPath) -> list[str]:
        self._check()
        d = self._dir(path)
        if not d.is_dir():
            raise PathNotFound(f"{self.source_id}:{path}")
        if path.depth == self.schema.n:
            return sorted(p.stem for p in d.glob("*.blob"))
        return sorted(p.name for p in d.iterdir() if p.is_dir())

    def _meta_file(self, path: EntryPath) -> Path:
        if path.depth == self.schema.n + 1:
            return self._dir(path.parent) / f"{path.entry_id}.meta"
        return self._dir(path) / META_FILE

    def _read_metadata(self, path: EntryPath) -> bytes:
        self._check()
        try:
            return self._meta_file(path).read_bytes()
        except (FileNotFoundError, NotADirectoryError):
            raise PathNotFound(f"{self.source_id}:{path}") from None

    def _read_blob(self, path: EntryPath) -> bytes:
        self._check()
        try:
            return (self._dir(path.parent) / f"{path.entry_id}.blob").read_bytes()
        except (FileNotFoundError, NotADirectoryError):
            raise PathNotFound(f"{self.source_id}:{path}") from None

    def sidecar(self, path: EntryPath) -> Path:
        return self._meta_file(path)


class RemoteSource(Source):
    """Wraps a connector and adds network-like latency; results and accounting are untouched.

    With ``sleep=False`` the delay is only accumulated in ``simulated_delay`` so
    long benchmark sweeps can report remote timings without waiting for them.
    """

    def __init__(self, inner: Source, profile: RemoteProfile = RemoteProfile(), sleep: bool = True):
        super().__init__(inner.descriptor, inner.stats)
        self.inner = inner
        self.profile = profile
        self.sleep = sleep
        self.simulated_delay = 0.0
        self._lock = threading.Lock()

    def _wait(self, nbytes: int) -> None:
        delay = self.profile.delay(nbytes)
        with self._lock:
            self.simulated_delay += delay
        if self.sleep and delay > 0:
            time.sleep(delay)

    def _list(self, path):
        out = self.inner._list(path)
        self._wait(0)
        return out

    def _read_metadata(self, path):
        raw = self.inner._read_metadata(path)
        self._wait(len(raw))
        return raw

    def _read_blob(self, path):
        data = self.inner._read_blob(path)
        self._wait(len(data))
        return data


class FaultySource(Source):
    """Connector wrapper that becomes unreachable after ``fail_after`` primitive calls."""

    def __init__(self, inner: Source, fail_after: int | None = None,
                 fail_when: Callable[[str, EntryPath], bool] | None = None):
        super().__init__(inner.descriptor, inner.stats)
        self.inner = inner
        self.fail_after = fail_after
        self.fail_when = fail_when
        self.calls = 0

    def _gate(self, kind: str, path: EntryPath) -> None:
        self.calls += 1
        if self.fail_after is not None and self.calls > self.fail_after:
            raise SourceUnavailable(f"source {self.source_id} went away after {self.fail_after} calls")
        if self.fail_when is not None and self.fail_when(kind, path):
            raise SourceUnavailable(f"source {self.source_id} failed on {kind} {path}")

    def _list(self, path):
        self._gate("list", path)
        return self.inner._list(path)

    def _read_metadata(self, path):
        self._gate("metadata", path)
        return self.inner._read_metadata(path)

    def _read_blob(self, path):
        self._gate("blob", path)
        return self.inner._read_blob(path)


# synthetic corpus generation

ID_PREFIXES = {"collection": "C", "patient": "P", "study": "S", "series": "R", "image": "I"}
SITES = ("Lisbon", "Atlanta", "Louvain")
BODY_PARTS = ("CHEST", "HEAD", "ABDOMEN", "PELVIS")


@dataclass(frozen=True)
class MetadataProfile:
    """Shapes generated metadata; ``padding_bytes`` inflates every record (metadata-heavy sources)."""

    padding_bytes: int = 0


def stable_hash(seed: int, path: EntryPath) -> int:
    digest = hashlib.sha256(f"{seed}:{path}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _attributes(level: str, path: EntryPath, index: int, seed: int, parent: dict,
                n_children: int, profile: MetadataProfile) -> dict:
    code = stable_hash(seed, path) % 1000
    attrs: dict = {"id": path.entry_id, "level": level, "index": index, "code": code}
    if level == "collection":
        attrs.update(name=f"Collection {path.entry_id}", site=SITES[index % len(SITES)], patients=n_children)
    elif level == "patient":
        attrs.update(sex="F" if index % 2 == 0 else "M", age=20 + code % 60, studies=n_children)
    elif level == "study":
        attrs.update(study_date=BASE_TIMESTAMP - index * 86_400_000, description=f"Study {path}", series=n_children)
    elif level == "series":
        attrs.update(modality="CT" if index % 2 == 0 else "MR", body_part=BODY_PARTS[code % len(BODY_PARTS)],
                     images=n_children)
    else:
        attrs.update(modality=parent.get("modality", "OT"), instance_number=int(path.entry_id.lstrip("I") or 0))
    if profile.padding_bytes:
        attrs["notes"] = "x" * profile.padding_bytes
    return attrs


def _write_meta(target: Path, attributes: dict, blob_sha256: str | None = None,
                last_modified: int = BASE_TIMESTAMP) -> None:
    doc: dict = {"attributes": attributes, "last_modified": last_modified}
    if blob_sha256 is not None:
        doc["blob_sha256"] = blob_sha256
    target.write_bytes(canonical_json(doc) + b"\n")


def write_descriptor(root: Path, source_id: str, schema: GranularitySchema) -> None:
    levels = ", ".join(json.dumps(level) for level in schema.levels)
    text = f"source_id = {json.dumps(source_id)}\nlevels = [{levels}]\nleaf = {json.dumps(schema.leaf)}\n"
    (root / DESCRIPTOR_FILE).write_text(text)


def generate_synthetic_source(
    root: str | Path,
    counts: Sequence[int] = (2, 2, 2, 2, 2),
    *,
    seed: int = 0,
    image_size_bytes: int = 512 * 1024,
    source_id: str = "synthetic",
    schema: GranularitySchema = DEFAULT_SCHEMA,
    metadata_profile: MetadataProfile = MetadataProfile(),
) -> FilesystemSource:
    """Write a deterministic hierarchical corpus.

    ``counts`` gives the fan-out per level, the last entry being images per
    leaf container: ``(2, 2, 2, 2, 2)`` yields 2 collections, 4 patients,
    8 studies, 16 series and 32 images. Attribute rules:

    * ``index`` is the entry's 0-based position among all entries of its level
      in generation order; series with an even index get modality ``CT``,
      odd ones ``MR``.
    * ``code`` is a stable hash of the seed and path, modulo 1000.
    * image bytes come from a PRNG seeded with the seed and image path.
    """
    root = Path(root)
    counts = tuple(int(c) for c in counts)
    if len(counts) != schema.n + 1:
        raise ValueError(f"need {schema.n + 1} counts (one per level plus images), got {len(counts)}")
    if any(c < 1 for c in counts):
        raise ValueError("every level needs at least one entry")
    if image_size_bytes < 1:
        raise ValueError("images must be at least one byte")
    if root.exists() and any(root.iterdir()):
        raise GeneratorRefused(f"{root} is not empty")
    root.mkdir(parents=True, exist_ok=True)
    write_descriptor(root, source_id, schema)

    levels = schema.all_levels
    counters = [0] * len(levels)

    def build(path: EntryPath, depth: int, parent_attrs: dict) -> None:
        level = levels[depth - 1]
        prefix = ID_PREFIXES.get(level, level[:1].upper())
        for k in range(1, counts[depth - 1] + 1):
            child = path.child(level, f"{prefix}{k}")
            index = counters[depth - 1]
            counters[depth - 1] += 1
            n_children = counts[depth] if depth < len(counts) else 0
            attrs = _attributes(level, child, index, seed, parent_attrs, n_children, metadata_profile)
            target = root.joinpath(*child.ids[:-1])
            if depth == schema.n + 1:
                rng = random.Random(f"{seed}/{child}")
                data = rng.randbytes(image_size_bytes)
                attrs["size"] = image_size_bytes
                (target / f"{child.entry_id}.blob").write_bytes(data)
                _write_meta(target / f"{child.entry_id}.meta", attrs, hashlib.sha256(data).hexdigest())
            else:
                d = target / child.entry_id
                d.mkdir()
                _write_meta(d / META_FILE, attrs)
                build(child, depth + 1, attrs)

    build(ROOT, 1, {})
    return FilesystemSource(root)


def touch_metadata(source: FilesystemSource, path: EntryPath, last_modified: int | None = None,
                   **updates) -> MetadataRecord:
    """Rewrite one sidecar at the source with new attributes and a newer timestamp (no accounting)."""
    target = source.sidecar(path)
    try:
        doc = json.loads(target.read_bytes())
    except FileNotFoundError:
        raise PathNotFound(f"{source.source_id}:{path}") from None
    doc["attributes"].update(updates)
    doc["last_modified"] = doc["last_modified"] + 1 if last_modified is None else last_modified
    _write_meta(target, doc["attributes"], doc.get("blob_sha256"), doc["last_modified"])
    return parse_metadata(path, target.read_bytes())


def open_source(root: str | Path, remote: RemoteProfile | None = None, sleep: bool = True) -> Source:
    src: Source = FilesystemSource(root)
    if remote is not None:
        src = RemoteSource(src, remote, sleep=sleep)
    return src

