"""Core value types: hierarchical addressing, replicasets, metadata records and queries.

Everything here is an immutable value. Paths are addressed as ordered
``(level, id)`` segments following a :class:`GranularitySchema`; images sit one
level below the last schema level and are addressed with the schema's leaf
level name.

Canonical replicaset encoding is compact, key-sorted JSON (ASCII only), so a
logical value has exactly one byte form. See ``docs/formats.md`` for the grammar.
"""

from __future__ import annotations

import hashlib
import json
import operator
import time
import uuid
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence, Union

from .errors import (
    DeserializeError,
    InvalidPath,
    InvalidQuery,
    InvalidRecord,
    InvalidReplicaSet,
    SourceNotInReplicaSet,
)

Scalar = Union[str, int, float]

PATH_SEPARATORS = ("/", "\\")
FORMAT_VERSION = 1


def now_ms() -> int:
    return int(time.time() * 1000)


def canonical_json(value: Any) -> bytes:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


@dataclass(frozen=True)
class GranularitySchema:
    levels: tuple[str, ...] = ("collection", "patient", "study", "series")
    leaf: str = "image"

    def __post_init__(self):
        levels = tuple(self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ValueError("schema needs at least one level")
        names = levels + (self.leaf,)
        if any(not name for name in names):
            raise ValueError("level names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError(f"level names must be unique: {names}")

    @property
    def n(self) -> int:
        return len(self.levels)

    @property
    def all_levels(self) -> tuple[str, ...]:
        return self.levels + (self.leaf,)

    def depth_of(self, level: str) -> int:
        """1-based depth of ``level``; the leaf level sits at ``n + 1``."""
        try:
            return self.all_levels.index(level) + 1
        except ValueError:
            raise InvalidQuery(f"unknown level {level!r}; schema has {self.all_levels}") from None

    def level_at(self, depth: int) -> str:
        return self.all_levels[depth - 1]

    def path(self, ids: Sequence[str] | str) -> EntryPath:
        if isinstance(ids, str):
            ids = [part for part in ids.split("/") if part]
        if len(ids) > self.n + 1:
            raise InvalidPath(f"path {'/'.join(ids)!r} is deeper than the schema")
        return EntryPath(tuple(zip(self.all_levels, ids)))

    def validate(self, path: EntryPath) -> None:
        if path.depth > self.n + 1:
            raise InvalidPath(f"path {path} is deeper than the schema")
        for (level, _), expected in zip(path.segments, self.all_levels):
            if level != expected:
                raise InvalidPath(f"path {path} has level {level!r} where {expected!r} was expected")

    def to_dict(self) -> dict:
        return {"levels": list(self.levels), "leaf": self.leaf}


DEFAULT_SCHEMA = GranularitySchema()


@dataclass(frozen=True)
class EntryPath:
    segments: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        segments = tuple((str(level), str(entry_id)) for level, entry_id in self.segments)
        for level, entry_id in segments:
            if not level or not entry_id:
                raise InvalidPath("path segments need a level and a non-empty id")
            if any(sep in entry_id for sep in PATH_SEPARATORS):
                raise InvalidPath(f"entry id {entry_id!r} contains a path separator")
        object.__setattr__(self, "segments", segments)

    @property
    def depth(self) -> int:
        return len(self.segments)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(entry_id for _, entry_id in self.segments)

    @property
    def level(self) -> str | None:
        return self.segments[-1][0] if self.segments else None

    @property
    def entry_id(self) -> str | None:
        return self.segments[-1][1] if self.segments else None

    @property
    def parent(self) -> EntryPath:
        if not self.segments:
            raise InvalidPath("the root path has no parent")
        return EntryPath(self.segments[:-1])

    def ancestors(self) -> list[EntryPath]:
        """Non-root strict ancestors, shallowest first."""
        return [EntryPath(self.segments[:d]) for d in range(1, self.depth)]

    def child(self, level: str, entry_id: str) -> EntryPath:
        return EntryPath(self.segments + ((level, entry_id),))

    def is_prefix_of(self, other: EntryPath) -> bool:
        """True when ``self`` equals ``other`` or is one of its ancestors."""
        return other.segments[: self.depth] == self.segments

    def sort_key(self) -> tuple[str, ...]:
        return self.ids

    def to_json(self) -> list[list[str]]:
        return [[level, entry_id] for level, entry_id in self.segments]

    @classmethod
    def from_json(cls, data: Iterable[Sequence[str]]) -> EntryPath:
        return cls(tuple((level, entry_id) for level, entry_id in data))

    def __str__(self) -> str:
        return "/".join(self.ids)


ROOT = EntryPath()


@dataclass(frozen=True)
class VirtualReplica:
    source_id: str
    path: EntryPath = ROOT

    def sort_key(self) -> tuple:
        return (self.source_id, self.path.sort_key())

    def covers(self, source_id: str, path: EntryPath) -> bool:
        return self.source_id == source_id and self.path.is_prefix_of(path)

    def to_json(self) -> dict:
        return {"source": self.source_id, "path": self.path.to_json()}

    @classmethod
    def from_json(cls, data: Mapping) -> VirtualReplica:
        return cls(str(data["source"]), EntryPath.from_json(data["path"]))

    def __str__(self) -> str:
        return f"{self.source_id}:{self.path}"


def normalize_replicas(replicas: Iterable[VirtualReplica]) -> tuple[VirtualReplica, ...]:
    """Drop duplicates and replicas nested under a broader one, then sort canonically."""
    ordered = sorted(set(replicas), key=lambda vr: (vr.source_id, vr.path.depth, vr.path.sort_key()))
    kept: list[VirtualReplica] = []
    by_source: dict[str, set[tuple[str, ...]]] = {}
    for vr in ordered:
        seen = by_source.setdefault(vr.source_id, set())
        ids = vr.path.ids
        # shallower replicas come first, so any absorbing prefix is already in `seen`
        if any(ids[:d] in seen for d in range(len(ids) + 1)):
            continue
        seen.add(ids)
        kept.append(vr)
    return tuple(sorted(kept, key=VirtualReplica.sort_key))


@dataclass(frozen=True)
class ReplicaSet:
    replicaset_id: str
    owner_user_id: str
    replicas: tuple[VirtualReplica, ...]
    created_at: int
    last_loaded_at: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "replicas", tuple(self.replicas))
        if len(self.replicaset_id) != 32 or any(c not in "0123456789abcdef" for c in self.replicaset_id):
            raise InvalidReplicaSet(f"replicaset id must be 32 lowercase hex digits, got {self.replicaset_id!r}")

    @classmethod
    def create(cls, owner_user_id: str, replicas: Iterable[VirtualReplica], created_at: int | None = None) -> ReplicaSet:
        rs = cls(
            replicaset_id=uuid.uuid4().hex,
            owner_user_id=owner_user_id,
            replicas=tuple(replicas),
            created_at=now_ms() if created_at is None else created_at,
        )
        return normalize_replicaset(rs)

    @property
    def source_ids(self) -> list[str]:
        return sorted({vr.source_id for vr in self.replicas})

    def with_replicas(self, replicas: Iterable[VirtualReplica]) -> ReplicaSet:
        return normalize_replicaset(replace(self, replicas=tuple(replicas)))

    def covers(self, path: EntryPath, source_id: str) -> bool:
        return covers(self, path, source_id)

    def to_json(self) -> dict:
        return {
            "v": FORMAT_VERSION,
            "replicaset_id": self.replicaset_id,
            "owner": self.owner_user_id,
            "created_at": self.created_at,
            "last_loaded_at": self.last_loaded_at,
            "replicas": [vr.to_json() for vr in self.replicas],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> ReplicaSet:
        return cls(
            replicaset_id=str(data["replicaset_id"]),
            owner_user_id=str(data["owner"]),
            replicas=tuple(VirtualReplica.from_json(item) for item in data["replicas"]),
            created_at=int(data["created_at"]),
            last_loaded_at=None if data.get("last_loaded_at") is None else int(data["last_loaded_at"]),
        )


def normalize_replicaset(rs: ReplicaSet) -> ReplicaSet:
    replicas = normalize_replicas(rs.replicas)
    if not replicas:
        raise InvalidReplicaSet("a replicaset needs at least one virtual replica")
    return replace(rs, replicas=replicas)


def covers(rs: ReplicaSet, path: EntryPath, source_id: str) -> bool:
    return any(vr.covers(source_id, path) for vr in rs.replicas)


def presence_array(rs: ReplicaSet, source_id: str, schema: GranularitySchema) -> list[bool]:
    """Per-level flags telling which granularity levels the replicaset reaches for a source.

    Level ``i`` is flagged when a replica sits at or below it, or when a shallower
    replica pulls in that whole level through its subtree.
    """
    depths = [vr.path.depth for vr in rs.replicas if vr.source_id == source_id]
    if not depths:
        raise SourceNotInReplicaSet(f"source {source_id!r} is not part of replicaset {rs.replicaset_id}")
    return [any(d >= i + 1 or d <= i for d in depths) for i in range(schema.n)]


def serialize_replicaset(rs: ReplicaSet) -> bytes:
    if not rs.replicas:
        raise InvalidReplicaSet("refusing to serialize an empty replicaset")
    return canonical_json(rs.to_json())


def deserialize_replicaset(data: bytes) -> ReplicaSet:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise DeserializeError("non-ASCII byte in replicaset encoding", exc.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DeserializeError(exc.msg, exc.pos) from None
    if not isinstance(obj, dict) or obj.get("v") != FORMAT_VERSION:
        raise DeserializeError("not a version-1 replicaset object", 0)
    try:
        rs = ReplicaSet.from_json(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise DeserializeError(f"malformed replicaset: {exc}", 0) from None
    if not rs.replicas:
        raise DeserializeError("replicaset has no replicas", text.find('"replicas"'))
    return rs


@dataclass(frozen=True)
class MetadataRecord:
    path: EntryPath
    attributes: Mapping[str, Scalar]
    last_modified: int
    size_bytes: int
    blob_ref: str | None = None

    def validate(self) -> None:
        if self.path.depth == 0:
            raise InvalidRecord("the source root carries no metadata record")
        if self.attributes.get("id") != self.path.entry_id:
            raise InvalidRecord(f"record {self.path} must carry id={self.path.entry_id!r}")
        if self.size_bytes <= 0:
            raise InvalidRecord(f"record {self.path} has non-positive size")
        for key, value in self.attributes.items():
            if isinstance(value, bool) or not isinstance(value, (str, int, float)):
                raise InvalidRecord(f"attribute {key!r} of {self.path} is not a scalar")

    def to_json(self) -> dict:
        return {
            "path": self.path.to_json(),
            "attributes": dict(self.attributes),
            "last_modified": self.last_modified,
            "size_bytes": self.size_bytes,
            "blob_ref": self.blob_ref,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> MetadataRecord:
        return cls(
            path=EntryPath.from_json(data["path"]),
            attributes=dict(data["attributes"]),
            last_modified=int(data["last_modified"]),
            size_bytes=int(data["size_bytes"]),
            blob_ref=data.get("blob_ref"),
        )

    def content_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_json())).hexdigest()


@dataclass(frozen=True)
class VirtualProxy:
    path: EntryPath
    discovered_at: int


def _comparable(a: Any, b: Any) -> bool:
    if isinstance(a, bool) or isinstance(b, bool):
        return False
    numeric = (int, float)
    return (isinstance(a, numeric) and isinstance(b, numeric)) or (isinstance(a, str) and isinstance(b, str))


_OPS = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}
_ALIASES = {"==": "=", "≠": "!=", "<>": "!=", "≤": "<=", "≥": ">="}
OPERATORS = tuple(_OPS) + ("contains",)


@dataclass(frozen=True)
class Predicate:
    attribute: str
    op: str
    value: Scalar

    def __post_init__(self):
        op = _ALIASES.get(self.op, self.op)
        if op not in OPERATORS:
            raise InvalidQuery(f"unknown operator {self.op!r}")
        if isinstance(self.value, bool) or not isinstance(self.value, (str, int, float)):
            raise InvalidQuery(f"predicate literal must be a scalar, got {self.value!r}")
        object.__setattr__(self, "op", op)

    def matches(self, attributes: Mapping[str, Scalar]) -> bool:
        # a missing attribute or an incomparable type never satisfies an operator
        if self.attribute not in attributes:
            return False
        actual = attributes[self.attribute]
        if not _comparable(actual, self.value):
            return False
        if self.op == "contains":
            return isinstance(actual, str) and self.value in actual
        return _OPS[self.op](actual, self.value)

    def to_json(self) -> list:
        return [self.attribute, self.op, self.value]


@dataclass(frozen=True)
class UserQuery:
    target_level: str
    predicates: tuple[Predicate, ...] = field(default_factory=tuple)
    include_binary: bool = False

    def __post_init__(self):
        object.__setattr__(self, "predicates", tuple(self.predicates))

    def matches(self, attributes: Mapping[str, Scalar]) -> bool:
        return all(p.matches(attributes) for p in self.predicates)

    def answer_key(self) -> str:
        """Stable identity of the metadata part of the query (binary access excluded)."""
        preds = sorted((p.to_json() for p in self.predicates), key=lambda p: canonical_json(p))
        return canonical_json({"level": self.target_level, "where": preds}).decode()

    def to_json(self) -> dict:
        return {
            "level": self.target_level,
            "where": [p.to_json() for p in self.predicates],
            "binary": self.include_binary,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> UserQuery:
        try:
            preds = tuple(Predicate(str(a), str(op), v) for a, op, v in data.get("where", []))
            return cls(str(data["level"]), preds, bool(data.get("binary", False)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidQuery(f"malformed query: {exc}") from None


@dataclass(frozen=True)
class QueryOutcome:
    """Rows are ``(source_id, record)`` pairs; ``complete=False`` is the NULL answer."""

    rows: tuple[tuple[str, MetadataRecord], ...] = ()
    complete: bool = False
    blob_refs_resolved: bool = True

    def keys(self) -> set[tuple[str, EntryPath]]:
        return {(source_id, record.path) for source_id, record in self.rows}

    def to_json(self) -> dict:
        return {
            "rows": [{"source": s, **r.to_json()} for s, r in self.rows],
            "complete": self.complete,
            "blob_refs_resolved": self.blob_refs_resolved,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> QueryOutcome:
        rows = tuple((str(item["source"]), MetadataRecord.from_json(item)) for item in data["rows"])
        return cls(rows, bool(data["complete"]), bool(data["blob_refs_resolved"]))
