"""The integrated data repository.

Holds three kinds of state, all keyed by ``(source_id, EntryPath)``:

* virtual proxies: id-only placeholders for entries whose metadata was not loaded,
* full metadata records, indexed by :class:`MetadataIndex`,
* answer markers: which ``(replica, query)`` pairs have been fully materialized.

Blobs live in a content-addressed :class:`BlobStore`. Every metadata mutation
is appended to the journal first, so the in-memory state (index included) can
always be rebuilt by replaying it.
"""

from __future__ import annotations

import bisect
import hashlib
import os
import tempfile
import threading
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import BlobNotFound, InvalidQuery
from .journal import Journal
from .model import (
    ROOT,
    EntryPath,
    GranularitySchema,
    MetadataRecord,
    Predicate,
    QueryOutcome,
    ReplicaSet,
    Scalar,
    UserQuery,
    VirtualProxy,
    VirtualReplica,
    now_ms,
)

Key = tuple[str, EntryPath]

ENUMERATED = "enumerated"


class BlobStore:
    """Content-addressed blobs under ``blobs/<2 hex>/<sha256>``; in memory when ``root`` is None."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._memory: dict[str, bytes] = {}
        self._lock = threading.Lock()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def _file(self, digest: str) -> Path:
        return self.root / digest[:2] / digest

    def put(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        with self._lock:
            if self.root is None:
                self._memory.setdefault(digest, bytes(data))
                return digest
            target = self._file(digest)
            if target.exists():
                return digest
            target.parent.mkdir(exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, target)
        return digest

    def get(self, digest: str) -> bytes:
        if self.root is None:
            try:
                data = self._memory[digest]
            except KeyError:
                raise BlobNotFound(digest) from None
        else:
            try:
                data = self._file(digest).read_bytes()
            except (FileNotFoundError, NotADirectoryError):
                raise BlobNotFound(digest) from None
        if hashlib.sha256(data).hexdigest() != digest:
            raise BlobNotFound(f"{digest}: stored bytes fail verification")
        return data

    def has(self, digest: str) -> bool:
        if self.root is None:
            return digest in self._memory
        return self._file(digest).is_file()

    def remove(self, digest: str) -> bool:
        with self._lock:
            if self.root is None:
                return self._memory.pop(digest, None) is not None
            try:
                self._file(digest).unlink()
                return True
            except FileNotFoundError:
                return False

    def hashes(self) -> list[str]:
        if self.root is None:
            return sorted(self._memory)
        return sorted(p.name for p in self.root.glob("??/*") if not p.name.startswith("."))

    def size(self, digest: str) -> int:
        if self.root is None:
            return len(self._memory[digest])
        return self._file(digest).stat().st_size

    def verify(self) -> list[str]:
        """Hashes whose stored bytes no longer match."""
        bad = []
        for digest in self.hashes():
            try:
                self.get(digest)
            except BlobNotFound:
                bad.append(digest)
        return bad


def _type_group(value: Scalar) -> int:
    return 1 if isinstance(value, str) else 0


class MetadataIndex:
    """attribute -> literal -> paths, per ``(source_id, level)``; ordered lookups via sorted key lists."""

    def __init__(self):
        self._postings: dict[tuple[str, str], dict[str, dict[Scalar, set[EntryPath]]]] = defaultdict(
            lambda: defaultdict(lambda: defaultdict(set)))
        self._members: dict[tuple[str, str], set[EntryPath]] = defaultdict(set)
        self._sorted: dict[tuple[str, str, str], list[tuple[int, Scalar]]] = {}

    def add(self, source_id: str, record: MetadataRecord) -> None:
        slot = (source_id, record.path.level)
        self._members[slot].add(record.path)
        for attr, value in record.attributes.items():
            self._postings[slot][attr][value].add(record.path)
            self._sorted.pop((source_id, record.path.level, attr), None)

    def remove(self, source_id: str, record: MetadataRecord) -> None:
        slot = (source_id, record.path.level)
        self._members[slot].discard(record.path)
        if not self._members[slot]:
            del self._members[slot]
        for attr, value in record.attributes.items():
            by_value = self._postings[slot][attr]
            by_value[value].discard(record.path)
            if not by_value[value]:
                del by_value[value]
            if not by_value:
                del self._postings[slot][attr]
            self._sorted.pop((source_id, record.path.level, attr), None)
        if slot in self._postings and not self._postings[slot]:
            del self._postings[slot]

    def members(self, source_id: str, level: str) -> set[EntryPath]:
        return set(self._members.get((source_id, level), ()))

    def _keys(self, source_id: str, level: str, attr: str) -> list[tuple[int, Scalar]]:
        cache_key = (source_id, level, attr)
        keys = self._sorted.get(cache_key)
        if keys is None:
            values = self._postings.get((source_id, level), {}).get(attr, {})
            keys = sorted((_type_group(v), v) for v in values)
            self._sorted[cache_key] = keys
        return keys

    def lookup(self, source_id: str, level: str, pred: Predicate) -> set[EntryPath]:
        by_value = self._postings.get((source_id, level), {}).get(pred.attribute)
        if not by_value:
            return set()
        if pred.op == "=":
            # 1 and 1.0 share one dict slot, and str keys never equal numbers
            return set(by_value.get(pred.value, ()))
        if pred.op in ("<", "<=", ">", ">="):
            keys = self._keys(source_id, level, pred.attribute)
            group = _type_group(pred.value)
            start = bisect.bisect_left(keys, (group,))
            end = bisect.bisect_left(keys, (group + 1,))
            lo = bisect.bisect_left(keys, (group, pred.value), start, end)
            hi = bisect.bisect_right(keys, (group, pred.value), start, end)
            chosen = {"<": keys[start:lo], "<=": keys[start:hi], ">": keys[hi:end], ">=": keys[lo:end]}[pred.op]
            out = set()
            for _, value in chosen:
                out |= by_value[value]
            return out
        out = set()
        for value, paths in by_value.items():
            if pred.matches({pred.attribute: value}):
                out |= paths
        return out

    def as_dict(self) -> dict:
        return {
            slot: {attr: {value: frozenset(paths) for value, paths in by_value.items()}
                   for attr, by_value in attrs.items()}
            for slot, attrs in self._postings.items()
        }

    def __eq__(self, other):
        if not isinstance(other, MetadataIndex):
            return NotImplemented
        return self.as_dict() == other.as_dict()


@dataclass(frozen=True)
class RepoEntry:
    source_id: str
    proxy: VirtualProxy | None = None
    record: MetadataRecord | None = None

    @property
    def is_full(self) -> bool:
        return self.record is not None

    @property
    def path(self) -> EntryPath:
        return self.record.path if self.record is not None else self.proxy.path


def _wins(new: MetadataRecord, old: MetadataRecord) -> bool:
    if new.last_modified != old.last_modified:
        return new.last_modified > old.last_modified
    return new.content_hash() > old.content_hash()


class Repository:
    def __init__(self, root: str | Path | None = None, journal: Journal | None = None,
                 schemas: Mapping[str, GranularitySchema] | None = None, durable: bool = False):
        self.root = Path(root) if root is not None else None
        if journal is None:
            journal = Journal(self.root / "journal.log" if self.root is not None else None, durable=durable)
        self.journal = journal
        self.blobs = BlobStore(self.root / "blobs" if self.root is not None else None)
        self.schemas: dict[str, GranularitySchema] = dict(schemas or {})
        self.index = MetadataIndex()
        self._proxies: dict[Key, VirtualProxy] = {}
        self._records: dict[Key, MetadataRecord] = {}
        self._children: dict[Key, set[EntryPath]] = defaultdict(set)
        self._answers: set[tuple[str, EntryPath, str]] = set()
        self._lock = threading.RLock()
        self._replay()

    # persistence

    def _replay(self) -> None:
        for rec in self.journal.records():
            tag = rec.get("t", "")
            if not tag.startswith("repo."):
                continue
            path = EntryPath.from_json(rec["p"]) if "p" in rec else None
            if tag == "repo.proxy":
                self._apply_proxy(rec["s"], path, rec["at"])
            elif tag == "repo.full":
                self._apply_promote(rec["s"], MetadataRecord.from_json(rec["r"]), rec.get("force", False))
            elif tag == "repo.drop":
                self._apply_drop(rec["s"], path)
            elif tag == "repo.answer":
                self._answers.add((rec["s"], path, rec["q"]))
            elif tag == "repo.unanswer":
                self._answers.discard((rec["s"], path, rec["q"]))

    def register_schema(self, source_id: str, schema: GranularitySchema) -> None:
        self.schemas[source_id] = schema

    def close(self) -> None:
        self.journal.close()

    # structural helpers

    def _link(self, source_id: str, path: EntryPath) -> None:
        if path.depth:
            self._children[(source_id, path.parent)].add(path)

    def _unlink(self, source_id: str, path: EntryPath) -> None:
        if path.depth:
            siblings = self._children.get((source_id, path.parent))
            if siblings is not None:
                siblings.discard(path)
                if not siblings:
                    del self._children[(source_id, path.parent)]

    def children(self, source_id: str, path: EntryPath) -> list[EntryPath]:
        with self._lock:
            return sorted(self._children.get((source_id, path), ()), key=EntryPath.sort_key)

    def subtree(self, source_id: str, path: EntryPath, max_depth: int | None = None) -> Iterator[EntryPath]:
        """Known descendants of ``path`` (excluded), down to ``max_depth`` inclusive."""
        stack = [path]
        while stack:
            node = stack.pop()
            if max_depth is not None and node.depth >= max_depth:
                continue
            for child in self._children.get((source_id, node), ()):
                yield child
                stack.append(child)

    # entries

    def _apply_proxy(self, source_id: str, path: EntryPath, at: int) -> bool:
        key = (source_id, path)
        if key in self._records or key in self._proxies:
            return False
        self._proxies[key] = VirtualProxy(path, at)
        self._link(source_id, path)
        return True

    def put_proxy(self, source_id: str, path: EntryPath) -> bool:
        """Store a placeholder unless the entry already exists; full records always win."""
        with self._lock:
            key = (source_id, path)
            if key in self._records or key in self._proxies:
                return False
            at = now_ms()
            self.journal.append({"t": "repo.proxy", "s": source_id, "p": path.to_json(), "at": at})
            return self._apply_proxy(source_id, path, at)

    def _apply_promote(self, source_id: str, record: MetadataRecord, force: bool) -> bool:
        key = (source_id, record.path)
        old = self._records.get(key)
        if old is not None:
            if old == record or (not force and not _wins(record, old)):
                return False
            self.index.remove(source_id, old)
        self._proxies.pop(key, None)
        self._records[key] = record
        self.index.add(source_id, record)
        self._link(source_id, record.path)
        return True

    def promote(self, source_id: str, record: MetadataRecord, force: bool = False) -> bool:
        """Replace a proxy (or an older record) with ``record``. Returns whether state changed.

        Without ``force`` the newer ``last_modified`` wins, ties going to the
        lexicographically larger record hash.
        """
        record.validate()
        if source_id in self.schemas:
            self.schemas[source_id].validate(record.path)
        with self._lock:
            old = self._records.get((source_id, record.path))
            if old is not None and (old == record or (not force and not _wins(record, old))):
                return False
            entry = {"t": "repo.full", "s": source_id, "r": record.to_json()}
            if force:
                entry["force"] = True
            self.journal.append(entry)
            return self._apply_promote(source_id, record, force)

    def _apply_drop(self, source_id: str, path: EntryPath) -> bool:
        key = (source_id, path)
        record = self._records.pop(key, None)
        proxy = self._proxies.pop(key, None)
        if record is not None:
            self.index.remove(source_id, record)
        if record is None and proxy is None:
            return False
        self._unlink(source_id, path)
        return True

    def entry(self, source_id: str, path: EntryPath) -> RepoEntry | None:
        with self._lock:
            key = (source_id, path)
            if key in self._records:
                return RepoEntry(source_id, record=self._records[key])
            if key in self._proxies:
                return RepoEntry(source_id, proxy=self._proxies[key])
            return None

    def record(self, source_id: str, path: EntryPath) -> MetadataRecord | None:
        with self._lock:
            return self._records.get((source_id, path))

    def is_full(self, source_id: str, path: EntryPath) -> bool:
        with self._lock:
            return (source_id, path) in self._records

    def has_entry(self, source_id: str, path: EntryPath) -> bool:
        with self._lock:
            return (source_id, path) in self._records or (source_id, path) in self._proxies

    def records(self) -> list[tuple[str, MetadataRecord]]:
        with self._lock:
            return [(s, r) for (s, _), r in self._records.items()]

    def proxies(self) -> list[tuple[str, VirtualProxy]]:
        with self._lock:
            return [(s, p) for (s, _), p in self._proxies.items()]

    def __len__(self) -> int:
        with self._lock:
            return len(self._records) + len(self._proxies)

    # blobs

    def put_blob(self, data: bytes) -> str:
        return self.blobs.put(data)

    def get_blob(self, digest: str) -> bytes:
        return self.blobs.get(digest)

    def has_blob(self, digest: str) -> bool:
        return self.blobs.has(digest)

    # answer markers

    def mark_answered(self, vr: VirtualReplica, key: str) -> None:
        with self._lock:
            if (vr.source_id, vr.path, key) in self._answers:
                return
            self.journal.append({"t": "repo.answer", "s": vr.source_id, "p": vr.path.to_json(), "q": key})
            self._answers.add((vr.source_id, vr.path, key))

    def is_answered(self, vr: VirtualReplica, key: str) -> bool:
        """True if ``key`` was answered for this replica or for a replica enclosing it."""
        with self._lock:
            path = vr.path
            candidates = [EntryPath(path.segments[:d]) for d in range(path.depth + 1)]
            return any((vr.source_id, p, key) in self._answers for p in candidates)

    def answers(self) -> set[tuple[str, EntryPath, str]]:
        with self._lock:
            return set(self._answers)

    # query

    def _schema(self, source_id: str) -> GranularitySchema:
        try:
            return self.schemas[source_id]
        except KeyError:
            raise InvalidQuery(f"no schema registered for source {source_id!r}") from None

    def _structurally_complete(self, vr: VirtualReplica, target: int) -> bool:
        if vr.path.depth and (vr.source_id, vr.path) not in self._records:
            return False
        seen_target = vr.path.depth == target
        for path in self.subtree(vr.source_id, vr.path, max_depth=target):
            if (vr.source_id, path) not in self._records:
                return False
            seen_target = seen_target or path.depth == target
        return seen_target

    def _replica_complete(self, vr: VirtualReplica, q: UserQuery | None) -> bool:
        if not self.is_answered(vr, ENUMERATED):
            return False
        if q is None:
            return True
        target = self._schema(vr.source_id).depth_of(q.target_level)
        if vr.path.depth > target:
            return True
        return self.is_answered(vr, q.answer_key()) or self._structurally_complete(vr, target)

    def _matching(self, vr: VirtualReplica, q: UserQuery, target: int) -> list[MetadataRecord]:
        if vr.path.depth > target:
            return []
        level = q.target_level
        candidates: set[EntryPath] | None = None
        for pred in q.predicates:
            hits = self.index.lookup(vr.source_id, level, pred)
            candidates = hits if candidates is None else candidates & hits
            if not candidates:
                return []
        if candidates is None:
            candidates = self.index.members(vr.source_id, level)
        out = []
        for path in candidates:
            if vr.path.is_prefix_of(path):
                record = self._records[(vr.source_id, path)]
                if q.matches(record.attributes):
                    out.append(record)
        return out

    def _blobs_resolved(self, source_id: str, record: MetadataRecord) -> bool:
        leaf_depth = self._schema(source_id).n + 1
        if record.path.depth == leaf_depth:
            images = [record.path]
        else:
            images = [p for p in self.subtree(source_id, record.path) if p.depth == leaf_depth]
        for image in images:
            rec = self._records.get((source_id, image))
            if rec is None or rec.blob_ref is None or not self.blobs.has(rec.blob_ref):
                return False
        return True

    def repo_query(self, q: UserQuery | None, scope: ReplicaSet | Iterable[VirtualReplica]) -> QueryOutcome:
        """Answer ``q`` from local state only.

        ``complete`` is False (the NULL answer) unless every replica of the scope
        has been enumerated and, for a real query, either this query was already
        materialized for it or every entry down to the target level is a full
        record. ``q=None`` reports proxy coverage only.
        """
        replicas = scope.replicas if isinstance(scope, ReplicaSet) else tuple(scope)
        with self._lock:
            if q is not None:
                for vr in replicas:
                    self._schema(vr.source_id).depth_of(q.target_level)
            complete = bool(replicas) and all(self._replica_complete(vr, q) for vr in replicas)
            if q is None:
                return QueryOutcome((), complete, True)
            rows: dict[Key, MetadataRecord] = {}
            for vr in replicas:
                target = self._schema(vr.source_id).depth_of(q.target_level)
                for record in self._matching(vr, q, target):
                    rows[(vr.source_id, record.path)] = record
            ordered = tuple(sorted(((s, r) for (s, _), r in rows.items()),
                                   key=lambda sr: (sr[0], sr[1].path.sort_key())))
            resolved = True
            if q.include_binary:
                resolved = all(self._blobs_resolved(s, r) for s, r in ordered)
            return QueryOutcome(ordered, complete, resolved)

    # garbage collection

    def gc_orphans(self, referenced: Iterable[tuple[str, EntryPath]]) -> int:
        """Drop entries, answer markers and blobs reachable from no referenced prefix.

        Ancestors of a referenced prefix are kept: they are the identifying chain
        of the data below them. Returns entries plus blobs removed.
        """
        refs = list(referenced)
        by_source: dict[str, list[EntryPath]] = defaultdict(list)
        for source_id, path in refs:
            by_source[source_id].append(path)

        def covered(source_id: str, path: EntryPath) -> bool:
            return any(p.is_prefix_of(path) for p in by_source.get(source_id, ()))

        def kept(source_id: str, path: EntryPath) -> bool:
            return any(p.is_prefix_of(path) or path.is_prefix_of(p) for p in by_source.get(source_id, ()))

        removed = 0
        with self._lock:
            doomed = [k for k in list(self._records) + list(self._proxies) if not kept(*k)]
            for source_id, path in doomed:
                self.journal.append({"t": "repo.drop", "s": source_id, "p": path.to_json()})
                if self._apply_drop(source_id, path):
                    removed += 1
            for source_id, path, key in sorted(self._answers, key=lambda a: (a[0], a[1].sort_key(), a[2])):
                if not covered(source_id, path):
                    self.journal.append({"t": "repo.unanswer", "s": source_id, "p": path.to_json(), "q": key})
                    self._answers.discard((source_id, path, key))
            live = {r.blob_ref for r in self._records.values() if r.blob_ref}
            for digest in self.blobs.hashes():
                if digest not in live and self.blobs.remove(digest):
                    removed += 1
        return removed

    # inspection

    def state(self) -> dict:
        """Comparable snapshot of all logical state (used for replay-equality checks)."""
        with self._lock:
            return {
                "proxies": set(self._proxies),
                "records": {k: r.to_json() for k, r in self._records.items()},
                "answers": set(self._answers),
                "index": self.index.as_dict(),
                "blobs": set(self.blobs.hashes()),
            }

    def check_exclusive(self) -> bool:
        with self._lock:
            return not (set(self._proxies) & set(self._records))


def rebuild_index(repo: Repository) -> MetadataIndex:
    index = MetadataIndex()
    for source_id, record in repo.records():
        index.add(source_id, record)
    return index
