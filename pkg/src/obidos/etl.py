"""Selective hybrid ETL plus the eager and lazy baselines it is measured against.

All three modes pull through the same :class:`~obidos.source.Source` objects, so
their :class:`LoadReport` traffic numbers are directly comparable.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable

from .errors import InvalidRecord, SourceUnavailable, UnknownSource
from .holder import Marker, ReplicaSetHolder
from .journal import Journal
from .model import (
    ROOT,
    EntryPath,
    MetadataRecord,
    QueryOutcome,
    ReplicaSet,
    UserQuery,
    VirtualReplica,
)
from .repository import ENUMERATED, Repository
from .source import Source, TransferStats

logger = logging.getLogger(__name__)


class EtlMode(str, Enum):
    HYBRID = "Hybrid"
    EAGER = "Eager"
    LAZY = "Lazy"


@dataclass
class LoadReport:
    stats: dict[str, TransferStats] = field(default_factory=dict)
    proxies_created: int = 0
    records_promoted: int = 0
    blobs_loaded: int = 0
    query_rows: int = 0
    served_from_repository: bool = False
    elapsed: float = 0.0
    load_calls: int = 0

    @property
    def total(self) -> TransferStats:
        out = TransferStats()
        for stats in self.stats.values():
            out = out + stats
        return out

    def merge(self, other: LoadReport) -> LoadReport:
        stats = dict(self.stats)
        for sid, s in other.stats.items():
            stats[sid] = stats[sid] + s if sid in stats else s
        return LoadReport(
            stats=stats,
            proxies_created=self.proxies_created + other.proxies_created,
            records_promoted=self.records_promoted + other.records_promoted,
            blobs_loaded=self.blobs_loaded + other.blobs_loaded,
            query_rows=self.query_rows + other.query_rows,
            served_from_repository=self.served_from_repository and other.served_from_repository,
            elapsed=self.elapsed + other.elapsed,
            load_calls=self.load_calls + other.load_calls,
        )

    def to_json(self) -> dict:
        return {
            "stats": {sid: s.as_dict() for sid, s in sorted(self.stats.items())},
            "proxies_created": self.proxies_created,
            "records_promoted": self.records_promoted,
            "blobs_loaded": self.blobs_loaded,
            "query_rows": self.query_rows,
            "served_from_repository": self.served_from_repository,
            "elapsed": self.elapsed,
            "load_calls": self.load_calls,
        }

    @classmethod
    def from_json(cls, data: dict) -> LoadReport:
        return cls(
            stats={sid: TransferStats(**s) for sid, s in data.get("stats", {}).items()},
            proxies_created=data.get("proxies_created", 0),
            records_promoted=data.get("records_promoted", 0),
            blobs_loaded=data.get("blobs_loaded", 0),
            query_rows=data.get("query_rows", 0),
            served_from_repository=data.get("served_from_repository", False),
            elapsed=data.get("elapsed", 0.0),
            load_calls=data.get("load_calls", 0),
        )


class PartialLoad(SourceUnavailable):
    """A source went away mid-load; ``report`` accounts for what was done before that."""

    def __init__(self, message: str, report: LoadReport):
        super().__init__(message)
        self.report = report


class _Meter:
    """Snapshot-diff of source counters around one operation."""

    def __init__(self, sources: Iterable[Source]):
        self.sources = list(sources)
        self.before = {s.source_id: s.stats.snapshot() for s in self.sources}
        self.start = time.perf_counter()

    def finish(self, report: LoadReport) -> LoadReport:
        report.stats = {s.source_id: s.stats.snapshot() - self.before[s.source_id] for s in self.sources}
        report.elapsed = time.perf_counter() - self.start
        return report


def is_null(outcome: QueryOutcome, q: UserQuery | None) -> bool:
    """The repository's NULL answer: metadata incomplete, or binary data asked for but missing."""
    if not outcome.complete:
        return True
    return q is not None and q.include_binary and not outcome.blob_refs_resolved


class Engine:
    def __init__(self, repository: Repository, holder: ReplicaSetHolder | None = None,
                 sources: Iterable[Source] = ()):
        self.repository = repository
        self.holder = holder if holder is not None else ReplicaSetHolder(repository.journal, repository.schemas)
        self.sources: dict[str, Source] = {}
        self.trace: list[tuple] | None = None
        self._vr_locks: dict[VirtualReplica, threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()
        for src in sources:
            self.add_source(src)

    @classmethod
    def open(cls, root: str | Path | None, sources: Iterable[Source] = (), durable: bool = False) -> Engine:
        """Open (or create) an engine whose state lives under ``root``; replays the journal."""
        root = Path(root) if root is not None else None
        journal = Journal(root / "journal.log" if root is not None else None, durable=durable)
        repo = Repository(root, journal)
        holder = ReplicaSetHolder(journal, repo.schemas)
        holder.replay(journal.records())
        return cls(repo, holder, sources)

    def close(self) -> None:
        self.repository.close()

    def add_source(self, source: Source) -> None:
        self.sources[source.source_id] = source
        self.repository.register_schema(source.source_id, source.schema)
        self.holder.schemas[source.source_id] = source.schema

    def source(self, source_id: str) -> Source:
        try:
            return self.sources[source_id]
        except KeyError:
            raise UnknownSource(f"no source registered as {source_id!r}") from None

    def _emit(self, *event) -> None:
        if self.trace is not None:
            self.trace.append(event)

    @contextmanager
    def _exclusive(self, vr: VirtualReplica):
        with self._guard:
            lock = self._vr_locks[vr]
        with lock:
            yield

    def _meter(self, replicas: Iterable[VirtualReplica]) -> _Meter:
        ids = sorted({vr.source_id for vr in replicas})
        return _Meter(self.source(sid) for sid in ids)

    # Algorithm 1

    def selective_load(self, rs: ReplicaSet, q: UserQuery | None = None,
                       force_load: bool = False) -> tuple[LoadReport, QueryOutcome]:
        meter = self._meter(rs.replicas)
        for vr in rs.replicas:
            schema = self.source(vr.source_id).schema
            schema.validate(vr.path)
            if q is not None:
                schema.depth_of(q.target_level)
        report = LoadReport()
        to_load = list(rs.replicas)
        try:
            for vr in rs.replicas:
                with self._exclusive(vr):
                    was_loaded = self.holder.holder_get(vr)
                    self._emit("get", vr, was_loaded)
                    if not was_loaded:
                        self.load_data(vr, q, report)
                        self.holder.holder_put(vr, self._marker(vr))
                        self._emit("put", vr)
                        to_load.remove(vr)
                        self._emit("delete", vr)
            if to_load:
                outcome = self.repository.repo_query(q, rs)
                null = is_null(outcome, q)
                self._emit("query", null)
                if null:
                    for vr in to_load:
                        with self._exclusive(vr):
                            self.load_data(vr, q, report)
            outcome = self.repository.repo_query(q, rs)
            if force_load and is_null(outcome, q):
                # escape hatch outside the algorithm: reload every pointer of the replicaset
                self._emit("force")
                for vr in rs.replicas:
                    with self._exclusive(vr):
                        self.load_data(vr, q, report)
                outcome = self.repository.repo_query(q, rs)
        except SourceUnavailable as exc:
            meter.finish(report)
            raise PartialLoad(str(exc), report) from exc
        meter.finish(report)
        report.query_rows = len(outcome.rows)
        report.served_from_repository = report.load_calls == 0 and report.total.is_zero()
        return report, outcome

    def _marker(self, vr: VirtualReplica) -> Marker:
        if vr.path.depth and self.repository.is_full(vr.source_id, vr.path):
            return Marker.FULL
        return Marker.PROXY

    def load_data(self, vr: VirtualReplica, q: UserQuery | None, report: LoadReport | None = None) -> LoadReport:
        """Load one pointer: proxies for its whole subtree, then the query's hits (and their blobs)."""
        report = report if report is not None else LoadReport()
        report.load_calls += 1
        self._emit("loadData", vr)
        repo = self.repository
        src = self.source(vr.source_id)
        schema = src.schema
        schema.validate(vr.path)
        sid = vr.source_id

        # enumerate first so a pointer to nothing fails before the repository changes
        discovered: list[EntryPath] = list(src.walk(vr.path))
        chain = vr.path.ancestors() + ([vr.path] if vr.path.depth else [])
        for path in chain + discovered:
            report.proxies_created += repo.put_proxy(sid, path)
        repo.mark_answered(vr, ENUMERATED)
        if q is None:
            return report

        target = schema.depth_of(q.target_level)
        if vr.path.depth == target:
            candidates = [vr.path]
        else:
            candidates = [p for p in discovered if p.depth == target]
        hits: list[MetadataRecord] = []
        for path in candidates:
            record = src.fetch_metadata(path)
            if q.matches(record.attributes):
                hits.append(record)
        for record in hits:
            report.records_promoted += repo.promote(sid, record)
            for ancestor in record.path.ancestors():
                if not repo.is_full(sid, ancestor):
                    report.records_promoted += repo.promote(sid, src.fetch_metadata(ancestor))

        if q.include_binary:
            leaf = schema.n + 1
            for record in hits:
                if record.path.depth == leaf:
                    images = [record.path]
                else:
                    images = [p for p in discovered if p.depth == leaf and record.path.is_prefix_of(p)]
                for image in images:
                    self._load_image(src, image, report)
        repo.mark_answered(vr, q.answer_key())
        return report

    def _load_image(self, src: Source, image: EntryPath, report: LoadReport) -> None:
        repo = self.repository
        sid = src.source_id
        record = repo.record(sid, image)
        if record is None:
            record = src.fetch_metadata(image)
            report.records_promoted += repo.promote(sid, record)
        if record.blob_ref is not None and repo.has_blob(record.blob_ref):
            return
        data, digest = src.fetch_blob(image)
        if record.blob_ref is not None and record.blob_ref != digest:
            raise InvalidRecord(f"{sid}:{image} blob hash {digest} disagrees with its metadata")
        repo.put_blob(data)
        report.blobs_loaded += 1
        if record.blob_ref is None:
            report.records_promoted += repo.promote(sid, replace(record, blob_ref=digest), force=True)

    # maintenance

    def refresh(self, rs: ReplicaSet) -> LoadReport:
        """Re-fetch full records under ``rs`` whose source copy differs (newer, or local corruption)."""
        meter = self._meter(rs.replicas)
        report = LoadReport()
        repo = self.repository
        for vr in rs.replicas:
            src = self.source(vr.source_id)
            local = [r for s, r in repo.records() if s == vr.source_id and vr.path.is_prefix_of(r.path)]
            for record in sorted(local, key=lambda r: r.path.sort_key()):
                remote = src.fetch_metadata(record.path)
                if remote.blob_ref is None and record.blob_ref is not None:
                    remote = replace(remote, blob_ref=record.blob_ref)
                if remote.content_hash() != record.content_hash():
                    report.records_promoted += repo.promote(vr.source_id, remote, force=True)
        return meter.finish(report)

    def gc(self) -> int:
        removed = self.repository.gc_orphans(self.holder.referenced_prefixes())
        self.holder.forget_unreferenced()
        return removed


def _whole(sources: Iterable[Source]) -> list[VirtualReplica]:
    return [VirtualReplica(s.source_id, ROOT) for s in sources]


def eager_etl(sources: Iterable[Source], repository: Repository) -> LoadReport:
    """Load every metadata record and every blob of every source up front."""
    sources = list(sources)
    meter = _Meter(sources)
    report = LoadReport()
    leaf_depths = {s.source_id: s.schema.n + 1 for s in sources}
    for src in sources:
        repository.register_schema(src.source_id, src.schema)
        for path in src.walk(ROOT):
            record = src.fetch_metadata(path)
            report.records_promoted += repository.promote(src.source_id, record)
            if path.depth == leaf_depths[src.source_id]:
                data, _ = src.fetch_blob(path)
                repository.put_blob(data)
                report.blobs_loaded += 1
        repository.mark_answered(VirtualReplica(src.source_id, ROOT), ENUMERATED)
    return meter.finish(report)


class EagerEtl:
    def __init__(self, sources: Iterable[Source], repository: Repository | None = None):
        self.sources = list(sources)
        self.repository = repository if repository is not None else Repository()

    def load(self) -> LoadReport:
        return eager_etl(self.sources, self.repository)

    def query(self, q: UserQuery) -> tuple[LoadReport, QueryOutcome]:
        meter = _Meter(self.sources)
        outcome = self.repository.repo_query(q, _whole(self.sources))
        report = meter.finish(LoadReport(query_rows=len(outcome.rows)))
        report.served_from_repository = report.total.is_zero()
        return report, outcome


class LazyEtl:
    """Metadata loaded eagerly into an in-memory store; blobs fetched per query and never kept."""

    def __init__(self, sources: Iterable[Source]):
        self.sources = {s.source_id: s for s in sources}
        self.repository = Repository(schemas={sid: s.schema for sid, s in self.sources.items()})

    def bootstrap(self) -> LoadReport:
        meter = _Meter(self.sources.values())
        report = LoadReport()
        for src in self.sources.values():
            for path in src.walk(ROOT):
                report.records_promoted += self.repository.promote(src.source_id, src.fetch_metadata(path))
            self.repository.mark_answered(VirtualReplica(src.source_id, ROOT), ENUMERATED)
        return meter.finish(report)

    def query(self, q: UserQuery) -> tuple[LoadReport, QueryOutcome]:
        meter = _Meter(self.sources.values())
        report = LoadReport()
        outcome = self.repository.repo_query(q, _whole(self.sources.values()))
        if q.include_binary:
            for sid, record in outcome.rows:
                src = self.sources[sid]
                leaf = src.schema.n + 1
                if record.path.depth == leaf:
                    images = [record.path]
                else:
                    images = sorted((p for p in self.repository.subtree(sid, record.path) if p.depth == leaf),
                                    key=EntryPath.sort_key)
                for image in images:
                    src.fetch_blob(image)
            outcome = replace(outcome, blob_refs_resolved=True)
        report.query_rows = len(outcome.rows)
        meter.finish(report)
        report.served_from_repository = report.total.is_zero()
        return report, outcome


def lazy_etl_bootstrap(sources: Iterable[Source]) -> tuple[LazyEtl, LoadReport]:
    lazy = LazyEtl(sources)
    return lazy, lazy.bootstrap()
