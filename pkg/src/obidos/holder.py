"""Replicaset Holder: which users own which replicasets, and which pointers were loaded.

``holder_get``/``holder_put`` use exact-pointer semantics: a put of ``src:C1``
says nothing about ``src:C1/P1``. Whether a subtree already holds the answer to
a query is the repository's business (see ``Repository.repo_query``).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .errors import DuplicateReplicaSet, UnknownReplicaSet
from .journal import Journal
from .model import (
    EntryPath,
    GranularitySchema,
    ReplicaSet,
    VirtualReplica,
    normalize_replicas,
    presence_array,
)


class Marker(str, Enum):
    PROXY = "proxy"
    FULL = "full"


@dataclass
class GranularityMaps:
    """``n`` per-level maps (level ``i`` holds paths of depth ``i + 1``) plus the presence array."""

    n: int
    maps: list[dict[EntryPath, Marker]] = field(default_factory=list)
    presence: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.maps:
            self.maps = [{} for _ in range(self.n)]
        if not self.presence:
            self.presence = [False] * self.n

    def mark(self, path: EntryPath, marker: Marker) -> None:
        if 1 <= path.depth <= self.n:
            slot = self.maps[path.depth - 1]
            if slot.get(path) != Marker.FULL:
                slot[path] = marker
        for ancestor in path.ancestors():
            self.maps[ancestor.depth - 1].setdefault(ancestor, Marker.PROXY)

    def refresh_presence(self, implied: list[bool]) -> None:
        self.presence = [bool(m) or flag for m, flag in zip(self.maps, implied)]


@dataclass
class ReplicaSetEntry:
    replicaset: ReplicaSet
    sources: list[str]
    loaded: dict[VirtualReplica, bool]

    @property
    def fully_loaded(self) -> bool:
        return all(self.loaded.values())


class ReplicaSetHolder:
    def __init__(self, journal: Journal | None = None, schemas: dict[str, GranularitySchema] | None = None):
        self.journal = journal
        self.schemas = schemas if schemas is not None else {}
        self.user_map: dict[str, list[str]] = {}
        self.replicaset_map: dict[str, ReplicaSetEntry] = {}
        self.granularity: dict[tuple[str, str], GranularityMaps] = {}
        self._loaded: dict[VirtualReplica, Marker] = {}
        self._lock = threading.RLock()

    def _log(self, record: dict) -> None:
        if self.journal is not None:
            self.journal.append(record)

    def _schema(self, source_id: str) -> GranularitySchema:
        return self.schemas.get(source_id) or GranularitySchema()

    # loaded pointers

    def holder_get(self, vr: VirtualReplica) -> bool:
        with self._lock:
            return vr in self._loaded

    def holder_put(self, vr: VirtualReplica, marker: Marker = Marker.PROXY) -> None:
        with self._lock:
            self._log({"t": "h.put", "vr": vr.to_json(), "m": marker.value})
            self._apply_put(vr, marker)

    def _apply_put(self, vr: VirtualReplica, marker: Marker) -> None:
        if self._loaded.get(vr) != Marker.FULL:
            self._loaded[vr] = marker
        for rs_id, entry in self.replicaset_map.items():
            if vr in entry.loaded:
                entry.loaded[vr] = True
                self._mark(rs_id, vr, self._loaded[vr])

    def _mark(self, rs_id: str, vr: VirtualReplica, marker: Marker) -> None:
        entry = self.replicaset_map[rs_id]
        schema = self._schema(vr.source_id)
        maps = self.granularity.setdefault((rs_id, vr.source_id), GranularityMaps(schema.n))
        maps.mark(vr.path, marker)
        maps.refresh_presence(presence_array(entry.replicaset, vr.source_id, schema))

    def loaded_pointers(self) -> dict[VirtualReplica, Marker]:
        with self._lock:
            return dict(self._loaded)

    def forget(self, replicas: Iterable[VirtualReplica]) -> int:
        """Drop loaded-state for pointers whose data was garbage collected."""
        with self._lock:
            gone = [vr for vr in replicas if vr in self._loaded]
            for vr in gone:
                self._log({"t": "h.forget", "vr": vr.to_json()})
                del self._loaded[vr]
            return len(gone)

    def forget_unreferenced(self) -> int:
        with self._lock:
            live = {vr for entry in self.replicaset_map.values() for vr in entry.replicaset.replicas}
            return self.forget([vr for vr in self._loaded if vr not in live])

    # replicaset registry

    def register(self, user_id: str, rs: ReplicaSet) -> None:
        with self._lock:
            if rs.replicaset_id in self.user_map.get(user_id, ()):
                raise DuplicateReplicaSet(f"{user_id} already holds replicaset {rs.replicaset_id}")
            self._log({"t": "h.reg", "u": user_id, "rs": rs.to_json()})
            self._apply_register(user_id, rs)

    def _apply_register(self, user_id: str, rs: ReplicaSet) -> None:
        self.user_map.setdefault(user_id, []).append(rs.replicaset_id)
        if rs.replicaset_id not in self.replicaset_map:
            self._install(rs)

    def _install(self, rs: ReplicaSet) -> None:
        loaded = {vr: vr in self._loaded for vr in rs.replicas}
        self.replicaset_map[rs.replicaset_id] = ReplicaSetEntry(rs, rs.source_ids, loaded)
        for key in [k for k in self.granularity if k[0] == rs.replicaset_id]:
            del self.granularity[key]
        for source_id in rs.source_ids:
            schema = self._schema(source_id)
            maps = GranularityMaps(schema.n)
            self.granularity[(rs.replicaset_id, source_id)] = maps
            for vr in rs.replicas:
                if vr.source_id == source_id and vr in self._loaded:
                    maps.mark(vr.path, self._loaded[vr])
            maps.refresh_presence(presence_array(rs, source_id, schema))

    def update(self, rs: ReplicaSet) -> ReplicaSet:
        """Swap the replicas of a registered replicaset, keeping its id and owners."""
        with self._lock:
            if rs.replicaset_id not in self.replicaset_map:
                raise UnknownReplicaSet(rs.replicaset_id)
            self._log({"t": "h.update", "rs": rs.to_json()})
            self._install(rs)
            return rs

    def unregister(self, user_id: str, replicaset_id: str) -> None:
        with self._lock:
            if replicaset_id not in self.user_map.get(user_id, ()):
                raise UnknownReplicaSet(f"{user_id} holds no replicaset {replicaset_id}")
            self._log({"t": "h.unreg", "u": user_id, "id": replicaset_id})
            self._apply_unregister(user_id, replicaset_id)

    def _apply_unregister(self, user_id: str, replicaset_id: str) -> None:
        ids = self.user_map[user_id]
        ids.remove(replicaset_id)
        if not ids:
            del self.user_map[user_id]
        if not any(replicaset_id in owned for owned in self.user_map.values()):
            self.replicaset_map.pop(replicaset_id, None)
            for key in [k for k in self.granularity if k[0] == replicaset_id]:
                del self.granularity[key]

    def resolve(self, replicaset_id: str) -> ReplicaSet:
        with self._lock:
            try:
                return self.replicaset_map[replicaset_id].replicaset
            except KeyError:
                raise UnknownReplicaSet(replicaset_id) from None

    def status(self, replicaset_id: str) -> ReplicaSetEntry:
        with self._lock:
            try:
                return self.replicaset_map[replicaset_id]
            except KeyError:
                raise UnknownReplicaSet(replicaset_id) from None

    def list_user(self, user_id: str) -> list[str]:
        with self._lock:
            return list(self.user_map.get(user_id, ()))

    def holders_of(self, replicaset_id: str) -> list[str]:
        with self._lock:
            return sorted(u for u, ids in self.user_map.items() if replicaset_id in ids)

    def presence(self, replicaset_id: str, source_id: str) -> list[bool]:
        with self._lock:
            return list(self.granularity[(replicaset_id, source_id)].presence)

    def referenced_prefixes(self) -> set[tuple[str, EntryPath]]:
        with self._lock:
            replicas = [vr for entry in self.replicaset_map.values() for vr in entry.replicaset.replicas]
        return {(vr.source_id, vr.path) for vr in normalize_replicas(replicas)}

    # restart

    @classmethod
    def rebuild(cls, registrations: Iterable[tuple[str, ReplicaSet]], answered: Iterable[VirtualReplica],
                full: Iterable[VirtualReplica] = (), schemas: dict[str, GranularitySchema] | None = None,
                journal: Journal | None = None) -> ReplicaSetHolder:
        """Reconstruct a holder from its registrations and the pointers the repository says were enumerated."""
        holder = cls(journal, schemas)
        full = set(full)
        for user_id, rs in registrations:
            holder._apply_register(user_id, rs)
        for vr in answered:
            holder._apply_put(vr, Marker.FULL if vr in full else Marker.PROXY)
        return holder

    def replay(self, records: Iterable[dict]) -> None:
        with self._lock:
            for rec in records:
                tag = rec.get("t")
                if tag == "h.put":
                    self._apply_put(VirtualReplica.from_json(rec["vr"]), Marker(rec["m"]))
                elif tag == "h.forget":
                    self._loaded.pop(VirtualReplica.from_json(rec["vr"]), None)
                elif tag == "h.reg":
                    self._apply_register(rec["u"], ReplicaSet.from_json(rec["rs"]))
                elif tag == "h.update":
                    self._install(ReplicaSet.from_json(rec["rs"]))
                elif tag == "h.unreg":
                    self._apply_unregister(rec["u"], rec["id"])

    def state(self) -> dict:
        with self._lock:
            return {
                "users": {u: list(ids) for u, ids in self.user_map.items()},
                "replicasets": {k: (e.replicaset, list(e.sources), dict(e.loaded))
                                for k, e in self.replicaset_map.items()},
                "loaded": dict(self._loaded),
                "granularity": {k: ([dict(m) for m in g.maps], list(g.presence))
                                for k, g in self.granularity.items()},
            }
