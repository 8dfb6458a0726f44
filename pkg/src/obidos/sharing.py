"""Share datasets between instances by exchanging replicasets (or just their ids).

Envelopes are canonical JSON, so an id-only envelope has a constant byte length
for a given sender/receiver pair regardless of what the replicaset points at.
They can travel over the service API or as plain files.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol

from .errors import AccessDenied, DeserializeError, ShareFailed, UnknownReplicaSet
from .etl import Engine, LoadReport
from .journal import Journal
from .model import (
    QueryOutcome,
    ReplicaSet,
    UserQuery,
    canonical_json,
    deserialize_replicaset,
    now_ms,
)

ID_ONLY = "id"
FULL = "full"


@dataclass(frozen=True)
class AccessGrant:
    api_key: str
    sender_repo_uri: str
    expiry: int  # ms since epoch

    def expired(self, at: int | None = None) -> bool:
        return (now_ms() if at is None else at) >= self.expiry

    def to_json(self) -> dict:
        return {"api_key": self.api_key, "sender_repo_uri": self.sender_repo_uri, "expiry": self.expiry}

    @classmethod
    def from_json(cls, data: dict) -> AccessGrant:
        return cls(str(data["api_key"]), str(data["sender_repo_uri"]), int(data["expiry"]))


@dataclass(frozen=True)
class ShareEnvelope:
    kind: str
    sender_instance: str
    receiver_user: str
    replicaset_id: str | None = None
    sender_uri: str | None = None
    replicaset: ReplicaSet | None = None
    access_sender: AccessGrant | None = None

    def __post_init__(self):
        if self.kind == ID_ONLY:
            if not self.replicaset_id or not self.sender_uri:
                raise ShareFailed("an id-only envelope needs a replicaset id and a sender uri")
        elif self.kind == FULL:
            if self.replicaset is None:
                raise ShareFailed("a full envelope needs the replicaset itself")
        else:
            raise ShareFailed(f"unknown envelope kind {self.kind!r}")

    @classmethod
    def id_only(cls, replicaset_id: str, sender_uri: str, sender_instance: str, receiver_user: str,
                access_sender: AccessGrant | None = None) -> ShareEnvelope:
        return cls(ID_ONLY, sender_instance, receiver_user, replicaset_id=replicaset_id,
                   sender_uri=sender_uri, access_sender=access_sender)

    @classmethod
    def full(cls, rs: ReplicaSet, sender_instance: str, receiver_user: str,
             access_sender: AccessGrant | None = None, sender_uri: str | None = None) -> ShareEnvelope:
        return cls(FULL, sender_instance, receiver_user, replicaset=rs, sender_uri=sender_uri,
                   access_sender=access_sender)

    @property
    def target_id(self) -> str:
        return self.replicaset_id if self.kind == ID_ONLY else self.replicaset.replicaset_id

    def to_json(self) -> dict:
        body: dict = {
            "kind": self.kind,
            "sender_instance": self.sender_instance,
            "receiver_user": self.receiver_user,
            "access_sender": self.access_sender.to_json() if self.access_sender else None,
        }
        if self.kind == ID_ONLY:
            body.update(replicaset_id=self.replicaset_id, sender_uri=self.sender_uri)
        else:
            body.update(replicaset=self.replicaset.to_json(), sender_uri=self.sender_uri)
        return body

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_json())

    @classmethod
    def from_json(cls, data: dict) -> ShareEnvelope:
        try:
            grant = data.get("access_sender")
            grant = AccessGrant.from_json(grant) if grant else None
            if data["kind"] == ID_ONLY:
                return cls.id_only(data["replicaset_id"], data["sender_uri"], data["sender_instance"],
                                   data["receiver_user"], grant)
            return cls.full(ReplicaSet.from_json(data["replicaset"]), data["sender_instance"],
                            data["receiver_user"], grant, data.get("sender_uri"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DeserializeError(f"malformed share envelope: {exc}") from None

    @classmethod
    def from_bytes(cls, raw: bytes) -> ShareEnvelope:
        import json

        try:
            data = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise DeserializeError(str(exc), getattr(exc, "pos", 0)) from None
        if not isinstance(data, dict):
            raise DeserializeError("share envelope must be an object")
        return cls.from_json(data)


def measure_share_size(envelope: ShareEnvelope) -> int:
    return len(envelope.to_bytes())


class SenderClient(Protocol):
    """What a receiver needs from a sender instance."""

    def fetch_replicaset(self, replicaset_id: str) -> bytes: ...

    def check_access(self, replicaset_id: str, api_key: str) -> None: ...

    def remote_query(self, replicaset_id: str, q: UserQuery | None, api_key: str) -> tuple[QueryOutcome, LoadReport]: ...


Connect = Callable[[str], SenderClient]


@dataclass(frozen=True)
class RemoteBinding:
    replicaset: ReplicaSet
    grant: AccessGrant

    def to_json(self) -> dict:
        return {"rs": self.replicaset.to_json(), "grant": self.grant.to_json()}


class BindingStore:
    """Receiver-side record of replicasets served remotely by their sender; journaled."""

    def __init__(self, journal: Journal | None = None):
        self.journal = journal
        self.lock = threading.RLock()
        self._bindings: dict[str, RemoteBinding] = {}
        if journal is not None:
            for rec in journal.records():
                if rec.get("t") == "share.bind":
                    b = RemoteBinding(ReplicaSet.from_json(rec["rs"]), AccessGrant.from_json(rec["grant"]))
                    self._bindings[b.replicaset.replicaset_id] = b
                elif rec.get("t") == "share.unbind":
                    self._bindings.pop(rec["id"], None)

    def bind(self, rs: ReplicaSet, grant: AccessGrant) -> RemoteBinding:
        binding = RemoteBinding(rs, grant)
        with self.lock:
            if self._bindings.get(rs.replicaset_id) == binding:
                return binding
            if self.journal is not None:
                self.journal.append({"t": "share.bind", **binding.to_json()})
            self._bindings[rs.replicaset_id] = binding
        return binding

    def unbind(self, replicaset_id: str) -> None:
        with self.lock:
            if replicaset_id in self._bindings:
                if self.journal is not None:
                    self.journal.append({"t": "share.unbind", "id": replicaset_id})
                del self._bindings[replicaset_id]

    def get(self, replicaset_id: str) -> RemoteBinding | None:
        with self.lock:
            return self._bindings.get(replicaset_id)

    def __contains__(self, replicaset_id: str) -> bool:
        return self.get(replicaset_id) is not None

    def all(self) -> dict[str, RemoteBinding]:
        with self.lock:
            return dict(self._bindings)


@dataclass
class ShareResult:
    path: str  # "local" | "remote" | "load"
    replicaset_id: str
    bytes_transferred: int
    report: LoadReport | None = None
    elapsed: float = 0.0

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "replicaset_id": self.replicaset_id,
            "bytes_transferred": self.bytes_transferred,
            "report": self.report.to_json() if self.report else None,
            "elapsed": self.elapsed,
        }


def share_replicaset(engine: Engine, bindings: BindingStore, envelope: ShareEnvelope, connect: Connect,
                     instance_id: str) -> ShareResult:
    """Receiver side of a share: resolve the replicaset, then bind remotely or load pointers locally."""
    start = time.perf_counter()
    transferred = measure_share_size(envelope)
    grant = envelope.access_sender
    if grant is not None and grant.expired():
        raise AccessDenied("the access grant in this envelope has expired")
    same_instance = envelope.sender_instance == instance_id

    with bindings.lock:
        if envelope.kind == ID_ONLY:
            if same_instance:
                rs = engine.holder.resolve(envelope.replicaset_id)
            else:
                try:
                    raw = connect(envelope.sender_uri).fetch_replicaset(envelope.replicaset_id)
                except UnknownReplicaSet:
                    raise
                except (AccessDenied, ShareFailed):
                    raise
                except Exception as exc:
                    raise ShareFailed(f"could not fetch {envelope.replicaset_id} from {envelope.sender_uri}: {exc}") from exc
                transferred += len(raw)
                rs = deserialize_replicaset(raw)
                if rs.replicaset_id != envelope.replicaset_id:
                    raise ShareFailed("sender answered with a different replicaset")
        else:
            rs = envelope.replicaset

        def register() -> None:
            if rs.replicaset_id not in engine.holder.list_user(envelope.receiver_user):
                engine.holder.register(envelope.receiver_user, rs)

        if same_instance:
            register()
            return ShareResult("local", rs.replicaset_id, transferred, None, time.perf_counter() - start)

        if grant is not None:
            connect(grant.sender_repo_uri).check_access(rs.replicaset_id, grant.api_key)
            bindings.bind(rs, grant)
            register()
            return ShareResult("remote", rs.replicaset_id, transferred, None, time.perf_counter() - start)

        for sid in rs.source_ids:
            engine.source(sid)
        register()
        report, _ = engine.selective_load(rs, None)
        transferred += report.total.bytes
        return ShareResult("load", rs.replicaset_id, transferred, report, time.perf_counter() - start)


def remote_query(binding: RemoteBinding, q: UserQuery | None, connect: Connect) -> tuple[QueryOutcome, LoadReport]:
    if binding.grant.expired():
        raise AccessDenied("the access grant for this binding has expired")
    return connect(binding.grant.sender_repo_uri).remote_query(binding.replicaset.replicaset_id, q,
                                                               binding.grant.api_key)


def materialize_binding(engine: Engine, bindings: BindingStore, replicaset_id: str) -> LoadReport:
    """Turn a remote binding into local pointers loaded from the original sources."""
    binding = bindings.get(replicaset_id)
    if binding is None:
        raise UnknownReplicaSet(f"no remote binding for {replicaset_id}")
    report, _ = engine.selective_load(binding.replicaset, None)
    bindings.unbind(replicaset_id)
    return report
