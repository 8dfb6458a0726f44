"""One deployable instance: config, api keys, the replicaset CRUD logic and its HTTP surface.

:class:`Instance` holds all behaviour and is usable in-process; :func:`create_app`
is a thin FastAPI layer over it and :class:`ServiceClient` the matching httpx client.
"""

from __future__ import annotations

import logging
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal

import httpx
from fastapi import Body, Depends, FastAPI, Header, Request
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import (
    AccessDenied,
    DeserializeError,
    DuplicateReplicaSet,
    InvalidPath,
    InvalidQuery,
    InvalidRecord,
    InvalidReplicaSet,
    ObidosError,
    PathNotFound,
    SenderUnavailable,
    ShareFailed,
    SourceNotInReplicaSet,
    SourceUnavailable,
    Unauthenticated,
    UnknownReplicaSet,
    UnknownSource,
)
from .etl import Engine, LoadReport
from .model import (
    EntryPath,
    QueryOutcome,
    ReplicaSet,
    UserQuery,
    VirtualReplica,
    now_ms,
    serialize_replicaset,
)
from .sharing import (
    AccessGrant,
    BindingStore,
    Connect,
    ShareEnvelope,
    ShareResult,
    materialize_binding,
    remote_query,
    share_replicaset,
)
from .source import RemoteProfile, Source, open_source

logger = logging.getLogger(__name__)

API_KEY_HEADER = "X-API-Key"


# configuration


@dataclass(frozen=True)
class SourceConfig:
    root: Path
    remote: RemoteProfile | None = None


@dataclass(frozen=True)
class KeyConfig:
    key: str
    user: str
    admin: bool = False


@dataclass
class InstanceConfig:
    instance_id: str
    repository: Path | None
    host: str = "127.0.0.1"
    port: int = 8700
    public_uri: str = ""
    sources: list[SourceConfig] = field(default_factory=list)
    keys: list[KeyConfig] = field(default_factory=list)
    remote: RemoteProfile = field(default_factory=RemoteProfile)
    durable: bool = False

    def __post_init__(self):
        if not self.public_uri:
            self.public_uri = f"http://{self.host}:{self.port}"

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> InstanceConfig:
        base = base or Path.cwd()

        def resolve(p: str) -> Path:
            path = Path(p).expanduser()
            return path if path.is_absolute() else base / path

        remote = RemoteProfile(**data.get("remote", {}))
        sources = []
        for item in data.get("sources", []):
            flag = item.get("remote", False)
            if isinstance(flag, dict):
                profile = RemoteProfile(**flag)
            else:
                profile = remote if flag else None
            sources.append(SourceConfig(resolve(item["root"]), profile))
        keys = [KeyConfig(str(k["key"]), str(k["user"]), bool(k.get("admin", False))) for k in data.get("keys", [])]
        repo = data.get("repository")
        return cls(
            instance_id=str(data["instance_id"]),
            repository=resolve(repo) if repo else None,
            host=data.get("host", "127.0.0.1"),
            port=int(data.get("port", 8700)),
            public_uri=data.get("public_uri", ""),
            sources=sources,
            keys=keys,
            remote=remote,
            durable=bool(data.get("durable", False)),
        )

    @classmethod
    def load(cls, path: str | Path) -> InstanceConfig:
        path = Path(path)
        return cls.from_dict(tomllib.loads(path.read_text()), base=path.parent)


# api keys


@dataclass(frozen=True)
class ApiKey:
    key: str
    user: str
    admin: bool = False
    scope: frozenset[str] | None = None  # None: the user's own replicasets; otherwise a grant's
    expiry: int | None = None

    @property
    def is_grant(self) -> bool:
        return self.scope is not None


class KeyStore:
    """Configured user keys plus journaled access grants."""

    def __init__(self, keys: list[KeyConfig], journal=None):
        self.journal = journal
        self._lock = threading.Lock()
        self._keys: dict[str, ApiKey] = {k.key: ApiKey(k.key, k.user, k.admin) for k in keys}
        if journal is not None:
            for rec in journal.records():
                if rec.get("t") == "svc.grant":
                    self._keys[rec["key"]] = ApiKey(rec["key"], rec["user"], False, frozenset(rec["scope"]), rec["exp"])
                elif rec.get("t") == "svc.revoke":
                    self._keys.pop(rec["key"], None)

    def authenticate(self, token: str | None) -> ApiKey:
        if not token:
            raise Unauthenticated("missing api key")
        with self._lock:
            key = self._keys.get(token)
        if key is None:
            raise Unauthenticated("unknown api key")
        if key.expiry is not None and now_ms() >= key.expiry:
            raise Unauthenticated("api key expired")
        return key

    def grant(self, user: str, replicaset_id: str, ttl_seconds: float) -> ApiKey:
        key = ApiKey(secrets.token_hex(16), f"grant:{user}", False, frozenset({replicaset_id}),
                     now_ms() + int(ttl_seconds * 1000))
        with self._lock:
            if self.journal is not None:
                self.journal.append({"t": "svc.grant", "key": key.key, "user": key.user,
                                     "scope": sorted(key.scope), "exp": key.expiry})
            self._keys[key.key] = key
        return key

    def revoke(self, token: str) -> bool:
        with self._lock:
            key = self._keys.get(token)
            if key is None or not key.is_grant:
                return False
            if self.journal is not None:
                self.journal.append({"t": "svc.revoke", "key": token})
            del self._keys[token]
            return True


# the instance


class Instance:
    def __init__(self, config: InstanceConfig, connect: Connect | None = None,
                 sources: list[Source] | None = None, sleep: bool = True):
        self.config = config
        if sources is None:
            sources = [open_source(s.root, s.remote, sleep=sleep) for s in config.sources]
        self.engine = Engine.open(config.repository, sources, durable=config.durable)
        journal = self.engine.repository.journal
        self.keys = KeyStore(config.keys, journal)
        self.bindings = BindingStore(journal)
        self.connect: Connect = connect or (lambda uri: ServiceClient(uri))
        self._last_query: dict[str, UserQuery | None] = {}
        for rec in journal.records():
            if rec.get("t") == "svc.lastq":
                self._last_query[rec["id"]] = UserQuery.from_json(rec["q"]) if rec["q"] else None

    @property
    def instance_id(self) -> str:
        return self.config.instance_id

    @property
    def holder(self):
        return self.engine.holder

    @property
    def repository(self):
        return self.engine.repository

    def close(self) -> None:
        self.engine.close()

    # parsing helpers

    def parse_replica(self, item: Any) -> VirtualReplica:
        """Accepts ``"src:C1/P1"``, ``{"source": .., "path": "C1/P1"}`` or the canonical list form."""
        if isinstance(item, str):
            sid, _, raw = item.partition(":")
            item = {"source": sid, "path": raw}
        if not isinstance(item, dict) or "source" not in item:
            raise InvalidReplicaSet(f"cannot read a virtual replica from {item!r}")
        sid = str(item["source"])
        schema = self.engine.source(sid).schema
        raw = item.get("path", "")
        if isinstance(raw, str):
            path = schema.path(raw)
        else:
            try:
                path = EntryPath.from_json(raw)
            except (TypeError, ValueError) as exc:
                raise InvalidPath(f"bad path {raw!r}: {exc}") from None
        schema.validate(path)
        return VirtualReplica(sid, path)

    def _replicas(self, items: list) -> list[VirtualReplica]:
        if not items:
            raise InvalidReplicaSet("a replicaset needs at least one virtual replica")
        return [self.parse_replica(i) for i in items]

    # authorization

    def _authorize(self, key: ApiKey, replicaset_id: str, write: bool = False) -> None:
        if key.admin:
            return
        if key.is_grant:
            if write or replicaset_id not in key.scope:
                raise AccessDenied(f"key is not scoped to {'modify ' if write else ''}{replicaset_id}")
            return
        if replicaset_id in self.holder.list_user(key.user):
            return
        if replicaset_id in self.holder.replicaset_map or replicaset_id in self.bindings:
            raise AccessDenied(f"{key.user} does not hold {replicaset_id}")
        raise UnknownReplicaSet(replicaset_id)

    def _user_only(self, key: ApiKey) -> None:
        if key.is_grant:
            raise AccessDenied("access grants cannot do this")

    def _remember(self, replicaset_id: str, q: UserQuery | None) -> None:
        if self._last_query.get(replicaset_id, ...) == q:
            return
        self.repository.journal.append({"t": "svc.lastq", "id": replicaset_id, "q": q.to_json() if q else None})
        self._last_query[replicaset_id] = q

    # replicaset CRUD

    def create_replicaset(self, key: ApiKey, replicas: list, query: dict | None = None) -> dict:
        self._user_only(key)
        rs = ReplicaSet.create(key.user, self._replicas(replicas))
        q = UserQuery.from_json(query) if query else None
        for vr in rs.replicas:
            if q is not None:
                self.engine.source(vr.source_id).schema.depth_of(q.target_level)
        self.holder.register(key.user, rs)
        try:
            report, outcome = self.engine.selective_load(rs, q)
        except PathNotFound:
            self.holder.unregister(key.user, rs.replicaset_id)
            raise
        self._remember(rs.replicaset_id, q)
        return {"replicaset": rs.to_json(), "report": report.to_json(), "outcome": outcome.to_json()}

    def get_replicaset(self, key: ApiKey, replicaset_id: str, refresh: bool = True) -> dict:
        self._authorize(key, replicaset_id)
        binding = self.bindings.get(replicaset_id)
        if binding is not None and replicaset_id not in self.holder.replicaset_map:
            return {"replicaset": binding.replicaset.to_json(), "remote": binding.grant.sender_repo_uri,
                    "loaded": {}, "refresh": None, "outcome": None}
        entry = self.holder.status(replicaset_id)
        rs = entry.replicaset
        refreshed = None
        if refresh and entry.fully_loaded:
            refreshed = self.engine.refresh(rs).to_json()
        q = self._last_query.get(replicaset_id)
        outcome = self.repository.repo_query(q, rs)
        return {
            "replicaset": rs.to_json(),
            "remote": binding.grant.sender_repo_uri if binding else None,
            "loaded": {str(vr): flag for vr, flag in entry.loaded.items()},
            "refresh": refreshed,
            "query": q.to_json() if q else None,
            "outcome": outcome.to_json(),
        }

    def update_replicaset(self, key: ApiKey, replicaset_id: str, replicas: list) -> dict:
        self._user_only(key)
        self._authorize(key, replicaset_id, write=True)
        old = self.holder.resolve(replicaset_id)
        new = old.with_replicas(self._replicas(replicas))
        added = [vr for vr in new.replicas if vr not in old.replicas]
        removed = [vr for vr in old.replicas if vr not in new.replicas]
        self.holder.update(new)
        report = LoadReport()
        if added:
            # only the new pointers are loaded; removed ones are left for gc
            try:
                report, _ = self.engine.selective_load(new.with_replicas(added), self._last_query.get(replicaset_id))
            except PathNotFound:
                self.holder.update(old)
                raise
        return {
            "replicaset": new.to_json(),
            "added": [str(vr) for vr in added],
            "removed": [str(vr) for vr in removed],
            "report": report.to_json(),
        }

    def delete_replicaset(self, key: ApiKey, replicaset_id: str) -> dict:
        self._user_only(key)
        self._authorize(key, replicaset_id, write=True)
        users = self.holder.holders_of(replicaset_id) if key.admin else [key.user]
        for user in users:
            self.holder.unregister(user, replicaset_id)
        if replicaset_id not in self.holder.replicaset_map:
            self.bindings.unbind(replicaset_id)
        return {"deleted": replicaset_id, "users": users}

    # query, share, gc

    def query(self, key: ApiKey, replicaset_id: str, query: dict | None, force_load: bool = False) -> dict:
        q = UserQuery.from_json(query) if query else None
        self._authorize(key, replicaset_id)
        binding = self.bindings.get(replicaset_id)
        if binding is not None:
            outcome, report = remote_query(binding, q, self.connect)
            return {"outcome": outcome.to_json(), "report": report.to_json(), "remote": True}
        rs = self.holder.resolve(replicaset_id)
        report, outcome = self.engine.selective_load(rs, q, force_load=force_load)
        if not key.is_grant:
            self._remember(replicaset_id, q)
        return {"outcome": outcome.to_json(), "report": report.to_json(), "remote": False}

    def share(self, key: ApiKey, envelope: ShareEnvelope) -> ShareResult:
        self._user_only(key)
        if not key.admin and envelope.receiver_user != key.user:
            raise AccessDenied("envelopes can only be imported by their receiver")
        return share_replicaset(self.engine, self.bindings, envelope, self.connect, self.instance_id)

    def make_envelope(self, key: ApiKey, replicaset_id: str, receiver_user: str, kind: str = "id",
                      grant_ttl: float | None = None) -> ShareEnvelope:
        """Sender side: package one of the caller's replicasets for a receiver."""
        self._user_only(key)
        self._authorize(key, replicaset_id)
        grant = self.create_grant(key, replicaset_id, grant_ttl) if grant_ttl else None
        if kind == "id":
            return ShareEnvelope.id_only(replicaset_id, self.config.public_uri, self.instance_id, receiver_user, grant)
        rs = self.holder.resolve(replicaset_id)
        return ShareEnvelope.full(rs, self.instance_id, receiver_user, grant, self.config.public_uri)

    def create_grant(self, key: ApiKey, replicaset_id: str, ttl_seconds: float = 3600) -> AccessGrant:
        self._user_only(key)
        self._authorize(key, replicaset_id)
        granted = self.keys.grant(key.user, replicaset_id, ttl_seconds)
        return AccessGrant(granted.key, self.config.public_uri, granted.expiry)

    def revoke_grant(self, key: ApiKey, token: str) -> bool:
        self._user_only(key)
        return self.keys.revoke(token)

    def shared_replicaset(self, replicaset_id: str) -> bytes:
        """The id-only lookup: knowing a 128-bit id is what lets a receiver resolve it."""
        return serialize_replicaset(self.holder.resolve(replicaset_id))

    def materialize(self, key: ApiKey, replicaset_id: str) -> dict:
        self._user_only(key)
        self._authorize(key, replicaset_id)
        report = materialize_binding(self.engine, self.bindings, replicaset_id)
        return {"replicaset_id": replicaset_id, "report": report.to_json()}

    def gc(self, key: ApiKey) -> dict:
        if not key.admin:
            raise AccessDenied("gc needs an admin key")
        return {"removed": self.engine.gc()}


class LocalSender:
    """In-process stand-in for a remote instance, used when no HTTP hop is wanted."""

    def __init__(self, instance: Instance):
        self.instance = instance

    def fetch_replicaset(self, replicaset_id: str) -> bytes:
        return self.instance.shared_replicaset(replicaset_id)

    def check_access(self, replicaset_id: str, api_key: str) -> None:
        self.instance._authorize(self.instance.keys.authenticate(api_key), replicaset_id)

    def remote_query(self, replicaset_id: str, q: UserQuery | None, api_key: str) -> tuple[QueryOutcome, LoadReport]:
        body = self.instance.query(self.instance.keys.authenticate(api_key), replicaset_id, q.to_json() if q else None)
        return QueryOutcome.from_json(body["outcome"]), LoadReport.from_json(body["report"])


# HTTP

STATUS = [
    (Unauthenticated, 401),
    (AccessDenied, 403),
    (UnknownReplicaSet, 404),
    (DuplicateReplicaSet, 409),
    ((InvalidReplicaSet, InvalidQuery, InvalidPath, InvalidRecord, DeserializeError, UnknownSource,
      SourceNotInReplicaSet, PathNotFound), 422),
    ((ShareFailed, SenderUnavailable), 502),
    (SourceUnavailable, 503),
]


def status_for(exc: ObidosError) -> int:
    for kinds, code in STATUS:
        if isinstance(exc, kinds):
            return code
    return 500


class ReplicaSetBody(BaseModel):
    replicas: list[Any] = Field(min_length=1)
    query: dict | None = None


class QueryBody(BaseModel):
    replicaset_id: str
    query: dict | None = None
    force_load: bool = False


class GrantBody(BaseModel):
    replicaset_id: str
    ttl_seconds: float = Field(default=3600, gt=0)


class EnvelopeBody(BaseModel):
    replicaset_id: str
    receiver_user: str
    kind: Literal["id", "full"] = "id"
    grant_ttl: float | None = Field(default=None, gt=0)


def create_app(instance: Instance) -> FastAPI:
    app = FastAPI(title="obidos", version="0.1.0")

    @app.exception_handler(ObidosError)
    async def domain_error(request: Request, exc: ObidosError):
        return JSONResponse({"error": type(exc).__name__, "detail": str(exc)}, status_code=status_for(exc))

    def auth(x_api_key: str | None = Header(default=None)) -> ApiKey:
        return instance.keys.authenticate(x_api_key)

    @app.get("/health")
    def health():
        return {"instance_id": instance.instance_id, "ok": True}

    @app.post("/replicasets", status_code=201)
    def create(body: ReplicaSetBody, key: ApiKey = Depends(auth)):
        return instance.create_replicaset(key, body.replicas, body.query)

    @app.get("/replicasets/{replicaset_id}")
    def get(replicaset_id: str, refresh: bool = True, key: ApiKey = Depends(auth)):
        return instance.get_replicaset(key, replicaset_id, refresh)

    @app.put("/replicasets/{replicaset_id}")
    def update(replicaset_id: str, body: ReplicaSetBody, key: ApiKey = Depends(auth)):
        return instance.update_replicaset(key, replicaset_id, body.replicas)

    @app.delete("/replicasets/{replicaset_id}")
    def delete(replicaset_id: str, key: ApiKey = Depends(auth)):
        return instance.delete_replicaset(key, replicaset_id)

    @app.post("/query")
    def query(body: QueryBody, key: ApiKey = Depends(auth)):
        return instance.query(key, body.replicaset_id, body.query, body.force_load)

    @app.post("/share")
    def share(envelope: dict = Body(...), key: ApiKey = Depends(auth)):
        return instance.share(key, ShareEnvelope.from_json(envelope)).to_json()

    @app.post("/envelopes")
    def envelope(body: EnvelopeBody, key: ApiKey = Depends(auth)):
        return instance.make_envelope(key, body.replicaset_id, body.receiver_user, body.kind, body.grant_ttl).to_json()

    @app.post("/gc")
    def gc(key: ApiKey = Depends(auth)):
        return instance.gc(key)

    @app.post("/grants", status_code=201)
    def grant(body: GrantBody, key: ApiKey = Depends(auth)):
        return instance.create_grant(key, body.replicaset_id, body.ttl_seconds).to_json()

    @app.delete("/grants/{token}")
    def revoke(token: str, key: ApiKey = Depends(auth)):
        return {"revoked": instance.revoke_grant(key, token)}

    @app.get("/shared/{replicaset_id}")
    def shared(replicaset_id: str):
        return Response(instance.shared_replicaset(replicaset_id), media_type="application/json")

    @app.post("/bindings/{replicaset_id}/materialize")
    def materialize(replicaset_id: str, key: ApiKey = Depends(auth)):
        return instance.materialize(key, replicaset_id)

    return app


class ApiError(ObidosError):
    def __init__(self, status: int, detail: str):
        super().__init__(f"HTTP {status}: {detail}")
        self.status = status


_BY_STATUS: dict[int, Callable[[str], ObidosError]] = {
    401: Unauthenticated,
    403: AccessDenied,
    404: UnknownReplicaSet,
    409: DuplicateReplicaSet,
}


class ServiceClient:
    """httpx client for one instance; also satisfies the sender side of sharing."""

    def __init__(self, base_url: str, api_key: str | None = None, timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.http = httpx.Client(base_url=self.base_url, timeout=timeout, transport=transport)

    def close(self) -> None:
        self.http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _call(self, method: str, url: str, key: str | None = None, **kwargs) -> httpx.Response:
        headers = dict(kwargs.pop("headers", None) or {})
        token = key if key is not None else self.api_key
        if token:
            headers[API_KEY_HEADER] = token
        try:
            resp = self.http.request(method, url, headers=headers, **kwargs)
        except httpx.HTTPError as exc:
            raise SenderUnavailable(f"{self.base_url} unreachable: {exc}") from exc
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            if not isinstance(detail, str):
                detail = str(detail)
            factory = _BY_STATUS.get(resp.status_code)
            raise factory(detail) if factory else ApiError(resp.status_code, detail)
        return resp

    def _json(self, method: str, url: str, **kwargs) -> dict:
        return self._call(method, url, **kwargs).json()

    def health(self) -> dict:
        return self._json("GET", "/health")

    def create_replicaset(self, replicas: list, query: UserQuery | dict | None = None) -> dict:
        return self._json("POST", "/replicasets", json={"replicas": replicas, "query": _query(query)})

    def get_replicaset(self, replicaset_id: str, refresh: bool = True) -> dict:
        return self._json("GET", f"/replicasets/{replicaset_id}", params={"refresh": str(refresh).lower()})

    def update_replicaset(self, replicaset_id: str, replicas: list) -> dict:
        return self._json("PUT", f"/replicasets/{replicaset_id}", json={"replicas": replicas})

    def delete_replicaset(self, replicaset_id: str) -> dict:
        return self._json("DELETE", f"/replicasets/{replicaset_id}")

    def query(self, replicaset_id: str, query: UserQuery | dict | None, force_load: bool = False) -> dict:
        return self._json("POST", "/query", json={"replicaset_id": replicaset_id, "query": _query(query),
                                                  "force_load": force_load})

    def share(self, envelope: ShareEnvelope) -> dict:
        return self._json("POST", "/share", content=envelope.to_bytes(),
                          headers={"Content-Type": "application/json"})

    def make_envelope(self, replicaset_id: str, receiver_user: str, kind: str = "id",
                      grant_ttl: float | None = None) -> ShareEnvelope:
        body = self._json("POST", "/envelopes", json={"replicaset_id": replicaset_id, "receiver_user": receiver_user,
                                                      "kind": kind, "grant_ttl": grant_ttl})
        return ShareEnvelope.from_json(body)

    def gc(self) -> dict:
        return self._json("POST", "/gc")

    def create_grant(self, replicaset_id: str, ttl_seconds: float = 3600) -> AccessGrant:
        return AccessGrant.from_json(self._json("POST", "/grants", json={"replicaset_id": replicaset_id,
                                                                         "ttl_seconds": ttl_seconds}))

    def revoke_grant(self, token: str) -> bool:
        return self._json("DELETE", f"/grants/{token}")["revoked"]

    def materialize(self, replicaset_id: str) -> dict:
        return self._json("POST", f"/bindings/{replicaset_id}/materialize")

    # sender side of sharing

    def fetch_replicaset(self, replicaset_id: str) -> bytes:
        return self._call("GET", f"/shared/{replicaset_id}", key="").content

    def check_access(self, replicaset_id: str, api_key: str) -> None:
        self._call("GET", f"/replicasets/{replicaset_id}", key=api_key, params={"refresh": "false"})

    def remote_query(self, replicaset_id: str, q: UserQuery | None, api_key: str) -> tuple[QueryOutcome, LoadReport]:
        body = self._call("POST", "/query", key=api_key,
                          json={"replicaset_id": replicaset_id, "query": _query(q)}).json()
        return QueryOutcome.from_json(body["outcome"]), LoadReport.from_json(body["report"])


def _query(q: UserQuery | dict | None) -> dict | None:
    return q.to_json() if isinstance(q, UserQuery) else q


def serve(instance: Instance, host: str | None = None, port: int | None = None) -> None:
    import uvicorn

    uvicorn.run(create_app(instance), host=host or instance.config.host, port=port or instance.config.port,
                log_level="info")
