from __future__ import annotations

from pathlib import Path

import pytest

from obidos.etl import Engine
from obidos.model import DEFAULT_SCHEMA, ReplicaSet, VirtualReplica
from obidos.repository import Repository
from obidos.source import FilesystemSource, generate_synthetic_source

SMALL = (2, 2, 2, 2, 2)  # 2 collections, 4 patients, 8 studies, 16 series, 32 images


@pytest.fixture(scope="session")
def small_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("corpus") / "src1"
    generate_synthetic_source(root, SMALL, seed=11, image_size_bytes=1024, source_id="src1")
    return root


@pytest.fixture
def src(small_root) -> FilesystemSource:
    """Fresh connector (fresh counters) over the shared read-only corpus."""
    return FilesystemSource(small_root)


@pytest.fixture
def engine(src) -> Engine:
    return Engine(Repository(), sources=[src])


def P(text: str):
    return DEFAULT_SCHEMA.path(text)


def vr(path: str = "", source: str = "src1") -> VirtualReplica:
    return VirtualReplica(source, P(path))


def rs_of(*paths: str, source: str = "src1", owner: str = "alice") -> ReplicaSet:
    return ReplicaSet.create(owner, [vr(p, source) for p in paths])


class Fleet:
    """Instances wired to each other in-process; ``connect(uri)`` resolves to the matching LocalSender."""

    def __init__(self, corpus: Path, names=("a", "b"), roots: dict | None = None):
        from obidos.service import Instance, InstanceConfig, KeyConfig, LocalSender

        self.instances = {}
        keys = [KeyConfig("ka", "alice"), KeyConfig("kb", "bob"), KeyConfig("kr", "root", admin=True)]
        for name in names:
            cfg = InstanceConfig(name, (roots or {}).get(name), public_uri=f"mem://{name}", keys=keys)
            self.instances[name] = Instance(cfg, connect=self.connect, sources=[FilesystemSource(corpus)])
        self._senders = {f"mem://{n}": LocalSender(i) for n, i in self.instances.items()}

    def connect(self, uri: str):
        from obidos.errors import SenderUnavailable

        try:
            return self._senders[uri]
        except KeyError:
            raise SenderUnavailable(f"nothing listens at {uri}") from None

    def __getitem__(self, name: str):
        return self.instances[name]

    def key(self, name: str, token: str):
        return self.instances[name].keys.authenticate(token)

    def close(self):
        for inst in self.instances.values():
            inst.close()


@pytest.fixture
def fleet(small_root):
    f = Fleet(small_root)
    yield f
    f.close()


class LiveServer:
    """A real uvicorn server for one Instance on its configured port, in a background thread."""

    def __init__(self, instance):
        import threading
        import time

        import uvicorn

        from obidos.service import create_app

        self.port = instance.config.port
        self.url = f"http://127.0.0.1:{self.port}"
        self.instance = instance
        config = uvicorn.Config(create_app(instance), host="127.0.0.1", port=self.port, log_level="warning")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server did not start")
            time.sleep(0.01)

    def stop(self):
        self.server.should_exit = True
        self.thread.join(10)


def free_port() -> int:
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def live_pair(corpus: Path, tmp: Path | None = None):
    """Two instances over the same corpus, each behind its own HTTP server, talking over real sockets."""
    from obidos.service import Instance, InstanceConfig, KeyConfig

    keys = [KeyConfig("ka", "alice"), KeyConfig("kb", "bob"), KeyConfig("kr", "root", admin=True)]
    servers = []
    for name in ("a", "b"):
        port = free_port()
        cfg = InstanceConfig(name, tmp / name if tmp else None, port=port, keys=keys)
        inst = Instance(cfg, sources=[FilesystemSource(corpus)])
        servers.append(LiveServer(inst))
    return servers


@pytest.fixture
def live(small_root):
    servers = live_pair(small_root)
    yield servers
    for s in servers:
        s.stop()
        s.instance.close()


# acceptance reporting: one line per criterion at the end of the run

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
