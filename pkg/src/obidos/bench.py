"""Benchmark driver: eager, lazy and hybrid loading on generated corpora, emitted as CSV rows.

Traffic counters are the primary metric; wall-clock is reported but depends on the
machine. Corpora are cached under the work directory and keyed by their parameters.
"""

from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .etl import EagerEtl, Engine, LazyEtl, LoadReport
from .model import ReplicaSet, UserQuery, VirtualReplica, Predicate
from .repository import Repository
from .sharing import ShareEnvelope, measure_share_size
from .source import (
    DESCRIPTOR_FILE,
    FilesystemSource,
    RemoteProfile,
    RemoteSource,
    Source,
    generate_synthetic_source,
)

logger = logging.getLogger(__name__)

CSV_HEADER = ("experiment", "mode", "param", "metadata_bytes", "blob_bytes", "requests", "elapsed_ms", "run")
STUDIES_PER_COLLECTION = 8  # 4 patients x 2 studies


@dataclass
class BenchRow:
    experiment: str
    mode: str
    param: int
    metadata_bytes: int
    blob_bytes: int
    requests: int
    elapsed_ms: float
    run: int = 0

    @classmethod
    def from_report(cls, experiment: str, mode: str, param: int, report: LoadReport, run: int = 0,
                    extra_delay: float = 0.0) -> BenchRow:
        total = report.total
        return cls(experiment, mode, param, total.metadata_bytes, total.blob_bytes, total.requests,
                   round((report.elapsed + extra_delay) * 1000, 3), run)


@dataclass
class BenchConfig:
    workdir: Path
    seed: int = 7
    image_size_bytes: int = 8 * 1024
    runs: int = 1
    remote: RemoteProfile = field(default_factory=RemoteProfile)
    sleep: bool = False  # remote delays are simulated and added to elapsed_ms instead of slept


def write_csv(rows: Iterable[BenchRow], out=None) -> str:
    buf = out if out is not None else io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow([getattr(row, name) for name in CSV_HEADER])
    return buf.getvalue() if out is None else ""


def read_csv(text: str) -> list[BenchRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected bench header {reader.fieldnames}")
    types = {f.name: f.type for f in fields(BenchRow)}
    conv = {"int": int, "float": float, "str": str}
    return [BenchRow(**{k: conv[str(types[k])](v) for k, v in rec.items()}) for rec in reader]


# corpora


def corpus_counts(studies: int) -> tuple[int, int, int, int, int]:
    if studies % STUDIES_PER_COLLECTION:
        raise ValueError(f"study counts must be multiples of {STUDIES_PER_COLLECTION}")
    return (studies // STUDIES_PER_COLLECTION, 4, 2, 2, 2)


def corpus(cfg: BenchConfig, counts: Sequence[int], image_size: int | None = None,
           source_id: str = "bench") -> FilesystemSource:
    image_size = cfg.image_size_bytes if image_size is None else image_size
    name = f"{source_id}-{'x'.join(map(str, counts))}-{image_size}-{cfg.seed}"
    root = Path(cfg.workdir) / "corpora" / name
    if (root / DESCRIPTOR_FILE).exists():
        return FilesystemSource(root)
    return generate_synthetic_source(root, counts, seed=cfg.seed, image_size_bytes=image_size,
                                     source_id=source_id)


def study_corpus(cfg: BenchConfig, studies: int) -> FilesystemSource:
    return corpus(cfg, corpus_counts(studies))


def collections_rs(source: Source, k: int) -> ReplicaSet:
    replicas = [VirtualReplica(source.source_id, source.schema.path([f"C{i}"])) for i in range(1, k + 1)]
    return ReplicaSet.create("bench", replicas)


CT_SERIES_WITH_IMAGES = UserQuery("series", (Predicate("modality", "=", "CT"),), include_binary=True)
ALL_IMAGE_METADATA = UserQuery("image")


def _remote(cfg: BenchConfig, source: Source, remote: bool) -> Source:
    return RemoteSource(source, cfg.remote, sleep=cfg.sleep) if remote else source


def _delay(source: Source) -> float:
    return source.simulated_delay if isinstance(source, RemoteSource) and not source.sleep else 0.0


def _measure(fn: Callable[[], LoadReport], source: Source) -> tuple[LoadReport, float]:
    before = _delay(source)
    report = fn()
    return report, _delay(source) - before


def run_modes(cfg: BenchConfig, experiment: str, param: int, base: FilesystemSource, rs: ReplicaSet,
              q: UserQuery, run: int, remote: bool = False, modes: Sequence[str] = ("Hybrid", "Eager", "Lazy")) -> list[BenchRow]:
    """One measurement per mode; every mode starts from an empty repository."""
    rows = []
    for mode in modes:
        src = _remote(cfg, FilesystemSource(base.root), remote)
        if mode == "Hybrid":
            engine = Engine(Repository(), sources=[src])
            report, delay = _measure(lambda: engine.selective_load(rs, q)[0], src)
        elif mode == "Eager":
            eager = EagerEtl([src])

            def both():
                return eager.load().merge(eager.query(q)[0])

            report, delay = _measure(both, src)
        else:
            lazy = LazyEtl([src])

            def both():
                return lazy.bootstrap().merge(lazy.query(q)[0])

            report, delay = _measure(both, src)
        rows.append(BenchRow.from_report(experiment, mode, param, report, run, delay))
    return rows


# experiments


def vary_total_volume(cfg: BenchConfig, corpora: Sequence[int] = (64, 128, 256, 512), interest: int = 16,
                      remote: bool = False, experiment: str = "vary-total-volume") -> list[BenchRow]:
    rows = []
    for studies in corpora:
        base = study_corpus(cfg, studies)
        rs = collections_rs(base, interest // STUDIES_PER_COLLECTION)
        for run in range(cfg.runs):
            rows += run_modes(cfg, experiment, studies, base, rs, CT_SERIES_WITH_IMAGES, run, remote)
    return rows


def remote_load(cfg: BenchConfig, corpora: Sequence[int] = (64, 128, 256, 512), interest: int = 16) -> list[BenchRow]:
    return vary_total_volume(cfg, corpora, interest, remote=True, experiment="remote-load")


def vary_interest(cfg: BenchConfig, studies: int = 128, fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0)) -> list[BenchRow]:
    """Param is the number of studies covered by the replicaset."""
    base = study_corpus(cfg, studies)
    total = studies // STUDIES_PER_COLLECTION
    rows = []
    for frac in fractions:
        k = max(1, round(total * frac))
        rs = collections_rs(base, k)
        for run in range(cfg.runs):
            rows += run_modes(cfg, "vary-interest", k * STUDIES_PER_COLLECTION, base, rs, ALL_IMAGE_METADATA, run,
                              modes=("Hybrid", "Lazy"))
    return rows


def repeat_query(cfg: BenchConfig, studies: int = 128, interest: int = 16, repeats: int = 3) -> list[BenchRow]:
    """Param is the repetition number (1 = first run). Each mode keeps its state across repetitions."""
    base = study_corpus(cfg, studies)
    rs = collections_rs(base, interest // STUDIES_PER_COLLECTION)
    q = CT_SERIES_WITH_IMAGES
    rows = []
    for run in range(cfg.runs):
        src = FilesystemSource(base.root)
        engine = Engine(Repository(), sources=[src])
        for i in range(1, repeats + 1):
            rows.append(BenchRow.from_report("repeat-query", "Hybrid", i, engine.selective_load(rs, q)[0], run))
        src = FilesystemSource(base.root)
        lazy = LazyEtl([src])
        first = lazy.bootstrap()
        for i in range(1, repeats + 1):
            report = lazy.query(q)[0]
            rows.append(BenchRow.from_report("repeat-query", "Lazy", i, first.merge(report) if i == 1 else report, run))
        src = FilesystemSource(base.root)
        eager = EagerEtl([src])
        first = eager.load()
        for i in range(1, repeats + 1):
            report = eager.query(q)[0]
            rows.append(BenchRow.from_report("repeat-query", "Eager", i, first.merge(report) if i == 1 else report, run))
    return rows


@dataclass
class ShareMeasurement:
    series: int
    id_only_bytes: int
    full_bytes: int
    binary_bytes: int


SHARE_COUNTS = (1, 5, 4, 5, 3)  # 100 series, 3 images each


def share_volume(cfg: BenchConfig, series_counts: Sequence[int] = tuple(range(10, 101, 10)),
                 image_size: int = 512 * 1024, sender_uri: str = "http://sender.example:8700",
                 sender: str = "org-a", receiver: str = "bob") -> tuple[list[BenchRow], list[ShareMeasurement]]:
    """Envelope sizes for k shared series against the binary volume those series hold."""
    src = corpus(cfg, SHARE_COUNTS, image_size=image_size, source_id="share")
    schema = src.schema
    series_paths = sorted((p for p in src.walk() if p.depth == schema.n), key=lambda p: p.sort_key())
    if max(series_counts) > len(series_paths):
        raise ValueError(f"corpus has only {len(series_paths)} series")
    blob_bytes = {}
    for path in series_paths:
        blob_bytes[path] = sum((src.root.joinpath(*path.ids) / f"{img}.blob").stat().st_size
                               for img in src.list_children(path))
    rows, measurements = [], []
    for k in series_counts:
        chosen = series_paths[:k]
        rs = ReplicaSet.create("alice", [VirtualReplica(src.source_id, p) for p in chosen])
        id_only = measure_share_size(ShareEnvelope.id_only(rs.replicaset_id, sender_uri, sender, receiver))
        full = measure_share_size(ShareEnvelope.full(rs, sender, receiver))
        binary = sum(blob_bytes[p] for p in chosen)
        measurements.append(ShareMeasurement(k, id_only, full, binary))
        rows += [
            BenchRow("share-volume", "IdOnly", k, id_only, 0, 1, 0.0),
            BenchRow("share-volume", "Full", k, full, 0, 1, 0.0),
            BenchRow("share-volume", "Binary", k, 0, binary, 0, 0.0),
        ]
    return rows, measurements


EXPERIMENTS: dict[str, Callable[[BenchConfig], list[BenchRow]]] = {
    "vary-total-volume": vary_total_volume,
    "vary-interest": vary_interest,
    "remote-load": remote_load,
    "repeat-query": repeat_query,
    "share-volume": lambda cfg: share_volume(cfg)[0],
}


def run_experiment(name: str, cfg: BenchConfig) -> list[BenchRow]:
    try:
        fn = EXPERIMENTS[name]
    except KeyError:
        raise ValueError(f"unknown experiment {name!r}; pick one of {sorted(EXPERIMENTS)}") from None
    start = time.perf_counter()
    rows = fn(cfg)
    logger.info("%s: %d rows in %.1fs", name, len(rows), time.perf_counter() - start)
    return rows


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares ``(slope, intercept, r_squared)``."""
    slope, intercept = statistics.linear_regression(xs, ys)
    r2 = 1.0 if len(set(ys)) == 1 else statistics.correlation(xs, ys) ** 2
    return slope, intercept, r2


def as_dicts(rows: Iterable[BenchRow]) -> list[dict]:
    return [asdict(r) for r in rows]
