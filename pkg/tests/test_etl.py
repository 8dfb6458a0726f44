import threading

import pytest

from conftest import P, rs_of, vr
from obidos.errors import InvalidQuery, SourceUnavailable
from obidos.etl import EagerEtl, Engine, LazyEtl, PartialLoad, eager_etl, is_null, lazy_etl_bootstrap
from obidos.model import Predicate, UserQuery
from obidos.repository import Repository
from obidos.source import FaultySource, FilesystemSource, generate_synthetic_source, touch_metadata

STUDY = UserQuery("study")
SERIES = UserQuery("series")
CT_IMAGES = UserQuery("series", (Predicate("modality", "=", "CT"),), include_binary=True)


def corpus_bytes(root):
    meta = sum(p.stat().st_size for p in root.rglob("*") if p.name == "meta.json" or p.suffix == ".meta")
    blobs = sum(p.stat().st_size for p in root.rglob("*.blob"))
    return meta, blobs


# Algorithm 1 call sequences


def traced(engine):
    engine.trace = []
    return engine.trace


def test_trace_fresh_load(engine):
    rs = rs_of("C1", "C2/P1")
    trace = traced(engine)
    engine.selective_load(rs, STUDY)
    a, b = vr("C1"), vr("C2/P1")
    assert trace == [("get", a, False), ("loadData", a), ("put", a), ("delete", a),
                     ("get", b, False), ("loadData", b), ("put", b), ("delete", b)]


def test_trace_holder_hit_complete(engine):
    rs = rs_of("C1", "C2/P1")
    engine.selective_load(rs, STUDY)
    trace = traced(engine)
    report, outcome = engine.selective_load(rs, STUDY)
    assert trace == [("get", vr("C1"), True), ("get", vr("C2/P1"), True), ("query", False)]
    assert report.served_from_repository and report.total.is_zero() and outcome.complete


def test_trace_holder_hit_incomplete_reloads_to_load_set(engine):
    rs = rs_of("C1", "C2/P1")
    engine.selective_load(rs, None)
    trace = traced(engine)
    _, outcome = engine.selective_load(rs, CT_IMAGES)
    a, b = vr("C1"), vr("C2/P1")
    assert trace == [("get", a, True), ("get", b, True), ("query", True), ("loadData", a), ("loadData", b)]
    assert outcome.complete and outcome.blob_refs_resolved


def test_trace_null_query(engine):
    rs = rs_of("C1")
    trace = traced(engine)
    report, outcome = engine.selective_load(rs, None)
    assert trace == [("get", vr("C1"), False), ("loadData", vr("C1")), ("put", vr("C1")), ("delete", vr("C1"))]
    assert report.proxies_created > 0 and report.records_promoted == 0 and report.blobs_loaded == 0
    assert outcome.rows == () and outcome.complete


def test_trace_partial_failure_then_redo(small_root):
    base = FilesystemSource(small_root)
    faulty = FaultySource(base, fail_when=lambda kind, path: path.depth and path.ids[0] == "C2")
    engine = Engine(Repository(), sources=[faulty])
    rs = rs_of("C1", "C2")
    trace = traced(engine)
    with pytest.raises(PartialLoad) as info:
        engine.selective_load(rs, STUDY)
    a, b = vr("C1"), vr("C2")
    assert trace == [("get", a, False), ("loadData", a), ("put", a), ("delete", a), ("get", b, False), ("loadData", b)]
    assert info.value.report.load_calls == 2 and info.value.report.records_promoted > 0
    assert engine.holder.holder_get(a) and not engine.holder.holder_get(b)
    assert isinstance(info.value, SourceUnavailable)

    faulty.fail_when = None
    trace.clear()
    _, outcome = engine.selective_load(rs, STUDY)
    assert trace == [("get", a, True), ("get", b, False), ("loadData", b), ("put", b), ("delete", b), ("query", False)]
    assert outcome.complete and len(outcome.rows) == 8


def test_holder_hit_under_a_different_query_reloads(engine):
    rs = rs_of("C1")
    engine.selective_load(rs, UserQuery("series", (Predicate("modality", "=", "MR"),)))
    trace = traced(engine)
    _, outcome = engine.selective_load(rs, CT_IMAGES)
    assert trace == [("get", vr("C1"), True), ("query", True), ("loadData", vr("C1"))]
    assert outcome.complete and outcome.blob_refs_resolved


def test_force_load_is_a_no_op_when_the_answer_is_complete(engine, src):
    rs = rs_of("C1")
    engine.selective_load(rs, STUDY)
    trace = traced(engine)
    before = src.stats.snapshot()
    _, outcome = engine.selective_load(rs, STUDY, force_load=True)
    assert ("force",) not in trace and outcome.complete
    assert (src.stats.snapshot() - before).is_zero()


def test_unknown_level_rejected_before_any_traffic(engine, src):
    with pytest.raises(InvalidQuery):
        engine.selective_load(rs_of("C1"), UserQuery("slice"))
    assert src.stats.is_zero() and len(engine.repository) == 0


# loadData


def test_load_data_match_all_series_in_collection(engine, src):
    report = engine.load_data(vr("C1"), SERIES)
    repo = engine.repository
    assert {p.path for s, p in repo.proxies()} | {r.path for s, r in repo.records()} == set(src.walk(P("C1"))) | {P("C1")}
    full = {r.path for _, r in repo.records()}
    series = {p for p in src.walk(P("C1")) if p.depth == 4}
    assert series <= full and len(series) == 8
    ancestors = {a for s in series for a in s.ancestors()}
    assert full == series | ancestors
    assert report.records_promoted == len(full)


def test_load_data_null_is_proxies_only(engine):
    report = engine.load_data(vr("C1"), None)
    assert report.records_promoted == 0 and engine.repository.records() == []
    assert report.proxies_created == 1 + 2 + 4 + 8 + 16


def test_load_data_binary_bytes(tmp_path):
    src = generate_synthetic_source(tmp_path / "s", (1, 1, 1, 2, 2), seed=2, image_size_bytes=512 * 1024,
                                    source_id="src1")
    engine = Engine(Repository(), sources=[src])
    report, outcome = engine.selective_load(rs_of(""), CT_IMAGES)
    # one CT series of two, each with two 512 KiB images
    assert len(outcome.rows) == 1
    assert report.total.blob_bytes == 2 * 524288 and report.blobs_loaded == 2
    assert outcome.blob_refs_resolved


def test_load_data_is_idempotent(engine, src):
    engine.load_data(vr("C1"), CT_IMAGES)
    before = engine.repository.state()
    report = engine.load_data(vr("C1"), CT_IMAGES)
    assert engine.repository.state() == before
    assert report.proxies_created == 0 and report.records_promoted == 0 and report.blobs_loaded == 0


# baselines


def test_eager_loads_everything(src, small_root):
    repo = Repository()
    report = eager_etl([src], repo)
    assert report.blobs_loaded == 32 and len(repo.records()) == 2 + 4 + 8 + 16 + 32
    meta, blobs = corpus_bytes(small_root)
    assert report.total.metadata_bytes == meta and report.total.blob_bytes == blobs
    for q in (STUDY, CT_IMAGES, UserQuery("image", (Predicate("code", "<", 300),))):
        out = repo.repo_query(q, rs_of(""))
        assert out.complete and out.blob_refs_resolved


def test_lazy_bootstrap_and_queries(src):
    lazy, boot = lazy_etl_bootstrap([src])
    assert boot.total.blob_bytes == 0 and boot.records_promoted == 62
    first, out1 = lazy.query(CT_IMAGES)
    second, out2 = lazy.query(CT_IMAGES)
    assert first.total.blob_bytes == second.total.blob_bytes > 0
    assert out1 == out2
    meta_only, _ = lazy.query(STUDY)
    assert meta_only.total.is_zero()


def test_hybrid_le_lazy_le_eager(small_root):
    for rs, q in [(rs_of("C1"), CT_IMAGES), (rs_of("C2/P1"), STUDY), (rs_of(""), SERIES), (rs_of("C1/P1/S1"), CT_IMAGES)]:
        totals = {}
        for mode in ("hybrid", "lazy", "eager"):
            src = FilesystemSource(small_root)
            if mode == "hybrid":
                report = Engine(Repository(), sources=[src]).selective_load(rs, q)[0]
            elif mode == "lazy":
                lazy = LazyEtl([src])
                report = lazy.bootstrap().merge(lazy.query(q)[0])
            else:
                eager = EagerEtl([src])
                report = eager.load().merge(eager.query(q)[0])
            totals[mode] = report.total.bytes
        assert totals["hybrid"] <= totals["lazy"] <= totals["eager"]


def test_repeat_query_zero_traffic(engine, src):
    rs = rs_of("C1")
    engine.selective_load(rs, CT_IMAGES)
    before = src.stats.snapshot()
    report, outcome = engine.selective_load(rs, CT_IMAGES)
    assert report.served_from_repository and (src.stats.snapshot() - before).is_zero()
    assert not is_null(outcome, CT_IMAGES)


# refresh


@pytest.fixture
def private_src(tmp_path):
    return generate_synthetic_source(tmp_path / "s", (1, 2, 2, 2, 1), seed=4, image_size_bytes=64, source_id="src1")


def test_refresh_unchanged(private_src):
    engine = Engine(Repository(), sources=[private_src])
    rs = rs_of("C1")
    engine.selective_load(rs, STUDY)
    assert engine.refresh(rs).records_promoted == 0


def test_refresh_picks_up_exactly_the_touched_record(private_src):
    engine = Engine(Repository(), sources=[private_src])
    rs = rs_of("C1")
    engine.selective_load(rs, STUDY)
    before = {r.path: r for _, r in engine.repository.records()}
    touch_metadata(private_src, P("C1/P2/S1"), description="re-read")
    report = engine.refresh(rs)
    after = {r.path: r for _, r in engine.repository.records()}
    assert report.records_promoted == 1
    assert [p for p in after if after[p] != before[p]] == [P("C1/P2/S1")]
    assert after[P("C1/P2/S1")].attributes["description"] == "re-read"


def test_refresh_repairs_local_corruption(private_src):
    engine = Engine(Repository(), sources=[private_src])
    rs = rs_of("C1")
    engine.selective_load(rs, STUDY)
    repo = engine.repository
    good = repo.record("src1", P("C1/P1"))
    from dataclasses import replace

    repo.promote("src1", replace(good, attributes={**good.attributes, "sex": "tampered"}), force=True)
    report = engine.refresh(rs)
    assert report.records_promoted == 1 and repo.record("src1", P("C1/P1")) == good


# concurrency


def test_concurrent_loads_of_same_replica_load_once(small_root):
    src = FilesystemSource(small_root)
    engine = Engine(Repository(), sources=[src])
    rs = rs_of("C1")
    engine.trace = []
    barrier = threading.Barrier(6)
    results = []

    def worker():
        barrier.wait()
        results.append(engine.selective_load(rs, STUDY)[1])

    threads = [threading.Thread(target=worker) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sum(1 for e in engine.trace if e[0] == "loadData") == 1
    assert all(r.complete and len(r.rows) == 4 for r in results)
    assert engine.repository.check_exclusive()
