import hashlib
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import P, vr
from obidos.errors import GeneratorRefused, PathNotFound, SourceUnavailable
from obidos.model import ROOT, Predicate, UserQuery
from obidos.source import (
    FaultySource,
    FilesystemSource,
    MetadataProfile,
    RemoteProfile,
    RemoteSource,
    TransferStats,
    generate_synthetic_source,
    touch_metadata,
)


def test_list_root_and_leaf(src):
    assert src.list_children(ROOT) == ["C1", "C2"]
    assert src.list_children(P("C1/P1/S1/R1")) == ["I1", "I2"]
    assert src.stats.listing_requests == 2


def test_unknown_path(src):
    with pytest.raises(PathNotFound):
        src.list_children(P("C9"))
    with pytest.raises(PathNotFound):
        src.fetch_metadata(P("C9"))


def test_generator_counts(src):
    paths = list(src.walk())
    by_depth = {d: sum(p.depth == d for p in paths) for d in range(1, 6)}
    assert by_depth == {1: 2, 2: 4, 3: 8, 4: 16, 5: 32}


def test_metadata_id_and_size(src):
    for path in src.walk():
        rec = src.fetch_metadata(path)
        assert rec.attributes["id"] == path.entry_id
        assert rec.size_bytes == src.sidecar(path).stat().st_size


def test_repeat_fetch_same_record_counters_twice(src):
    a = src.fetch_metadata(P("C1/P1"))
    b = src.fetch_metadata(P("C1/P1"))
    assert a == b
    assert src.stats.metadata_requests == 2
    assert src.stats.metadata_bytes == 2 * a.size_bytes


def test_blob_hash_oracle(tmp_path):
    big = generate_synthetic_source(tmp_path / "big", (1, 1, 1, 1, 1), seed=3, image_size_bytes=512 * 1024)
    data, digest = big.fetch_blob(P("C1/P1/S1/R1/I1"))
    assert len(data) == 524288
    assert digest == hashlib.sha256(data).hexdigest()
    assert big.fetch_metadata(P("C1/P1/S1/R1/I1")).blob_ref == digest
    assert big.stats.blob_bytes == 524288 and big.stats.blob_requests == 1


def test_generator_never_writes_empty_blobs(src):
    for path in src.walk():
        if path.depth == 5:
            assert len(src.fetch_blob(path)[0]) > 0


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generator_deterministic(tmp_path):
    a = generate_synthetic_source(tmp_path / "a", (1, 2, 1, 2, 2), seed=5, image_size_bytes=64)
    b = generate_synthetic_source(tmp_path / "b", (1, 2, 1, 2, 2), seed=5, image_size_bytes=64)
    assert _tree(a.root) == _tree(b.root)
    c = generate_synthetic_source(tmp_path / "c", (1, 2, 1, 2, 2), seed=6, image_size_bytes=64)
    assert _tree(a.root) != _tree(c.root)


def test_generator_refuses_non_empty_dir(tmp_path):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "junk").write_text("hi")
    with pytest.raises(GeneratorRefused):
        generate_synthetic_source(tmp_path / "x", (1, 1, 1, 1, 1))


def test_generator_attribute_rules(src):
    series = [src.fetch_metadata(p) for p in src.walk() if p.depth == 4]
    for rec in series:
        expected = "CT" if rec.attributes["index"] % 2 == 0 else "MR"
        assert rec.attributes["modality"] == expected
        assert 0 <= rec.attributes["code"] < 1000
    patients = [src.fetch_metadata(p) for p in src.walk() if p.depth == 2]
    assert all(r.attributes["studies"] == 2 for r in patients)


def test_metadata_padding_inflates_records(tmp_path):
    plain = generate_synthetic_source(tmp_path / "a", (1, 1, 1, 1, 1), image_size_bytes=8)
    padded = generate_synthetic_source(tmp_path / "b", (1, 1, 1, 1, 1), image_size_bytes=8,
                                       metadata_profile=MetadataProfile(padding_bytes=4096))
    path = P("C1/P1")
    assert padded.fetch_metadata(path).size_bytes >= plain.fetch_metadata(path).size_bytes + 4096


# source-side query


def test_match_all_studies_in_subtree(src):
    paths = src.source_query(vr("C1"), UserQuery("study"))
    assert paths == [P(s) for s in ("C1/P1/S1", "C1/P1/S2", "C1/P2/S1", "C1/P2/S2")]


def test_half_of_series_are_ct(src):
    ct = src.source_query(vr(""), UserQuery("series", (Predicate("modality", "=", "CT"),)))
    assert len(ct) == 8


def test_absent_attribute_matches_nothing(src):
    assert src.source_query(vr(""), UserQuery("series", (Predicate("nope", "=", 1),))) == []


def test_source_query_accounting(src):
    src.source_query(vr("C1"), UserQuery("study"))
    # listings for C1 and both patients; one metadata fetch per study candidate
    assert src.stats.listing_requests == 3
    assert src.stats.metadata_requests == 4


@settings(max_examples=40, deadline=None)
@given(
    scope=st.sampled_from(["", "C1", "C2/P1", "C1/P2/S2", "C2/P2/S1/R2"]),
    level=st.sampled_from(["collection", "patient", "study", "series", "image"]),
    preds=st.lists(st.tuples(st.sampled_from(["modality", "code", "index", "sex", "absent"]),
                             st.sampled_from(["=", "!=", "<", ">="]),
                             st.one_of(st.integers(0, 1000), st.sampled_from(["CT", "MR", "F"]))), max_size=2),
)
def test_source_query_matches_brute_force(small_root, scope, level, preds):
    src = FilesystemSource(small_root)
    q = UserQuery(level, tuple(Predicate(*p) for p in preds))
    scope_vr = vr(scope)
    target = src.schema.depth_of(level)
    everything = ([scope_vr.path] if scope_vr.path.depth else []) + list(src.walk(scope_vr.path))
    oracle = sorted((p for p in everything if p.depth == target and q.matches(src.fetch_metadata(p).attributes)),
                    key=lambda p: p.sort_key())
    assert sorted(src.source_query(scope_vr, q), key=lambda p: p.sort_key()) == oracle


# accounting and wrappers


def test_stats_are_sum_of_charges(src):
    expected = TransferStats()
    rec = src.fetch_metadata(P("C1"))
    expected.charge(metadata_requests=1, metadata_bytes=rec.size_bytes)
    src.list_children(P("C1"))
    expected.charge(listing_requests=1)
    data, _ = src.fetch_blob(P("C1/P1/S1/R1/I1"))
    expected.charge(blob_requests=1, blob_bytes=len(data))
    assert src.stats.as_dict() == expected.as_dict()


def test_concurrent_charges_are_not_lost():
    from concurrent.futures import ThreadPoolExecutor

    stats = TransferStats()
    with ThreadPoolExecutor(8) as pool:
        list(pool.map(lambda _: stats.charge(metadata_requests=1, metadata_bytes=3), range(2000)))
    assert stats.metadata_requests == 2000 and stats.metadata_bytes == 6000


def test_remote_wrapper_delays_and_changes_nothing_else(small_root):
    plain = FilesystemSource(small_root)
    profile = RemoteProfile(per_request_latency=0.01, per_byte_latency=1e-6)
    remote = RemoteSource(FilesystemSource(small_root), profile)
    path = P("C1/P1/S1/R1/I1")
    start = time.perf_counter()
    data, digest = remote.fetch_blob(path)
    elapsed = time.perf_counter() - start
    assert elapsed >= profile.per_request_latency + len(data) * profile.per_byte_latency
    assert (data, digest) == plain.fetch_blob(path)
    assert remote.fetch_metadata(path) == plain.fetch_metadata(path)
    assert remote.list_children(P("C1")) == plain.list_children(P("C1"))
    assert remote.stats.as_dict() == plain.stats.as_dict()


def test_remote_profile_rejects_negative():
    with pytest.raises(ValueError):
        RemoteProfile(-1, 0)


def test_simulated_remote_accumulates_without_sleeping(small_root):
    remote = RemoteSource(FilesystemSource(small_root), RemoteProfile(5.0, 0), sleep=False)
    start = time.perf_counter()
    remote.list_children(ROOT)
    assert time.perf_counter() - start < 1.0
    assert remote.simulated_delay == pytest.approx(5.0)


def test_faulty_source_and_unreachable(small_root):
    faulty = FaultySource(FilesystemSource(small_root), fail_after=1)
    faulty.list_children(ROOT)
    with pytest.raises(SourceUnavailable):
        faulty.list_children(P("C1"))
    src = FilesystemSource(small_root)
    src.available = False
    with pytest.raises(SourceUnavailable):
        src.fetch_metadata(P("C1"))


def test_touch_metadata_bumps_timestamp(tmp_path):
    src = generate_synthetic_source(tmp_path / "t", (1, 1, 1, 1, 1), image_size_bytes=8)
    before = src.fetch_metadata(P("C1/P1/S1"))
    after = touch_metadata(src, P("C1/P1/S1"), description="changed")
    assert after.last_modified > before.last_modified
    assert src.fetch_metadata(P("C1/P1/S1")).attributes["description"] == "changed"
