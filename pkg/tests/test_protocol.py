"""Tests for the chunked-object write/read protocol."""

import itertools
import logging
import random
import threading

import numpy as np
import pytest

from chunkstore.chunk_codec import ChunkingConfig, encode_chunk_sort_key, encode_meta_sort_key
from chunkstore.kv_model import (
    ConditionFailed,
    ItemKey,
    RegionStore,
    StoredItem,
    StoreLimits,
)
from chunkstore.protocol import (
    ATTR_DATA,
    ChunkRecord,
    ConfigError,
    EntityCorrupt,
    EntityMetadata,
    EntityNotFound,
    EntityTooLarge,
    HybridClock,
    gc_versions,
    list_versions,
    plan_gc,
    prepare_payload,
    read_entity,
    two_phase_write,
    write_entity,
    write_prepared,
    write_with_retry,
)
from chunkstore.versioning import EntityVersion

EID = b"entity-1"
SMALL_LIMITS = StoreLimits(max_item_size=4096, max_transaction_items=4, max_transaction_bytes=16384)
SMALL_CHUNKS = ChunkingConfig(max_chunk_bytes=1000)


def v(ms: int, counter: int = 0, writer: str = "use1-a") -> EntityVersion:
    return EntityVersion(ms, counter, writer)


def payload_of(length: int, seed: int = 0) -> bytes:
    period = bytes((i * 131 + seed * 17) % 251 for i in range(251))
    return (period * (length // 251 + 1))[:length]


def corrupt_chunk(store: RegionStore, version: EntityVersion, index: int = 0) -> None:
    key = ItemKey(EID, encode_chunk_sort_key(version, index))
    item = store.get_item(key)
    data = bytearray(item.get(ATTR_DATA))
    data[0] ^= 0xFF
    attrs = dict(item.attributes)
    attrs[ATTR_DATA] = bytes(data)
    store.put_item(StoredItem(key, attrs))


class Crash(Exception):
    pass


class TestRoundTrip:
    @pytest.mark.parametrize(
        "length, chunks, path",
        [
            (0, 0, "transactional"),
            (1, 1, "transactional"),
            (349_999, 1, "transactional"),
            (350_000, 1, "transactional"),
            (350_001, 2, "transactional"),
            (1_048_576, 3, "transactional"),
            (2_097_152, 6, "transactional"),
            (5_000_000, 15, "two_phase"),
            (16_777_216, 48, "two_phase"),
        ],
    )
    def test_write_then_read(self, length, chunks, path):
        store = RegionStore("use1")
        payload = payload_of(length)
        receipt = write_entity(store, EID, payload, ChunkingConfig(), v(1000))
        assert receipt.chunk_count == chunks
        assert receipt.path_taken == path
        assert receipt.bytes_written == length
        result = read_entity(store, EID)
        assert result.payload == payload
        assert result.version == v(1000)
        assert result.fallback_depth == 0

    def test_seeded_random_payloads_at_the_boundary_sizes(self):
        rng = np.random.default_rng(20240611)
        sizes = [0, 1, 349_999, 350_000, 350_001, 1_048_576, 2_097_152, 16_777_216]
        for n in range(500):
            length = sizes[rng.integers(len(sizes))]
            payload = rng.bytes(length)
            store = RegionStore("use1")
            receipt = write_entity(store, EID, payload, ChunkingConfig(), v(1000 + n))
            assert receipt.chunk_count == -(-length // 350_000), n
            result = read_entity(store, EID)
            assert result.payload == payload, n
            assert result.version == v(1000 + n)

        assert result.fallback_depth == 0

    def test_sha256_and_no_chunk_digests(self):
        store = RegionStore("use1")
        config = ChunkingConfig(max_chunk_bytes=100, checksum_kind="sha256", per_chunk_digest=False)
        payload = payload_of(1234)
        write_entity(store, EID, payload, config, v(1000))
        assert read_entity(store, EID).payload == payload

    def test_newest_version_wins(self):
        store = RegionStore("use1")
        write_entity(store, EID, b"old", ChunkingConfig(), v(1000))
        write_entity(store, EID, b"new", ChunkingConfig(), v(2000))
        result = read_entity(store, EID)
        assert (result.payload, result.version) == (b"new", v(2000))

    def test_missing_entity(self):
        with pytest.raises(EntityNotFound):
            read_entity(RegionStore("use1"), EID)

    def test_same_version_cannot_be_written_twice(self):
        store = RegionStore("use1")
        write_entity(store, EID, b"one", ChunkingConfig(), v(1000))
        with pytest.raises(ConditionFailed):
            write_entity(store, EID, b"two", ChunkingConfig(), v(1000))
        assert read_entity(store, EID).payload == b"one"


class TestSizeChecks:
    def test_entity_too_large(self):
        store = RegionStore("use1")
        with pytest.raises(EntityTooLarge):
            write_entity(store, EID, b"x" * 101, ChunkingConfig(), v(1000), max_entity_bytes=100)
        assert store.last_seq == 0

    def test_chunk_size_that_cannot_fit_an_item(self):
        store = RegionStore("use1")
        with pytest.raises(ConfigError):
            write_entity(store, EID, b"x" * 500_000, ChunkingConfig(max_chunk_bytes=409_600), v(1000))
        assert store.last_seq == 0

    def test_large_two_phase_example(self):
        # 50 MiB at 350 kB chunks: 150 chunks, well past one transaction
        store = RegionStore("use1")
        payload = b"\x5a" * 52_428_800
        receipt = write_entity(
            store, EID, payload, ChunkingConfig(), v(1000), max_entity_bytes=64 * 1024 * 1024
        )
        assert receipt.chunk_count == 150
        assert receipt.path_taken == "two_phase"
        assert read_entity(store, EID).payload == payload


class TestTwoPhase:
    def test_small_limits_force_sub_batches(self):
        store = RegionStore("use1", SMALL_LIMITS)
        payload = payload_of(150_000)
        receipt = write_entity(store, EID, payload, SMALL_CHUNKS, v(1000))
        assert receipt.path_taken == "two_phase"
        assert receipt.chunk_count == 150
        txn_sizes = {}
        for entry in store.log_since(0):
            txn_sizes[entry.txn_id] = txn_sizes.get(entry.txn_id, 0) + 1
        assert max(txn_sizes.values()) <= 4
        assert read_entity(store, EID).payload == payload
        assert list_versions(store, EID) == [(v(1000), "COMMITTED")]

    def test_direct_call_on_a_payload_that_would_fit_one_transaction(self):
        store = RegionStore("use1")
        payload = payload_of(2500)
        prepared = prepare_payload(payload, SMALL_CHUNKS)
        chunks = [ChunkRecord(EID, v(1000), s.index, s.data, s.digest) for s in prepared.slices]
        metadata = EntityMetadata(EID, v(1000), 3, 2500, prepared.digest, "COMMITTED", "use1")

        receipt = two_phase_write(store, EID, chunks, metadata)
        assert receipt.path_taken == "two_phase"
        assert receipt.chunk_count == 3
        # WRITING metadata + chunks in one batch, then the flip
        assert [entry.txn_id for entry in store.log_since(0)] == [1, 1, 1, 1, 5]
        assert read_entity(store, EID).payload == payload

    def test_writing_only_version_is_invisible(self):
        store = RegionStore("use1", SMALL_LIMITS)
        prepared = prepare_payload(payload_of(10_000), SMALL_CHUNKS)

        def hook(stage, op):
            if stage == "before" and op == "put_item":
                raise Crash()

        store.hook = hook
        with pytest.raises(Crash):
            write_prepared(store, EID, prepared, v(1000))
        store.hook = None
        assert list_versions(store, EID) == [(v(1000), "WRITING")]
        with pytest.raises(EntityNotFound):
            read_entity(store, EID)

    @pytest.mark.parametrize("stage", ["before", "after"])
    def test_crash_at_every_step_is_all_or_nothing(self, stage):
        old = payload_of(3_000, seed=1)
        new = payload_of(150_000, seed=2)
        prepared = prepare_payload(new, SMALL_CHUNKS)

        # count the store operations of one full write
        spy = RegionStore("use1", SMALL_LIMITS)
        calls = []
        spy.hook = lambda s, op: calls.append(op) if s == "before" else None
        write_prepared(spy, EID, prepared, v(2000))
        steps = len(calls)
        assert steps == 39  # 38 sub-batches plus the commit flip

        for crash_at in range(1, steps + 1):
            store = RegionStore("use1", SMALL_LIMITS)
            write_entity(store, EID, old, SMALL_CHUNKS, v(1000))
            seen = [0]

            def hook(s, op, crash_at=crash_at, seen=seen):
                if s == stage:
                    seen[0] += 1
                    if seen[0] == crash_at:
                        raise Crash()

            store.hook = hook
            with pytest.raises(Crash):
                write_prepared(store, EID, prepared, v(2000))
            store.hook = None

            result = read_entity(store, EID)
            if stage == "after" and crash_at == steps:
                assert result.version == v(2000)
                assert result.payload == new
            else:
                assert result.version == v(1000), crash_at
                assert result.payload == old

            # the next successful write plus gc clears every remnant
            write_entity(store, EID, b"final", SMALL_CHUNKS, v(3000))
            gc_versions(store, EID, keep_newest=1)
            assert list_versions(store, EID) == [(v(3000), "COMMITTED")]
            assert all(
                item.key.sort_key.startswith(b"V#" + v(3000).sortable().encode())
                for item in store.query_partition(EID)
            )

    def test_concurrent_commit_flip_conflict(self):
        store = RegionStore("use1", SMALL_LIMITS)
        prepared = prepare_payload(payload_of(10_000), SMALL_CHUNKS)
        meta_key = ItemKey(EID, encode_meta_sort_key(v(1000)))

        def hook(stage, op):
            if stage == "before" and op == "put_item":
                # another writer finalises the metadata record first
                store.hook = None
                attrs = dict(store.get_item(meta_key).attributes)
                attrs["Status"] = "COMMITTED"
                store.put_item(StoredItem(meta_key, attrs))

        store.hook = hook
        with pytest.raises(ConditionFailed):
            write_prepared(store, EID, prepared, v(1000))


class TestFallback:
    def test_corrupt_newest_falls_back(self):
        store = RegionStore("use1")
        write_entity(store, EID, b"version one", ChunkingConfig(), v(1000))
        write_entity(store, EID, b"version two", ChunkingConfig(), v(2000))
        corrupt_chunk(store, v(2000))
        result = read_entity(store, EID)
        assert result.payload == b"version one"
        assert result.fallback_depth == 1

    def test_fallback_is_bounded(self):
        store = RegionStore("use1")
        for ms in (1000, 2000, 3000, 4000):
            write_entity(store, EID, f"payload {ms}".encode(), ChunkingConfig(), v(ms))
        for ms in (2000, 3000, 4000):
            corrupt_chunk(store, v(ms))
        with pytest.raises(EntityCorrupt) as excinfo:
            read_entity(store, EID, max_fallback=2)
        assert len(excinfo.value.failures) == 3
        assert read_entity(store, EID, max_fallback=3).version == v(1000)

    def test_missing_chunk_detected(self):
        store = RegionStore("use1")
        write_entity(store, EID, b"abcdefgh", ChunkingConfig(max_chunk_bytes=2), v(1000))
        store.delete_item(ItemKey(EID, encode_chunk_sort_key(v(1000), 1)))
        with pytest.raises(EntityCorrupt):
            read_entity(store, EID)

    def test_unreadable_records_are_ignored(self):
        store = RegionStore("use1")
        write_entity(store, EID, b"fine", ChunkingConfig(), v(1000))
        store.put_item(StoredItem.build(EID, b"POINTER", {"Ver": "junk"}))
        assert read_entity(store, EID).payload == b"fine"


class TestGarbageCollection:
    def test_keep_newest(self):
        store = RegionStore("use1")
        for ms in (1000, 2000, 3000):
            write_entity(store, EID, b"p" * 10, ChunkingConfig(max_chunk_bytes=4), v(ms))
        assert plan_gc(store, EID, 1) == [v(1000), v(2000)]
        deleted = gc_versions(store, EID, 1)
        assert deleted == 8  # two versions of three chunks plus metadata
        assert list_versions(store, EID) == [(v(3000), "COMMITTED")]
        assert read_entity(store, EID).version == v(3000)

    def test_metadata_deleted_before_chunks(self):
        store = RegionStore("use1")
        write_entity(store, EID, b"p" * 10, ChunkingConfig(max_chunk_bytes=4), v(1000))
        write_entity(store, EID, b"q" * 10, ChunkingConfig(max_chunk_bytes=4), v(2000))
        before = store.last_seq
        gc_versions(store, EID, 1)
        deletes = store.log_since(before)
        assert deletes[0].key.sort_key.endswith(b"#META")
        assert all(e.op == "delete" for e in deletes)

    def test_in_flight_writing_version_is_kept(self):
        store = RegionStore("use1", SMALL_LIMITS)
        write_entity(store, EID, b"committed", SMALL_CHUNKS, v(1000))
        write_entity(store, EID, b"abandoned", SMALL_CHUNKS, v(500))
        writing = EntityMetadata.from_item(
            store.get_item(ItemKey(EID, encode_meta_sort_key(v(500))))
        ).with_status("WRITING")
        store.put_item(writing.to_item())
        newer_writing = EntityMetadata(
            EID, v(2000), writing.chunk_count, writing.total_bytes, writing.digest, "WRITING", "use1"
        )
        store.put_item(newer_writing.to_item())
        assert plan_gc(store, EID, 1) == [v(500)]
        gc_versions(store, EID, 1)
        assert [version for version, _ in list_versions(store, EID)] == [v(2000), v(1000)]

    def test_nothing_committed_means_nothing_planned(self):
        assert plan_gc(RegionStore("use1"), EID, 1) == []
        with pytest.raises(ValueError):
            plan_gc(RegionStore("use1"), EID, 0)


class TestRetry:
    def occupy(self, store: RegionStore, version: EntityVersion) -> None:
        key = ItemKey(EID, encode_meta_sort_key(version))
        store.put_item(StoredItem(key, {"Ver": version.sortable()}))

    def test_retries_with_fresh_version(self):
        store = RegionStore("use1")
        self.occupy(store, v(1000, 0))
        clock = HybridClock("use1-a", lambda: 1000)
        receipt = write_with_retry(store, EID, b"data", ChunkingConfig(), clock)
        assert receipt.version == v(1000, 1)
        assert read_entity(store, EID).payload == b"data"

    def test_gives_up_after_attempts(self):
        store = RegionStore("use1")
        for counter in range(3):
            self.occupy(store, v(1000, counter))
        clock = HybridClock("use1-a", lambda: 1000)
        with pytest.raises(ConditionFailed):
            write_with_retry(store, EID, b"data", ChunkingConfig(), clock, attempts=3)


def test_concurrent_writers_and_readers_never_see_partial_payloads():
    store = RegionStore("use1", SMALL_LIMITS)
    payloads = {writer: payload_of(20_000, seed=n) for n, writer in enumerate(["use1-a", "euw1-a"])}
    problems = []
    stop = threading.Event()

    def writer(writer_id):
        clock = HybridClock(writer_id, lambda: 1000)
        for _ in range(15):
            write_with_retry(store, EID, payloads[writer_id], SMALL_CHUNKS, clock)

    def reader():
        while not stop.is_set():
            try:
                result = read_entity(store, EID)
            except EntityNotFound:
                continue
            except Exception as e:  # noqa: BLE001
                problems.append(repr(e))
                continue
            if result.payload != payloads[result.version.writer_id]:
                problems.append(f"torn read of {result.version}")

    readers = [threading.Thread(target=reader) for _ in range(2)]
    writers = [threading.Thread(target=writer, args=(w,)) for w in payloads]
    for t in readers + writers:
        t.start()
    for t in writers:
        t.join()
    stop.set()
    for t in readers:
        t.join()
    assert problems == []
    assert len(list_versions(store, EID)) == 30


class Interleaver:
    """Runs writers in lockstep, one store operation at a time.

    Each writer thread parks in the store hook before every operation and
    only proceeds when the schedule names it. Between steps every writer is
    parked, so a read from the test thread sees exactly the state the
    schedule has produced so far.
    """

    def __init__(self, store: RegionStore, writers: dict):
        self.store = store
        self.writers = writers
        self.local = threading.local()
        self.go = {name: threading.Semaphore(0) for name in writers}
        self.parked = threading.Semaphore(0)
        self.done = set()
        self.errors = []
        store.hook = self._gate

    def _gate(self, stage, op):
        name = getattr(self.local, "name", None)
        if name is None or stage != "before":
            return
        self.parked.release()
        self.go[name].acquire()

    def _body(self, name):
        self.local.name = name
        try:
            self.writers[name](self.store)
        except Exception as e:  # noqa: BLE001
            self.errors.append(f"{name}: {e!r}")
        finally:
            self.done.add(name)
            self.parked.release()

    def run(self, schedule, after_step):
        threads = [threading.Thread(target=self._body, args=(name,), daemon=True) for name in self.writers]
        for t in threads:
            t.start()
        for _ in threads:
            self.parked.acquire()
        after_step()
        for name in schedule:
            assert name not in self.done, f"{name} scheduled after it finished"
            self.go[name].release()
            self.parked.acquire()
            after_step()
        for t in threads:
            t.join(timeout=10)
        assert self.done == set(self.writers), "schedule left writers parked"
        assert self.errors == []


def writer_job(writer_id: str, ms: int, payload: bytes):
    def job(store):
        write_entity(store, EID, payload, SMALL_CHUNKS, v(ms, 0, writer_id))

    return job


def operations_of(job) -> int:
    store = RegionStore("use1", SMALL_LIMITS)
    calls = []
    store.hook = lambda stage, op: calls.append(op) if stage == "before" else None
    job(store)
    return len(calls)


class TestInterleavings:
    # 9.5 kB is 10 chunks written in two phases; 1.5 kB fits one transaction
    WRITERS = {
        "use1-a": (1000, payload_of(9_500, seed=1)),
        "euw1-a": (1000, payload_of(9_500, seed=2)),
        "use1-b": (1001, payload_of(1_500, seed=3)),
    }
    # 19.5 kB takes six batches, so three writers give tens of thousands of schedules
    LONG_WRITERS = {
        "use1-a": (1000, payload_of(19_500, seed=4)),
        "euw1-a": (1000, payload_of(19_500, seed=5)),
        "use1-b": (1001, payload_of(1_500, seed=6)),
    }

    def run_schedule(self, writers, schedule):
        store = RegionStore("use1", SMALL_LIMITS)
        payloads = {name: payload for name, (_, payload) in writers.items()}
        jobs = {name: writer_job(name, *spec) for name, spec in writers.items()}
        seen = []

        def read():
            try:
                result = read_entity(store, EID)
            except EntityNotFound:
                seen.append(None)
                return
            assert result.payload == payloads[result.version.writer_id], f"torn read in {schedule}"
            assert result.fallback_depth == 0
            seen.append(result.version)

        Interleaver(store, jobs).run(schedule, read)
        newest = max(v(ms, 0, name) for name, (ms, _) in writers.items())
        assert seen[-1] == newest
        # once a version is visible nothing older is served again
        visible = [s for s in seen if s is not None]
        assert visible == sorted(visible)
        return seen

    def schedules(self, counts: dict):
        names = list(counts)
        slots = sum(counts.values())
        first, second = names
        for positions in itertools.combinations(range(slots), counts[first]):
            schedule = [second] * slots
            for p in positions:
                schedule[p] = first
            yield schedule

    @pytest.mark.parametrize("names", [("use1-a", "euw1-a"), ("use1-a", "use1-b")])
    def test_every_interleaving_of_two_writers(self, names):
        writers = {name: self.WRITERS[name] for name in names}
        counts = {name: operations_of(writer_job(name, *spec)) for name, spec in writers.items()}
        assert counts["use1-a"] == 4  # three batches, the first holding the WRITING meta, then the flip
        schedules = list(self.schedules(counts))
        assert len(schedules) > 1
        for schedule in schedules:
            self.run_schedule(writers, schedule)

    def test_random_interleavings_of_three_writers(self):
        writers = self.LONG_WRITERS
        counts = {name: operations_of(writer_job(name, *spec)) for name, spec in writers.items()}
        assert counts == {"use1-a": 7, "euw1-a": 7, "use1-b": 1}
        pool = [name for name in writers for _ in range(counts[name])]
        rnd = random.Random(7)
        for _ in range(10_000):
            schedule = pool[:]
            rnd.shuffle(schedule)
            self.run_schedule(writers, schedule)


def test_per_write_logging_stays_below_info(caplog):
    store = RegionStore("use1", SMALL_LIMITS)
    with caplog.at_level(logging.INFO, logger="chunkstore"):
        write_entity(store, EID, payload_of(500), SMALL_CHUNKS, v(1000))
        write_entity(store, EID, payload_of(9_500), SMALL_CHUNKS, v(2000))
        read_entity(store, EID)
    assert caplog.records == []
