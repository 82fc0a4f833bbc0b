"""Tests for the pointer (claim-check) baseline."""

import pytest

from chunkstore.chunk_codec import DigestMismatch, compute_digest
from chunkstore.kv_model import ObjectStoreModel, RegionStore
from chunkstore.pointer_baseline import (
    DanglingPointer,
    PointerRecord,
    object_key_for,
    pointer_key,
    read_pointer_entity,
    write_pointer_entity,
)
from chunkstore.protocol import EntityNotFound
from chunkstore.replication_sim import lww_merge
from chunkstore.versioning import EntityVersion

EID = b"entity-1"
V1 = EntityVersion(1000, 0, "use1-a")
V2 = EntityVersion(2000, 0, "use1-a")


@pytest.fixture
def region():
    return RegionStore("use1"), ObjectStoreModel("use1")


def test_write_then_read(region):
    store, bucket = region
    receipt = write_pointer_entity(store, bucket, EID, b"payload", V1)
    assert receipt.path_taken == "pointer"
    assert receipt.chunk_count == 0
    assert receipt.bytes_written == 7
    result = read_pointer_entity(store, bucket, EID)
    assert (result.payload, result.version, result.fallback_depth) == (b"payload", V1, 0)


def test_object_is_written_before_pointer(region):
    store, bucket = region
    write_pointer_entity(store, bucket, EID, b"payload", V1)
    assert bucket.object_get(object_key_for(EID, V1)) == b"payload"
    record = PointerRecord.from_item(store.get_item(pointer_key(EID)))
    assert record.object_key == EID + b"/" + V1.sortable().encode()
    assert record.total_bytes == 7
    assert record.digest == compute_digest(b"payload")


def test_stale_write_keeps_newer_pointer(region):
    store, bucket = region
    write_pointer_entity(store, bucket, EID, b"new", V2)
    write_pointer_entity(store, bucket, EID, b"old", V1)
    assert read_pointer_entity(store, bucket, EID).payload == b"new"


def test_missing_pointer(region):
    store, bucket = region
    with pytest.raises(EntityNotFound):
        read_pointer_entity(store, bucket, EID)


def test_dangling_pointer_when_object_not_replicated():
    writer_store, writer_bucket = RegionStore("use1"), ObjectStoreModel("use1")
    reader_store, reader_bucket = RegionStore("euw1"), ObjectStoreModel("euw1")
    write_pointer_entity(writer_store, writer_bucket, EID, b"payload", V1)

    # the table replicates before the bucket
    reader_store.apply_replicated(writer_store.log_since(0), lww_merge)
    with pytest.raises(DanglingPointer) as excinfo:
        read_pointer_entity(reader_store, reader_bucket, EID)
    assert excinfo.value.object_key == object_key_for(EID, V1)

    for change in writer_bucket.changes_since(0):
        reader_bucket.object_put(change.key, change.payload, change.stamp)
    assert read_pointer_entity(reader_store, reader_bucket, EID).payload == b"payload"


def test_tampered_object_fails_checksum(region):
    store, bucket = region
    write_pointer_entity(store, bucket, EID, b"payload", V1)
    bucket.objects[object_key_for(EID, V1)] = (b"paylOAD", V2)
    with pytest.raises(DigestMismatch):
        read_pointer_entity(store, bucket, EID)


def test_truncated_object_fails_size_check(region):
    store, bucket = region
    write_pointer_entity(store, bucket, EID, b"payload", V1)
    bucket.objects[object_key_for(EID, V1)] = (b"pay", V2)
    with pytest.raises(DigestMismatch, match="bytes"):
        read_pointer_entity(store, bucket, EID)
