"""Property-based tests for the storage protocol using Hypothesis."""

from hypothesis import given, settings, strategies as st

from chunkstore.chunk_codec import ChunkingConfig
from chunkstore.kv_model import ItemKey, RegionStore, StoredItem, StoreLimits
from chunkstore.protocol import (
    ATTR_DATA,
    EntityCorrupt,
    list_versions,
    read_entity,
    write_entity,
)
from chunkstore.replication_sim import lww_merge
from chunkstore.versioning import EntityVersion

LIMITS = StoreLimits(max_item_size=2048, max_transaction_items=5, max_transaction_bytes=6000)

chunk_sizes = st.integers(min_value=1, max_value=1500)
checksums = st.sampled_from(["crc32c", "sha256"])


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=12_000), chunk_sizes, checksums)
def test_any_payload_reads_back(payload, chunk_size, checksum):
    store = RegionStore("use1", LIMITS)
    config = ChunkingConfig(max_chunk_bytes=chunk_size, checksum_kind=checksum)
    receipt = write_entity(store, b"e", payload, config, EntityVersion(1000, 0, "use1-a"))
    assert read_entity(store, b"e").payload == payload
    assert receipt.chunk_count == -(-len(payload) // chunk_size)


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=1, max_size=4000), chunk_sizes, st.data())
def test_any_single_byte_flip_is_detected(payload, chunk_size, data):
    store = RegionStore("use1", LIMITS)
    version = EntityVersion(1000, 0, "use1-a")
    receipt = write_entity(store, b"e", payload, ChunkingConfig(max_chunk_bytes=chunk_size), version)

    chunk_index = data.draw(st.integers(min_value=0, max_value=receipt.chunk_count - 1))
    items = [i for i in store.query_partition(b"e") if not i.key.sort_key.endswith(b"#META")]
    target = items[chunk_index]
    raw = bytearray(target.get(ATTR_DATA))
    position = data.draw(st.integers(min_value=0, max_value=len(raw) - 1))
    raw[position] ^= data.draw(st.integers(min_value=1, max_value=255))
    attrs = dict(target.attributes)
    attrs[ATTR_DATA] = bytes(raw)
    store.put_item(StoredItem(target.key, attrs))

    try:
        read_entity(store, b"e")
    except EntityCorrupt:
        return
    raise AssertionError("corrupted chunk was served")


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 5), st.sampled_from(["use1-a", "euw1-a"])), min_size=1, max_size=8),
    st.randoms(use_true_random=False),
)
def test_replicas_converge_in_any_delivery_order(writes, rnd):
    writer = RegionStore("use1")
    for n, (ms, writer_id) in enumerate(writes):
        version = EntityVersion(ms, n, writer_id)
        payload = f"{version}".encode()
        write_entity(writer, b"e", payload, ChunkingConfig(max_chunk_bytes=8), version)

    groups: dict[int, list] = {}
    for entry in writer.log_since(0):
        groups.setdefault(entry.txn_id, []).append(entry)
    shuffled = list(groups.values())
    rnd.shuffle(shuffled)

    replica = RegionStore("euw1")
    for group in shuffled:
        replica.apply_replicated(group, lww_merge)
    assert replica.items() == writer.items()
    assert read_entity(replica, b"e").version == max(v for v, _ in list_versions(writer, b"e"))


def test_item_keys_order_like_bytes():
    keys = [ItemKey(b"a", b"\x00"), ItemKey(b"a", b"\xff"), ItemKey(b"b", b"\x00")]
    assert sorted(reversed(keys)) == keys
