"""Chunked-object write and read protocol.

An entity is stored in one partition as a metadata record plus ordered chunk
records, all keyed under a version-qualified sort key. The metadata record
is the commit barrier: readers only ever serve versions whose metadata is
COMMITTED.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Literal, Optional, Sequence

from chunkstore.chunk_codec import (
    ChunkCodecError,
    ChunkingConfig,
    ChunkSlice,
    MalformedSortKey,
    PayloadDigest,
    compute_digest,
    digest_slices,
    encode_chunk_sort_key,
    encode_meta_sort_key,
    parse_sort_key,
    reassemble,
    split_payload,
)
from chunkstore.config import MAX_ENTITY_BYTES
from chunkstore.kv_model import (
    Condition,
    ConditionFailed,
    ItemKey,
    ItemTooLarge,
    RegionStore,
    StoredItem,
)
from chunkstore.versioning import (  # noqa: F401  (re-exported)
    CounterExhausted,
    EntityVersion,
    HybridClock,
    generate_version,
)

logger = logging.getLogger(__name__)

Status = Literal["WRITING", "COMMITTED"]
WritePath = Literal["transactional", "two_phase", "pointer"]

ATTR_VERSION = "Ver"
ATTR_COUNT = "Count"
ATTR_BYTES = "Bytes"
ATTR_DIGEST = "Digest"
ATTR_DIGEST_KIND = "DigestKind"
ATTR_STATUS = "Status"
ATTR_REGION = "Region"
ATTR_DATA = "Data"
ATTR_CHUNK_DIGEST = "ChunkDigest"

DEFAULT_MAX_FALLBACK = 2
DEFAULT_WRITE_ATTEMPTS = 3


class ProtocolError(Exception):
    """Base class for protocol failures."""


class EntityTooLarge(ProtocolError):
    pass


class ConfigError(ProtocolError):
    """Chunking configuration does not fit the target store."""


class EntityNotFound(ProtocolError):
    pass


class EntityCorrupt(ProtocolError):
    def __init__(self, message: str, failures: list[str]):
        super().__init__(message)
        self.failures = failures


class MalformedRecord(ProtocolError):
    pass


@dataclass(frozen=True, slots=True)
class EntityMetadata:
    entity_id: bytes
    version: EntityVersion
    chunk_count: int
    total_bytes: int
    digest: PayloadDigest
    status: Status
    writer_region: str

    def __post_init__(self) -> None:
        if self.chunk_count < 0 or self.total_bytes < 0:
            raise ValueError("chunk_count and total_bytes must be non-negative")
        if (self.chunk_count == 0) != (self.total_bytes == 0):
            raise ValueError("chunk_count is zero exactly when total_bytes is zero")

    @property
    def key(self) -> ItemKey:
        return ItemKey(self.entity_id, encode_meta_sort_key(self.version))

    def with_status(self, status: Status) -> EntityMetadata:
        return replace(self, status=status)

    def to_item(self) -> StoredItem:
        return StoredItem(
            self.key,
            {
                ATTR_VERSION: self.version.sortable(),
                ATTR_COUNT: self.chunk_count,
                ATTR_BYTES: self.total_bytes,
                ATTR_DIGEST: self.digest.value,
                ATTR_DIGEST_KIND: self.digest.kind,
                ATTR_STATUS: self.status,
                ATTR_REGION: self.writer_region,
            },
        )

    @classmethod
    def from_item(cls, item: StoredItem) -> EntityMetadata:
        attrs = item.attributes
        try:
            version = EntityVersion.parse(attrs[ATTR_VERSION])
            if item.key.sort_key != encode_meta_sort_key(version):
                raise MalformedRecord(f"metadata key {item.key} does not match Ver {version}")
            status = attrs[ATTR_STATUS]
            if status not in ("WRITING", "COMMITTED"):
                raise MalformedRecord(f"unknown status {status!r}")
            return cls(
                entity_id=item.key.partition_key,
                version=version,
                chunk_count=attrs[ATTR_COUNT],
                total_bytes=attrs[ATTR_BYTES],
                digest=PayloadDigest(attrs[ATTR_DIGEST_KIND], attrs[ATTR_DIGEST]),
                status=status,
                writer_region=attrs[ATTR_REGION],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRecord(f"bad metadata record {item.key}: {e!r}") from e


@dataclass(frozen=True, slots=True)
class ChunkRecord:
    entity_id: bytes
    version: EntityVersion
    index: int
    data: bytes
    chunk_digest: Optional[PayloadDigest] = None

    def to_item(self) -> StoredItem:
        attributes: dict = {ATTR_VERSION: self.version.sortable(), ATTR_DATA: self.data}
        if self.chunk_digest is not None:
            attributes[ATTR_CHUNK_DIGEST] = self.chunk_digest.value
            attributes[ATTR_DIGEST_KIND] = self.chunk_digest.kind
        return StoredItem(
            ItemKey(self.entity_id, encode_chunk_sort_key(self.version, self.index)),
            attributes,
        )

    @classmethod
    def from_item(cls, item: StoredItem, version: EntityVersion, index: int) -> ChunkRecord:
        attrs = item.attributes
        data = attrs.get(ATTR_DATA)
        if not isinstance(data, bytes):
            raise MalformedRecord(f"chunk record {item.key} has no Data")
        digest = None
        if ATTR_CHUNK_DIGEST in attrs:
            try:
                digest = PayloadDigest(attrs[ATTR_DIGEST_KIND], attrs[ATTR_CHUNK_DIGEST])
            except (KeyError, ValueError) as e:
                raise MalformedRecord(f"chunk record {item.key}: {e!r}") from e
        return cls(item.key.partition_key, version, index, data, digest)

    def to_slice(self) -> ChunkSlice:
        return ChunkSlice(self.index, self.data, self.chunk_digest)


@dataclass(frozen=True, slots=True)
class WriteReceipt:
    version: EntityVersion
    chunk_count: int
    path_taken: WritePath
    bytes_written: int


@dataclass(frozen=True, slots=True)
class ReadResult:
    payload: bytes
    version: EntityVersion
    fallback_depth: int


@dataclass(frozen=True, slots=True)
class PreparedPayload:
    """A payload split and digested once, reusable across writes."""

    slices: tuple[ChunkSlice, ...]
    digest: PayloadDigest
    total_bytes: int

    @property
    def chunk_count(self) -> int:
        return len(self.slices)


def prepare_payload(
    payload: bytes,
    config: ChunkingConfig,
    max_entity_bytes: int = MAX_ENTITY_BYTES,
) -> PreparedPayload:
    if len(payload) > max_entity_bytes:
        raise EntityTooLarge(
            f"payload of {len(payload)} bytes exceeds max entity size {max_entity_bytes}"
        )
    slices = split_payload(payload, config)
    if config.per_chunk_digest:
        slices = digest_slices(slices, config.checksum_kind)
    return PreparedPayload(
        tuple(slices), compute_digest(payload, config.checksum_kind), len(payload)
    )


def _build_items(
    store: RegionStore,
    entity_id: bytes,
    prepared: PreparedPayload,
    version: EntityVersion,
    writer_region: Optional[str],
) -> tuple[EntityMetadata, list[ChunkRecord]]:
    chunks = [
        ChunkRecord(entity_id, version, s.index, s.data, s.digest) for s in prepared.slices
    ]
    metadata = EntityMetadata(
        entity_id=entity_id,
        version=version,
        chunk_count=prepared.chunk_count,
        total_bytes=prepared.total_bytes,
        digest=prepared.digest,
        status="COMMITTED",
        writer_region=writer_region or store.region_id,
    )
    return metadata, chunks


def _check_item_sizes(store: RegionStore, items: Sequence[StoredItem]) -> None:
    limit = store.limits.max_item_size
    for item in items:
        if item.serialized_size > limit:
            raise ConfigError(
                f"chunk item {item.key} is {item.serialized_size} bytes but the store "
                f"allows {limit}; lower max_chunk_bytes"
            )


def write_prepared(
    store: RegionStore,
    entity_id: bytes,
    prepared: PreparedPayload,
    version: EntityVersion,
    writer_region: Optional[str] = None,
) -> WriteReceipt:
    """Write a prepared payload as ``version`` of ``entity_id``."""
    if not entity_id:
        raise ValueError("entity_id must be non-empty")
    metadata, chunks = _build_items(store, entity_id, prepared, version, writer_region)
    chunk_items = [chunk.to_item() for chunk in chunks]
    meta_item = metadata.to_item()
    _check_item_sizes(store, chunk_items + [meta_item])

    batch_bytes = sum(item.serialized_size for item in chunk_items) + meta_item.serialized_size
    if not store.limits.fits_transaction(len(chunk_items) + 1, batch_bytes):
        return two_phase_write(store, entity_id, chunks, metadata)

    absent = Condition.attribute_absent(ATTR_VERSION)
    batch = [(item, absent) for item in chunk_items]
    batch.append((meta_item, absent))
    try:
        store.transact_write(batch)
    except ItemTooLarge as e:
        raise ConfigError(str(e)) from e
    logger.debug(
        "Committed %r version %s transactionally (%d chunks, %d bytes)",
        entity_id, version, len(chunks), prepared.total_bytes,
    )
    return WriteReceipt(version, len(chunks), "transactional", prepared.total_bytes)


def write_entity(
    store: RegionStore,
    entity_id: bytes,
    payload: bytes,
    config: ChunkingConfig,
    version: EntityVersion,
    max_entity_bytes: int = MAX_ENTITY_BYTES,
) -> WriteReceipt:
    """Chunk, digest and store one version of an entity.

    Args:
        store: Region store to write to
        entity_id: Partition key of the entity
        payload: Entity bytes
        config: Chunk size and checksum settings
        version: Version to write; must not exist yet
        max_entity_bytes: Largest payload accepted

    Returns:
        WriteReceipt with the chunk count and the path taken

    Raises:
        EntityTooLarge: If the payload exceeds max_entity_bytes
        ConfigError: If a chunk record cannot fit one item
        ConditionFailed: If the version already exists
    """
    prepared = prepare_payload(payload, config, max_entity_bytes)
    return write_prepared(store, entity_id, prepared, version)


def _sub_batches(store: RegionStore, items: Sequence[StoredItem]) -> list[list[StoredItem]]:
    """Group items, in order, into maximal batches under the transaction limits."""
    batches: list[list[StoredItem]] = []
    current: list[StoredItem] = []
    current_bytes = 0
    for item in items:
        if current and not store.limits.fits_transaction(
            len(current) + 1, current_bytes + item.serialized_size
        ):
            batches.append(current)
            current, current_bytes = [], 0
        current.append(item)
        current_bytes += item.serialized_size
    if current:
        batches.append(current)
    return batches


def two_phase_write(
    store: RegionStore,
    entity_id: bytes,
    chunks: Sequence[ChunkRecord],
    metadata: EntityMetadata,
) -> WriteReceipt:
    """Write chunks under a WRITING metadata record, then flip it to COMMITTED.

    A failure anywhere in phase 1 abandons the version; gc_versions removes
    what was written.
    """
    writing = metadata.with_status("WRITING")
    items = [writing.to_item()] + [chunk.to_item() for chunk in chunks]
    _check_item_sizes(store, items)
    absent = Condition.attribute_absent(ATTR_VERSION)

    batches = _sub_batches(store, items)
    logger.debug(
        "Two-phase write of %r version %s: %d chunks in %d batches",
        entity_id, metadata.version, len(chunks), len(batches),
    )
    try:
        for batch in batches:
            store.transact_write([(item, absent) for item in batch])
        store.put_item(
            metadata.with_status("COMMITTED").to_item(),
            Condition.attribute_equals(ATTR_STATUS, "WRITING"),
        )
    except ItemTooLarge as e:
        raise ConfigError(str(e)) from e
    except ConditionFailed:
        logger.error(
            "Two-phase write of %r version %s aborted: metadata changed concurrently",
            entity_id, metadata.version,
        )
        raise

    return WriteReceipt(metadata.version, len(chunks), "two_phase", metadata.total_bytes)


def _group_versions(
    items: Sequence[StoredItem],
) -> tuple[dict[EntityVersion, EntityMetadata], dict[EntityVersion, list[ChunkSlice]], list[str]]:
    metas: dict[EntityVersion, EntityMetadata] = {}
    chunks: dict[EntityVersion, list[ChunkSlice]] = {}
    problems: list[str] = []
    for item in items:
        try:
            version, index = parse_sort_key(item.key.sort_key)
            if index is None:
                metas[version] = EntityMetadata.from_item(item)
            else:
                record = ChunkRecord.from_item(item, version, index)
                chunks.setdefault(version, []).append(record.to_slice())
        except (MalformedSortKey, MalformedRecord) as e:
            problems.append(str(e))
    return metas, chunks, problems


def read_entity(
    store: RegionStore, entity_id: bytes, max_fallback: int = DEFAULT_MAX_FALLBACK
) -> ReadResult:
    """Serve the newest COMMITTED version that validates.

    One partition query supplies every candidate; on validation failure the
    next-newest COMMITTED version is tried, at most ``max_fallback`` times.
    """
    items = store.query_partition(entity_id)
    metas, chunks, problems = _group_versions(items)
    for problem in problems:
        logger.warning("Ignoring unreadable record of %r: %s", entity_id, problem)

    committed = sorted(
        (v for v, meta in metas.items() if meta.status == "COMMITTED"), reverse=True
    )
    if not committed:
        raise EntityNotFound(f"no committed version of {entity_id!r}")

    failures: list[str] = []
    for depth, version in enumerate(committed[: max_fallback + 1]):
        try:
            payload = reassemble(metas[version], chunks.get(version, []))
        except ChunkCodecError as e:
            logger.warning(
                "Version %s of %r failed validation (%s: %s)",
                version, entity_id, type(e).__name__, e,
            )
            failures.append(f"{version}: {type(e).__name__}: {e}")
            continue
        if depth:
            logger.warning("Served %r from fallback depth %d", entity_id, depth)
        return ReadResult(payload, version, depth)

    logger.error("All candidate versions of %r failed validation", entity_id)
    raise EntityCorrupt(f"no valid committed version of {entity_id!r}", failures)


def plan_gc(store: RegionStore, entity_id: bytes, keep_newest: int) -> list[EntityVersion]:
    """Versions gc_versions would delete, oldest first."""
    if keep_newest < 1:
        raise ValueError("keep_newest must be at least 1")
    items = store.query_partition(entity_id)
    metas, chunks, _ = _group_versions(items)
    committed = sorted(
        (v for v, meta in metas.items() if meta.status == "COMMITTED"), reverse=True
    )
    if not committed:
        return []
    doomed = set(committed[keep_newest:])
    newest = committed[0]
    # WRITING versions and chunk runs whose metadata is already gone
    for version in set(metas) | set(chunks):
        if version < newest and version not in committed:
            doomed.add(version)
    return sorted(doomed)


def gc_versions(store: RegionStore, entity_id: bytes, keep_newest: int) -> int:
    """Delete old versions; returns the number of records removed.

    Each version's metadata is deleted before its chunks so a partial GC
    never leaves a COMMITTED record pointing at missing chunks.
    """
    doomed = plan_gc(store, entity_id, keep_newest)
    if not doomed:
        return 0
    by_version: dict[EntityVersion, list[StoredItem]] = {}
    for item in store.query_partition(entity_id):
        try:
            version, _ = parse_sort_key(item.key.sort_key)
        except MalformedSortKey:
            continue
        by_version.setdefault(version, []).append(item)

    deleted = 0
    for version in doomed:
        records = by_version.get(version, [])
        # chunk keys sort before META, so reversing puts metadata first
        for item in reversed(records):
            store.delete_item(item.key)
            deleted += 1
        logger.info("GC removed version %s of %r (%d records)", version, entity_id, len(records))
    return deleted


def write_with_retry(
    store: RegionStore,
    entity_id: bytes,
    payload: bytes,
    config: ChunkingConfig,
    clock: HybridClock,
    attempts: int = DEFAULT_WRITE_ATTEMPTS,
    max_entity_bytes: int = MAX_ENTITY_BYTES,
) -> WriteReceipt:
    """write_entity with a fresh version per attempt on ConditionFailed."""
    prepared = prepare_payload(payload, config, max_entity_bytes)
    for attempt in range(1, attempts + 1):
        version = clock.next_version()
        try:
            return write_prepared(store, entity_id, prepared, version)
        except ConditionFailed:
            if attempt == attempts:
                logger.error("Write of %r failed after %d attempts", entity_id, attempts)
                raise
            logger.warning(
                "Version race on %r (attempt %d/%d), retrying with a fresh version",
                entity_id, attempt, attempts,
            )
    raise AssertionError("unreachable")


def list_versions(store: RegionStore, entity_id: bytes) -> list[tuple[EntityVersion, Status]]:
    """Every version with a metadata record, newest first."""
    metas, _, _ = _group_versions(store.query_partition(entity_id))
    return sorted(((v, m.status) for v, m in metas.items()), reverse=True)
