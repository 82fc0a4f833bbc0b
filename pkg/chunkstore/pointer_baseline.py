"""Pointer (claim-check) pattern: payload in the bucket, reference in the table."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

from chunkstore.chunk_codec import (
    ChecksumKind,
    DigestMismatch,
    PayloadDigest,
    compute_digest,
    read_digests,
)
from chunkstore.kv_model import (
    Condition,
    ConditionFailed,
    ItemKey,
    ObjectNotFound,
    ObjectStoreModel,
    RegionStore,
    StoredItem,
)
from chunkstore.protocol import (
    ATTR_BYTES,
    ATTR_DIGEST,
    ATTR_DIGEST_KIND,
    ATTR_VERSION,
    EntityNotFound,
    MalformedRecord,
    ProtocolError,
    ReadResult,
    WriteReceipt,
)
from chunkstore.versioning import EntityVersion

logger = logging.getLogger(__name__)

ATTR_OBJECT_KEY = "ObjKey"
POINTER_SORT_KEY = b"POINTER"
MAX_POINTER_ATTEMPTS = 8


class DanglingPointer(ProtocolError):
    """The pointer is visible but its object is not: the modeled 404."""

    def __init__(self, entity_id: bytes, object_key: bytes):
        super().__init__(f"pointer of {entity_id!r} references missing object {object_key!r}")
        self.entity_id = entity_id
        self.object_key = object_key


def object_key_for(entity_id: bytes, version: EntityVersion) -> bytes:
    return entity_id + b"/" + version.sortable().encode("ascii")


def pointer_key(entity_id: bytes) -> ItemKey:
    return ItemKey(entity_id, POINTER_SORT_KEY)


@dataclass(frozen=True, slots=True)
class PointerRecord:
    entity_id: bytes
    version: EntityVersion
    object_key: bytes
    total_bytes: int
    digest: PayloadDigest

    def to_item(self) -> StoredItem:
        return StoredItem(
            pointer_key(self.entity_id),
            {
                ATTR_VERSION: self.version.sortable(),
                ATTR_OBJECT_KEY: self.object_key,
                ATTR_BYTES: self.total_bytes,
                ATTR_DIGEST: self.digest.value,
                ATTR_DIGEST_KIND: self.digest.kind,
            },
        )

    @classmethod
    def from_item(cls, item: StoredItem) -> PointerRecord:
        attrs = item.attributes
        try:
            return cls(
                entity_id=item.key.partition_key,
                version=EntityVersion.parse(attrs[ATTR_VERSION]),
                object_key=attrs[ATTR_OBJECT_KEY],
                total_bytes=attrs[ATTR_BYTES],
                digest=PayloadDigest(attrs[ATTR_DIGEST_KIND], attrs[ATTR_DIGEST]),
            )
        except (KeyError, ValueError) as e:
            raise MalformedRecord(f"bad pointer record {item.key}: {e!r}") from e


def write_pointer_entity(
    store: RegionStore,
    bucket: ObjectStoreModel,
    entity_id: bytes,
    payload: bytes,
    version: EntityVersion,
    checksum_kind: ChecksumKind = "crc32c",
    digest: Optional[PayloadDigest] = None,
) -> WriteReceipt:
    """Put the payload object, then publish the pointer.

    The pointer put is last-writer-wins against whatever pointer is already
    stored locally; a stale version leaves the newer pointer in place.
    """
    if not entity_id:
        raise ValueError("entity_id must be non-empty")
    object_key = object_key_for(entity_id, version)
    record = PointerRecord(
        entity_id,
        version,
        object_key,
        len(payload),
        digest or compute_digest(payload, checksum_kind),
    )
    bucket.object_put(object_key, payload, version)

    item = record.to_item()
    for _ in range(MAX_POINTER_ATTEMPTS):
        current = store.get_item(item.key)
        if current is None:
            condition = Condition.attribute_absent(ATTR_VERSION)
        else:
            current_version = current.attributes.get(ATTR_VERSION)
            if current_version is not None and current_version >= item.attributes[ATTR_VERSION]:
                logger.debug(
                    "Pointer of %r already at %s; %s not published",
                    entity_id, current_version, version,
                )
                break
            condition = Condition.attribute_equals(ATTR_VERSION, current_version)
        try:
            store.put_item(item, condition)
            break
        except ConditionFailed:
            logger.debug("Pointer of %r changed underneath us, re-reading", entity_id)
    else:
        raise ConditionFailed(
            f"pointer of {entity_id!r} kept changing over {MAX_POINTER_ATTEMPTS} attempts"
        )
    return WriteReceipt(version, 0, "pointer", len(payload))


def read_pointer_entity(
    store: RegionStore, bucket: ObjectStoreModel, entity_id: bytes
) -> ReadResult:
    """Follow the pointer into the bucket. No retries: a 404 surfaces as DanglingPointer."""
    item = store.get_item(pointer_key(entity_id))
    if item is None:
        raise EntityNotFound(f"no pointer for {entity_id!r}")
    record = PointerRecord.from_item(item)
    try:
        payload = bucket.object_get(record.object_key)
    except ObjectNotFound:
        raise DanglingPointer(entity_id, record.object_key) from None
    if len(payload) != record.total_bytes:
        raise DigestMismatch(
            f"object {record.object_key!r} is {len(payload)} bytes, pointer says {record.total_bytes}"
        )
    if read_digests.digest((payload,), record.digest.kind) != record.digest:
        raise DigestMismatch(f"object {record.object_key!r} failed its checksum")
    return ReadResult(payload, record.version, 0)
