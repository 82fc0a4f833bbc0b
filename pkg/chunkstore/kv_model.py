"""In-process emulation of a region-local key-value table and object bucket.

The table enforces the constraints a managed NoSQL store imposes on the
chunked-object protocol: an item size limit, transactional batch limits,
conditional writes and sort-key ordered range queries. Every mutation is
appended to a write log which is the replication source for other regions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from threading import RLock
from types import MappingProxyType
from typing import Callable, Iterable, Literal, Mapping, Optional, Sequence

from chunkstore.versioning import EntityVersion

logger = logging.getLogger(__name__)

AttributeValue = str | int | bytes
MutationOp = Literal["put", "delete"]
HookStage = Literal["before", "after"]
StoreHook = Callable[[HookStage, str], None]
MergeFn = Callable[[Optional["StoredItem"], "StoredItem"], "StoredItem"]

VERSION_ATTRIBUTE = "Ver"


class StoreError(Exception):
    """Base class for store failures."""


class ItemTooLarge(StoreError):
    def __init__(self, key: "ItemKey", size: int, limit: int):
        super().__init__(
            f"item {key} is {size} bytes, exceeds max_item_size {limit}"
        )
        self.key = key
        self.size = size
        self.limit = limit


class ConditionFailed(StoreError):
    """Optimistic-lock conflict; the caller must re-read and retry."""


class BatchLimitExceeded(StoreError):
    pass


class InvalidBatch(StoreError):
    pass


class ObjectNotFound(StoreError):
    """The modeled object-store 404."""


class ReplayError(StoreError):
    """A write log that cannot have been produced by a RegionStore."""


@dataclass(frozen=True, order=True, slots=True)
class ItemKey:
    partition_key: bytes
    sort_key: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.partition_key, bytes) or not self.partition_key:
            raise ValueError("partition_key must be a non-empty byte string")
        if not isinstance(self.sort_key, bytes) or not self.sort_key:
            raise ValueError("sort_key must be a non-empty byte string")

    def __str__(self) -> str:
        return f"{self.partition_key!r}/{self.sort_key!r}"


def _value_size(name: str, value: AttributeValue) -> int:
    # bool is an int subclass but has no place in the attribute model
    if isinstance(value, bool):
        raise TypeError(f"attribute {name!r}: booleans are not supported")
    if isinstance(value, bytes):
        return len(value)
    if isinstance(value, str):
        return len(value.encode("utf-8"))
    if isinstance(value, int):
        return len(str(value))
    raise TypeError(f"attribute {name!r}: unsupported type {type(value).__name__}")


@dataclass(frozen=True, slots=True)
class StoredItem:
    key: ItemKey
    attributes: Mapping[str, AttributeValue]
    serialized_size: int = field(init=False, compare=False)

    def __post_init__(self) -> None:
        attributes = MappingProxyType(dict(self.attributes))
        size = len(self.key.partition_key) + len(self.key.sort_key)
        for name, value in attributes.items():
            if not name:
                raise ValueError("attribute names must be non-empty")
            size += len(name.encode("utf-8")) + _value_size(name, value)
        object.__setattr__(self, "attributes", attributes)
        object.__setattr__(self, "serialized_size", size)

    @classmethod
    def build(
        cls,
        partition_key: bytes,
        sort_key: bytes,
        attributes: Mapping[str, AttributeValue],
    ) -> StoredItem:
        return cls(ItemKey(partition_key, sort_key), attributes)

    def get(self, name: str, default: Optional[AttributeValue] = None):
        return self.attributes.get(name, default)


@dataclass(frozen=True, slots=True)
class StoreLimits:
    max_item_size: int = 409_600
    max_transaction_items: int = 100
    max_transaction_bytes: int = 4_194_304

    def __post_init__(self) -> None:
        if min(self.max_item_size, self.max_transaction_items, self.max_transaction_bytes) <= 0:
            raise ValueError("store limits must be strictly positive")
        if self.max_item_size > self.max_transaction_bytes:
            raise ValueError("max_item_size must not exceed max_transaction_bytes")

    def fits_transaction(self, item_count: int, total_bytes: int) -> bool:
        return (
            item_count <= self.max_transaction_items
            and total_bytes <= self.max_transaction_bytes
        )


@dataclass(frozen=True, slots=True)
class Condition:
    kind: Literal["none", "attribute_absent", "attribute_equals"] = "none"
    name: str = ""
    value: Optional[AttributeValue] = None

    def __post_init__(self) -> None:
        if self.kind != "none" and not self.name:
            raise ValueError(f"{self.kind} condition needs an attribute name")

    @classmethod
    def attribute_absent(cls, name: str) -> Condition:
        return cls("attribute_absent", name)

    @classmethod
    def attribute_equals(cls, name: str, value: AttributeValue) -> Condition:
        return cls("attribute_equals", name, value)

    def holds(self, existing: Optional[StoredItem]) -> bool:
        if self.kind == "none":
            return True
        current = None if existing is None else existing.attributes.get(self.name)
        if self.kind == "attribute_absent":
            return current is None
        return current is not None and type(current) is type(self.value) and current == self.value


NO_CONDITION = Condition()


@dataclass(frozen=True, slots=True)
class LogEntry:
    """One write-log record.

    For deletes, ``item`` carries the key and the deleted item's version
    attribute (when it had one) so replicas can order the delete against
    late puts. ``txn_id`` is the seq of the first entry of the mutation that
    produced this entry.
    """

    seq: int
    op: MutationOp
    item: StoredItem
    txn_id: int

    @property
    def key(self) -> ItemKey:
        return self.item.key


class RegionStore:
    """Region-local table. All public operations are linearizable."""

    def __init__(
        self,
        region_id: str,
        limits: Optional[StoreLimits] = None,
        hook: Optional[StoreHook] = None,
    ) -> None:
        if not region_id:
            raise ValueError("region_id must be non-empty")
        self.region_id = region_id
        self.limits = limits or StoreLimits()
        self.hook = hook
        self.write_log: list[LogEntry] = []
        self._partitions: dict[bytes, dict[bytes, StoredItem]] = {}
        self._tombstones: dict[ItemKey, StoredItem] = {}
        self._lock = RLock()

    # -- internals -------------------------------------------------------

    def _call_hook(self, stage: HookStage, op: str) -> None:
        if self.hook is not None:
            self.hook(stage, op)

    def _check_size(self, item: StoredItem) -> None:
        if item.serialized_size > self.limits.max_item_size:
            raise ItemTooLarge(item.key, item.serialized_size, self.limits.max_item_size)

    def _current(self, key: ItemKey) -> Optional[StoredItem]:
        partition = self._partitions.get(key.partition_key)
        return None if partition is None else partition.get(key.sort_key)

    def _append(self, op: MutationOp, item: StoredItem, txn_id: Optional[int] = None) -> int:
        seq = len(self.write_log) + 1
        self.write_log.append(LogEntry(seq, op, item, txn_id or seq))
        return seq

    def _store(self, item: StoredItem) -> None:
        self._partitions.setdefault(item.key.partition_key, {})[item.key.sort_key] = item
        self._tombstones.pop(item.key, None)

    def _remove(self, key: ItemKey) -> Optional[StoredItem]:
        partition = self._partitions.get(key.partition_key)
        if partition is None:
            return None
        removed = partition.pop(key.sort_key, None)
        if not partition:
            del self._partitions[key.partition_key]
        return removed

    def _record_tombstone(self, marker: StoredItem) -> None:
        version = marker.attributes.get(VERSION_ATTRIBUTE)
        if version is None:
            return
        previous = self._tombstones.get(marker.key)
        if previous is None or previous.attributes[VERSION_ATTRIBUTE] < version:
            self._tombstones[marker.key] = marker

    @staticmethod
    def _delete_marker(key: ItemKey, removed: Optional[StoredItem]) -> StoredItem:
        version = None if removed is None else removed.attributes.get(VERSION_ATTRIBUTE)
        return StoredItem(key, {} if version is None else {VERSION_ATTRIBUTE: version})

    # -- operations ------------------------------------------------------

    def put_item(self, item: StoredItem, condition: Condition = NO_CONDITION) -> int:
        """Store one item; returns its log sequence number."""
        self._call_hook("before", "put_item")
        self._check_size(item)
        with self._lock:
            if not condition.holds(self._current(item.key)):
                raise ConditionFailed(f"condition {condition} failed for {item.key}")
            self._store(item)
            seq = self._append("put", item)
        logger.debug("%s put %s seq=%d", self.region_id, item.key, seq)
        self._call_hook("after", "put_item")
        return seq

    def transact_write(
        self, batch: Sequence[tuple[StoredItem, Condition]]
    ) -> tuple[int, int]:
        """Apply every item of ``batch`` or none; returns the (first, last) seq."""
        self._call_hook("before", "transact_write")
        if not batch:
            raise InvalidBatch("transaction batch must be non-empty")
        if len(batch) > self.limits.max_transaction_items:
            raise BatchLimitExceeded(
                f"{len(batch)} items exceeds max_transaction_items "
                f"{self.limits.max_transaction_items}"
            )
        keys = set()
        total = 0
        for item, _ in batch:
            self._check_size(item)
            if item.key in keys:
                raise InvalidBatch(f"duplicate key in transaction: {item.key}")
            keys.add(item.key)
            total += item.serialized_size
        if total > self.limits.max_transaction_bytes:
            raise BatchLimitExceeded(
                f"{total} bytes exceeds max_transaction_bytes "
                f"{self.limits.max_transaction_bytes}"
            )

        with self._lock:
            for position, (item, condition) in enumerate(batch):
                if not condition.holds(self._current(item.key)):
                    raise ConditionFailed(
                        f"condition {condition} failed for {item.key} "
                        f"(batch position {position}); transaction aborted"
                    )
            first = len(self.write_log) + 1
            for item, _ in batch:
                self._store(item)
                self._append("put", item, txn_id=first)
            last = len(self.write_log)
        logger.debug(
            "%s transact_write %d items seq=%d..%d", self.region_id, len(batch), first, last
        )
        self._call_hook("after", "transact_write")
        return first, last

    def query_partition(
        self, partition_key: bytes, sort_key_prefix: Optional[bytes] = None
    ) -> list[StoredItem]:
        """Items of one partition in ascending bytewise sort-key order."""
        if not partition_key:
            raise ValueError("partition_key must be non-empty")
        self._call_hook("before", "query_partition")
        with self._lock:
            partition = self._partitions.get(partition_key)
            if not partition:
                return []
            items = [
                partition[sk]
                for sk in sorted(partition)
                if sort_key_prefix is None or sk.startswith(sort_key_prefix)
            ]
        return items

    def get_item(self, key: ItemKey) -> Optional[StoredItem]:
        with self._lock:
            return self._current(key)

    def delete_item(self, key: ItemKey) -> int:
        """Remove ``key``; idempotent, and always logged."""
        self._call_hook("before", "delete_item")
        with self._lock:
            removed = self._remove(key)
            marker = self._delete_marker(key, removed)
            self._record_tombstone(marker)
            seq = self._append("delete", marker)
        logger.debug("%s delete %s seq=%d (existed=%s)", self.region_id, key, seq, removed is not None)
        self._call_hook("after", "delete_item")
        return seq

    # -- replication -----------------------------------------------------

    @property
    def last_seq(self) -> int:
        with self._lock:
            return len(self.write_log)

    def log_since(self, seq: int) -> list[LogEntry]:
        """Log entries with sequence numbers greater than ``seq``."""
        with self._lock:
            return self.write_log[max(seq, 0):]

    def apply_replicated(self, entries: Iterable[LogEntry], merge: MergeFn) -> int:
        """Apply entries shipped from another region as one atomic step.

        Conflicts are resolved with ``merge``. A replicated delete leaves a
        tombstone so that an equal or older put arriving later stays deleted.
        Returns the number of entries that changed this store.
        """
        changed = 0
        with self._lock:
            for entry in entries:
                key = entry.key
                current = self._current(key)
                if entry.op == "put":
                    tombstone = self._tombstones.get(key)
                    base = current if current is not None else tombstone
                    winner = merge(base, entry.item)
                    if winner is base:
                        continue
                    self._store(winner)
                    self._append("put", winner)
                    changed += 1
                    continue

                marker = entry.item
                if VERSION_ATTRIBUTE not in marker.attributes:
                    if current is not None:
                        self._remove(key)
                        self._append("delete", self._delete_marker(key, current))
                        changed += 1
                    continue
                if current is not None and merge(marker, current) is current:
                    # a newer put already superseded the deleted version
                    continue
                self._record_tombstone(marker)
                # logged even when nothing is removed so a reload keeps the tombstone
                self._append("delete", marker)
                if current is not None:
                    self._remove(key)
                    changed += 1
        return changed

    def items(self) -> dict[ItemKey, StoredItem]:
        """Point-in-time copy of every item, keyed by ItemKey."""
        with self._lock:
            return {
                ItemKey(pk, sk): item
                for pk, partition in self._partitions.items()
                for sk, item in partition.items()
            }

    def item_count(self) -> int:
        with self._lock:
            return sum(len(partition) for partition in self._partitions.values())

    @classmethod
    def from_log(
        cls,
        region_id: str,
        entries: Iterable[LogEntry],
        limits: Optional[StoreLimits] = None,
    ) -> RegionStore:
        """Rebuild a store by replaying a write log from empty."""
        store = cls(region_id, limits)
        for expected, entry in enumerate(entries, start=1):
            if entry.seq != expected:
                raise ReplayError(f"write log gap: expected seq {expected}, found {entry.seq}")
            if entry.op == "put":
                store._check_size(entry.item)
                store._store(entry.item)
            elif entry.op == "delete":
                store._remove(entry.key)
                store._record_tombstone(entry.item)
            else:
                raise ReplayError(f"unknown mutation {entry.op!r} at seq {entry.seq}")
            store.write_log.append(entry)
        return store


@dataclass(frozen=True, slots=True)
class ObjectChange:
    seq: int
    key: bytes
    payload: bytes
    stamp: EntityVersion


class ObjectStoreModel:
    """Region-local object bucket with last-writer-wins overwrites.

    There is no object size limit and no transaction support.
    """

    def __init__(self, region_id: str) -> None:
        self.region_id = region_id
        self.objects: dict[bytes, tuple[bytes, EntityVersion]] = {}
        self.changes: list[ObjectChange] = []
        self._lock = RLock()

    def object_put(self, key: bytes, payload: bytes, stamp: EntityVersion) -> Optional[int]:
        """Store ``payload`` unless a newer stamp already holds ``key``.

        Returns the change sequence number, or None when the put was stale.
        """
        if not key:
            raise ValueError("object key must be non-empty")
        with self._lock:
            existing = self.objects.get(key)
            if existing is not None and existing[1] >= stamp:
                logger.debug("%s object_put %r suppressed (stale stamp %s)", self.region_id, key, stamp)
                return None
            self.objects[key] = (payload, stamp)
            seq = len(self.changes) + 1
            self.changes.append(ObjectChange(seq, key, payload, stamp))
        return seq

    def object_get(self, key: bytes) -> bytes:
        if not key:
            raise ValueError("object key must be non-empty")
        with self._lock:
            existing = self.objects.get(key)
        if existing is None:
            raise ObjectNotFound(f"object {key!r} not found in region {self.region_id}")
        return existing[0]

    def object_stamp(self, key: bytes) -> Optional[EntityVersion]:
        with self._lock:
            existing = self.objects.get(key)
        return None if existing is None else existing[1]

    def changes_since(self, seq: int) -> list[ObjectChange]:
        with self._lock:
            return self.changes[max(seq, 0):]
