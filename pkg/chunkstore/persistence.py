"""Newline-delimited snapshot files for RegionStore write logs.

One JSON record per write-log entry, keys sorted, compact separators:

    {"attributes":{"Ver":{"S":"..."}},"op":"put","pk":"<b64>","seq":1,"sk":"<b64>","txn":1}

Attribute values are type-tagged: ``S`` string, ``N`` integer, ``B`` base64
bytes. Loading replays the log, so the rebuilt store satisfies the same
invariants as the one that was dumped.
"""

import base64
import binascii
import json
import logging
import os
import platform
from pathlib import Path
from typing import Optional

from chunkstore.backup import attempt_auto_recovery
from chunkstore.kv_model import (
    AttributeValue,
    ItemKey,
    LogEntry,
    RegionStore,
    StoreError,
    StoreLimits,
    StoredItem,
)

logger = logging.getLogger(__name__)

# Set when a corrupt snapshot was replaced from a backup; cleared on read
_corruption_detected: Optional[str] = None


class SnapshotError(Exception):
    pass


def check_and_clear_corruption_flag() -> Optional[str]:
    global _corruption_detected
    message = _corruption_detected
    _corruption_detected = None
    return message


def _set_secure_permissions(file_path: Path) -> None:
    """Set file to user-read-write only (600)."""
    try:
        file_path.chmod(0o600)
    except (OSError, NotImplementedError) as e:
        if platform.system() != "Windows":
            logger.warning(
                "Could not set secure permissions on %s: %s. "
                "File may be readable by other users.", file_path, e,
            )


def _ensure_secure_dir(directory: Path) -> None:
    """Ensure the snapshot directory exists with secure permissions (700)."""
    directory.mkdir(parents=True, exist_ok=True)
    try:
        directory.chmod(0o700)
    except (OSError, NotImplementedError) as e:
        if platform.system() != "Windows":
            logger.warning(
                "Could not set secure permissions on %s: %s. "
                "Directory may be accessible by other users.", directory, e,
            )


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


def encode_value(value: AttributeValue) -> dict:
    if isinstance(value, bytes):
        return {"B": _b64(value)}
    if isinstance(value, str):
        return {"S": value}
    if isinstance(value, int) and not isinstance(value, bool):
        return {"N": value}
    raise TypeError(f"unsupported attribute type {type(value).__name__}")


def decode_value(tagged: dict) -> AttributeValue:
    if not isinstance(tagged, dict) or len(tagged) != 1:
        raise ValueError(f"expected a single-tag object, got {tagged!r}")
    (tag, value), = tagged.items()
    if tag == "B" and isinstance(value, str):
        return _unb64(value)
    if tag == "S" and isinstance(value, str):
        return value
    if tag == "N" and isinstance(value, int) and not isinstance(value, bool):
        return value
    raise ValueError(f"bad attribute value {tagged!r}")


def encode_entry(entry: LogEntry) -> str:
    record = {
        "seq": entry.seq,
        "op": entry.op,
        "pk": _b64(entry.key.partition_key),
        "sk": _b64(entry.key.sort_key),
        "attributes": {
            name: encode_value(value) for name, value in entry.item.attributes.items()
        },
        "txn": entry.txn_id,
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def decode_entry(line: str) -> LogEntry:
    record = json.loads(line)
    if not isinstance(record, dict):
        raise ValueError("record is not an object")
    if record.get("op") not in ("put", "delete"):
        raise ValueError(f"unknown op {record.get('op')!r}")
    seq = record["seq"]
    key = ItemKey(_unb64(record["pk"]), _unb64(record["sk"]))
    attributes = {name: decode_value(v) for name, v in record["attributes"].items()}
    return LogEntry(seq, record["op"], StoredItem(key, attributes), record.get("txn", seq))


def dump_snapshot(store: RegionStore) -> str:
    return "".join(encode_entry(entry) + "\n" for entry in store.log_since(0))


def load_snapshot_text(
    text: str, region_id: str, limits: Optional[StoreLimits] = None
) -> RegionStore:
    entries = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entries.append(decode_entry(line))
        except (ValueError, KeyError, TypeError, AttributeError, binascii.Error) as e:
            raise SnapshotError(f"line {number}: {type(e).__name__}: {e}") from e
    try:
        return RegionStore.from_log(region_id, entries, limits)
    except StoreError as e:
        raise SnapshotError(f"replay failed: {e}") from e


def save_store(store: RegionStore, path: Path) -> None:
    """Atomically write ``store``'s log to ``path``."""
    _ensure_secure_dir(path.parent)
    temp = path.with_name(path.name + ".tmp")
    temp.write_text(dump_snapshot(store))
    _set_secure_permissions(temp)
    os.replace(temp, path)
    logger.info("Saved %d log entries to %s", store.last_seq, path)


def load_store(
    path: Path, region_id: str, limits: Optional[StoreLimits] = None
) -> RegionStore:
    """Load a snapshot; a missing file is an empty store."""
    if not path.exists():
        logger.info("No snapshot at %s, starting empty", path)
        return RegionStore(region_id, limits)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as e:
        raise SnapshotError(f"cannot read {path}: {e}") from e
    return load_snapshot_text(text, region_id, limits)


def load_store_with_recovery(
    path: Path, region_id: str, limits: Optional[StoreLimits] = None
) -> RegionStore:
    """Load a snapshot, falling back to the newest loadable backup.

    A successful recovery sets the flag read by check_and_clear_corruption_flag.

    Args:
        path: Path to the snapshot file
        region_id: Region the loaded store serves
        limits: Store limits; the defaults when None

    Returns:
        The loaded store

    Raises:
        SnapshotError: If the snapshot is corrupt and no backup restores it
    """
    global _corruption_detected
    try:
        return load_store(path, region_id, limits)
    except SnapshotError as e:
        logger.error("Snapshot %s is corrupted: %s", path, e)

    def loadable(data: bytes) -> bool:
        try:
            load_snapshot_text(data.decode("utf-8"), region_id, limits)
        except (SnapshotError, UnicodeDecodeError):
            return False
        return True

    if not attempt_auto_recovery(path, loadable):
        raise SnapshotError(f"{path} is corrupted and no backup could restore it")
    store = load_store(path, region_id, limits)
    _corruption_detected = (
        f"Snapshot {path.name} was corrupted and has been restored from the latest backup."
    )
    logger.warning(_corruption_detected)
    return store
