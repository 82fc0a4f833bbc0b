"""Payload splitting, checksums, sort-key encoding and validated reassembly."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass
from threading import Lock
from typing import TYPE_CHECKING, Literal, Optional, Sequence

import google_crc32c

from chunkstore.versioning import EntityVersion

if TYPE_CHECKING:
    from chunkstore.protocol import EntityMetadata

ChecksumKind = Literal["crc32c", "sha256"]

DIGEST_LENGTHS: dict[str, int] = {"crc32c": 4, "sha256": 32}
MAX_CHUNK_INDEX = 999_999
DEFAULT_MAX_CHUNK_BYTES = 350_000
DIGEST_MEMO_SIZE = 64

VERSION_PREFIX = b"V#"
CHUNK_MARKER = b"#CHUNK#"
META_MARKER = b"#META"


class ChunkCodecError(ValueError):
    """Base class for codec failures."""


class IndexOutOfRange(ChunkCodecError):
    pass


class MalformedSortKey(ChunkCodecError):
    pass


class ChunkCountMismatch(ChunkCodecError):
    pass


class NonContiguousIndices(ChunkCodecError):
    pass


class SizeMismatch(ChunkCodecError):
    pass


class DigestMismatch(ChunkCodecError):
    pass


@dataclass(frozen=True, slots=True)
class ChunkingConfig:
    max_chunk_bytes: int = DEFAULT_MAX_CHUNK_BYTES
    checksum_kind: ChecksumKind = "crc32c"
    per_chunk_digest: bool = True

    def __post_init__(self) -> None:
        if self.max_chunk_bytes <= 0:
            raise ValueError("max_chunk_bytes must be positive")
        if self.checksum_kind not in DIGEST_LENGTHS:
            raise ValueError(f"unknown checksum kind {self.checksum_kind!r}")


@dataclass(frozen=True, slots=True)
class PayloadDigest:
    kind: ChecksumKind
    value: bytes

    def __post_init__(self) -> None:
        expected = DIGEST_LENGTHS.get(self.kind)
        if expected is None:
            raise ValueError(f"unknown checksum kind {self.kind!r}")
        if len(self.value) != expected:
            raise ValueError(
                f"{self.kind} digest must be {expected} bytes, got {len(self.value)}"
            )

    def hex(self) -> str:
        return self.value.hex()


@dataclass(frozen=True, slots=True)
class ChunkSlice:
    index: int
    data: bytes
    digest: Optional[PayloadDigest] = None


def split_payload(payload: bytes, config: ChunkingConfig) -> list[ChunkSlice]:
    size = config.max_chunk_bytes
    return [
        ChunkSlice(index, payload[offset : offset + size])
        for index, offset in enumerate(range(0, len(payload), size))
    ]


def compute_digest(payload: bytes, kind: ChecksumKind = "crc32c") -> PayloadDigest:
    if kind == "crc32c":
        return PayloadDigest(kind, google_crc32c.value(payload).to_bytes(4, "big"))
    if kind == "sha256":
        return PayloadDigest(kind, hashlib.sha256(payload).digest())
    raise ValueError(f"unknown checksum kind {kind!r}")


def digest_parts(parts: Sequence[bytes], kind: ChecksumKind = "crc32c") -> PayloadDigest:
    """Digest of the concatenation of ``parts``, without building it."""
    if kind == "crc32c":
        crc = 0
        for part in parts:
            crc = google_crc32c.extend(crc, part)
        return PayloadDigest(kind, crc.to_bytes(4, "big"))
    if kind == "sha256":
        h = hashlib.sha256()
        for part in parts:
            h.update(part)
        return PayloadDigest(kind, h.digest())
    raise ValueError(f"unknown checksum kind {kind!r}")


class DigestMemo:
    """Digests of recently verified buffers, keyed by object identity.

    An entry holds references to the buffers it was computed from, so their
    ids cannot be reused while it lives and bytes cannot change. Reads of
    the same stored chunks therefore hash them once.
    """

    def __init__(self, capacity: int = DIGEST_MEMO_SIZE) -> None:
        self.capacity = capacity
        self._entries: OrderedDict[tuple, tuple[tuple[bytes, ...], PayloadDigest]] = OrderedDict()
        self._lock = Lock()
        self.misses = 0

    def digest(self, parts: Sequence[bytes], kind: ChecksumKind = "crc32c") -> PayloadDigest:
        parts = tuple(parts)
        if not all(type(part) is bytes for part in parts):
            return digest_parts(parts, kind)
        key = (kind, tuple(map(id, parts)))
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None and all(a is b for a, b in zip(entry[0], parts)):
                self._entries.move_to_end(key)
                return entry[1]
        digest = digest_parts(parts, kind)
        with self._lock:
            self.misses += 1
            self._entries[key] = (parts, digest)
            self._entries.move_to_end(key)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
        return digest

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()


read_digests = DigestMemo()


def digest_slices(slices: Sequence[ChunkSlice], kind: ChecksumKind) -> list[ChunkSlice]:
    """Attach a per-chunk digest to each slice."""
    return [ChunkSlice(s.index, s.data, compute_digest(s.data, kind)) for s in slices]


def version_key_prefix(version: EntityVersion) -> bytes:
    """Prefix shared by the metadata and chunk keys of one version."""
    return VERSION_PREFIX + version.sortable().encode("ascii") + b"#"


def encode_chunk_sort_key(version: EntityVersion, index: int) -> bytes:
    if not 0 <= index <= MAX_CHUNK_INDEX:
        raise IndexOutOfRange(f"chunk index {index} outside 0..{MAX_CHUNK_INDEX}")
    return (
        VERSION_PREFIX
        + version.sortable().encode("ascii")
        + CHUNK_MARKER
        + f"{index:06d}".encode("ascii")
    )


def encode_meta_sort_key(version: EntityVersion) -> bytes:
    return VERSION_PREFIX + version.sortable().encode("ascii") + META_MARKER


def parse_sort_key(sort_key: bytes) -> tuple[EntityVersion, Optional[int]]:
    """Decode a sort key into (version, chunk index); index is None for META."""
    if not sort_key.startswith(VERSION_PREFIX):
        raise MalformedSortKey(f"not a versioned sort key: {sort_key!r}")
    body = sort_key[len(VERSION_PREFIX) :]
    if body.endswith(META_MARKER):
        version_text = body[: -len(META_MARKER)]
        index = None
    else:
        version_text, marker, digits = body.partition(CHUNK_MARKER)
        if not marker or len(digits) != 6 or not digits.isdigit():
            raise MalformedSortKey(f"malformed chunk sort key: {sort_key!r}")
        index = int(digits)
    try:
        return EntityVersion.parse(version_text), index
    except ValueError as e:
        raise MalformedSortKey(f"malformed sort key {sort_key!r}: {e}") from e


def reassemble(metadata: "EntityMetadata", chunks: Sequence[ChunkSlice]) -> bytes:
    """Concatenate ``chunks`` after checking them against ``metadata``.

    Checks run in order: chunk count, index contiguity, total size,
    per-chunk digests (when present), whole-payload digest.
    """
    if len(chunks) != metadata.chunk_count:
        raise ChunkCountMismatch(
            f"expected {metadata.chunk_count} chunks, found {len(chunks)}"
        )
    for expected, chunk in enumerate(chunks):
        if chunk.index != expected:
            raise NonContiguousIndices(
                f"chunk at position {expected} has index {chunk.index}"
            )
    total = sum(len(chunk.data) for chunk in chunks)
    if total != metadata.total_bytes:
        raise SizeMismatch(f"expected {metadata.total_bytes} bytes, found {total}")
    for chunk in chunks:
        if chunk.digest is not None and read_digests.digest((chunk.data,), chunk.digest.kind) != chunk.digest:
            raise DigestMismatch(f"chunk {chunk.index} failed its checksum")

    parts = [chunk.data for chunk in chunks]
    actual = read_digests.digest(parts, metadata.digest.kind)
    if actual != metadata.digest:
        raise DigestMismatch(
            f"payload {metadata.digest.kind} {actual.hex()} != expected {metadata.digest.hex()}"
        )
    return b"".join(parts)
