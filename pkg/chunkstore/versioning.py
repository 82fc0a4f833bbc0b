"""Entity version stamps: hybrid timestamp + logical counter + writer id."""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass
from threading import Lock
from typing import Callable, Optional

logger = logging.getLogger(__name__)

Clock = Callable[[], int]

MILLIS_WIDTH = 16
COUNTER_WIDTH = 6
WRITER_WIDTH = 6
MAX_MILLIS = 10**MILLIS_WIDTH - 1
MAX_COUNTER = 10**COUNTER_WIDTH - 1

_SORTABLE_RE = re.compile(r"^(\d{16})-(\d{6})-([^#]{6})$")


class VersionError(ValueError):
    """Raised for malformed version stamps or writer ids."""


class CounterExhausted(VersionError):
    """Raised when more than 10**6 versions are requested within one millisecond."""


def system_clock() -> int:
    """Wall clock in milliseconds since the epoch."""
    return time.time_ns() // 1_000_000


def validate_writer_id(writer_id: str) -> None:
    if len(writer_id) != WRITER_WIDTH:
        raise VersionError(
            f"writer_id must be exactly {WRITER_WIDTH} characters, got {writer_id!r}"
        )
    if "#" in writer_id or not writer_id.isascii() or not writer_id.isprintable():
        raise VersionError(
            f"writer_id must be printable ASCII without '#', got {writer_id!r}"
        )


@dataclass(frozen=True, order=True, slots=True)
class EntityVersion:
    """Totally ordered version stamp.

    Field order is the comparison order, so the generated ordering methods
    compare (physical_millis, logical_counter, writer_id) lexicographically.
    """

    physical_millis: int
    logical_counter: int
    writer_id: str

    def __post_init__(self) -> None:
        if not 0 <= self.physical_millis <= MAX_MILLIS:
            raise VersionError(f"physical_millis out of range: {self.physical_millis}")
        if not 0 <= self.logical_counter <= MAX_COUNTER:
            raise VersionError(f"logical_counter out of range: {self.logical_counter}")
        validate_writer_id(self.writer_id)

    def sortable(self) -> str:
        """Fixed-width text whose bytewise order equals the tuple order."""
        return (
            f"{self.physical_millis:016d}-{self.logical_counter:06d}-{self.writer_id}"
        )

    def __str__(self) -> str:
        return self.sortable()

    @classmethod
    def parse(cls, text: str | bytes) -> EntityVersion:
        if isinstance(text, bytes):
            text = text.decode("ascii")
        match = _SORTABLE_RE.match(text)
        if not match:
            raise VersionError(f"not a sortable version: {text!r}")
        millis, counter, writer = match.groups()
        return cls(int(millis), int(counter), writer)


def generate_version(
    clock: Clock, writer_id: str, last_issued: Optional[EntityVersion] = None
) -> EntityVersion:
    """Issue a version strictly greater than ``last_issued``.

    When the clock has not moved past ``last_issued`` the previous millisecond
    is reused and the logical counter incremented.
    """
    validate_writer_id(writer_id)
    now = clock()
    if last_issued is None or now > last_issued.physical_millis:
        return EntityVersion(now, 0, writer_id)

    counter = last_issued.logical_counter + 1
    if counter > MAX_COUNTER:
        raise CounterExhausted(
            f"logical counter exhausted at {last_issued.physical_millis} ms"
        )
    return EntityVersion(last_issued.physical_millis, counter, writer_id)


class HybridClock:
    """Thread-safe version issuer for a single writer."""

    def __init__(self, writer_id: str, clock: Clock = system_clock) -> None:
        validate_writer_id(writer_id)
        self.writer_id = writer_id
        self.clock = clock
        self.last_issued: Optional[EntityVersion] = None
        self._lock = Lock()

    def next_version(self) -> EntityVersion:
        with self._lock:
            self.last_issued = generate_version(
                self.clock, self.writer_id, self.last_issued
            )
            return self.last_issued

    def observe(self, seen: EntityVersion) -> None:
        """Fold a version seen elsewhere so the next issue sorts after it."""
        with self._lock:
            if self.last_issued is None or seen > self.last_issued:
                self.last_issued = EntityVersion(
                    seen.physical_millis, seen.logical_counter, self.writer_id
                )
                logger.debug("Clock advanced past observed version %s", seen)
