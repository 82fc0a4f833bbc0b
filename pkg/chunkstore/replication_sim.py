"""Seeded discrete-event simulation of a two-region active-active deployment.

The writer region runs the real write paths against its RegionStore and
ObjectStoreModel. Two independent channels ship mutations to the reader
region: the table's write log (fast) and the bucket's change feed (slow,
heavy-tailed). A probe reads each write back in the reader region once its
metadata or pointer has become visible there.

Simulated time is kept in integer microseconds.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Literal, Optional

import numpy as np
import pandas as pd

from chunkstore.analysis import percentile
from chunkstore.chunk_codec import ChunkCodecError, ChunkingConfig
from chunkstore.kv_model import (
    VERSION_ATTRIBUTE,
    LogEntry,
    ObjectChange,
    ObjectStoreModel,
    RegionStore,
    StoredItem,
)
from chunkstore.lag_models import RNG_ALGORITHM, LagModel, sample_lag
from chunkstore.pointer_baseline import read_pointer_entity, write_pointer_entity
from chunkstore.protocol import (
    ProtocolError,
    prepare_payload,
    read_entity,
    write_prepared,
)
from chunkstore.versioning import EntityVersion, HybridClock

logger = logging.getLogger(__name__)

Pattern = Literal["chunked", "pointer"]
PATTERNS: tuple[Pattern, ...] = ("chunked", "pointer")

MICROS = 1_000_000
SIM_EPOCH_MILLIS = 1_700_000_000_000
SIM_WRITER_ID = "use1-a"


class MissingVersionAttribute(ValueError):
    pass


def to_micros(seconds: float) -> int:
    return round(seconds * MICROS)


def lww_merge(existing: Optional[StoredItem], incoming: StoredItem) -> StoredItem:
    """Last-writer-wins on the sortable "Ver" attribute; ties keep ``existing``."""
    incoming_version = incoming.attributes.get(VERSION_ATTRIBUTE)
    if incoming_version is None:
        raise MissingVersionAttribute(f"incoming item {incoming.key} has no Ver")
    if existing is None:
        return incoming
    if existing.key != incoming.key:
        raise ValueError(f"cannot merge {existing.key} with {incoming.key}")
    existing_version = existing.attributes.get(VERSION_ATTRIBUTE)
    if existing_version is None:
        raise MissingVersionAttribute(f"stored item {existing.key} has no Ver")
    return incoming if incoming_version > existing_version else existing


@dataclass(frozen=True, slots=True)
class ProbePolicy:
    kind: Literal["immediate", "retry"] = "immediate"
    attempts: int = 1
    interval_seconds: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("immediate", "retry"):
            raise ValueError(f"unknown probe policy {self.kind!r}")
        if self.attempts < 1:
            raise ValueError("probe attempts must be at least 1")
        if self.interval_seconds < 0:
            raise ValueError("probe interval_seconds must be non-negative")
        if self.kind == "immediate" and self.attempts != 1:
            raise ValueError("immediate probes make exactly one attempt")

    @classmethod
    def retry(cls, attempts: int, interval_seconds: float) -> ProbePolicy:
        return cls("retry", attempts, interval_seconds)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 42
    duration_seconds: float = 60.0
    write_rate_per_second: float = 55.0
    payload_bytes: int = 1_048_576
    pattern: Literal["chunked", "pointer", "both"] = "both"
    db_lag: LagModel = field(default_factory=lambda: LagModel.constant(0.0))
    object_lag: LagModel = field(default_factory=lambda: LagModel.constant(0.0))
    probe_policy: ProbePolicy = field(default_factory=ProbePolicy)
    regions: tuple[str, str] = ("use1", "euw1")
    db_lag_draw: Literal["per_entry", "per_transaction"] = "per_entry"
    read_after_write_seconds: float = 0.0
    # race rate the offset was fitted to, when it came from a calibration marker
    read_after_write_race_rate: Optional[float] = None
    max_chunk_bytes: int = 350_000
    horizon_seconds: Optional[float] = None
    rng: str = RNG_ALGORITHM

    def __post_init__(self) -> None:
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        errors = []
        if not 0 <= self.seed < 2**64:
            errors.append("seed: must be an unsigned 64-bit integer")
        if self.duration_seconds <= 0:
            errors.append("duration_seconds: must be > 0")
        if self.write_rate_per_second <= 0:
            errors.append("write_rate_per_second: must be > 0")
        if self.payload_bytes < 0:
            errors.append("payload_bytes: must be >= 0")
        if self.pattern not in ("chunked", "pointer", "both"):
            errors.append("pattern: must be chunked, pointer or both")
        if len(self.regions) != 2 or self.regions[0] == self.regions[1]:
            errors.append("regions: exactly two distinct regions are required")
        if self.db_lag_draw not in ("per_entry", "per_transaction"):
            errors.append("db_lag_draw: must be per_entry or per_transaction")
        if self.read_after_write_seconds < 0:
            errors.append("read_after_write_seconds: must be >= 0")
        rate = self.read_after_write_race_rate
        if rate is not None and not 0 <= rate < 1:
            errors.append("read_after_write_race_rate: must be in [0, 1) when set")
        if self.max_chunk_bytes <= 0:
            errors.append("max_chunk_bytes: must be > 0")
        if self.horizon_seconds is not None and self.horizon_seconds <= 0:
            errors.append("horizon_seconds: must be > 0 when set")
        if self.rng != RNG_ALGORITHM:
            errors.append(f"rng: only {RNG_ALGORITHM} is supported")
        return errors

    def patterns(self) -> tuple[Pattern, ...]:
        return PATTERNS if self.pattern == "both" else (self.pattern,)

    def for_pattern(self, pattern: Pattern) -> SimConfig:
        return replace(self, pattern=pattern)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["db_lag"] = self.db_lag.to_dict()
        data["object_lag"] = self.object_lag.to_dict()
        data["regions"] = list(self.regions)
        return data


@dataclass(frozen=True, slots=True)
class SimEvent:
    """Queue entries are (at_us, seq, SimEvent); seq breaks ties in insertion order."""

    at_us: int
    seq: int
    kind: Literal["local_write", "db_deliver", "object_deliver", "probe"]
    ref: Any = None


@dataclass(frozen=True, slots=True)
class WriteSample:
    write_index: int
    ttc_us: int
    db_lag_us: int
    object_lag_us: Optional[int]
    lag_delta_us: int
    first_probe_failed: Optional[bool]


@dataclass(frozen=True)
class SimMetrics:
    pattern: Pattern
    samples: tuple[WriteSample, ...]
    probe_total: int
    probe_404: int
    writes_total: int
    writes_failed: int
    seed: int
    rng: str = RNG_ALGORITHM

    def __post_init__(self) -> None:
        if self.probe_404 > self.probe_total:
            raise ValueError("probe_404 cannot exceed probe_total")

    @property
    def ttc_samples_us(self) -> list[int]:
        return [s.ttc_us for s in self.samples]

    @property
    def ttc_samples_seconds(self) -> list[float]:
        return [s.ttc_us / MICROS for s in self.samples]

    @property
    def db_lag_samples_us(self) -> list[int]:
        return [s.db_lag_us for s in self.samples]

    @property
    def object_lag_samples_us(self) -> list[int]:
        return [s.object_lag_us for s in self.samples if s.object_lag_us is not None]

    @property
    def lag_delta_samples_us(self) -> list[int]:
        return [s.lag_delta_us for s in self.samples]

    @property
    def first_probe_failed(self) -> list[bool]:
        return [s.first_probe_failed for s in self.samples if s.first_probe_failed is not None]

    @property
    def max_ttc_seconds(self) -> float:
        return max(self.ttc_samples_us, default=0) / MICROS

    @property
    def error_rate(self) -> float:
        return self.probe_404 / self.probe_total if self.probe_total else 0.0

    def ttc_percentile_seconds(self, q: float) -> float:
        return percentile(self.ttc_samples_us, q) / MICROS

    def to_frame(self) -> pd.DataFrame:
        """One row per write whose replication completed."""
        frame = pd.DataFrame(
            [asdict(s) for s in self.samples],
            columns=[
                "write_index",
                "ttc_us",
                "db_lag_us",
                "object_lag_us",
                "lag_delta_us",
                "first_probe_failed",
            ],
        )
        frame.insert(0, "pattern", self.pattern)
        frame["object_lag_us"] = frame["object_lag_us"].astype("Int64")
        frame["first_probe_failed"] = frame["first_probe_failed"].astype("boolean")
        return frame


@dataclass(slots=True)
class _WriteTrack:
    index: int
    entity_id: bytes
    version: EntityVersion
    written_at: int
    pending: int = 0
    completed_at: Optional[int] = None
    visible_at: int = 0
    db_lag_us: int = 0
    object_lag_us: Optional[int] = None
    attempts_left: int = 1
    first_probe_failed: Optional[bool] = None


class Simulation:
    """One seeded run of one pattern. Use run_experiment for the common case."""

    def __init__(self, config: SimConfig) -> None:
        if config.pattern not in PATTERNS:
            raise ValueError(f"a simulation runs one pattern, got {config.pattern!r}")
        self.config = config
        self.pattern: Pattern = config.pattern
        writer_region, reader_region = config.regions
        self.writer_store = RegionStore(writer_region)
        self.reader_store = RegionStore(reader_region)
        self.writer_bucket = ObjectStoreModel(writer_region)
        self.reader_bucket = ObjectStoreModel(reader_region)

        streams = np.random.SeedSequence(config.seed).spawn(3)
        self._arrival_rng, self._db_rng, self._object_rng = (
            np.random.Generator(np.random.PCG64(s)) for s in streams
        )
        self._now_us = 0
        self._clock = HybridClock(SIM_WRITER_ID, lambda: SIM_EPOCH_MILLIS + self._now_us // 1000)
        self._queue: list[tuple[int, int, SimEvent]] = []
        self._seq = 0
        self._shipped_log = 0
        self._shipped_objects = 0
        self._tracks: list[_WriteTrack] = []
        self._probe_total = 0
        self._probe_404 = 0
        self._writes_failed = 0

        chunking = ChunkingConfig(max_chunk_bytes=config.max_chunk_bytes)
        payload = np.random.Generator(np.random.PCG64(config.seed)).bytes(config.payload_bytes)
        self._prepared = prepare_payload(payload, chunking, max_entity_bytes=max(len(payload), 1))
        self._payload = payload

    # -- queue -----------------------------------------------------------

    def _schedule(self, at_us: int, kind: str, ref: Any = None) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (at_us, self._seq, SimEvent(at_us, self._seq, kind, ref)))

    def _next_arrival(self, after_us: int) -> int:
        gap = self._arrival_rng.exponential(1.0 / self.config.write_rate_per_second)
        return after_us + to_micros(gap)

    def _db_lag_us(self) -> int:
        return to_micros(sample_lag(self.config.db_lag, self._db_rng))

    def _object_lag_us(self) -> int:
        return to_micros(sample_lag(self.config.object_lag, self._object_rng))

    # -- handlers --------------------------------------------------------

    def _ship_log(self, track: _WriteTrack) -> int:
        """Schedule this write's log entries; returns the arrival of the group shipped last."""
        entries = self.writer_store.log_since(self._shipped_log)
        self._shipped_log += len(entries)
        groups: dict[int, list[LogEntry]] = {}
        for entry in entries:
            groups.setdefault(entry.txn_id, []).append(entry)

        last_group_at = track.written_at
        for group in groups.values():
            if self.config.db_lag_draw == "per_transaction":
                lag = self._db_lag_us()
            else:
                lag = max(self._db_lag_us() for _ in group)
            track.db_lag_us = max(track.db_lag_us, lag)
            arrival = track.written_at + lag
            # a replica applies a transaction once all of its entries have arrived
            self._schedule(arrival, "db_deliver", (track, group))
            track.pending += 1
            last_group_at = arrival
        return last_group_at

    def _ship_objects(self, track: _WriteTrack) -> None:
        changes = self.writer_bucket.changes_since(self._shipped_objects)
        self._shipped_objects += len(changes)
        for change in changes:
            lag = self._object_lag_us()
            track.object_lag_us = lag if track.object_lag_us is None else max(track.object_lag_us, lag)
            self._schedule(track.written_at + lag, "object_deliver", (track, change))
            track.pending += 1

    def _on_local_write(self, at_us: int) -> None:
        index = len(self._tracks)
        entity_id = f"entity-{index:08d}".encode("ascii")
        version = self._clock.next_version()
        track = _WriteTrack(index, entity_id, version, at_us)
        self._tracks.append(track)

        if self.pattern == "chunked":
            write_prepared(self.writer_store, entity_id, self._prepared, version)
            # the COMMITTED metadata is the newest log entry: its group is shipped last
            track.visible_at = self._ship_log(track)
        else:
            write_pointer_entity(
                self.writer_store,
                self.writer_bucket,
                entity_id,
                self._payload,
                version,
                digest=self._prepared.digest,
            )
            self._ship_objects(track)
            track.visible_at = self._ship_log(track)

        track.attempts_left = self.config.probe_policy.attempts
        probe_at = max(track.visible_at, at_us + to_micros(self.config.read_after_write_seconds))
        self._schedule(probe_at, "probe", track)

        following = self._next_arrival(at_us)
        if following <= to_micros(self.config.duration_seconds):
            self._schedule(following, "local_write")

    def _delivered(self, track: _WriteTrack, at_us: int) -> None:
        track.pending -= 1
        if track.pending == 0:
            track.completed_at = at_us

    def _on_db_deliver(self, at_us: int, ref: tuple[_WriteTrack, list[LogEntry]]) -> None:
        track, group = ref
        self.reader_store.apply_replicated(group, lww_merge)
        self._delivered(track, at_us)

    def _on_object_deliver(self, at_us: int, ref: tuple[_WriteTrack, ObjectChange]) -> None:
        track, change = ref
        self.reader_bucket.object_put(change.key, change.payload, change.stamp)
        self._delivered(track, at_us)

    def _probe_succeeds(self, track: _WriteTrack) -> bool:
        try:
            if self.pattern == "chunked":
                result = read_entity(self.reader_store, track.entity_id)
            else:
                result = read_pointer_entity(self.reader_store, self.reader_bucket, track.entity_id)
        except (ProtocolError, ChunkCodecError) as e:
            logger.debug("Probe of %r failed: %s", track.entity_id, e)
            return False
        return result.version >= track.version

    def _on_probe(self, at_us: int, track: _WriteTrack) -> None:
        self._probe_total += 1
        track.attempts_left -= 1
        ok = self._probe_succeeds(track)
        if track.first_probe_failed is None:
            track.first_probe_failed = not ok
        if ok:
            return
        self._probe_404 += 1
        if track.attempts_left > 0:
            interval = to_micros(self.config.probe_policy.interval_seconds)
            self._schedule(at_us + interval, "probe", track)
        else:
            self._writes_failed += 1

    # -- driver ----------------------------------------------------------

    def run(self) -> SimMetrics:
        config = self.config
        horizon = None if config.horizon_seconds is None else to_micros(config.horizon_seconds)
        logger.info(
            "Simulating %s: seed=%d duration=%ss rate=%s/s payload=%d bytes",
            self.pattern, config.seed, config.duration_seconds,
            config.write_rate_per_second, config.payload_bytes,
        )
        first = self._next_arrival(0)
        if first <= to_micros(config.duration_seconds):
            self._schedule(first, "local_write")

        while self._queue:
            at_us, _, event = heapq.heappop(self._queue)
            if horizon is not None and at_us > horizon:
                break
            self._now_us = at_us
            if event.kind == "local_write":
                self._on_local_write(at_us)
            elif event.kind == "db_deliver":
                self._on_db_deliver(at_us, event.ref)
            elif event.kind == "object_deliver":
                self._on_object_deliver(at_us, event.ref)
            else:
                self._on_probe(at_us, event.ref)

        metrics = self._metrics()
        logger.info(
            "Finished %s: %d writes, %d probes, %d failed (%.4f%%)",
            self.pattern, metrics.writes_total, metrics.probe_total,
            metrics.probe_404, metrics.error_rate * 100,
        )
        return metrics

    def _metrics(self) -> SimMetrics:
        samples = []
        for track in self._tracks:
            if track.completed_at is None:
                continue
            samples.append(
                WriteSample(
                    write_index=track.index,
                    ttc_us=track.completed_at - track.written_at,
                    db_lag_us=track.db_lag_us,
                    object_lag_us=track.object_lag_us,
                    lag_delta_us=track.completed_at - track.visible_at
                    if self.pattern == "chunked"
                    else track.object_lag_us - track.db_lag_us,
                    first_probe_failed=track.first_probe_failed,
                )
            )
        return SimMetrics(
            pattern=self.pattern,
            samples=tuple(samples),
            probe_total=self._probe_total,
            probe_404=self._probe_404,
            writes_total=len(self._tracks),
            writes_failed=self._writes_failed,
            seed=self.config.seed,
            rng=self.config.rng,
        )

    def converged(self) -> bool:
        """True when the reader region holds exactly the writer region's state."""
        if self.writer_store.items() != self.reader_store.items():
            return False
        return self.writer_bucket.objects == self.reader_bucket.objects


def run_experiment(config: SimConfig) -> SimMetrics:
    """Run one seeded simulation of one pattern.

    Args:
        config: Resolved configuration; its pattern must be chunked or pointer

    Returns:
        SimMetrics for the run. The same config always yields the same metrics.
    """
    return Simulation(config).run()
