"""Command-line entry point."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, List, Optional

import pandas as pd

from chunkstore.analysis import render_report
from chunkstore.backup import create_auto_backup
from chunkstore.chunk_codec import DEFAULT_MAX_CHUNK_BYTES, ChunkingConfig
from chunkstore.config import LOG_FILE, LOG_LEVEL, MAX_ENTITY_BYTES, REGION_ID, STORE_FILE, WRITER_ID
from chunkstore.lag_models import CALIBRATION_DRAWS, CalibrationFailed, calibrate_lag_model, verify_lag_model
from chunkstore.persistence import check_and_clear_corruption_flag, load_store_with_recovery, save_store
from chunkstore.protocol import (
    ConfigError,
    EntityCorrupt,
    EntityNotFound,
    EntityTooLarge,
    HybridClock,
    gc_versions,
    list_versions,
    plan_gc,
    read_entity,
    write_with_retry,
)
from chunkstore.replication_sim import run_experiment
from chunkstore.validation import ValidationError, load_sim_config, validate_targets
from chunkstore.versioning import system_clock

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3
EXIT_NOT_FOUND = 4
EXIT_CORRUPT = 5


def setup_logging() -> None:
    log_levels = {
        "DEBUG": logging.DEBUG,
        "INFO": logging.INFO,
        "WARNING": logging.WARNING,
        "ERROR": logging.ERROR,
        "CRITICAL": logging.CRITICAL,
    }
    logging.basicConfig(
        level=log_levels.get(LOG_LEVEL, logging.INFO),
        format="%(asctime)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s",
        filename=LOG_FILE,
        filemode="a",
    )
    logging.info(f"Log level set to {LOG_LEVEL}")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# --- simulate / calibrate ---


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_sim_config(args.config, args.overrides, args.seed)
    out_dir: Path = args.out
    out_dir.mkdir(parents=True, exist_ok=True)

    results = {}
    for pattern in config.patterns():
        results[pattern] = run_experiment(config.for_pattern(pattern))

    read_offset = f"read after write: {config.read_after_write_seconds:.6f}s"
    if config.read_after_write_race_rate is not None:
        read_offset += f" (fitted to race rate {config.read_after_write_race_rate:g})"
    header = [
        f"seed: {config.seed} (rng {config.rng})",
        f"workload: {config.write_rate_per_second}/s for {config.duration_seconds}s, "
        f"{config.payload_bytes} byte payloads",
        f"probe policy: {config.probe_policy.kind}, {read_offset}",
    ]
    report, csv_text = render_report(results.get("chunked"), results.get("pointer"), header)
    _write_text(out_dir / "report.txt", report)
    _write_text(out_dir / "metrics.csv", csv_text)
    _write_text(
        out_dir / "resolved.json",
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
    )
    samples = pd.concat([m.to_frame() for m in results.values()], ignore_index=True)
    samples.to_parquet(out_dir / "samples.parquet", engine="pyarrow", index=False)

    print(report, end="")
    print(f"Results written to {out_dir}")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    validate_targets(args.p50, args.p95, args.p99)
    model = calibrate_lag_model(
        args.p50, args.p95, args.p99, cap_seconds=args.cap_seconds, seed=args.seed or 0
    )
    verification = verify_lag_model(
        model, (args.p50, args.p95, args.p99), CALIBRATION_DRAWS, args.seed or 0
    )
    fragment = json.dumps(
        {"lag_model": model.to_dict(), "verification": verification},
        indent=2,
        sort_keys=True,
    ) + "\n"
    if args.output:
        _write_text(args.output, fragment)
        print(f"Lag model written to {args.output}")
    print(fragment, end="")
    return EXIT_OK


# --- local store commands ---


def _clock_for(args: argparse.Namespace) -> Callable[[], int]:
    if args.clock_ms is None:
        return system_clock
    return lambda: args.clock_ms


def _chunking(args: argparse.Namespace) -> ChunkingConfig:
    return ChunkingConfig(max_chunk_bytes=args.chunk_size, checksum_kind=args.checksum)


def _load_store(args: argparse.Namespace):
    store = load_store_with_recovery(args.store, REGION_ID)
    notice = check_and_clear_corruption_flag()
    if notice:
        print(f"warning: {notice}", file=sys.stderr)
    return store


def _put(args: argparse.Namespace, entity_id: bytes, payload: bytes):
    store = _load_store(args)
    create_auto_backup(args.store)
    clock = HybridClock(WRITER_ID, _clock_for(args))
    existing = list_versions(store, entity_id)
    if existing:
        clock.observe(existing[0][0])
    receipt = write_with_retry(
        store, entity_id, payload, _chunking(args), clock, max_entity_bytes=args.max_entity_bytes
    )
    return store, receipt


def _print_receipt(receipt) -> None:
    print(f"version: {receipt.version}")
    print(f"chunk_count: {receipt.chunk_count}")
    print(f"path_taken: {receipt.path_taken}")
    print(f"bytes_written: {receipt.bytes_written}")


def cmd_demo(args: argparse.Namespace) -> int:
    payload = args.payload.read_bytes()
    entity_id = args.entity_id.encode("utf-8")
    store, receipt = _put(args, entity_id, payload)
    _print_receipt(receipt)

    result = read_entity(store, entity_id)
    save_store(store, args.store)
    if result.payload != payload or result.version != receipt.version:
        logging.error(f"Round-trip mismatch for {args.payload}")
        print("MISMATCH: read-back differs from the written payload", file=sys.stderr)
        return EXIT_INTERNAL
    print("verified")
    return EXIT_OK


def cmd_store_put(args: argparse.Namespace) -> int:
    payload = args.input.read_bytes()
    store, receipt = _put(args, args.entity_id.encode("utf-8"), payload)
    save_store(store, args.store)
    _print_receipt(receipt)
    return EXIT_OK


def cmd_store_get(args: argparse.Namespace) -> int:
    store = _load_store(args)
    result = read_entity(store, args.entity_id.encode("utf-8"))
    args.output.parent.mkdir(parents=True, exist_ok=True)
    args.output.write_bytes(result.payload)
    print(f"version: {result.version}")
    print(f"fallback_depth: {result.fallback_depth}")
    print(f"bytes: {len(result.payload)}")
    return EXIT_OK


def cmd_gc(args: argparse.Namespace) -> int:
    entity_id = args.entity_id.encode("utf-8")
    store = _load_store(args)
    if not list_versions(store, entity_id):
        raise EntityNotFound(f"no versions of {entity_id!r}")
    doomed = plan_gc(store, entity_id, args.keep)
    if doomed:
        create_auto_backup(args.store)
    deleted = gc_versions(store, entity_id, args.keep)
    save_store(store, args.store)
    for version in doomed:
        print(f"deleted version {version}")
    print(f"records deleted: {deleted}")
    return EXIT_OK


# --- wiring ---


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chunkstore",
        description="Chunked-object storage protocol and cross-region replication simulator",
    )
    parser.add_argument("--config", type=Path, help="simulation config file (JSON)")
    parser.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field (repeatable, dotted keys allowed)",
    )
    parser.add_argument("--store", type=Path, default=STORE_FILE, help="store snapshot file")
    parser.add_argument(
        "--clock-ms", type=int, help="pin the version clock (milliseconds since epoch)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="run the replication simulation")
    simulate.set_defaults(handler=cmd_simulate)

    calibrate = sub.add_parser("calibrate", help="fit a lag model to p50/p95/p99 targets")
    calibrate.add_argument("p50", type=float)
    calibrate.add_argument("p95", type=float)
    calibrate.add_argument("p99", type=float)
    calibrate.add_argument("-o", "--output", type=Path, help="write the fragment here")
    calibrate.add_argument("--cap-seconds", type=float, help="clamp sampled lags")
    calibrate.set_defaults(handler=cmd_calibrate)

    def add_write_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--chunk-size", type=_positive_int, default=DEFAULT_MAX_CHUNK_BYTES)
        p.add_argument("--checksum", choices=["crc32c", "sha256"], default="crc32c")
        p.add_argument("--max-entity-bytes", type=_positive_int, default=MAX_ENTITY_BYTES)

    demo = sub.add_parser("demo", help="write a file through the protocol and verify it")
    demo.add_argument("payload", type=Path)
    demo.add_argument("--entity-id", default="demo")
    add_write_options(demo)
    demo.set_defaults(handler=cmd_demo)

    put = sub.add_parser("store-put", help="store a file as an entity")
    put.add_argument("entity_id")
    put.add_argument("input", type=Path)
    add_write_options(put)
    put.set_defaults(handler=cmd_store_put)

    get = sub.add_parser("store-get", help="materialise an entity into a file")
    get.add_argument("entity_id")
    get.add_argument("output", type=Path)
    get.set_defaults(handler=cmd_store_get)

    gc = sub.add_parser("gc", help="delete old versions of an entity")
    gc.add_argument("entity_id")
    gc.add_argument("--keep", type=_positive_int, default=1)
    gc.set_defaults(handler=cmd_gc)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        return args.handler(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        for error in e.errors:
            print(f"  {error}", file=sys.stderr)
        return EXIT_CONFIG
    except (EntityTooLarge, ConfigError) as e:
        logging.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationFailed as e:
        logging.error(f"Calibration failed: {e}")
        print(f"calibration failed: {e}", file=sys.stderr)
        return EXIT_CALIBRATION
    except EntityNotFound as e:
        print(f"not found: {e}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except EntityCorrupt as e:
        print(f"corrupt: {e}", file=sys.stderr)
        for failure in e.failures:
            print(f"  {failure}", file=sys.stderr)
        return EXIT_CORRUPT
    except Exception as e:
        logging.exception("Unhandled failure")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
