"""Compressed backups of the store snapshot, with pruning and recovery."""

import io
import logging
import os
import tarfile
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable, Optional

from chunkstore.config import CONFIG_DIR

AUTO_BACKUP_DIR = CONFIG_DIR / "auto_backups"
BACKUP_RETENTION_DAYS = 7
BACKUP_MAX_COUNT = 20
SNAPSHOT_ARCNAME = "store.ndjson"
STAMP_FORMAT = "%Y%m%d_%H%M%S_%f"

logger = logging.getLogger(__name__)

SnapshotCheck = Callable[[bytes], bool]


@dataclass(frozen=True, slots=True)
class BackupInfo:
    created_at: datetime
    path: Path
    size: int


def _archive_path(kind: str) -> Path:
    return AUTO_BACKUP_DIR / f"{kind}_{datetime.now().strftime(STAMP_FORMAT)}.tar.gz"


def _write_archive(snapshot: Path, kind: str) -> Optional[Path]:
    try:
        data = snapshot.read_bytes()
    except FileNotFoundError:
        logger.debug("No snapshot at %s to back up", snapshot)
        return None

    AUTO_BACKUP_DIR.mkdir(parents=True, exist_ok=True)
    archive = _archive_path(kind)
    member = tarfile.TarInfo(SNAPSHOT_ARCNAME)
    member.size = len(data)
    member.mtime = int(time.time())
    member.mode = 0o600
    try:
        with tarfile.open(archive, "w:gz") as tar:
            tar.addfile(member, io.BytesIO(data))
    except (OSError, tarfile.TarError) as e:
        logger.warning("Could not back up %s: %s", snapshot, e)
        archive.unlink(missing_ok=True)
        return None
    logger.info("Backed up %d bytes of %s to %s", len(data), snapshot.name, archive.name)
    return archive


def create_auto_backup(snapshot: Path) -> Optional[Path]:
    """Archive the snapshot before it is rewritten, then prune old archives.

    Args:
        snapshot: Path to the store snapshot file

    Returns:
        Path to the new archive, or None when there was no snapshot or the
        archive could not be written
    """
    archive = _write_archive(snapshot, "backup")
    if archive is not None:
        _cleanup_old_backups()
    return archive


def _cleanup_old_backups() -> None:
    """Drop backups older than BACKUP_RETENTION_DAYS or beyond BACKUP_MAX_COUNT."""
    if not AUTO_BACKUP_DIR.is_dir():
        return
    cutoff = time.time() - BACKUP_RETENTION_DAYS * 86400

    ranked = []
    for path in AUTO_BACKUP_DIR.glob("backup_*.tar.gz"):
        try:
            ranked.append((path.stat().st_mtime, path.name, path))
        except OSError:
            continue
    # names carry microseconds, so they order backups written within one mtime tick
    ranked.sort(reverse=True)

    for position, (mtime, _, path) in enumerate(ranked):
        if mtime >= cutoff and position < BACKUP_MAX_COUNT:
            continue
        try:
            path.unlink()
            logger.debug("Pruned backup %s", path.name)
        except OSError as e:
            logger.warning("Could not prune backup %s: %s", path.name, e)


def read_backup(archive: Path) -> bytes:
    """Read the snapshot bytes held by an archive.

    Args:
        archive: Path to a backup tarball

    Returns:
        The archived snapshot contents

    Raises:
        OSError: If the archive cannot be opened
        tarfile.TarError: If it is not a tarball or holds no snapshot
    """
    with tarfile.open(archive, "r:gz") as tar:
        member = tar.extractfile(SNAPSHOT_ARCNAME)
        if member is None:
            raise tarfile.TarError(f"{SNAPSHOT_ARCNAME} in {archive.name} is not a file")
        return member.read()


def restore_from_backup(
    archive: Path, snapshot: Path, check: Optional[SnapshotCheck] = None
) -> bool:
    """Replace the snapshot with the copy held in a backup.

    The current snapshot is archived as ``emergency_*`` first.

    Args:
        archive: Path to the backup tarball to restore from
        snapshot: Path to the snapshot file to overwrite
        check: Optional predicate on the archived bytes; when it returns
            False nothing is touched

    Returns:
        True if the snapshot was replaced, False otherwise
    """
    if not archive.is_file():
        logger.error("Backup %s not found", archive)
        return False
    try:
        data = read_backup(archive)
    except (OSError, tarfile.TarError, KeyError) as e:
        logger.error("Backup %s is unreadable: %s", archive.name, e)
        return False
    if check is not None and not check(data):
        logger.warning("Backup %s does not hold a loadable snapshot", archive.name)
        return False

    _write_archive(snapshot, "emergency")
    snapshot.parent.mkdir(parents=True, exist_ok=True)
    staging = snapshot.with_name(snapshot.name + ".restore")
    try:
        staging.write_bytes(data)
        os.replace(staging, snapshot)
    except OSError as e:
        logger.error("Could not restore %s: %s", snapshot, e)
        staging.unlink(missing_ok=True)
        return False
    logger.info("Restored %s from %s", snapshot, archive.name)
    return True


def list_backups() -> list[BackupInfo]:
    """Auto-backups, newest first. Files whose names carry no timestamp are skipped."""
    if not AUTO_BACKUP_DIR.is_dir():
        return []
    found = []
    for path in AUTO_BACKUP_DIR.glob("backup_*.tar.gz"):
        stamp = path.name[len("backup_"):-len(".tar.gz")]
        try:
            found.append(BackupInfo(datetime.strptime(stamp, STAMP_FORMAT), path, path.stat().st_size))
        except (ValueError, OSError):
            logger.debug("Ignoring %s", path.name)
    return sorted(found, key=lambda info: info.created_at, reverse=True)


def attempt_auto_recovery(snapshot: Path, check: Optional[SnapshotCheck] = None) -> bool:
    """Restore the snapshot from the newest usable backup.

    Args:
        snapshot: Path to the corrupted snapshot file
        check: Optional predicate a backup must pass to be used

    Returns:
        True if a backup was restored, False if none was usable
    """
    backups = list_backups()
    if not backups:
        logger.error("No backups available to recover %s", snapshot)
        return False
    for info in backups:
        if restore_from_backup(info.path, snapshot, check):
            logger.info("Recovered %s from %s", snapshot.name, info.path.name)
            return True
    logger.error("None of %d backups could restore %s", len(backups), snapshot)
    return False
