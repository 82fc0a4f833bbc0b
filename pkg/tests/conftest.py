"""Shared fixtures."""

import os
import tempfile
from unittest.mock import patch

import pytest

# Keep the log file and default store out of the real ~/.config/chunkstore
os.environ.setdefault("CHUNKSTORE_HOME", tempfile.mkdtemp(prefix="chunkstore-tests-"))

from chunkstore.persistence import check_and_clear_corruption_flag  # noqa: E402


@pytest.fixture(autouse=True)
def backup_dir(tmp_path):
    """Send auto-backups to a per-test directory and start with no corruption flag."""
    target = tmp_path / "auto_backups"
    check_and_clear_corruption_flag()
    with patch("chunkstore.backup.AUTO_BACKUP_DIR", target):
        yield target


@pytest.fixture
def store_file(tmp_path):
    """Snapshot path for file-backed store tests."""
    return tmp_path / "store" / "store.ndjson"
