import os
from pathlib import Path

# Use environment variable for config directory, with a default
_default_config_dir = Path.home() / ".config" / "chunkstore"
CONFIG_DIR: Path = Path(os.getenv("CHUNKSTORE_HOME", _default_config_dir))

# Ensure the config directory exists
CONFIG_DIR.mkdir(parents=True, exist_ok=True)

LOG_FILE: Path = CONFIG_DIR / "chunkstore.log"
LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO").upper()

# File-backed region store used by demo / store-put / store-get / gc
STORE_FILE: Path = Path(os.getenv("CHUNKSTORE_STORE_FILE", CONFIG_DIR / "store.ndjson"))

# Identity of this process when it acts as a writer
REGION_ID: str = os.getenv("CHUNKSTORE_REGION", "use1")
WRITER_ID: str = os.getenv("CHUNKSTORE_WRITER_ID", "use1-a")

MAX_ENTITY_BYTES: int = int(
    os.getenv("CHUNKSTORE_MAX_ENTITY_BYTES", str(16 * 1024 * 1024))
)
