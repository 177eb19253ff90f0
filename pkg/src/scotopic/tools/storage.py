import hashlib
import logging
import os
import tomllib

import pandas as pd
import tomli_w

from scotopic import config
from scotopic.errors import ConfigError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.toml"


def _get_run_dir(out_dir: str | None = None) -> str:
    """Returns the directory a run writes into (the configured output dir by default)."""
    return os.path.abspath(out_dir) if out_dir else config.get_output_dir()


def get_csv_path(name: str, out_dir: str | None = None) -> str:
    """Returns the path of a result table, e.g. <out>/sat_fr.csv."""
    return os.path.join(_get_run_dir(out_dir), f"{name}.csv")


def get_model_path(name: str, out_dir: str | None = None) -> str:
    """Returns the path of a serialized model, e.g. <out>/models/waldnet.scot."""
    return os.path.join(_get_run_dir(out_dir), "models", f"{name}.scot")


def get_schedule_path(eta: float, out_dir: str | None = None) -> str:
    """Returns the path of an optimized threshold schedule for cost ``eta``."""
    return os.path.join(_get_run_dir(out_dir), "schedules", f"eta_{eta:g}.csv")


def get_manifest_path(out_dir: str | None = None) -> str:
    return os.path.join(_get_run_dir(out_dir), MANIFEST_NAME)


def content_hash(path: str) -> str:
    """sha256 of a file's bytes, hex encoded."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_csv(frame: pd.DataFrame, path: str) -> str:
    """
    Writes a table with a fixed float format and newline so reruns are byte-identical.
    Returns the content hash of the written file.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    digest = content_hash(path)
    print(f"Wrote {path}")
    logger.info(f"Wrote {len(frame)} rows to {path} (sha256 {digest[:12]})")
    return digest


def save_manifest(record: dict, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        tomli_w.dump(record, f)
    logger.info(f"Manifest saved to {path}")
    return path


def load_manifest(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"manifest not found: {path}")
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"failed to parse manifest {path}: {e}") from e
