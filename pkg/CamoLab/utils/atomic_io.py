"""
Atomic output writes: temp file in the target directory, then os.replace,
all under a sidecar lock so concurrent partitions never interleave.
"""

import hashlib
import os
import tempfile
from pathlib import Path
from typing import Union

import filelock
import pandas as pd

PathLike = Union[str, Path]

LOCK_TIMEOUT = 30


def _lock_for(path: Path) -> filelock.FileLock:
    return filelock.FileLock(str(path) + ".lock", timeout=LOCK_TIMEOUT)


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write bytes to path atomically and return the resolved path"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with _lock_for(target):
        fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp_name, target)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
    return target


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_csv(df: pd.DataFrame, path: PathLike, float_format: str = "%.4f") -> Path:
    """Render a DataFrame with fixed float formatting and write it atomically"""
    text = df.to_csv(index=False, float_format=float_format, lineterminator="\n")
    return atomic_write_text(path, text)


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
