"""Disk cache for thermotrack.

Uses diskcache (SQLite-backed) to keep decoded sequences, so repeated
``train``/``track`` runs over the same dataset skip PNG decoding. Entries are
keyed by directory path + mtime of the annotation file, so they invalidate
when a sequence is regenerated. ``THERMOTRACK_CACHE_DIR`` relocates the cache.
"""

from __future__ import annotations

import os
from functools import lru_cache
from pathlib import Path

import diskcache


def cache_dir() -> Path:
    return Path(os.environ.get("THERMOTRACK_CACHE_DIR", Path.home() / ".cache" / "thermotrack"))


def get_cache() -> diskcache.Cache:
    """Return the shared thermotrack disk cache, one instance per directory."""
    return _open_cache(str(cache_dir()))


@lru_cache(maxsize=None)
def _open_cache(directory: str) -> diskcache.Cache:
    return diskcache.Cache(directory)


def cache_key(kind: str, path: Path, stamp: Path | None = None) -> str:
    """``kind:path:mtime_ns`` with the mtime taken from ``stamp`` (default ``path``)."""
    stamp = stamp or path
    return f"{kind}:{path.resolve()}:{stamp.stat().st_mtime_ns}"
