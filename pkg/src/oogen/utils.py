"""Seed derivation and small shared helpers."""
from __future__ import annotations

import hashlib
import subprocess
from pathlib import Path

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    """Stable 64-bit seed for a named component (independent of ``PYTHONHASHSEED``)."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))


def build_id() -> str:
    """``git describe``-style identifier of the package source, or the package version."""
    from . import __version__

    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__
