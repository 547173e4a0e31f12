"""Seed fan-out and checksum helpers shared by every pipeline stage."""

from __future__ import annotations

import hashlib
import os
import random

import numpy as np
import torch


def derive_seed(master: int, *keys) -> int:
    """Derive a 63-bit child seed from a master seed and a key path.

    The derivation is blake2b over ``repr((master, *keys))``, so child seeds
    depend only on their key and never on call order.
    """
    digest = hashlib.blake2b(repr((int(master), *keys)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def derive_seeds(master: int, *keys, count: int) -> list:
    """``[derive_seed(master, *keys, i) for i in range(count)]``, formatting the shared key prefix once."""
    prefix = repr((int(master), *keys, 0))[:-2]  # everything up to the trailing "0)"
    blake = hashlib.blake2b
    return [
        int.from_bytes(blake(f"{prefix}{i})".encode(), digest_size=8).digest(), "little") & (2**63 - 1)
        for i in range(count)
    ]


def rng(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & (2**63 - 1))
    return g


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def configure_torch(threads: int | None = None) -> None:
    """Single-process deterministic torch setup; honours ``TUMORSYNTH_THREADS``."""
    if threads is None:
        threads = int(os.environ.get("TUMORSYNTH_THREADS", "1"))
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
