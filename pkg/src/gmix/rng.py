"""Named RNG streams split from one master seed.

A stream seed is the first 8 bytes of ``blake2b(repr((master, *keys)))``,
so adding or reordering unrelated streams never shifts an existing one.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

STREAMS = ("init", "shuffle", "mixup-lambda", "mixup-perm", "probe")


def derive_seed(master: int, *keys) -> int:
    payload = repr((int(master),) + tuple(keys)).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def generator(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))


@dataclass
class RunStreams:
    """Independent generators for one training run."""

    seed: int
    init: np.random.Generator
    shuffle_seed: int
    lam: np.random.Generator
    perm: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunStreams":
        return cls(
            seed=int(seed),
            init=generator(seed, "init"),
            shuffle_seed=derive_seed(seed, "shuffle"),
            lam=generator(seed, "mixup-lambda"),
            perm=generator(seed, "mixup-perm"),
        )
