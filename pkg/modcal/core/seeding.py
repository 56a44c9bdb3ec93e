"""
Seed derivation. Every random stream in modcal descends from one master seed.
"""

import contextlib
import hashlib
from typing import Iterator

import numpy as np
import torch

# stream ids, one per independent consumer of randomness
STREAM_TRAIN_SCENES = 1
STREAM_TEST_SCENES = 2
STREAM_LAYOUTS = 3
STREAM_INVERSION_INIT = 4
STREAM_SOURCE_TRAIN = 5
STREAM_FSR = 6
STREAM_TARGET = 7
STREAM_SEMI_SPLIT = 8
STREAM_TARGET_SEMANTICS = 9


def derive_seed(master: int, stream: int, index: int = 0) -> int:
    """A 31-bit seed that depends only on (master, stream, index)."""
    sequence = np.random.SeedSequence([int(master), int(stream), int(index)])
    return int(sequence.generate_state(1, dtype=np.uint32)[0] >> 1)


def derive_named_seed(master: int, stream: int, name: str) -> int:
    """derive_seed keyed by a name instead of a position."""
    index = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")
    return derive_seed(master, stream, index)


def generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


@contextlib.contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block under a fixed global torch seed without leaking it."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield