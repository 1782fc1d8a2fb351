"""Named, seeded random streams; each randomized code path draws from its own stream."""

from __future__ import annotations

import logging
import zlib

import numpy as np

log = logging.getLogger(__name__)


def stream(seed: int, name: str) -> np.random.Generator:
    log.debug("rng stream %r seeded with %d", name, seed)
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]))
