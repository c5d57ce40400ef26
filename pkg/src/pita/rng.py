"""Seed management.

All randomness in the package flows from a single 64-bit run seed. Each
stage (synth, retrieval, id, ap, eval, ...) derives its own independent
PCG64 generator from (seed, crc32(stage name)), so re-running one stage
reproduces it exactly regardless of what ran before.
"""

import zlib

import numpy as np


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent generator for a named stage of a seeded run."""
    tag = zlib.crc32(stage.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag]))
