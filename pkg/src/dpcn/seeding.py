import zlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one named component of a run.

    The label is hashed with CRC-32 (stable across processes, unlike ``hash``)
    so adding a component never shifts another component's draws.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))])
    return np.random.default_rng(ss)


def subseed(seed: int, label: str) -> int:
    return int(substream(seed, label).integers(0, 2**31 - 1))
