"""Counter-based random streams derived from one master seed.

Each consumer (initialisation, shuffling, noise, ...) names its stream with a
tuple of labels; the labels are hashed into a Philox key so streams never
overlap and do not depend on call order.
"""
import zlib

import numpy as np


def _label_word(label):
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def rng(seed, *labels):
    words = [int(seed) & 0xFFFFFFFF] + [_label_word(lab) for lab in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
