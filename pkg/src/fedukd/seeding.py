"""Deterministic RNG derivation.

Every source of randomness in the package is a numpy Generator derived
from the experiment seed through a SeedSequence spawn key.  The leading
namespace code keeps independent concerns (weight init, batch
shuffling, corpus synthesis, partition shuffling) from ever sharing a
stream, and the remaining key components make each consumer's stream a
pure function of the values that are supposed to influence it.
"""

from __future__ import annotations

import numpy as np

_NS_INIT = 1
_NS_SHUFFLE = 2
_NS_CORPUS = 3
_NS_PARTITION = 4


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for namespace ``path`` under ``seed``.

    Identical (seed, path) pairs always yield identical streams.
    """
    if any(p < 0 for p in path):
        raise ValueError(f"spawn path components must be non-negative, got {path}")
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))


def spec_init_rng(seed: int, spec_digest: bytes) -> np.random.Generator:
    """Stream for weight initialisation of one architecture.

    Folding the spec digest in decorrelates same-seed inits of
    different architectures (teacher vs student).
    """
    tag = int.from_bytes(spec_digest[:4], "little")
    return derive_rng(seed, _NS_INIT, tag)


def shuffle_rng(seed: int, global_epoch: int) -> np.random.Generator:
    """Stream for the batch permutation of one global epoch.

    Keyed on the epoch index only, never on the client id: clients
    holding identical data must walk identical batch sequences, and a
    federated run that resumes at epoch offset r*E must replay the same
    permutations a single continuous run would use.
    """
    return derive_rng(seed, _NS_SHUFFLE, global_epoch)


def corpus_rng(seed: int, sample_index: int) -> np.random.Generator:
    """Stream for synthesising one corpus sample."""
    return derive_rng(seed, _NS_CORPUS, sample_index)


def partition_rng(seed: int) -> np.random.Generator:
    """Stream for quantity-skew sample shuffling."""
    return derive_rng(seed, _NS_PARTITION)
