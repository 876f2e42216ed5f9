"""
Pair Batch Fetcher

Builds training batches of same-speaker segment pairs. Every batch is a
pure function of (seed, step), so batches can be prefetched on worker
threads and still arrive in a fixed order.
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Deque, Iterator, List, Optional, Tuple

import numpy as np

from models.audio import SEGMENT_FRAMES, DatasetManifest, NormalizationStats, TrainingPair
from models.errors import NoEligibleSpeakerError, ShapeError
from services.audio_frontend import sample_pair
from services.feature_cache import MelCache

SEED_TAGS = {
    "pairs": 1,
    "shuffle": 2,
    "mine": 3,
}


def derive_seed(seed: int, step: int, tag: str, index: int = 0) -> int:
    """Deterministic 32-bit seed for one (run seed, step, purpose, index)."""
    if tag not in SEED_TAGS:
        raise KeyError(f"unknown seed tag {tag!r}")
    sequence = np.random.SeedSequence([int(seed), int(step), SEED_TAGS[tag], int(index)])
    return int(sequence.generate_state(1)[0])


@dataclass
class PairBatch:
    """Stacked pairs: z and z_prime are [N, n_mels, segment_frames] float32."""
    step: int
    z: np.ndarray
    z_prime: np.ndarray
    speaker_ids: List[str] = field(default_factory=list)
    utterance_ids: List[Tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.z.shape[0])


def stack_pairs(step: int, pairs: List[TrainingPair],
                normalization: Optional[NormalizationStats] = None) -> PairBatch:
    if len(pairs) < 2:
        raise ShapeError(f"a batch needs at least 2 pairs, got {len(pairs)}")
    z = np.stack([p.z for p in pairs]).astype(np.float32)
    z_prime = np.stack([p.z_prime for p in pairs]).astype(np.float32)
    if normalization is not None:
        z, z_prime = normalization.apply(z), normalization.apply(z_prime)
    return PairBatch(step=step, z=z, z_prime=z_prime,
                     speaker_ids=[p.speaker_id for p in pairs],
                     utterance_ids=[p.utterance_ids for p in pairs])


class PairBatchFetcher:
    """
    Deterministic batch source over a manifest.

    Args:
        manifest: Training manifest
        mel_cache: Feature cache providing full-utterance mels
        batch_size: Pairs per batch (>= 2)
        seed: Run seed
        normalization: Optional per-bin statistics applied to each segment
        prefetch_workers: Worker threads building batches ahead (0 disables)
    """

    def __init__(self, manifest: DatasetManifest, mel_cache: MelCache, batch_size: int,
                 seed: int, normalization: Optional[NormalizationStats] = None,
                 prefetch_workers: int = 0, segment_frames: int = SEGMENT_FRAMES):
        if batch_size < 2:
            raise ShapeError(f"batch_size must be >= 2, got {batch_size}")
        self.logger = logging.getLogger(__name__)
        self.manifest = manifest
        self.mel_cache = mel_cache
        self.batch_size = batch_size
        self.seed = seed
        self.normalization = normalization
        self.prefetch_workers = prefetch_workers
        self.segment_frames = segment_frames

        self.eligible = manifest.usable_by_speaker(segment_frames)
        if not self.eligible:
            raise NoEligibleSpeakerError("no speaker has two utterances long enough to pair")

        self.batches_built = 0
        self.logger.info(f"PairBatchFetcher initialized: {len(self.eligible)} eligible speakers, "
                         f"batch size {batch_size}")

    def fetch(self, step: int) -> PairBatch:
        """The batch for `step`."""
        pairs = [sample_pair(self.manifest, self.mel_cache, derive_seed(self.seed, step, "pairs", i),
                             self.segment_frames, eligible=self.eligible)
                 for i in range(self.batch_size)]
        self.batches_built += 1
        return stack_pairs(step, pairs, self.normalization)

    def batches(self, start: int, stop: int) -> Iterator[PairBatch]:
        """Batches for steps [start, stop) in order, prefetched when workers > 0."""
        if self.prefetch_workers <= 0:
            for step in range(start, stop):
                yield self.fetch(step)
            return

        lookahead = 2 * self.prefetch_workers
        with ThreadPoolExecutor(max_workers=self.prefetch_workers) as pool:
            pending: Deque = deque()
            next_step = start
            while next_step < stop and len(pending) < lookahead:
                pending.append(pool.submit(self.fetch, next_step))
                next_step += 1
            while pending:
                batch = pending.popleft().result()
                if next_step < stop:
                    pending.append(pool.submit(self.fetch, next_step))
                    next_step += 1
                yield batch
