import numpy as np
import pytest

from models.audio import NormalizationStats
from models.errors import NoEligibleSpeakerError, ShapeError
from services.audio_frontend import build_manifest
from services.pair_fetcher import SEED_TAGS, PairBatchFetcher, derive_seed, stack_pairs
from conftest import write_corpus


@pytest.mark.unit
class TestDeriveSeed:
    def test_stable_and_distinct(self):
        assert derive_seed(1, 5, "pairs") == derive_seed(1, 5, "pairs")
        seeds = {derive_seed(1, 5, tag) for tag in SEED_TAGS}
        seeds |= {derive_seed(1, 6, "pairs"), derive_seed(2, 5, "pairs"), derive_seed(1, 5, "pairs", 1)}
        assert len(seeds) == len(SEED_TAGS) + 3

    def test_unknown_tag(self):
        with pytest.raises(KeyError):
            derive_seed(0, 0, "dropout")


@pytest.mark.unit
class TestPairBatchFetcher:
    def test_batch_shapes(self, manifest, mel_cache):
        batch = PairBatchFetcher(manifest, mel_cache, batch_size=3, seed=0).fetch(0)
        assert len(batch) == 3
        assert batch.z.shape == batch.z_prime.shape == (3, 16, 128)
        assert batch.z.dtype == np.float32
        assert len(batch.speaker_ids) == len(batch.utterance_ids) == 3

    def test_batch_is_a_function_of_seed_and_step(self, manifest, mel_cache):
        a = PairBatchFetcher(manifest, mel_cache, batch_size=2, seed=4)
        b = PairBatchFetcher(manifest, mel_cache, batch_size=2, seed=4)
        np.testing.assert_array_equal(a.fetch(7).z, b.fetch(7).z)
        assert not np.array_equal(a.fetch(7).z, a.fetch(8).z)

    def test_prefetch_keeps_order_and_content(self, manifest, mel_cache):
        serial = PairBatchFetcher(manifest, mel_cache, batch_size=2, seed=1)
        prefetched = PairBatchFetcher(manifest, mel_cache, batch_size=2, seed=1, prefetch_workers=3)
        expected = list(serial.batches(2, 12))
        got = list(prefetched.batches(2, 12))
        assert [b.step for b in got] == list(range(2, 12))
        for x, y in zip(expected, got):
            np.testing.assert_array_equal(x.z, y.z)
            np.testing.assert_array_equal(x.z_prime, y.z_prime)

    def test_normalization_is_applied(self, manifest, mel_cache):
        stats = NormalizationStats(mean=np.full(16, 2.0, dtype=np.float32), std=np.full(16, 4.0, dtype=np.float32))
        raw = PairBatchFetcher(manifest, mel_cache, batch_size=2, seed=0).fetch(0)
        normed = PairBatchFetcher(manifest, mel_cache, batch_size=2, seed=0, normalization=stats).fetch(0)
        np.testing.assert_allclose(normed.z, (raw.z - 2.0) / 4.0, rtol=1e-6)

    def test_rejects_tiny_batches(self, manifest, mel_cache):
        with pytest.raises(ShapeError):
            PairBatchFetcher(manifest, mel_cache, batch_size=1, seed=0)
        with pytest.raises(ShapeError):
            stack_pairs(0, [])

    def test_no_eligible_speaker(self, tmp_path, tiny_mel_config, mel_cache):
        root = write_corpus(tmp_path / "short", {"a": 100.0}, utterances=3, seconds=0.5)
        with pytest.raises(NoEligibleSpeakerError):
            PairBatchFetcher(build_manifest(root, mel_config=tiny_mel_config), mel_cache, batch_size=2, seed=0)
