import logging

import numpy as np
import pytest
import soundfile as sf
from scipy import signal

from conftest import SMALL_RATE, synth_utterance, write_corpus
from models.audio import DatasetManifest, LayoutSpec, ManifestEntry, MelConfig, Waveform
from models.errors import AudioFormatError, InputError, NoEligibleSpeakerError, ShapeError
from services.audio_frontend import (build_manifest, compute_normalization, load_waveform, logmel,
                                     mel_basis, normalization_path, read_manifest, read_normalization,
                                     resample, sample_pair, split_manifest, write_manifest,
                                     write_normalization)


@pytest.mark.unit
class TestLoadWaveform:
    @pytest.mark.parametrize("subtype", ['PCM_16', 'PCM_24', 'PCM_32', 'FLOAT'])
    def test_accepted_encodings(self, tmp_path, subtype):
        path = tmp_path / "tone.wav"
        samples = 0.5 * np.sin(np.linspace(0, 20, 1000))
        sf.write(str(path), samples, SMALL_RATE, subtype=subtype)
        w = load_waveform(path)
        assert w.sample_rate == SMALL_RATE
        np.testing.assert_allclose(w.samples, samples, atol=1e-4)

    def test_stereo_is_downmixed(self, tmp_path):
        path = tmp_path / "stereo.wav"
        left, right = np.full(500, 0.2), np.full(500, -0.6)
        sf.write(str(path), np.stack([left, right], axis=1), SMALL_RATE, subtype='FLOAT')
        np.testing.assert_allclose(load_waveform(path).samples, -0.2, atol=1e-6)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_waveform(tmp_path / "absent.wav")

    def test_non_wav_container(self, tmp_path):
        path = tmp_path / "tone.flac"
        sf.write(str(path), np.zeros(1000), SMALL_RATE, format='FLAC')
        with pytest.raises(AudioFormatError):
            load_waveform(path)

    def test_unaccepted_encoding(self, tmp_path):
        path = tmp_path / "tone.wav"
        sf.write(str(path), np.zeros(1000), SMALL_RATE, subtype='PCM_U8')
        with pytest.raises(AudioFormatError):
            load_waveform(path)

    def test_pcm16_full_scale(self, tmp_path):
        path = tmp_path / "edges.wav"
        sf.write(str(path), np.array([32767, -32768, 0, 16384], dtype=np.int16), SMALL_RATE, subtype='PCM_16')
        np.testing.assert_allclose(load_waveform(path).samples, [0.99997, -1.0, 0.0, 0.5], atol=1e-5)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "cut.wav"
        sf.write(str(path), np.zeros(1000), SMALL_RATE, subtype='PCM_16')
        path.write_bytes(path.read_bytes()[:30])
        with pytest.raises(AudioFormatError):
            load_waveform(path)

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "broken.wav"
        path.write_bytes(b"RIFF\x00\x00")
        with pytest.raises(AudioFormatError):
            load_waveform(path)

    def test_non_finite_samples_rejected(self):
        with pytest.raises(InputError):
            Waveform(samples=np.array([0.0, np.inf]), sample_rate=SMALL_RATE)


@pytest.mark.unit
class TestResample:
    @pytest.mark.parametrize("source,target,n", [(22050, 16000, 22050), (8000, 16000, 1001),
                                                 (44100, 16000, 12345), (16000, 8000, 3)])
    def test_output_length(self, source, target, n):
        w = Waveform(samples=np.zeros(n), sample_rate=source)
        out = resample(w, target)
        assert len(out) == int(np.floor(n * target / source + 0.5))
        assert out.sample_rate == target

    def test_same_rate_is_a_copy(self, rng):
        w = Waveform(samples=rng.standard_normal(100), sample_rate=SMALL_RATE)
        out = resample(w, SMALL_RATE)
        np.testing.assert_array_equal(out.samples, w.samples)
        assert out.samples is not w.samples

    def test_preserves_low_tone(self):
        t = np.arange(16000) / 16000
        out = resample(Waveform(np.sin(2 * np.pi * 440 * t), 16000), 8000)
        spectrum = np.abs(np.fft.rfft(out.samples))
        assert np.argmax(spectrum) == pytest.approx(440, abs=1)

    def test_invalid_target(self):
        with pytest.raises(InputError):
            resample(Waveform(np.zeros(10), SMALL_RATE), 0)

    def test_downsampled_tone_is_clean(self):
        t = np.arange(2 * 48000) / 48000
        out = resample(Waveform(0.5 * np.sin(2 * np.pi * 1000 * t), 48000), 16000)
        middle = out.samples[8000:24000]
        spectrum = np.abs(np.fft.rfft(middle * signal.get_window('hann', len(middle))))
        peak = int(np.argmax(spectrum))
        assert abs(peak - 1000) <= 1
        sidebands = np.delete(spectrum, np.arange(peak - 2, peak + 3))
        assert 20 * np.log10(spectrum[peak] / np.max(sidebands)) > 60.0


@pytest.mark.unit
class TestLogMel:
    def test_reference_frame_count(self):
        cfg = MelConfig()
        mel = logmel(Waveform(np.random.default_rng(0).standard_normal(16000) * 0.1, 16000), cfg)
        assert mel.values.shape == (80, 63)
        assert cfg.frame_count(16000) == 63

    def test_silence_hits_the_floor(self, tiny_mel_config):
        mel = logmel(Waveform(np.zeros(2000), SMALL_RATE), tiny_mel_config)
        np.testing.assert_allclose(mel.values, np.log(1e-10))

    def test_rate_mismatch(self, tiny_mel_config):
        with pytest.raises(InputError):
            logmel(Waveform(np.zeros(4000), 16000), tiny_mel_config)

    def test_shorter_than_window(self, tiny_mel_config):
        with pytest.raises(InputError):
            logmel(Waveform(np.zeros(tiny_mel_config.win - 1), SMALL_RATE), tiny_mel_config)

    def test_tone_peaks_in_matching_band(self, tiny_mel_config):
        t = np.arange(SMALL_RATE) / SMALL_RATE
        mel = logmel(Waveform(0.5 * np.sin(2 * np.pi * 1000 * t), SMALL_RATE), tiny_mel_config)
        basis = mel_basis(tiny_mel_config)
        fft_bin = int(round(1000 * tiny_mel_config.n_fft / SMALL_RATE))
        assert abs(int(np.argmax(mel.values[:, 20])) - int(np.argmax(basis[:, fft_bin]))) <= 1

    def test_doubling_amplitude_adds_log_two(self, tiny_mel_config, rng):
        samples = 0.1 * rng.standard_normal(4000)
        base = logmel(Waveform(samples, SMALL_RATE), tiny_mel_config).values
        louder = logmel(Waveform(2.0 * samples, SMALL_RATE), tiny_mel_config).values
        above_floor = base > np.log(tiny_mel_config.log_floor) + 1.0
        assert above_floor.mean() > 0.9
        np.testing.assert_allclose((louder - base)[above_floor], np.log(2.0), atol=1e-6)

    def test_trailing_silence_leaves_leading_frames(self, tiny_mel_config, rng):
        samples = 0.1 * rng.standard_normal(3000)
        base = logmel(Waveform(samples, SMALL_RATE), tiny_mel_config).values
        padded = logmel(Waveform(np.concatenate([samples, np.zeros(1500)]), SMALL_RATE), tiny_mel_config).values
        keep = min(base.shape[1], padded.shape[1]) - int(np.ceil(tiny_mel_config.win / tiny_mel_config.hop))
        np.testing.assert_allclose(padded[:, :keep], base[:, :keep], atol=1e-6)

    def test_filterbank_shape(self, tiny_mel_config):
        assert mel_basis(tiny_mel_config).shape == (16, 129)

    def test_invalid_config(self):
        with pytest.raises(ShapeError):
            MelConfig(sample_rate=16000, fmax=9000.0)


@pytest.mark.unit
class TestManifest:
    def test_sorted_entries_with_frame_counts(self, manifest, tiny_mel_config):
        assert manifest.speakers == ["spk_a", "spk_b"]
        assert [e.utterance_id for e in manifest.entries[:3]] == ["utt00", "utt01", "utt02"]
        expected = tiny_mel_config.frame_count(int(1.2 * SMALL_RATE))
        assert all(e.n_frames == expected for e in manifest.entries)
        assert expected >= 128

    def test_frame_counts_follow_resampling(self, tmp_path, tiny_mel_config):
        speaker = tmp_path / "corpus" / "spk"
        speaker.mkdir(parents=True)
        sf.write(str(speaker / "a.wav"), np.zeros(16000), 16000, subtype='PCM_16')
        entry = build_manifest(tmp_path / "corpus", mel_config=tiny_mel_config).entries[0]
        assert entry.n_frames == tiny_mel_config.frame_count(8000)

    def test_short_speakers_are_reported(self, tmp_path, tiny_mel_config, caplog):
        root = write_corpus(tmp_path / "corpus", {"spk_a": 110.0}, utterances=2)
        write_corpus(root, {"tiny": 300.0}, utterances=2, seconds=0.5)
        with caplog.at_level(logging.WARNING):
            manifest = build_manifest(root, mel_config=tiny_mel_config)
        assert "tiny" in manifest.speakers
        assert "tiny" not in manifest.usable_by_speaker()
        assert any("tiny" in record.message for record in caplog.records)

    def test_hidden_and_filtered_speakers(self, corpus_dir, tiny_mel_config):
        (corpus_dir / ".trash").mkdir()
        sf.write(str(corpus_dir / ".trash" / "x.wav"), np.zeros(100), SMALL_RATE)
        manifest = build_manifest(corpus_dir, LayoutSpec(speakers=["spk_b"]), tiny_mel_config)
        assert manifest.speakers == ["spk_b"]

    def test_missing_root(self, tmp_path):
        with pytest.raises(InputError):
            build_manifest(tmp_path / "nowhere")

    def test_jsonl_round_trip(self, manifest, tmp_path):
        path = tmp_path / "train.jsonl"
        write_manifest(manifest, path)
        assert read_manifest(path).entries == manifest.entries

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"speaker_id": "a"}\n')
        with pytest.raises(InputError):
            read_manifest(path)

    def test_split_holds_out_whole_speakers(self, tmp_path, tiny_mel_config):
        root = write_corpus(tmp_path / "corpus", {f"s{i}": 100.0 + 20 * i for i in range(5)}, utterances=2)
        manifest = build_manifest(root, mel_config=tiny_mel_config)
        seen, unseen = split_manifest(manifest, 2, seed=3)
        assert len(unseen.speakers) == 2
        assert not set(seen.speakers) & set(unseen.speakers)
        assert len(seen) + len(unseen) == len(manifest)
        assert split_manifest(manifest, 2, seed=3)[1].speakers == unseen.speakers

    def test_split_cannot_hold_out_everyone(self, manifest):
        with pytest.raises(InputError):
            split_manifest(manifest, 2, seed=0)


class ArrayCache:
    """In-memory stand-in for MelCache keyed by (speaker, utterance)."""

    def __init__(self, arrays):
        self.arrays = arrays

    def get(self, entry):
        return self.arrays[(entry.speaker_id, entry.utterance_id)]


def array_corpus(frames_by_speaker):
    rng = np.random.default_rng(0)
    entries, arrays = [], {}
    for speaker, lengths in frames_by_speaker.items():
        for index, n_frames in enumerate(lengths):
            utterance = f"u{index}"
            entries.append(ManifestEntry(speaker, utterance, f"{speaker}/{utterance}.wav", n_frames))
            arrays[(speaker, utterance)] = rng.standard_normal((16, n_frames))
    return DatasetManifest(entries), ArrayCache(arrays)


@pytest.mark.unit
class TestNormalizationAndPairs:
    def test_normalization_statistics(self, manifest, mel_cache, tmp_path):
        stats = compute_normalization(manifest, mel_cache)
        frames = np.concatenate([mel_cache.get(e) for e in manifest.entries], axis=1).astype(np.float64)
        np.testing.assert_allclose(stats.mean, frames.mean(axis=1), atol=1e-4)
        np.testing.assert_allclose(stats.std, np.maximum(frames.std(axis=1), 1e-3), rtol=1e-3, atol=1e-4)
        standardized = stats.apply(frames)
        np.testing.assert_allclose(standardized.mean(axis=1), 0.0, atol=1e-3)

        manifest_path = tmp_path / "train.jsonl"
        assert write_normalization(stats, manifest_path) == normalization_path(manifest_path)
        np.testing.assert_array_equal(read_normalization(manifest_path).mean, stats.mean)

    def test_missing_normalization_sidecar(self, tmp_path):
        assert read_normalization(tmp_path / "none.jsonl") is None

    def test_pair_is_same_speaker_different_utterances(self, manifest, mel_cache):
        for seed in range(10):
            pair = sample_pair(manifest, mel_cache, seed)
            assert pair.z.shape == pair.z_prime.shape == (16, 128)
            assert pair.utterance_ids[0] != pair.utterance_ids[1]
            assert pair.speaker_id in ("spk_a", "spk_b")

    def test_pair_is_deterministic(self, manifest, mel_cache):
        a, b = sample_pair(manifest, mel_cache, 42), sample_pair(manifest, mel_cache, 42)
        np.testing.assert_array_equal(a.z, b.z)
        np.testing.assert_array_equal(a.z_prime, b.z_prime)

    def test_crop_comes_from_the_utterance(self, manifest, mel_cache):
        pair = sample_pair(manifest, mel_cache, 5)
        source = mel_cache.get(next(e for e in manifest.entries
                                    if e.speaker_id == pair.speaker_id and e.utterance_id == pair.utterance_ids[0]))
        windows = np.lib.stride_tricks.sliding_window_view(source, 128, axis=1)
        assert any(np.array_equal(windows[:, i], pair.z) for i in range(windows.shape[1]))

    def test_speakers_are_drawn_uniformly(self):
        manifest, cache = array_corpus({"a": [200, 300, 150], "b": [400, 250]})
        draws = [sample_pair(manifest, cache, seed).speaker_id for seed in range(10_000)]
        assert abs(draws.count("a") - 5000) <= 3 * np.sqrt(10_000 * 0.25)

    def test_exact_length_utterance_is_cropped_at_zero(self):
        manifest, cache = array_corpus({"a": [128, 128]})
        for seed in range(20):
            pair = sample_pair(manifest, cache, seed)
            np.testing.assert_array_equal(pair.z, cache.arrays[("a", pair.utterance_ids[0])])
            np.testing.assert_array_equal(pair.z_prime, cache.arrays[("a", pair.utterance_ids[1])])

    def test_no_eligible_speaker(self, tmp_path, tiny_mel_config, mel_cache):
        root = write_corpus(tmp_path / "short", {"a": 100.0, "b": 200.0}, utterances=1)
        manifest = build_manifest(root, mel_config=tiny_mel_config)
        with pytest.raises(NoEligibleSpeakerError):
            sample_pair(manifest, mel_cache, 0)

    def test_synthetic_voice_is_bounded(self):
        assert np.max(np.abs(synth_utterance(150.0, 0))) <= 0.3 + 1e-12
