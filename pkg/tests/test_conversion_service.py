import numpy as np
import pytest
import soundfile as sf

from autodiff.tensor import no_grad
from config import mel_config_hash
from models.audio import MelConfig, MelSpectrogram, Waveform
from models.conversion import ConversionRequest
from models.errors import ConfigMismatchError, InputError
from services.audio_frontend import compute_normalization, extract_features, logmel
from services.conversion_service import ConversionService, build_model, convert, convert_mels, griffin_lim
from services.feature_cache import read_mel_file
from services.pair_fetcher import PairBatchFetcher
from services.trainer import Trainer


@pytest.fixture
def checkpoint_path(tmp_path, manifest, mel_cache, tiny_mel_config, tiny_model_config, tiny_train_config):
    trainer = Trainer(tiny_mel_config, tiny_model_config, tiny_train_config,
                      normalization=compute_normalization(manifest, mel_cache))
    return trainer.save(tmp_path / "model.ckpt")


@pytest.fixture
def service(checkpoint_path):
    return ConversionService(checkpoint_path)


@pytest.fixture
def utterances(corpus_dir):
    return corpus_dir / "spk_a" / "utt00.wav", corpus_dir / "spk_b" / "utt01.wav"


@pytest.mark.integration
class TestConversion:
    def test_output_follows_source_length(self, service, utterances, tiny_mel_config):
        source, target = utterances
        mel = service.convert_files(source, target)
        assert mel.values.shape == (16, extract_features(source, tiny_mel_config).n_frames)
        assert mel.values.dtype == np.float32

    def test_self_conversion_is_unshuffled_reconstruction(self, service, utterances, tiny_mel_config):
        source = extract_features(utterances[0], tiny_mel_config).values
        stats = service.checkpoint.normalization
        with no_grad():
            expected = service.model.reconstruct(stats.apply(source), shuffle=False).data
        got = convert_mels(service.model, source, source, stats)
        np.testing.assert_allclose(got, stats.invert(expected), rtol=1e-5, atol=1e-5)

    def test_swapping_roles_changes_the_output(self, manifest, mel_cache, utterances, tiny_mel_config,
                                               tiny_model_config, tiny_train_config):
        stats = compute_normalization(manifest, mel_cache)
        trainer = Trainer(tiny_mel_config, tiny_model_config, tiny_train_config, normalization=stats)
        fetcher = PairBatchFetcher(manifest, mel_cache, tiny_train_config.batch_size, 0, normalization=stats)
        trainer.fit(fetcher.batches(0, 4), 4)

        a, b = (extract_features(path, tiny_mel_config).values for path in utterances)
        forward = convert_mels(trainer.model, a, b, stats)
        backward = convert_mels(trainer.model, b, a, stats)
        assert forward.shape == backward.shape
        assert not np.allclose(forward, backward, atol=1e-3)

    def test_model_matches_checkpoint(self, service):
        rebuilt = build_model(service.checkpoint)
        for name, value in service.model.state_dict().items():
            np.testing.assert_array_equal(rebuilt.state_dict()[name], value)

    def test_convert_writes_mel_and_audio(self, checkpoint_path, utterances, tmp_path, tiny_mel_config):
        request = ConversionRequest(source_path=str(utterances[0]), target_path=str(utterances[1]),
                                    checkpoint_path=str(checkpoint_path),
                                    output_path=str(tmp_path / "out" / "converted.wav"),
                                    emit_audio=True, griffin_lim_iters=4)
        result = convert(request, tiny_mel_config)
        values, header = read_mel_file(result.mel_path, mel_config_hash(tiny_mel_config))
        np.testing.assert_array_equal(values, result.mel.values)
        assert result.mel_path.endswith("converted.mel")
        info = sf.info(result.audio_path)
        assert info.samplerate == tiny_mel_config.sample_rate and info.subtype == 'PCM_16'

    def test_feature_config_must_match(self, checkpoint_path):
        with pytest.raises(ConfigMismatchError):
            ConversionService(checkpoint_path, MelConfig())

    def test_missing_source(self, checkpoint_path, utterances, tmp_path):
        request = ConversionRequest(source_path=str(tmp_path / "nope.wav"), target_path=str(utterances[1]),
                                    checkpoint_path=str(checkpoint_path), output_path=str(tmp_path / "o.mel"))
        with pytest.raises(InputError):
            convert(request)

    def test_source_shorter_than_window(self, service, utterances, tmp_path, tiny_mel_config):
        short = tmp_path / "short.wav"
        sf.write(str(short), np.zeros(tiny_mel_config.win // 2), tiny_mel_config.sample_rate, subtype='PCM_16')
        with pytest.raises(InputError):
            service.convert_files(short, utterances[1])


@pytest.mark.unit
class TestGriffinLim:
    def test_length_and_determinism(self, tiny_mel_config, rng):
        mel = MelSpectrogram(values=rng.standard_normal((16, 30)) - 3.0, config=tiny_mel_config)
        a, b = griffin_lim(mel, iters=8), griffin_lim(mel, iters=8)
        assert len(a) == tiny_mel_config.hop * 29
        np.testing.assert_array_equal(a.samples, b.samples)
        assert np.max(np.abs(a.samples)) == pytest.approx(0.99)

    def test_pure_tone_keeps_its_pitch(self):
        cfg = MelConfig()
        t = np.arange(cfg.sample_rate) / cfg.sample_rate
        mel = logmel(Waveform(0.5 * np.sin(2 * np.pi * 440.0 * t), cfg.sample_rate), cfg)
        out = griffin_lim(mel, iters=32)
        spectrum = np.abs(np.fft.rfft(out.samples))
        peak = np.argmax(spectrum) * cfg.sample_rate / len(out)
        # the mel filterbank spaces bands about 37 Hz apart here
        assert abs(peak - 440.0) < 60.0
