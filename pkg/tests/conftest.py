"""Shared fixtures: tiny configs, a synthetic multi-speaker corpus, gradient checks."""

from pathlib import Path
from typing import Callable, Dict, List, Sequence

import numpy as np
import pytest
import soundfile as sf

from autodiff.tensor import Tensor
from models.audio import MelConfig
from models.network import ModelConfig
from models.training import TrainConfig
from services.audio_frontend import build_manifest
from services.feature_cache import MelCache

SMALL_RATE = 8000
UTTERANCE_SECONDS = 1.2


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_mel_config() -> MelConfig:
    return MelConfig(sample_rate=SMALL_RATE, n_fft=256, hop=64, win=256, n_mels=16,
                     fmin=0.0, fmax=SMALL_RATE / 2)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(n_mels=16, content_channels=8, encoder_width=8, speaker_hidden=8,
                       speaker_width=12, decoder_width=8, apc_dilations=[1, 2],
                       encoder_depth=1, speaker_depth=1, decoder_depth=2, n_adain_layers=2,
                       ts_chunk=8)


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(seed=7, batch_size=2, total_steps=4, inner_cmi_steps=2, warmup_steps=4,
                       cmi_hidden=16, checkpoint_every=2, log_every=1)


def synth_utterance(f0: float, seed: int, seconds: float = UTTERANCE_SECONDS,
                    sample_rate: int = SMALL_RATE) -> np.ndarray:
    """Harmonic voice at `f0` with a seed-dependent syllable envelope."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    voice = sum(np.sin(2 * np.pi * f0 * h * t) / h for h in range(1, 6))
    rate = rng.uniform(2.0, 5.0)
    envelope = 0.5 + 0.5 * np.sin(2 * np.pi * rate * t + rng.uniform(0, np.pi))
    signal = voice * envelope + 0.01 * rng.standard_normal(t.shape)
    return (0.3 * signal / np.max(np.abs(signal))).astype(np.float64)


def write_corpus(root: Path, speakers: Dict[str, float], utterances: int = 3,
                 seconds: float = UTTERANCE_SECONDS) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for index, (speaker, f0) in enumerate(sorted(speakers.items())):
        speaker_dir = root / speaker
        speaker_dir.mkdir(exist_ok=True)
        for u in range(utterances):
            samples = synth_utterance(f0, seed=100 * index + u, seconds=seconds)
            sf.write(str(speaker_dir / f"utt{u:02d}.wav"), samples, SMALL_RATE, subtype='PCM_16')
    return root


@pytest.fixture
def corpus_dir(tmp_path) -> Path:
    return write_corpus(tmp_path / "corpus", {"spk_a": 110.0, "spk_b": 220.0})


@pytest.fixture
def manifest(corpus_dir, tiny_mel_config):
    return build_manifest(corpus_dir, mel_config=tiny_mel_config)


@pytest.fixture
def mel_cache(tmp_path, tiny_mel_config) -> MelCache:
    return MelCache(tmp_path / "cache", tiny_mel_config)


def _numeric_grad(fn: Callable[[List[np.ndarray]], float], arrays: List[np.ndarray],
                  index: int, eps: float) -> np.ndarray:
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=['multi_index'])
    for _ in it:
        i = it.multi_index
        original = target[i]
        target[i] = original + eps
        plus = fn(arrays)
        target[i] = original - eps
        minus = fn(arrays)
        target[i] = original
        grad[i] = (plus - minus) / (2 * eps)
    return grad


@pytest.fixture
def grad_check():
    """
    Compare autodiff gradients of sum(op(*inputs) * weights) with central
    differences in float64. Returns the worst relative error.
    """

    def check(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
              eps: float = 1e-6) -> float:
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        weights = np.random.default_rng(seed).standard_normal(op(*[Tensor(a) for a in arrays]).shape)

        def value(current: List[np.ndarray]) -> float:
            return float(np.sum(op(*[Tensor(a) for a in current]).data * weights))

        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        (op(*tensors) * weights).sum().backward()
        worst = 0.0
        for i, t in enumerate(tensors):
            numeric = _numeric_grad(value, arrays, i, eps)
            analytic = t.grad if t.grad is not None else np.zeros_like(numeric)
            denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-10)
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
        return worst

    return check
