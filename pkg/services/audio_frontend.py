"""
Audio Front-end

WAV ingestion, resampling, log-mel extraction, corpus manifests and the
same-speaker pair sampler used to build training batches.
"""

import json
import logging
from functools import lru_cache
from math import gcd
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple, Union

import librosa
import numpy as np
import soundfile as sf
from scipy import signal

from models.audio import (SEGMENT_FRAMES, DatasetManifest, LayoutSpec, ManifestEntry,
                          MelConfig, MelSpectrogram, NormalizationStats, TrainingPair,
                          Waveform)
from models.errors import AudioFormatError, InputError, NoEligibleSpeakerError

if TYPE_CHECKING:
    from services.feature_cache import MelCache

logger = logging.getLogger(__name__)

ACCEPTED_FORMATS = {'WAV', 'WAVEX'}
ACCEPTED_SUBTYPES = {'PCM_16', 'PCM_24', 'PCM_32', 'FLOAT'}
RESAMPLE_WINDOW = ('kaiser', 10.0)
MIN_STD = 1e-3


def load_waveform(path: Union[str, Path]) -> Waveform:
    """
    Read a PCM or float WAV file as mono samples in [-1, 1].

    Multichannel audio is downmixed by averaging the channels.

    Raises:
        InputError: If the file does not exist
        AudioFormatError: If the file is unreadable, truncated or not PCM/float WAV
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"audio file not found: {path}")
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise AudioFormatError(f"unreadable audio file {path}: {e}") from e

    if info.format not in ACCEPTED_FORMATS:
        raise AudioFormatError(f"{path}: container {info.format} is not WAV")
    if info.subtype not in ACCEPTED_SUBTYPES:
        raise AudioFormatError(f"{path}: encoding {info.subtype} is not PCM 16/24/32-bit or 32-bit float")

    try:
        samples, sample_rate = sf.read(str(path), dtype='float64', always_2d=True)
    except RuntimeError as e:
        raise AudioFormatError(f"failed to decode {path}: {e}") from e

    return Waveform(samples=samples.mean(axis=1), sample_rate=int(sample_rate))


def resample(w: Waveform, target: int) -> Waveform:
    """
    Windowed-sinc polyphase resampling to `target` Hz.

    The output holds round(len * target / rate) samples.
    """
    if target <= 0:
        raise InputError(f"target rate must be positive, got {target}")
    if target == w.sample_rate:
        return Waveform(samples=w.samples.copy(), sample_rate=w.sample_rate)

    divisor = gcd(int(target), int(w.sample_rate))
    up, down = int(target) // divisor, int(w.sample_rate) // divisor
    out = signal.resample_poly(w.samples, up, down, window=RESAMPLE_WINDOW)

    expected = int(np.floor(len(w) * target / w.sample_rate + 0.5))
    if out.shape[0] >= expected:
        out = out[:expected]
    else:
        out = np.pad(out, (0, expected - out.shape[0]))
    return Waveform(samples=out, sample_rate=int(target))


@lru_cache(maxsize=8)
def _mel_basis(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels,
                               fmin=fmin, fmax=fmax, norm='slaney')


def mel_basis(cfg: MelConfig) -> np.ndarray:
    """Triangular, area-normalized mel filterbank [n_mels x (n_fft/2 + 1)]."""
    return _mel_basis(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)


def stft_magnitude(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    return np.abs(librosa.stft(samples, n_fft=cfg.n_fft, hop_length=cfg.hop,
                               win_length=cfg.win, window='hann', center=True,
                               pad_mode='reflect'))


def logmel(w: Waveform, cfg: MelConfig) -> MelSpectrogram:
    """
    Log-mel spectrogram: centered Hann STFT magnitude through the mel
    filterbank, natural log of max(value, log_floor).

    Raises:
        InputError: On sample-rate mismatch or input shorter than one window
    """
    if w.sample_rate != cfg.sample_rate:
        raise InputError(f"waveform at {w.sample_rate} Hz, features expect {cfg.sample_rate} Hz")
    if len(w) < cfg.win:
        raise InputError(f"waveform of {len(w)} samples is shorter than one window ({cfg.win})")

    mel = mel_basis(cfg) @ stft_magnitude(w.samples, cfg)
    values = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(values=values, config=cfg)


def extract_features(path: Union[str, Path], cfg: MelConfig) -> MelSpectrogram:
    """load -> resample -> logmel."""
    return logmel(resample(load_waveform(path), cfg.sample_rate), cfg)


def build_manifest(root_dir: Union[str, Path], layout_spec: Optional[LayoutSpec] = None,
                   mel_config: Optional[MelConfig] = None) -> DatasetManifest:
    """
    Enumerate a speaker-per-subdirectory corpus.

    Frame counts follow the feature configuration after resampling.
    Speakers with fewer than two usable utterances stay in the manifest but
    are reported, since the pair sampler will skip them.

    Args:
        root_dir: Corpus root
        layout_spec: Layout convention (see LayoutSpec)
        mel_config: Feature configuration used for frame counts

    Returns:
        Lexicographically sorted DatasetManifest
    """
    layout = layout_spec or LayoutSpec()
    cfg = mel_config or MelConfig()
    root = Path(root_dir)
    if not root.is_dir():
        raise InputError(f"corpus root is not a directory: {root}")

    entries: List[ManifestEntry] = []
    speaker_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    for speaker_dir in speaker_dirs:
        if layout.exclude_hidden and speaker_dir.name.startswith('.'):
            continue
        if layout.speakers is not None and speaker_dir.name not in layout.speakers:
            continue
        for audio_path in sorted(speaker_dir.glob(layout.pattern)):
            try:
                info = sf.info(str(audio_path))
            except RuntimeError as e:
                logger.warning(f"Skipping unreadable file {audio_path}: {e}")
                continue
            n_samples = int(np.floor(info.frames * cfg.sample_rate / info.samplerate + 0.5))
            entries.append(ManifestEntry(speaker_id=speaker_dir.name, utterance_id=audio_path.stem,
                                         path=str(audio_path), n_frames=cfg.frame_count(n_samples)))

    manifest = DatasetManifest(entries)
    usable = manifest.usable_by_speaker(layout.segment_frames)
    for speaker in manifest.speakers:
        if speaker not in usable:
            logger.warning(f"Speaker {speaker} has fewer than 2 utterances of "
                           f">= {layout.segment_frames} frames; excluded from pairing")

    logger.info(f"Built manifest with {len(manifest)} utterances from {len(manifest.speakers)} speakers")
    return manifest


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    """One JSON object per line, UTF-8, sorted."""
    with open(path, 'w', encoding='utf-8') as handle:
        for entry in manifest.entries:
            handle.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    entries = []
    with open(path, 'r', encoding='utf-8') as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(ManifestEntry.from_dict(json.loads(line)))
            except (KeyError, ValueError) as e:
                raise InputError(f"{path}:{line_no}: malformed manifest line: {e}") from e
    return DatasetManifest(entries)


def normalization_path(manifest_path: Union[str, Path]) -> Path:
    return Path(f"{manifest_path}.norm.json")


def write_normalization(stats: NormalizationStats, manifest_path: Union[str, Path]) -> Path:
    path = normalization_path(manifest_path)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(stats.to_dict(), handle)
    return path


def read_normalization(manifest_path: Union[str, Path]) -> Optional[NormalizationStats]:
    path = normalization_path(manifest_path)
    if not path.is_file():
        return None
    with open(path, 'r', encoding='utf-8') as handle:
        return NormalizationStats.from_dict(json.load(handle))


def compute_normalization(manifest: DatasetManifest, cache: "MelCache",
                          segment_frames: int = SEGMENT_FRAMES) -> NormalizationStats:
    """Per-mel-bin mean and std over every frame of every usable utterance."""
    total, total_sq, count = None, None, 0
    for entry in manifest.entries:
        if not entry.is_usable(segment_frames):
            continue
        values = cache.get(entry).astype(np.float64)
        if total is None:
            total = np.zeros(values.shape[0])
            total_sq = np.zeros(values.shape[0])
        total += values.sum(axis=1)
        total_sq += (values * values).sum(axis=1)
        count += values.shape[1]
    if count == 0:
        raise InputError("cannot compute normalization statistics: no usable utterances in the manifest")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean * mean, 0.0))
    return NormalizationStats(mean=mean.astype(np.float32),
                              std=np.maximum(std, MIN_STD).astype(np.float32))


def split_manifest(manifest: DatasetManifest, n_unseen: int, seed: int) -> Tuple[DatasetManifest, DatasetManifest]:
    """
    Hold out whole speakers for one-shot evaluation.

    Returns:
        (seen, unseen) manifests
    """
    speakers = manifest.speakers
    if n_unseen >= len(speakers):
        raise InputError(f"cannot hold out {n_unseen} of {len(speakers)} speakers")
    order = np.random.default_rng(seed).permutation(len(speakers))
    unseen = sorted(speakers[i] for i in order[:n_unseen])
    seen = sorted(s for s in speakers if s not in unseen)
    return manifest.subset(seen), manifest.subset(unseen)


def _crop(values: np.ndarray, rng: np.random.Generator, frames: int) -> np.ndarray:
    offset = int(rng.integers(0, values.shape[1] - frames + 1))
    return values[:, offset:offset + frames]


def sample_pair(manifest: DatasetManifest, mel_cache: "MelCache", rng_seed: int,
                segment_frames: int = SEGMENT_FRAMES,
                eligible: Optional[Dict[str, List[ManifestEntry]]] = None) -> TrainingPair:
    """
    Draw a speaker uniformly, two distinct utterances of that speaker and a
    uniform crop of `segment_frames` frames from each.

    Raises:
        NoEligibleSpeakerError: If no speaker has two long-enough utterances
    """
    if eligible is None:
        eligible = manifest.usable_by_speaker(segment_frames)
    if not eligible:
        raise NoEligibleSpeakerError("no speaker has two utterances long enough to pair")

    rng = np.random.default_rng(rng_seed)
    speakers = sorted(eligible)
    speaker = speakers[int(rng.integers(len(speakers)))]
    utterances = eligible[speaker]
    first, second = rng.choice(len(utterances), size=2, replace=False)
    entry_a, entry_b = utterances[int(first)], utterances[int(second)]

    z = _crop(mel_cache.get(entry_a), rng, segment_frames)
    z_prime = _crop(mel_cache.get(entry_b), rng, segment_frames)
    return TrainingPair(z=z, z_prime=z_prime, speaker_id=speaker,
                        utterance_ids=(entry_a.utterance_id, entry_b.utterance_id))
