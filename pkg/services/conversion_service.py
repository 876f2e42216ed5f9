"""
Conversion Service

One-shot conversion: content code from the source utterance, speaker code
from a single raw target utterance, decoded and denormalized. Audio output
is rendered with Griffin-Lim phase reconstruction, which is a
lower-fidelity stand-in for a neural vocoder.
"""

import logging
from pathlib import Path
from typing import Optional, Union

import librosa
import numpy as np
import soundfile as sf

from autodiff.tensor import no_grad
from config import mel_config_hash
from models.audio import MelConfig, MelSpectrogram, NormalizationStats, Waveform
from models.conversion import ConversionRequest, ConversionResult
from models.errors import ConfigMismatchError
from networks.srd_model import SRDModel
from services.audio_frontend import extract_features, mel_basis
from services.checkpoint_manager import Checkpoint, load_checkpoint
from services.feature_cache import write_mel_file

logger = logging.getLogger(__name__)

PEAK_LEVEL = 0.99
GL_MOMENTUM = 0.99


def build_model(ckpt: Checkpoint) -> SRDModel:
    """Conversion-path model with the checkpoint's parameters."""
    model = SRDModel(ckpt.model_config, seed=ckpt.seed)
    model.load_state_dict(ckpt.model_state)
    return model


def convert_mels(model: SRDModel, source: np.ndarray, target: np.ndarray,
                 normalization: NormalizationStats) -> np.ndarray:
    """
    Convert raw log-mels [n_mels x T]; output has the source's frame count.

    Both inputs are standardized with the training statistics and the
    output is mapped back to the log-mel scale.
    """
    with no_grad():
        out = model.convert_codes(normalization.apply(source), normalization.apply(target))
    return normalization.invert(out.data).astype(np.float32)


def griffin_lim(mel: MelSpectrogram, iters: int = 64) -> Waveform:
    """
    Waveform from a log-mel spectrogram.

    The mel filterbank pseudo-inverse gives a linear magnitude; phase is
    estimated iteratively from a zero-phase start, so the result is
    deterministic. Output is peak-normalized.
    """
    cfg = mel.config
    magnitude = np.maximum(np.linalg.pinv(mel_basis(cfg)) @ np.exp(mel.values.astype(np.float64)), 0.0)
    samples = librosa.griffinlim(magnitude, n_iter=iters, hop_length=cfg.hop, win_length=cfg.win,
                                 n_fft=cfg.n_fft, window='hann', center=True, momentum=GL_MOMENTUM,
                                 init=None)
    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 0:
        samples = samples * (PEAK_LEVEL / peak)
    return Waveform(samples=samples, sample_rate=cfg.sample_rate)


def _output_paths(output_path: Union[str, Path], emit_audio: bool):
    output_path = Path(output_path)
    if not emit_audio:
        return output_path, None
    if output_path.suffix.lower() == '.wav':
        return output_path.with_suffix('.mel'), output_path
    return output_path, output_path.with_suffix('.wav')


class ConversionService:
    """
    Holds one loaded checkpoint; `convert` may be called repeatedly and
    from several threads, since the model is only read.
    """

    def __init__(self, checkpoint: Union[str, Path, Checkpoint], mel_config: Optional[MelConfig] = None):
        self.logger = logging.getLogger(__name__)
        self.checkpoint = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
        if mel_config is not None and mel_config_hash(mel_config) != mel_config_hash(self.checkpoint.mel_config):
            raise ConfigMismatchError("front-end feature config differs from the checkpoint's")
        self.mel_config = self.checkpoint.mel_config
        self.model = build_model(self.checkpoint)
        self.logger.info(f"ConversionService ready (checkpoint step {self.checkpoint.step})")

    def convert_files(self, source_path: Union[str, Path], target_path: Union[str, Path]) -> MelSpectrogram:
        source = extract_features(source_path, self.mel_config)
        target = extract_features(target_path, self.mel_config)
        values = convert_mels(self.model, source.values, target.values, self.checkpoint.normalization)
        return MelSpectrogram(values=values, config=self.mel_config)

    def convert(self, req: ConversionRequest) -> ConversionResult:
        req.validate()
        mel = self.convert_files(req.source_path, req.target_path)
        mel_path, audio_path = _output_paths(req.output_path, req.emit_audio)
        mel_path.parent.mkdir(parents=True, exist_ok=True)
        write_mel_file(mel_path, mel.values, mel_config_hash(self.mel_config))

        waveform = None
        if req.emit_audio:
            waveform = griffin_lim(mel, req.griffin_lim_iters)
            sf.write(str(audio_path), waveform.samples, waveform.sample_rate, subtype='PCM_16')
        self.logger.info(f"Converted {req.source_path} with voice of {req.target_path} "
                         f"-> {mel_path} ({mel.n_frames} frames)")
        return ConversionResult(mel=mel, waveform=waveform, mel_path=str(mel_path),
                                audio_path=str(audio_path) if audio_path else None)


def convert(req: ConversionRequest, mel_config: Optional[MelConfig] = None) -> ConversionResult:
    """
    Run one conversion request end to end.

    Raises:
        InputError: Missing files or utterances shorter than one window
        ConfigMismatchError: If `mel_config` differs from the checkpoint's
    """
    req.validate()
    return ConversionService(req.checkpoint_path, mel_config).convert(req)
