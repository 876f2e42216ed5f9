from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from models.audio import MelSpectrogram, Waveform
from models.errors import InputError


@dataclass
class ConversionRequest:
    """One-shot conversion job: content from source, voice from target."""

    source_path: str
    target_path: str
    checkpoint_path: str
    output_path: str
    emit_audio: bool = False
    griffin_lim_iters: int = 64

    def validate(self) -> None:
        for label, path in (('source', self.source_path), ('target', self.target_path),
                            ('checkpoint', self.checkpoint_path)):
            if not Path(path).exists():
                raise InputError(f"{label} path does not exist: {path}")
        if self.emit_audio and self.griffin_lim_iters < 1:
            raise InputError(f"griffin_lim_iters must be >= 1, got {self.griffin_lim_iters}")


@dataclass
class ConversionResult:
    mel: MelSpectrogram
    waveform: Optional[Waveform] = None
    mel_path: Optional[str] = None
    audio_path: Optional[str] = None
