from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from dataclasses_json import dataclass_json

from models.errors import InputError, ShapeError

SEGMENT_FRAMES = 128


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass_json
@dataclass
class MelConfig:
    """STFT and mel filterbank settings for 16 kHz speech."""

    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 256
    win: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.win > self.n_fft:
            raise ShapeError(f"win ({self.win}) must not exceed n_fft ({self.n_fft})")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ShapeError(f"need 0 <= fmin < fmax <= sr/2, got fmin={self.fmin} fmax={self.fmax}")
        if self.n_mels < 1:
            raise ShapeError(f"n_mels must be >= 1, got {self.n_mels}")

    def frame_count(self, n_samples: int) -> int:
        """Frames produced by the centered STFT for n_samples."""
        return n_samples // self.hop + 1

    @property
    def floor_value(self) -> float:
        return float(np.log(self.log_floor))


@dataclass
class MelSpectrogram:
    """Log-mel matrix [n_mels x frames]."""

    values: np.ndarray
    config: MelConfig

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]


@dataclass
class ManifestEntry:
    speaker_id: str
    utterance_id: str
    path: str
    n_frames: int

    @property
    def key(self) -> str:
        return f"{self.speaker_id}/{self.utterance_id}"

    def is_usable(self, segment_frames: int = SEGMENT_FRAMES) -> bool:
        return self.n_frames >= segment_frames

    def to_dict(self) -> dict:
        return {
            'speaker_id': self.speaker_id,
            'utterance_id': self.utterance_id,
            'path': self.path,
            'n_frames': self.n_frames,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ManifestEntry':
        return cls(
            speaker_id=str(data['speaker_id']),
            utterance_id=str(data['utterance_id']),
            path=str(data['path']),
            n_frames=int(data['n_frames']),
        )


@dataclass
class DatasetManifest:
    """Utterance inventory, lexicographically sorted by (speaker, utterance)."""

    entries: List[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: (e.speaker_id, e.utterance_id))
        keys = [(e.speaker_id, e.utterance_id) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise InputError("manifest contains duplicate (speaker_id, utterance_id) pairs")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def speakers(self) -> List[str]:
        return sorted({e.speaker_id for e in self.entries})

    def by_speaker(self) -> Dict[str, List[ManifestEntry]]:
        grouped: Dict[str, List[ManifestEntry]] = {}
        for entry in self.entries:
            grouped.setdefault(entry.speaker_id, []).append(entry)
        return grouped

    def usable_by_speaker(self, segment_frames: int = SEGMENT_FRAMES) -> Dict[str, List[ManifestEntry]]:
        """Speakers with at least two utterances of segment_frames or more."""
        usable = {}
        for speaker, entries in self.by_speaker().items():
            long_enough = [e for e in entries if e.is_usable(segment_frames)]
            if len(long_enough) >= 2:
                usable[speaker] = long_enough
        return usable

    def subset(self, speakers: List[str]) -> 'DatasetManifest':
        wanted = set(speakers)
        return DatasetManifest([e for e in self.entries if e.speaker_id in wanted])


@dataclass
class TrainingPair:
    """Two same-speaker segments from different utterances."""

    z: np.ndarray
    z_prime: np.ndarray
    speaker_id: str
    utterance_ids: tuple = ()

    def __post_init__(self):
        if self.z.shape[-1] != SEGMENT_FRAMES or self.z_prime.shape[-1] != SEGMENT_FRAMES:
            raise ShapeError(f"training segments must have {SEGMENT_FRAMES} frames, "
                             f"got {self.z.shape} and {self.z_prime.shape}")


@dataclass
class NormalizationStats:
    """Per-mel-bin mean/std used to standardize network inputs."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return ((values - self.mean[:, None]) / self.std[:, None]).astype(np.float32)

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[:, None] + self.mean[:, None]

    def to_dict(self) -> dict:
        return {'mean': self.mean.tolist(), 'std': self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> 'NormalizationStats':
        return cls(mean=np.asarray(data['mean'], dtype=np.float32),
                   std=np.asarray(data['std'], dtype=np.float32))

    @classmethod
    def identity(cls, n_mels: int) -> 'NormalizationStats':
        return cls(mean=np.zeros(n_mels, dtype=np.float32), std=np.ones(n_mels, dtype=np.float32))


@dataclass
class LayoutSpec:
    """
    Corpus layout convention: one subdirectory per speaker under the root,
    utterance files matching `pattern` directly inside it. The utterance id
    is the file stem.
    """

    pattern: str = "*.wav"
    segment_frames: int = SEGMENT_FRAMES
    exclude_hidden: bool = True
    speakers: Optional[List[str]] = None
