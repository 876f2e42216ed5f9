import hashlib
import json
import os
from typing import Any, Dict, Optional

from models.audio import MelConfig
from models.errors import ConfigMismatchError
from models.network import ModelConfig
from models.training import TrainConfig


class Config:
    """Process-wide defaults for the voice-conversion toolkit."""

    # Logging Configuration
    LOG_LEVEL = os.getenv('MAINVC_LOG_LEVEL', 'INFO')

    # Feature Configuration
    SAMPLE_RATE = int(os.getenv('MAINVC_SAMPLE_RATE', 16000))
    N_MELS = int(os.getenv('MAINVC_N_MELS', 80))
    HOP = int(os.getenv('MAINVC_HOP', 256))
    CACHE_DIR = os.getenv('MAINVC_CACHE_DIR', 'mel_cache')

    # Training Configuration
    SEED = int(os.getenv('MAINVC_SEED', 0))
    BATCH_SIZE = int(os.getenv('MAINVC_BATCH_SIZE', 8))
    TOTAL_STEPS = int(os.getenv('MAINVC_TOTAL_STEPS', 100000))
    WARMUP_STEPS = int(os.getenv('MAINVC_WARMUP_STEPS', 20000))
    DTYPE = os.getenv('MAINVC_DTYPE', 'float32')

    # Conversion Configuration
    GRIFFIN_LIM_ITERS = int(os.getenv('MAINVC_GL_ITERS', 64))

    @classmethod
    def get_mel_config(cls) -> MelConfig:
        """Get front-end feature configuration."""
        return MelConfig(sample_rate=cls.SAMPLE_RATE, n_mels=cls.N_MELS, hop=cls.HOP,
                         fmax=min(8000.0, cls.SAMPLE_RATE / 2))

    @classmethod
    def get_model_config(cls) -> ModelConfig:
        """Get the reference model topology."""
        return ModelConfig(n_mels=cls.N_MELS)

    @classmethod
    def get_train_config(cls) -> TrainConfig:
        """Get training defaults."""
        return TrainConfig(seed=cls.SEED, batch_size=cls.BATCH_SIZE,
                           total_steps=cls.TOTAL_STEPS, warmup_steps=cls.WARMUP_STEPS)

    @classmethod
    def load_run_config(cls, path: Optional[str] = None) -> Dict[str, Any]:
        """
        Merge a JSON run file over the defaults.

        Args:
            path: Optional JSON file with `mel`, `model` and `train` objects

        Returns:
            Dictionary with `mel`, `model` and `train` dataclass instances;
            `model.n_mels` follows `mel.n_mels`

        Raises:
            ConfigMismatchError: If the run file sets conflicting mel counts
        """
        overrides: Dict[str, Any] = {}
        if path:
            with open(path, 'r', encoding='utf-8') as handle:
                overrides = json.load(handle)

        mel = MelConfig.from_dict({**cls.get_mel_config().to_dict(), **overrides.get('mel', {})})
        model_overrides = overrides.get('model', {})
        if 'n_mels' in model_overrides and int(model_overrides['n_mels']) != mel.n_mels:
            raise ConfigMismatchError(f"model.n_mels={model_overrides['n_mels']} does not match "
                                      f"mel.n_mels={mel.n_mels}")
        model = ModelConfig.from_dict({**cls.get_model_config().to_dict(), **model_overrides,
                                       'n_mels': mel.n_mels})
        train = TrainConfig.from_dict({**cls.get_train_config().to_dict(), **overrides.get('train', {})})
        return {'mel': mel, 'model': model, 'train': train}


def mel_config_hash(mel: MelConfig) -> str:
    """SHA-256 of the canonical mel configuration (feature compatibility)."""
    return hashlib.sha256(json.dumps(mel.to_dict(), sort_keys=True).encode('utf-8')).hexdigest()


def config_hash(mel: MelConfig, model: ModelConfig) -> str:
    """SHA-256 of the canonical mel + model configuration."""
    payload = json.dumps({'mel': mel.to_dict(), 'model': model.to_dict()}, sort_keys=True)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()
