"""
Checkpoint Manager

Checkpoint file layout:

    b"MVCK" | uint32 LE header length | msgpack header | float32 LE payload

The header holds the format version, the mel/model/train configs, their
hash, the step counter, the run seed, optimizer hyperparameters, the MINE
moving average and a tensor directory (name, shape, byte offset). Array
payloads follow in directory order.
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import msgpack
import numpy as np

from config import config_hash
from models.audio import MelConfig, NormalizationStats
from models.errors import CheckpointFormatError, ConfigMismatchError
from models.network import ModelConfig
from models.training import TrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MVCK"
CHECKPOINT_VERSION = 1
_LEN = struct.Struct("<I")


@dataclass
class Checkpoint:
    """Everything needed to resume training or run conversion."""

    mel_config: MelConfig
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    seed: int
    model_state: Dict[str, np.ndarray]
    normalization: NormalizationStats
    cmi_state: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_state: Optional[Dict[str, Any]] = None
    cmi_optimizer_state: Optional[Dict[str, Any]] = None
    mine_ema: Optional[float] = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.mel_config, self.model_config)


def _optimizer_tensors(prefix: str, state: Optional[Dict[str, Any]]) -> List[tuple]:
    if state is None:
        return []
    tensors = [(f"{prefix}.m.{i}", m) for i, m in enumerate(state["m"])]
    tensors += [(f"{prefix}.v.{i}", v) for i, v in enumerate(state["v"])]
    return tensors


def _collect_tensors(ckpt: Checkpoint) -> List[tuple]:
    tensors = [(f"model.{name}", value) for name, value in ckpt.model_state.items()]
    tensors += [(f"cmi.{name}", value) for name, value in ckpt.cmi_state.items()]
    tensors += _optimizer_tensors("adam", ckpt.optimizer_state)
    tensors += _optimizer_tensors("cmi_adam", ckpt.cmi_optimizer_state)
    tensors += [("norm.mean", ckpt.normalization.mean), ("norm.std", ckpt.normalization.std)]
    return tensors


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name, value in _collect_tensors(ckpt):
        payload = np.ascontiguousarray(value, dtype='<f4').tobytes(order='C')
        directory.append({'name': name, 'shape': list(np.shape(value)), 'offset': offset})
        chunks.append(payload)
        offset += len(payload)

    header = msgpack.packb({
        'format_version': CHECKPOINT_VERSION,
        'mel': ckpt.mel_config.to_dict(),
        'model': ckpt.model_config.to_dict(),
        'train': ckpt.train_config.to_dict(),
        'config_hash': ckpt.config_hash,
        'step': int(ckpt.step),
        'seed': int(ckpt.seed),
        'adam': ckpt.optimizer_state["hyper"] if ckpt.optimizer_state else None,
        'cmi_adam': ckpt.cmi_optimizer_state["hyper"] if ckpt.cmi_optimizer_state else None,
        'mine_ema': ckpt.mine_ema,
        'payload_bytes': offset,
        'tensors': directory,
    }, use_bin_type=True)
    return CHECKPOINT_MAGIC + _LEN.pack(len(header)) + header + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write `ckpt` atomically (temporary file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(ckpt)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, 'wb') as handle:
        handle.write(blob)
    os.replace(tmp_path, path)
    logger.info(f"Checkpoint written to {path} at step {ckpt.step} ({len(blob)} bytes)")
    return path


def _parse_header(blob: bytes, source: str) -> tuple:
    if len(blob) < 4 + _LEN.size or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{source}: not a checkpoint file")
    (header_len,) = _LEN.unpack_from(blob, 4)
    start = 4 + _LEN.size
    if len(blob) < start + header_len:
        raise CheckpointFormatError(f"{source}: truncated header")
    try:
        header = msgpack.unpackb(blob[start:start + header_len], raw=False)
    except (ValueError, msgpack.ExtraData) as e:
        raise CheckpointFormatError(f"{source}: corrupt header: {e}") from e
    if header.get('format_version') != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported format version {header.get('format_version')}")
    return header, start + header_len


def _optimizer_state(tensors: Dict[str, np.ndarray], prefix: str, hyper: Optional[dict]) -> Optional[Dict[str, Any]]:
    if hyper is None:
        return None
    count = sum(1 for name in tensors if name.startswith(f"{prefix}.m."))
    return {'hyper': hyper,
            'm': [tensors[f"{prefix}.m.{i}"] for i in range(count)],
            'v': [tensors[f"{prefix}.v.{i}"] for i in range(count)]}


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    header, payload_start = _parse_header(blob, source)
    payload = blob[payload_start:]
    if len(payload) != header['payload_bytes']:
        raise CheckpointFormatError(f"{source}: payload holds {len(payload)} bytes, "
                                    f"expected {header['payload_bytes']}")

    tensors: Dict[str, np.ndarray] = {}
    for item in header['tensors']:
        shape = tuple(item['shape'])
        count = int(np.prod(shape)) if shape else 1
        start = item['offset']
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointFormatError(f"{source}: tensor {item['name']} runs past the payload")
        tensors[item['name']] = np.frombuffer(payload[start:end], dtype='<f4').reshape(shape).astype(np.float32)

    return Checkpoint(
        mel_config=MelConfig.from_dict(header['mel']),
        model_config=ModelConfig.from_dict(header['model']),
        train_config=TrainConfig.from_dict(header['train']),
        step=int(header['step']),
        seed=int(header['seed']),
        model_state={name[len("model."):]: v for name, v in tensors.items() if name.startswith("model.")},
        cmi_state={name[len("cmi."):]: v for name, v in tensors.items() if name.startswith("cmi.")},
        optimizer_state=_optimizer_state(tensors, "adam", header['adam']),
        cmi_optimizer_state=_optimizer_state(tensors, "cmi_adam", header['cmi_adam']),
        normalization=NormalizationStats(mean=tensors["norm.mean"], std=tensors["norm.std"]),
        mine_ema=header['mine_ema'],
    )


def load_checkpoint(path: Union[str, Path], expected_hash: Optional[str] = None) -> Checkpoint:
    """
    Read a checkpoint; nothing is returned unless the whole file parses.

    Raises:
        CheckpointFormatError: If the file is missing, truncated or malformed
        ConfigMismatchError: If `expected_hash` differs from the stored config hash
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointFormatError(f"checkpoint not found: {path}")
    with open(path, 'rb') as handle:
        blob = handle.read()
    ckpt = decode_checkpoint(blob, str(path))

    header, _ = _parse_header(blob, str(path))
    if header['config_hash'] != ckpt.config_hash:
        raise CheckpointFormatError(f"{path}: stored config hash does not match stored configs")
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        raise ConfigMismatchError(f"{path}: checkpoint config {ckpt.config_hash[:12]} "
                                  f"does not match expected {expected_hash[:12]}")
    logger.info(f"Loaded checkpoint {path} at step {ckpt.step}")
    return ckpt
