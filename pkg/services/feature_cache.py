"""
Feature Cache

Per-utterance binary mel files so the STFT runs once per utterance rather
than once per epoch. Layout of a mel file:

    b"MELC" | uint32 LE header length | msgpack header | float32 LE payload

The header carries dimensions and the feature configuration hash; the
payload is the [n_mels x n_frames] matrix in row-major order.
"""

import hashlib
import logging
import os
import struct
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import msgpack
import numpy as np

from config import mel_config_hash
from models.audio import SEGMENT_FRAMES, DatasetManifest, ManifestEntry, MelConfig
from models.errors import CheckpointFormatError, ConfigMismatchError, InputError
from services.audio_frontend import extract_features

logger = logging.getLogger(__name__)

MEL_MAGIC = b"MELC"
MEL_FORMAT_VERSION = 1
INDEX_NAME = "index.msgpack"
DEFAULT_MAX_MEMORY = 4096
_LEN = struct.Struct("<I")


def write_mel_file(path: Union[str, Path], values: np.ndarray, config_hash: str) -> None:
    """Write a mel matrix with its header; the write is atomic."""
    values = np.ascontiguousarray(values, dtype='<f4')
    header = msgpack.packb({
        'version': MEL_FORMAT_VERSION,
        'n_mels': int(values.shape[0]),
        'n_frames': int(values.shape[1]),
        'config_hash': config_hash,
    }, use_bin_type=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as handle:
        handle.write(MEL_MAGIC)
        handle.write(_LEN.pack(len(header)))
        handle.write(header)
        handle.write(values.tobytes(order='C'))
    os.replace(tmp_path, path)


def read_mel_file(path: Union[str, Path], expected_hash: Optional[str] = None) -> Tuple[np.ndarray, dict]:
    """
    Read a mel file written by `write_mel_file`.

    Raises:
        CheckpointFormatError: On a bad magic, truncated header or payload
        ConfigMismatchError: If `expected_hash` differs from the stored hash
    """
    with open(path, 'rb') as handle:
        blob = handle.read()
    if blob[:4] != MEL_MAGIC or len(blob) < 4 + _LEN.size:
        raise CheckpointFormatError(f"{path}: not a mel file")
    (header_len,) = _LEN.unpack_from(blob, 4)
    start = 4 + _LEN.size
    if len(blob) < start + header_len:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = msgpack.unpackb(blob[start:start + header_len], raw=False)
    except (ValueError, msgpack.ExtraData) as e:
        raise CheckpointFormatError(f"{path}: corrupt header: {e}") from e

    n_mels, n_frames = int(header['n_mels']), int(header['n_frames'])
    payload = blob[start + header_len:]
    if len(payload) != 4 * n_mels * n_frames:
        raise CheckpointFormatError(f"{path}: payload holds {len(payload)} bytes, "
                                    f"expected {4 * n_mels * n_frames}")
    if expected_hash is not None and header['config_hash'] != expected_hash:
        raise ConfigMismatchError(f"{path}: feature config {header['config_hash'][:12]} "
                                  f"does not match {expected_hash[:12]}")
    values = np.frombuffer(payload, dtype='<f4').reshape(n_mels, n_frames).astype(np.float32)
    return values, header


class MelCache:
    """
    Directory of mel files plus an index mapping utterance keys to files.

    Entries missing from the cache are extracted on first access. Up to
    `max_memory` recently used matrices are also kept in memory.
    """

    def __init__(self, cache_dir: Union[str, Path], mel_config: MelConfig,
                 max_memory: int = DEFAULT_MAX_MEMORY):
        if max_memory < 1:
            raise InputError(f"max_memory must be >= 1, got {max_memory}")
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.mel_config = mel_config
        self.config_hash = mel_config_hash(mel_config)
        self.max_memory = max_memory
        self.logger = logging.getLogger(__name__)

        self._lock = threading.Lock()
        self._memory: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.index: Dict[str, str] = self._load_index()

        self.hits = 0
        self.misses = 0
        self.evictions = 0

    @property
    def index_path(self) -> Path:
        return self.cache_dir / INDEX_NAME

    def _load_index(self) -> Dict[str, str]:
        if not self.index_path.is_file():
            return {}
        with open(self.index_path, 'rb') as handle:
            data = msgpack.unpackb(handle.read(), raw=False)
        if data.get('config_hash') != self.config_hash:
            self.logger.warning(f"Cache index at {self.cache_dir} was built with another feature config; ignoring it")
            return {}
        return dict(data.get('entries', {}))

    def flush(self) -> None:
        with self._lock:
            payload = msgpack.packb({'config_hash': self.config_hash, 'entries': self.index},
                                    use_bin_type=True)
        tmp_path = f"{self.index_path}.tmp"
        with open(tmp_path, 'wb') as handle:
            handle.write(payload)
        os.replace(tmp_path, self.index_path)

    @staticmethod
    def _file_name(key: str) -> str:
        return hashlib.sha1(key.encode('utf-8')).hexdigest()[:20] + ".mel"

    def _remember(self, key: str, values: np.ndarray) -> None:
        # caller holds the lock
        self._memory[key] = values
        self._memory.move_to_end(key)
        while len(self._memory) > self.max_memory:
            self._memory.popitem(last=False)
            self.evictions += 1

    def contains(self, key: str) -> bool:
        with self._lock:
            return key in self._memory or key in self.index

    def in_memory(self) -> int:
        with self._lock:
            return len(self._memory)

    def put(self, key: str, values: np.ndarray) -> None:
        name = self._file_name(key)
        values = np.asarray(values, dtype=np.float32)
        write_mel_file(self.cache_dir / name, values, self.config_hash)
        with self._lock:
            self.index[key] = name
            self._remember(key, values)

    def get(self, entry: ManifestEntry) -> np.ndarray:
        """Mel matrix of an utterance, extracting and caching it on a miss."""
        key = entry.key
        with self._lock:
            cached = self._memory.get(key)
            if cached is not None:
                self._memory.move_to_end(key)
                self.hits += 1
                return cached
            file_name = self.index.get(key)
            if file_name is not None:
                self.hits += 1
            else:
                self.misses += 1

        if file_name is not None:
            values, _ = read_mel_file(self.cache_dir / file_name, self.config_hash)
            with self._lock:
                self._remember(key, values)
            return values

        values = extract_features(entry.path, self.mel_config).values.astype(np.float32)
        self.put(key, values)
        return values

    def warm(self, manifest: DatasetManifest, workers: int = 0,
             segment_frames: int = SEGMENT_FRAMES) -> None:
        """
        Extract every usable utterance of the manifest, optionally on worker
        threads. Entries shorter than `segment_frames` are left alone.
        """
        usable = [e for e in manifest.entries if e.is_usable(segment_frames)]
        skipped = len(manifest.entries) - len(usable)
        if skipped:
            self.logger.warning(f"Not caching {skipped} utterance(s) shorter than {segment_frames} frames")
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(self.get, usable))
        else:
            for entry in usable:
                self.get(entry)
        self.flush()
        self.logger.info(f"Mel cache warmed: {len(self.index)} utterances "
                         f"({self.hits} hits, {self.misses} misses)")
