"""
Evaluation Service

Objective metrics and disentanglement diagnostics: mel-cepstral distortion,
speaker-embedding clustering statistics, embedding export and the
parameter / inference-cost report.
"""

import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import librosa
import numpy as np
import pandas as pd
import psutil
from scipy import fft
from sklearn.metrics import silhouette_score
from threadpoolctl import threadpool_limits

from autodiff.tensor import no_grad
from models.audio import SEGMENT_FRAMES, DatasetManifest, MelConfig, NormalizationStats, Waveform
from models.errors import InputError
from models.evaluation import EmbeddingReport, LightweightReport, McdResult
from models.network import BLOCK_CONV_BANK, ModelConfig
from networks.srd_model import SRDModel, analytic_param_count
from services.audio_frontend import logmel, resample
from services.checkpoint_manager import Checkpoint
from services.cmi_estimator import CMIEstimator
from services.conversion_service import build_model
from services.feature_cache import MelCache

logger = logging.getLogger(__name__)

MCD_ORDER = 13
MCD_SCALE = 10.0 / np.log(10.0) * np.sqrt(2.0)


# ------------------------------------------------------------------- MCD

def cepstra(mel_values: np.ndarray, order: int = MCD_ORDER) -> np.ndarray:
    """Mel-cepstra c1..c_order per frame: orthonormal DCT-II of each log-mel frame."""
    coefficients = fft.dct(np.asarray(mel_values, dtype=np.float64), type=2, norm='ortho', axis=0)
    return coefficients[1:order + 1]


def mcd_from_cepstra(reference: np.ndarray, converted: np.ndarray, use_dtw: bool = True) -> McdResult:
    """
    MCD between cepstral sequences [D x T].

    With `use_dtw` frames are paired along the DTW path on Euclidean
    cepstral distance; otherwise the first min(T, T') frames are compared.

    Raises:
        InputError: If no frame pairs remain
    """
    reference = np.asarray(reference, dtype=np.float64)
    converted = np.asarray(converted, dtype=np.float64)
    if reference.shape[0] != converted.shape[0]:
        raise InputError(f"cepstral orders differ: {reference.shape[0]} vs {converted.shape[0]}")
    if reference.shape[1] == 0 or converted.shape[1] == 0:
        raise InputError("cannot compute MCD on an empty sequence")

    if use_dtw:
        _, path = librosa.sequence.dtw(X=reference, Y=converted, metric='euclidean')
        path = path[::-1]
        diff = reference[:, path[:, 0]] - converted[:, path[:, 1]]
    else:
        frames = min(reference.shape[1], converted.shape[1])
        diff = reference[:, :frames] - converted[:, :frames]

    if diff.shape[1] == 0:
        raise InputError("empty alignment")
    distances = np.sqrt(np.sum(diff * diff, axis=0))
    return McdResult(value=float(MCD_SCALE * distances.mean()), frames_compared=int(diff.shape[1]),
                     aligned=use_dtw)


def mcd(reference: Waveform, converted: Waveform, use_dtw: bool = True,
        mel_config: Optional[MelConfig] = None, order: int = MCD_ORDER) -> McdResult:
    """MCD between two waveforms (resampled to the feature rate first)."""
    cfg = mel_config or MelConfig()
    ref_mel = logmel(resample(reference, cfg.sample_rate), cfg)
    hyp_mel = logmel(resample(converted, cfg.sample_rate), cfg)
    return mcd_from_cepstra(cepstra(ref_mel.values, order), cepstra(hyp_mel.values, order), use_dtw)


# ------------------------------------------------------------ embeddings

def _cosine_matrix(embeddings: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    unit = embeddings / np.maximum(norms, 1e-12)
    return np.clip(unit @ unit.T, -1.0, 1.0)


def report_from_embeddings(embeddings: np.ndarray, speaker_ids: Sequence[str],
                           utterance_ids: Sequence[str]) -> EmbeddingReport:
    """
    Clustering statistics of per-utterance embeddings [U x W].

    Raises:
        InputError: Fewer than 2 speakers, or a speaker with a single utterance
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    speakers = np.asarray(speaker_ids)
    labels, counts = np.unique(speakers, return_counts=True)
    if len(labels) < 2:
        raise InputError(f"embedding report needs >= 2 speakers, got {len(labels)}")
    if np.any(counts < 2):
        raise InputError("every speaker needs >= 2 utterances for the embedding report")

    cos = _cosine_matrix(embeddings)
    same = speakers[:, None] == speakers[None, :]
    upper = np.triu(np.ones_like(same, dtype=bool), k=1)
    intra = float(cos[same & upper].mean())
    inter = float(cos[~same & upper].mean())

    spread: Dict[str, float] = {}
    for label in labels:
        members = embeddings[speakers == label]
        centroid = members.mean(axis=0, keepdims=True)
        spread[str(label)] = float(1.0 - _cosine_matrix(np.vstack([centroid, members]))[0, 1:].mean())

    silhouette = float(silhouette_score(embeddings, speakers, metric='cosine'))

    table = pd.DataFrame(embeddings, columns=[f"e{i}" for i in range(embeddings.shape[1])])
    table.insert(0, 'utterance_id', list(utterance_ids))
    table.insert(0, 'speaker_id', list(speaker_ids))
    table = table.sort_values(['speaker_id', 'utterance_id'], kind='mergesort').reset_index(drop=True)

    return EmbeddingReport(centroid_spread=spread, intra_cosine=intra, inter_cosine=inter,
                           silhouette=silhouette, embeddings=table)


def utterance_embeddings(model: SRDModel, manifest: DatasetManifest, cache: MelCache,
                         normalization: NormalizationStats) -> np.ndarray:
    """Full-utterance speaker embeddings [U x speaker_width] in manifest order."""
    rows: List[np.ndarray] = []
    with no_grad():
        for entry in manifest.entries:
            embedding, _ = model.speaker_encode(normalization.apply(cache.get(entry)))
            rows.append(embedding.values.data.astype(np.float64))
    return np.stack(rows)


def embedding_report(checkpoint: Union[Checkpoint, SRDModel], manifest: DatasetManifest, cache: MelCache,
                     normalization: Optional[NormalizationStats] = None) -> EmbeddingReport:
    """Embedding statistics for the utterances of `manifest`."""
    if isinstance(checkpoint, Checkpoint):
        model = build_model(checkpoint)
        normalization = normalization or checkpoint.normalization
    else:
        model = checkpoint
        normalization = normalization or NormalizationStats.identity(model.config.n_mels)
    embeddings = utterance_embeddings(model, manifest, cache, normalization)
    report = report_from_embeddings(embeddings, [e.speaker_id for e in manifest.entries],
                                    [e.utterance_id for e in manifest.entries])
    logger.info(f"Embedding report over {len(manifest)} utterances: margin={report.margin:.4f}, "
                f"silhouette={report.silhouette:.4f}")
    return report


def export_embeddings(report: EmbeddingReport, path: Union[str, Path]) -> Path:
    """Tab-separated: speaker_id, utterance_id, then embedding values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.embeddings.to_csv(path, sep='\t', index=False)
    return path


# ----------------------------------------------------------- lightweight

def time_conversion(model: SRDModel, frames: int = SEGMENT_FRAMES, seed: int = 0) -> float:
    """Single-threaded wall-clock seconds of one conversion on random input."""
    rng = np.random.default_rng(seed)
    source = rng.standard_normal((model.config.n_mels, frames)).astype(model.dtype)
    target = rng.standard_normal((model.config.n_mels, frames)).astype(model.dtype)
    with threadpool_limits(limits=1), no_grad():
        started = time.perf_counter()
        model.convert_codes(source, target)
        return time.perf_counter() - started


def lightweight_report(checkpoint: Union[Checkpoint, ModelConfig], cmi_hidden: int = 256) -> LightweightReport:
    """
    Parameter accounting of the conversion path (CMI excluded from the
    headline), a conv-bank comparison count and a local timing.
    """
    if isinstance(checkpoint, Checkpoint):
        model = build_model(checkpoint)
        cmi_params = int(sum(v.size for v in checkpoint.cmi_state.values()))
    else:
        model = SRDModel(checkpoint)
        cmi_params = CMIEstimator(checkpoint.content_channels, checkpoint.speaker_code_dim,
                                  hidden=cmi_hidden).num_parameters()

    counts = model.param_count()
    conv_bank_params = analytic_param_count(replace(model.config, block_type=BLOCK_CONV_BANK))
    process = psutil.Process()
    return LightweightReport(
        conversion_params=counts.total,
        cmi_params=cmi_params,
        breakdown=counts.breakdown,
        conv_bank_params=conv_bank_params,
        conversion_seconds=time_conversion(model),
        process_rss_mb=process.memory_info().rss / 2 ** 20,
        cpu_count=psutil.cpu_count(logical=True) or 1,
    )
