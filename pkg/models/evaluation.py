from dataclasses import dataclass, field
from typing import Any, Dict, List

import pandas as pd

REFERENCE_PARAM_COUNT = 1_310_000


@dataclass
class McdResult:
    """Mel-cepstral distortion in dB."""

    value: float
    frames_compared: int
    aligned: bool

    def to_dict(self) -> dict:
        return {'value': self.value, 'frames_compared': self.frames_compared, 'aligned': self.aligned}


@dataclass
class EmbeddingReport:
    """Clustering statistics of speaker embeddings plus the raw table."""

    centroid_spread: Dict[str, float]
    intra_cosine: float
    inter_cosine: float
    silhouette: float
    embeddings: pd.DataFrame = field(repr=False, default_factory=pd.DataFrame)

    @property
    def margin(self) -> float:
        return self.intra_cosine - self.inter_cosine

    def summary(self) -> Dict[str, Any]:
        return {
            'intra_cosine': self.intra_cosine,
            'inter_cosine': self.inter_cosine,
            'margin': self.margin,
            'silhouette': self.silhouette,
            'centroid_spread': dict(self.centroid_spread),
            'n_utterances': int(len(self.embeddings)),
        }


@dataclass
class LightweightReport:
    """Parameter accounting and a machine-local timing of one conversion."""

    conversion_params: int
    cmi_params: int
    breakdown: Dict[str, int]
    conv_bank_params: int
    conversion_seconds: float
    process_rss_mb: float
    cpu_count: int
    reference_params: int = REFERENCE_PARAM_COUNT
    notes: List[str] = field(default_factory=lambda: [
        "timing is machine-local and not comparable across machines",
        "headline count excludes CMI networks and the vocoder",
    ])

    @property
    def total_params(self) -> int:
        return self.conversion_params + self.cmi_params

    def to_dict(self) -> Dict[str, Any]:
        return {
            'conversion_params': self.conversion_params,
            'cmi_params': self.cmi_params,
            'total_params': self.total_params,
            'breakdown': dict(self.breakdown),
            'conv_bank_params': self.conv_bank_params,
            'reference_params': self.reference_params,
            'conversion_seconds': self.conversion_seconds,
            'process_rss_mb': self.process_rss_mb,
            'cpu_count': self.cpu_count,
            'notes': list(self.notes),
        }
