"""Metrics, evaluation protocols and report writers."""

from .metrics import (
    RocReport,
    ScoredSample,
    SingleClassOnly,
    auc_from_scores,
    compute_auc,
    compute_eer_threshold,
    eer_from_scores,
    roc_report,
)
from .saliency import SaliencyMap, smoothgrad_saliency
from .studies import (
    CodecFailure,
    MissingCounterpart,
    PairSimilarityStudy,
    budget_sweep,
    export_embeddings,
    jpeg_quality_sweep,
    jpeg_roundtrip,
    pair_similarity_study,
)
