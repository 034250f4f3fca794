"""seqlab: a desk-scale sequential-recommendation laboratory.

Ingest interaction logs, train small GRU / self-attention next-item models
under eight ranking objectives, and evaluate with full-rank and sampled
HIT@k / NDCG@k, per-position curves, and deterministic cost counters.
"""

from .data import (
    InteractionRecord,
    ItemVocabulary,
    SplitDataset,
    TrainingBatch,
    UserSequence,
    build_sequences,
    build_vocabulary,
    ingest_interactions,
    iterate_batches,
    k_core_filter,
    leave_one_out_split,
    load_dataset,
    pad_and_truncate,
    sample_negatives,
)
from .evaluation import (
    MetricsReport,
    PerTimestampReport,
    ResourceReport,
    full_rank_metrics,
    per_timestamp_eval,
    rank_of_target,
    sampled_metrics,
)
from .losses import (
    CandidateScores,
    FullScores,
    LossSpec,
    MaskedSequence,
    apply_mlm_masking,
    bce_loss,
    bpr_loss,
    bpr_max_loss,
    ce_last_loss,
    enhanced_ce_loss,
    mlm_loss,
    top1_loss,
    top1_max_loss,
)
from .models import (
    HiddenStates,
    ModelConfig,
    ParameterSet,
    build_model,
    load_checkpoint,
    save_checkpoint,
    score_candidates,
    score_full,
)
from .training import OptimizerState, TrainConfig, TrainRecord, adam_update, fit, train_step
from .verification import gradient_check

__version__ = "0.1.0"
