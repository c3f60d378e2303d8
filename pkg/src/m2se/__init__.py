"""Multistage multitask sentiment/emotion instruction pipeline: facial
action-unit analysis, five-task dataset building, curriculum scheduling, a
desk-scale multimodal training loop, and the matching metrics."""

from .au import (
    AUFrame,
    AUTrack,
    PeakSelection,
    caption_from_aus,
    common_aus,
    find_peak_frame,
    frame_score,
    load_au_lexicon,
    load_emotion_au_table,
    parse_au_table,
    select_final_peak,
)
from .dataset import (
    BuildContext,
    IngestResult,
    Rejection,
    build_corpus,
    build_records,
    dataset_stats,
    ingest_corpus,
    validate_record,
)
from .errors import (
    ConfigError,
    EmptyInputError,
    MediaError,
    NumericGuardError,
    PipelineError,
    ReasonGenerationError,
    ShapeError,
    ShortageError,
    TrainingDivergedError,
    UndefinedMetricError,
    ValidationError,
)
from .metrics import (
    PARSE_FAILURE,
    EvalBundle,
    MetricReport,
    acc2,
    accuracy,
    ecpe_scores,
    evaluate_bundle,
    parse_response,
    score_prediction_rows,
    weighted_f1,
)
from .model import (
    DecodeConfig,
    EncoderConfig,
    FusedInput,
    ModelConfig,
    ProjectedTokens,
    TextTokens,
    ToyModel,
    VisualTokens,
    apply_adapters,
    encode_media,
    forward,
    fuse,
    load_checkpoint,
    project,
    save_checkpoint,
)
from .records import (
    EMOTIONS,
    SENTIMENT_CLASSES,
    TASK_IDENTIFIERS,
    CausePair,
    SourceSample,
    TaskKind,
    TaskRecord,
    read_records,
    write_records,
)
from .scheduler import (
    REMAINING,
    StagePlan,
    TrainingItem,
    assign_stream,
    attach_identifier,
    default_plans,
    largest_remainder_quotas,
    schedule_stages,
    verify_plan,
)
from .train import TrainConfig, predict_records, run_training, train_stage

__version__ = "0.1.0"
