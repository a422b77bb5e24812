"""Length-controlled text generation via feedback injected at sentence boundaries."""

from .backend import (
    Backend,
    BackendError,
    CompliantBackend,
    EstimatorBackend,
    GenRequest,
    HttpSseBackend,
    NoisyBackend,
    SamplingParams,
    ScriptedBackend,
    StreamChunk,
    make_backend,
)
from .controller import (
    ControllerConfig,
    InsertionMode,
    LengthConstraint,
    SessionState,
    SessionStatus,
    run_batch,
    run_session,
)
from .feedback import (
    FeedbackEvent,
    MalformedMarker,
    PromptBundle,
    PromptMode,
    build_prompt,
    insert_feedback,
    render_feedback,
    strip_feedback,
)
from .metrics import EvalPair, MetricsSummary, extract_boxed_score, mae, pm, run_grid
from .segmenter import BoundaryEvent, SegmenterState, feed, finalize, segment_batch
from .sftgen import (
    Demonstration,
    SftExample,
    SftTargetSpec,
    build_dataset,
    build_icl_demo,
    interleave_feedback,
    update_target,
)
from .units import CountReport, LengthUnit, TokenizerSpec, count, measure, tokenize

__version__ = "0.1.0"
