"""polyfuse: multimodal cross-attention classifier with a sweep harness."""

from .data import (
    FoldBundle,
    FoldSpec,
    MultimodalDataset,
    generate_synthetic,
    load_all_folds,
    load_dataset,
    load_fold,
    make_folds,
    save_dataset,
    save_folds,
)
from .errors import (
    ConfigError,
    DivergedError,
    FormatError,
    MetricError,
    NumericError,
    PolyfuseError,
    ShapeError,
    TooFewSamplesError,
)
from .hpo import (
    SearchSpace,
    TrialConfig,
    TrialResult,
    ablation_plan,
    emit_report,
    isolation_sweep,
    run_plan,
    validate_space,
)
from .metrics import (
    EpochTimer,
    MetricsReport,
    allocation_high_water_mark,
    cross_entropy,
    macro_f1,
    mae,
    multiclass_accuracy,
)
from .model import (
    FFN_REF_DIM,
    ModalityShape,
    Model,
    ModelConfig,
    ParamBreakdown,
    analytic_param_count,
    build,
    count_params,
    per_block_params,
    positional_encoding,
    with_trial_dims,
)
from .numerics import (
    MemoryProbe,
    ParamStore,
    Tensor,
    conv1d,
    cross_entropy_with_logits,
    dropout,
    grad_check,
    layer_norm,
    linear,
    matmul,
    no_grad,
    relu,
    softmax_rows,
)
from .training import (
    Adam,
    CvResult,
    RunHistory,
    TrainSpec,
    clip_gradients,
    global_grad_norm,
    run_cv,
    train_fold,
)

__version__ = "0.1.0"
