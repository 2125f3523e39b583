"""Few-shot spike sorting with a size-adaptive attention/dilated-convolution network."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    SpikeDataset,
    SplitSpec,
    builtin_templates,
    extract_windows,
    generate_synthetic,
    load_dataset,
    min_max_normalize,
    normalize_dataset,
    save_dataset,
    split,
    subsample,
)
from .episodes import Episode, encode_episode, sample_episode  # noqa: E402
from .model import (  # noqa: E402
    FssModel,
    ModelConfig,
    compute_dropout_rate,
    compute_kernel_count,
    compute_rdc_depth,
    count_parameters,
    model_forward,
)
from .pcak import pcak_sort  # noqa: E402
from .train import (  # noqa: E402
    MetricsReport,
    TrainConfig,
    evaluate,
    meta_train,
    proportion_sweep,
    trimmed_mean,
)
