"""densefold: a densely connected CNN stack for handwritten numerals.

Pure numpy implementation: layers with hand-written backward passes, an
SGD/momentum training loop with k-fold validation rotation, a preprocessing
and augmentation pipeline, exact-rational evaluation metrics, and a CLI.
"""

from .data import (
    ArrayDataset,
    AugmentConfig,
    DatasetManifest,
    RawImage,
    Sample,
    augment,
    decode_image,
    encode_image,
    kfold_assign,
    load_dataset,
    make_batches,
    preprocess,
    preprocess_image,
    read_packed,
    write_packed,
)
from .errors import (
    ConfigError,
    ContractError,
    DensefoldError,
    DimensionError,
    FormatError,
    InputError,
    NumericError,
)
from .eval import (
    confusion_matrix,
    macro_f1,
    micro_f1,
    overall_accuracy,
    per_class_accuracy,
    per_class_f1,
    run_mean,
    run_stddev,
)
from .model import (
    NetworkSpec,
    backward,
    build,
    channel_trace,
    forward,
    nbl_per_block,
    param_count,
    parameter_shapes,
)
from .optim import SgdState, TrainHyper, cross_entropy_loss, lr_at, mse_loss, sgd_step
from .tensor import Rng
from .train import (
    EpochMetrics,
    evaluate_split,
    fit,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)

__version__ = "0.1.0"
