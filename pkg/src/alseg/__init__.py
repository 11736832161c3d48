"""Active learning for class-imbalanced semantic segmentation.

Contrastive pretraining of a small encoder-decoder, a rareness-aware
acquisition function with greedy selection, and a seeded experiment
harness over synthetic die-scan data.
"""

from .acquisition import (
    AcquisitionConfig,
    PoolState,
    ScoreBreakdown,
    build_pool_state,
    class_posterior,
    coreset_select,
    diversity,
    entropy_image,
    entropy_select,
    greedy_select,
    pseudo_label_map,
    random_select,
    rareness_image,
    score,
)
from .contrastive import (
    HeadParams,
    PretrainConfig,
    augment_pair,
    info_nce_backward,
    info_nce_loss,
    pretrain,
    project,
    transfer,
)
from .data import (
    Dataset,
    DatasetFormatError,
    GenerationError,
    SceneSpec,
    class_frequencies,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .estimators import (
    ContrastivePretrainer,
    CoreSetSelector,
    EntropySelector,
    RandomSelector,
    RarenessAwareSelector,
    SegmentationNet,
)
from .experiment import (
    CycleResult,
    ExperimentConfig,
    export_overlays,
    miou,
    run_experiment,
    run_single,
)
from .net import (
    NetConfig,
    NetParams,
    TrainConfig,
    backward,
    class_weights,
    forward,
    image_embedding,
    init_params,
    load_params,
    predict,
    rmsprop_step,
    save_params,
    train,
    weighted_cross_entropy,
)
from .ops import argmax_tiebreak_low, entropy, global_average_pool, l2_distance, softmax
from .rng import Rng

__version__ = "0.1.0"

__all__ = [
    "AcquisitionConfig", "PoolState", "ScoreBreakdown", "build_pool_state",
    "class_posterior", "coreset_select", "diversity", "entropy_image",
    "entropy_select", "greedy_select", "pseudo_label_map", "random_select",
    "rareness_image", "score",
    "HeadParams", "PretrainConfig", "augment_pair", "info_nce_backward",
    "info_nce_loss", "pretrain", "project", "transfer",
    "Dataset", "DatasetFormatError", "GenerationError", "SceneSpec",
    "class_frequencies", "generate_dataset", "load_dataset", "save_dataset",
    "ContrastivePretrainer", "CoreSetSelector", "EntropySelector",
    "RandomSelector", "RarenessAwareSelector", "SegmentationNet",
    "CycleResult", "ExperimentConfig", "export_overlays", "miou",
    "run_experiment", "run_single",
    "NetConfig", "NetParams", "TrainConfig", "backward", "class_weights",
    "forward", "image_embedding", "init_params", "load_params", "predict",
    "rmsprop_step", "save_params", "train", "weighted_cross_entropy",
    "argmax_tiebreak_low", "entropy", "global_average_pool", "l2_distance",
    "softmax", "Rng",
]
