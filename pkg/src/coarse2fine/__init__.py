"""coarse2fine: few-shot fine-grained classification from coarse set-level labels.

Pretrain an instance encoder on bags of instances annotated only at the set
level (counts or modes of superclasses), then fit lightweight classifiers on
its frozen, l2-normalized embeddings for c-way k-shot tasks. Includes a
self-contained float64 autodiff core, permutation-invariant set models,
contrastive objectives, an evaluation harness, and diagnostics for
excess-risk scaling curves.
"""

__version__ = "0.1.0"

from .datasets import (
    CoarseSetExample,
    HierarchySpec,
    InstanceDataset,
    MetaTask,
    build_most_frequent_sets,
    build_unique_count_sets,
    gen_synthetic_hierarchy,
    load_cifar100,
    sample_meta_task,
)
from .diagnostics import (
    RiskCurve,
    RiskExperimentConfig,
    estimate_central_condition,
    estimate_relative_lipschitz,
    fit_risk_curve,
    run_risk_experiment,
)
from .fewshot import (
    EvalReport,
    FinePredictorSpec,
    LatentAugmenter,
    LogisticRegressionClassifier,
    NearestCentroidClassifier,
    RidgeClassifier,
    evaluate_protocol,
    macro_f1,
)
from .models import (
    AggregatorConfig,
    Encoder,
    EncoderConfig,
    ProjectionConfig,
    ProjectionHead,
    SetModel,
    make_aggregator,
)
from .optim import Sgd, SgdConfig, cosine_lr, sgd_step
from .pipeline import (
    PretrainResult,
    PretrainSpec,
    SetSupervisedEncoder,
    embed_fine,
    embedder,
    fit_fine,
    predict,
    pretrain_coarse,
)
from .tensor import Tape, Tensor, backward, no_grad

__all__ = [
    "__version__",
    "AggregatorConfig",
    "CoarseSetExample",
    "Encoder",
    "EncoderConfig",
    "EvalReport",
    "FinePredictorSpec",
    "HierarchySpec",
    "InstanceDataset",
    "LatentAugmenter",
    "LogisticRegressionClassifier",
    "MetaTask",
    "NearestCentroidClassifier",
    "PretrainResult",
    "PretrainSpec",
    "ProjectionConfig",
    "ProjectionHead",
    "RidgeClassifier",
    "RiskCurve",
    "RiskExperimentConfig",
    "SetModel",
    "SetSupervisedEncoder",
    "Sgd",
    "SgdConfig",
    "Tape",
    "Tensor",
    "backward",
    "build_most_frequent_sets",
    "build_unique_count_sets",
    "cosine_lr",
    "embed_fine",
    "embedder",
    "estimate_central_condition",
    "estimate_relative_lipschitz",
    "evaluate_protocol",
    "fit_fine",
    "fit_risk_curve",
    "gen_synthetic_hierarchy",
    "load_cifar100",
    "macro_f1",
    "make_aggregator",
    "no_grad",
    "predict",
    "pretrain_coarse",
    "run_risk_experiment",
    "sample_meta_task",
    "sgd_step",
]
