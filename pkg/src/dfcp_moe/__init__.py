"""Clustered, pseudo-labeled mixture-of-experts: numerics, clustering, labeling, training, evaluation."""

from .clustering import ClusterSet, DbiReport, RefineConfig, davies_bouldin, kmeans, objective, refine, sweep_threshold
from .features import ExtractorConfig, FeatureSet, FeatureVector, extract, extract_set, init_extractor
from .metrics import average_precision, balanced_accuracy, mean_average_precision
from .moe import (
    MoEModel,
    RoutingPlan,
    backward,
    build_model,
    combined_loss,
    expert_forward,
    gate_forward,
    gate_loss,
    infer,
    joint_train,
    mixture_forward,
    train_traditional,
)
from .numeric import ParameterSet, conv2d_forward, cross_entropy, finite_diff_gradient, matmul, optimizer_step, softmax
from .pipeline import ExperimentConfig, Pipeline, benchmark_config, evaluate, run_pipeline
from .pseudo_label import assign_labels, contrastive_loss, prf1, purity, select_threshold, train_siamese

__version__ = "0.1.0"
