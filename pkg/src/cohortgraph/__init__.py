"""Subject-similarity graphs and semi-supervised GNN classifiers for tabular
cohorts, with per-individual feature-importance explanations."""

from .data import (FeatureMatrix, SplitSpec, Split, drop_sparse_features,
                   generate_synthetic, impute_knn_mean, load_csv, make_splits,
                   normalize_unit_variance, save_csv)
from .graph import (KernelParams, SimilarityGraph, build_graph, graph_stats,
                    load_graph, save_graph, sym_normalize)
from .models import Model, ModelConfig, load_checkpoint, save_checkpoint
from .train import (RunResult, SweepTable, TrainConfig, auc, predict_proba,
                    run_experiment, sweep_depth, sweep_labels, train)
from .explain import (ExplainConfig, ExplanationMatrix, FeatureMask,
                      explain_cohort, explain_node, order_heatmap)
from .estimators import (GraphSemiSupervisedClassifier, KNNMeanImputer,
                         SimilarityGraphBuilder, SparseFeatureDropper,
                         UnitVarianceScaler)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
