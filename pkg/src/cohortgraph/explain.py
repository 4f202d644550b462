"""Per-individual feature-importance explanations: a soft mask over input
features is optimized to preserve the trained model's prediction for one
target subject while penalizing mask size and entropy. The masks across many
subjects form a feature-by-individual importance matrix.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import leaves_list, linkage
from scipy.spatial.distance import pdist

from .autodiff import NumericsError, Parameter, Tensor
from .data import FeatureMatrix, UNLABELED
from .graph import SimilarityGraph
from .models import Model
from .rng import make_rng
from .train import AdamW, predict_proba


class ExplainError(ValueError):
    pass


@dataclass
class ExplainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    lambda_size: float = 0.1
    lambda_entropy: float = 0.1
    init_std: float = 0.1
    seed: int = 0


@dataclass
class FeatureMask:
    logits: np.ndarray
    mask: np.ndarray       # sigmoid(logits), in (0,1)
    target: int
    converged: bool
    objective: float


@dataclass
class ExplanationMatrix:
    feature_names: list
    target_ids: list
    values: np.ndarray     # F x M, column per explained subject
    row_order: np.ndarray
    col_order: np.ndarray
    filtered_correct: bool

    def save_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["feature"] + [f"subject_{t}" for t in self.target_ids]))
            fh.write("\n")
            for i, name in enumerate(self.feature_names):
                row = ",".join(repr(float(v)) for v in self.values[i])
                fh.write(f"{name},{row}\n")

    def save_orders(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("rows," + ",".join(str(i) for i in self.row_order) + "\n")
            fh.write("cols," + ",".join(str(i) for i in self.col_order) + "\n")


@contextmanager
def _frozen(model: Model):
    """Temporarily stop gradient tracking through the model parameters."""
    for p in model.parameters():
        p.requires_grad = False
    try:
        yield
    finally:
        for p in model.parameters():
            p.requires_grad = p.trainable


def explain_node(model: Model, fm: FeatureMatrix, graph: SimilarityGraph | None,
                 target: int, cfg: ExplainConfig | None = None) -> FeatureMask:
    """Learn a soft feature mask for one subject.

    The mask is broadcast to every subject's features (the target's prediction
    depends on its neighbors), and the objective is the cross-entropy of the
    model's original predicted class at the target under the masked inputs,
    plus size and entropy penalties. Model parameters stay frozen.
    """
    cfg = cfg or ExplainConfig()
    g = graph if model.config.uses_graph else None
    if not 0 <= target < fm.n_subjects:
        raise ExplainError(f"target {target} out of range")
    proba = predict_proba(model, fm.values, g)
    original_class = int(proba[target] >= 0.5)

    rng = make_rng(cfg.seed, "explain", target)
    mask_logits = Parameter("mask", cfg.init_std * rng.standard_normal(fm.n_features))
    opt = AdamW([mask_logits], cfg.learning_rate, weight_decay=0.0)
    first = last = None
    with _frozen(model):
        for _ in range(cfg.epochs):
            mask = mask_logits.sigmoid()
            masked = Tensor(fm.values) * mask
            logits = model.forward(masked, g, training=False)
            logp = logits.gather_rows(np.array([target])).log_softmax_rows()
            ce = -logp.pick(np.array([original_class])).mean()
            size_pen = cfg.lambda_size * mask.mean()
            ent = -(mask * (mask + 1e-12).log()
                    + (1.0 - mask) * (1.0 - mask + 1e-12).log())
            obj = ce + size_pen + cfg.lambda_entropy * ent.mean()
            val = float(obj.data)
            if not np.isfinite(val):
                raise NumericsError(f"explanation objective diverged for "
                                    f"target {target}")
            if first is None:
                first = val
            last = val
            obj.backward()
            opt.step()
    final_mask = 1.0 / (1.0 + np.exp(-mask_logits.data))
    return FeatureMask(mask_logits.data.copy(), final_mask, target,
                       converged=last <= first, objective=last)


def explain_cohort(model: Model, fm: FeatureMatrix, graph: SimilarityGraph | None,
                   targets, cfg: ExplainConfig | None = None,
                   only_correct: bool = True) -> ExplanationMatrix:
    """Explain a set of subjects; by default only those the model predicts
    correctly (unlabeled targets are dropped when the filter is on)."""
    cfg = cfg or ExplainConfig()
    targets = list(targets)
    if not targets:
        raise ExplainError("no targets to explain")
    g = graph if model.config.uses_graph else None
    if only_correct:
        proba = predict_proba(model, fm.values, g)
        predicted = (proba >= 0.5).astype(int)
        targets = [t for t in targets
                   if fm.labels[t] != UNLABELED and predicted[t] == fm.labels[t]]
        if not targets:
            raise ExplainError("no correctly predicted targets to explain")
    columns = [explain_node(model, fm, graph, t, cfg).mask for t in targets]
    values = np.stack(columns, axis=1)
    row_order, col_order = order_heatmap(values)
    return ExplanationMatrix(list(fm.feature_names), targets, values,
                             row_order, col_order, only_correct)


def _cluster_order(matrix: np.ndarray) -> np.ndarray:
    n = matrix.shape[0]
    if n < 2:
        return np.arange(n)
    link = linkage(pdist(matrix, metric="euclidean"), method="average")
    return np.asarray(leaves_list(link), dtype=np.intp)


def order_heatmap(matrix: np.ndarray):
    """Display permutations for rows and columns via average-linkage
    agglomerative clustering on Euclidean distances; deterministic."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise ExplainError("heatmap ordering requires a finite matrix")
    return _cluster_order(matrix), _cluster_order(matrix.T)
