"""Semi-supervised training loop, AUC metric, and the repeated-split sweep
harnesses (labeled-count sweep and depth sweep) with mean +/- standard-error
aggregation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .autodiff import NumericsError
from .data import FeatureMatrix, SplitSpec, Split, make_splits
from .graph import SimilarityGraph
from .models import Model, ModelConfig
from .rng import derive_seed, make_rng


class EvalError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    learning_rate: float = 0.001
    weight_decay: float = 0.01
    seed: int = 0
    selection: str = "best_val"   # or "final"
    patience: int | None = None   # early stop after this many epochs without
                                  # a new best validation AUC
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise EvalError("epochs must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise EvalError("rates must be non-negative")
        if self.selection not in ("best_val", "final"):
            raise EvalError(f"unknown selection rule {self.selection!r}")


@dataclass
class RunResult:
    aucs: list
    selected_epochs: list
    mean: float
    stderr: float
    single_rep_warning: bool = False

    @classmethod
    def from_aucs(cls, aucs, selected_epochs):
        aucs = [float(a) for a in aucs]
        mean = float(np.mean(aucs))
        if len(aucs) > 1:
            stderr = float(np.std(aucs, ddof=1) / np.sqrt(len(aucs)))
            warn = False
        else:
            stderr, warn = 0.0, True
        return cls(aucs, list(selected_epochs), mean, stderr, warn)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC via average ranks: the fraction of positive-negative
    pairs won by the positive, ties counted 0.5. O(n log n)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def softmax_cross_entropy(logits, idx: np.ndarray, labels: np.ndarray):
    """Mean 2-class cross-entropy over the rows in idx (a Tensor scalar)."""
    picked = logits.gather_rows(idx).log_softmax_rows().pick(labels[idx])
    return -picked.mean()


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.wd = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * p.data)


def predict_proba(model: Model, x: np.ndarray,
                  graph: SimilarityGraph | None) -> np.ndarray:
    """Class-1 probability per subject (eval mode, stabilized softmax)."""
    logits = model.forward(x, graph, training=False).data
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, fm: FeatureMatrix,
          graph: SimilarityGraph | None, split: Split):
    """Full-batch training on the labeled train nodes; tracks validation AUC
    each epoch and returns (model, history) with the configured parameter
    selection applied."""
    rng_init = make_rng(train_cfg.seed, "init")
    rng_drop = make_rng(train_cfg.seed, "dropout")
    g = graph if model_cfg.uses_graph else None
    model = Model(model_cfg, fm.n_features, rng_init)
    opt = AdamW(model.parameters(), train_cfg.learning_rate,
                train_cfg.weight_decay, train_cfg.beta1, train_cfg.beta2,
                train_cfg.adam_eps)
    labels = fm.labels
    history = []
    best_auc, best_epoch, best_state = -1.0, -1, None
    for epoch in range(train_cfg.epochs):
        logits = model.forward(fm.values, g, training=True, rng=rng_drop)
        loss = softmax_cross_entropy(logits, split.train_idx, labels)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NumericsError(f"non-finite training loss at epoch {epoch}")
        loss.backward()
        opt.step()
        proba = predict_proba(model, fm.values, g)
        val_auc = auc(proba[split.val_idx], labels[split.val_idx])
        history.append({"epoch": epoch, "loss": loss_val, "val_auc": val_auc})
        if val_auc > best_auc and all(np.isfinite(p.data).all()
                                      for p in model.parameters()):
            best_auc, best_epoch = val_auc, epoch
            best_state = ({k: p.data.copy() for k, p in model.params.items()},
                          {k: {kk: vv.copy() for kk, vv in st.items()}
                           for k, st in model.bn_state.items()})
        if (train_cfg.patience is not None
                and epoch - best_epoch >= train_cfg.patience):
            break
    if train_cfg.selection == "best_val" and best_state is not None:
        for k, v in best_state[0].items():
            model.params[k].data = v
        model.bn_state = best_state[1]
        selected = best_epoch
    else:
        selected = history[-1]["epoch"]
    return model, {"history": history, "selected_epoch": selected,
                   "best_val_auc": best_auc}


def _one_repetition(model_cfg, train_cfg, fm, graph, spec, rep):
    split = make_splits(fm.labels, spec, rep)
    rep_cfg = replace(train_cfg, seed=derive_seed(train_cfg.seed, "rep", rep))
    model, info = train(model_cfg, rep_cfg, fm, graph, split)
    g = graph if model_cfg.uses_graph else None
    proba = predict_proba(model, fm.values, g)
    test_auc = auc(proba[split.test_idx], fm.labels[split.test_idx])
    return test_auc, info["selected_epoch"]


def run_experiment(model_cfg: ModelConfig, train_cfg: TrainConfig,
                   fm: FeatureMatrix, graph: SimilarityGraph | None,
                   spec: SplitSpec, jobs: int = 1) -> RunResult:
    """Repeat train/test over `spec.repetitions` independent splits and
    aggregate. Deterministic in (configs, data, seeds); repetitions may run
    in parallel, aggregation order is by repetition index."""
    try:
        results = Parallel(n_jobs=jobs)(
            delayed(_one_repetition)(model_cfg, train_cfg, fm, graph, spec, rep)
            for rep in range(spec.repetitions))
    except NumericsError as exc:
        raise NumericsError(f"repetition failed: {exc}") from exc
    aucs = [r[0] for r in results]
    epochs = [r[1] for r in results]
    return RunResult.from_aucs(aucs, epochs)


@dataclass
class SweepTable:
    axis_name: str            # "labeled_per_class" or "depth"
    axis_values: list
    model_kinds: list
    cells: dict = field(default_factory=dict)  # (axis value, kind) -> RunResult

    def best_kind(self, value):
        row = [(self.cells[(value, k)].mean, k) for k in self.model_kinds]
        return max(row)[1]

    def to_csv(self, path):
        """Rows = sweep values, columns = models, cells = "mean ± stderr" in
        percent; the last column flags the per-row best (bold-max) model."""
        lines = [",".join([self.axis_name] + list(self.model_kinds) + ["best_model"])]
        for v in self.axis_values:
            cells = [f"{100 * self.cells[(v, k)].mean:.2f} ± "
                     f"{100 * self.cells[(v, k)].stderr:.2f}"
                     for k in self.model_kinds]
            lines.append(",".join([str(v)] + cells + [self.best_kind(v)]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def to_json(self, path):
        doc = {"axis": self.axis_name, "values": self.axis_values,
               "models": self.model_kinds, "cells": []}
        for v in self.axis_values:
            for k in self.model_kinds:
                cell = self.cells[(v, k)]
                doc["cells"].append({
                    self.axis_name: v, "model": k, "mean": cell.mean,
                    "stderr": cell.stderr, "aucs": cell.aucs,
                    "selected_epochs": cell.selected_epochs,
                    "best_in_row": k == self.best_kind(v),
                })
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)


def sweep_labels(model_cfgs: dict, l_values, fm: FeatureMatrix,
                 graph: SimilarityGraph, train_cfg: TrainConfig,
                 spec: SplitSpec, jobs: int = 1) -> SweepTable:
    """Grid of run_experiment over labeled-samples-per-class values."""
    table = SweepTable("labeled_per_class", list(l_values), list(model_cfgs))
    for l in l_values:
        cell_spec = replace(spec, labeled_per_class=l,
                            seed=derive_seed(spec.seed, "l", l))
        for kind, cfg in model_cfgs.items():
            cell_train = replace(train_cfg,
                                 seed=derive_seed(train_cfg.seed, "l", l, kind))
            table.cells[(l, kind)] = run_experiment(
                cfg, cell_train, fm, graph, cell_spec, jobs)
    return table


def sweep_depth(model_cfgs: dict, depths, fm: FeatureMatrix,
                graph: SimilarityGraph, train_cfg: TrainConfig,
                spec: SplitSpec, jobs: int = 1) -> SweepTable:
    """Grid of run_experiment over model depths at a fixed labeled count."""
    table = SweepTable("depth", list(depths), list(model_cfgs))
    for d in depths:
        cell_spec = replace(spec, seed=derive_seed(spec.seed, "depth", d))
        for kind, cfg in model_cfgs.items():
            deep_cfg = replace(cfg, depth=d)
            cell_train = replace(train_cfg,
                                 seed=derive_seed(train_cfg.seed, "depth", d, kind))
            table.cells[(d, kind)] = run_experiment(
                deep_cfg, cell_train, fm, graph, cell_spec, jobs)
    return table
