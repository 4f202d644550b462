"""Cohort ingestion and preparation: CSV I/O, missing-data handling,
z-scoring, synthetic cohort generation, and repeated labeled/val/test splits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng

UNLABELED = -1


class DataError(ValueError):
    """Malformed input data or an infeasible data operation."""


@dataclass
class FeatureMatrix:
    """Dense subject-by-feature matrix with missingness mask and labels.

    labels[i] is 0/1, or UNLABELED (-1) for subjects without a label.
    """

    feature_names: list
    values: np.ndarray       # N x F float64
    missing_mask: np.ndarray  # N x F bool, True where the value is missing
    labels: np.ndarray       # N ints in {-1, 0, 1}

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "FeatureMatrix":
        return FeatureMatrix(list(self.feature_names), self.values.copy(),
                             self.missing_mask.copy(), self.labels.copy())


@dataclass
class SplitSpec:
    labeled_per_class: int
    val_size: int
    test_size: int
    repetitions: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.repetitions < 1:
            raise DataError("repetitions must be >= 1")
        if self.labeled_per_class < 1:
            raise DataError("labeled_per_class must be >= 1")


@dataclass
class Split:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray


def load_csv(path, label_column: str, missing_token: str = "") -> FeatureMatrix:
    """Read a cohort CSV (header row, one subject per row).

    Cells equal to `missing_token` are flagged missing; the label column must
    contain 0, 1, or the missing token (meaning unlabeled).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            dupes = sorted({c for c in header if header.count(c) > 1})
            raise DataError(f"{path}: duplicate column name(s): {dupes}")
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not found")
        label_pos = header.index(label_column)
        feature_names = [c for i, c in enumerate(header) if i != label_pos]

        rows, masks, labels = [], [], []
        for rownum, cells in enumerate(reader, start=2):
            if len(cells) != len(header):
                raise DataError(f"{path}: row {rownum} has {len(cells)} cells, "
                                f"expected {len(header)}")
            lab_cell = cells[label_pos].strip()
            if lab_cell == missing_token:
                labels.append(UNLABELED)
            elif lab_cell in ("0", "1"):
                labels.append(int(lab_cell))
            else:
                raise DataError(f"{path}: row {rownum}, column {label_column!r}: "
                                f"label must be 0, 1, or empty, got {lab_cell!r}")
            vals, miss = [], []
            for i, cell in enumerate(cells):
                if i == label_pos:
                    continue
                cell = cell.strip()
                if cell == missing_token:
                    vals.append(0.0)
                    miss.append(True)
                else:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise DataError(
                            f"{path}: row {rownum}, column {header[i]!r}: "
                            f"cannot parse {cell!r} as a number") from None
                    miss.append(False)
            rows.append(vals)
            masks.append(miss)

    if not rows:
        raise DataError(f"{path}: no data rows")
    return FeatureMatrix(feature_names,
                         np.array(rows, dtype=np.float64),
                         np.array(masks, dtype=bool),
                         np.array(labels, dtype=np.int64))


def save_csv(fm: FeatureMatrix, path, label_column: str = "label",
             missing_token: str = "") -> None:
    """Write a FeatureMatrix in the same CSV dialect load_csv reads.

    Values are printed with repr so a load/save round trip is bit-exact.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(fm.feature_names) + [label_column])
        for i in range(fm.n_subjects):
            row = [missing_token if fm.missing_mask[i, j] else repr(float(fm.values[i, j]))
                   for j in range(fm.n_features)]
            lab = fm.labels[i]
            row.append(missing_token if lab == UNLABELED else str(int(lab)))
            writer.writerow(row)


def drop_sparse_features(fm: FeatureMatrix, threshold: float = 0.5) -> FeatureMatrix:
    """Remove features whose missing fraction strictly exceeds `threshold`."""
    if not 0.0 < threshold <= 1.0:
        raise DataError(f"threshold must be in (0, 1], got {threshold}")
    frac = fm.missing_mask.mean(axis=0)
    keep = frac <= threshold
    if not keep.any():
        raise DataError("all features exceed the missingness threshold")
    names = [n for n, k in zip(fm.feature_names, keep) if k]
    return FeatureMatrix(names, fm.values[:, keep].copy(),
                         fm.missing_mask[:, keep].copy(), fm.labels.copy())


def _masked_sq_distances(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Pairwise squared distances over mutually observed features, rescaled
    by F / |overlap|; inf where two rows share no observed feature.
    """
    n, f = values.shape
    a = np.where(observed, values, 0.0)
    m = observed.astype(np.float64)
    sq = (a * a) @ m.T
    d2 = sq - 2.0 * (a @ a.T) + sq.T
    overlap = m @ m.T
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(overlap > 0, f * d2 / overlap, np.inf)
    np.fill_diagonal(scaled, 0.0)
    return np.maximum(scaled, 0.0)


def impute_knn_mean(fm: FeatureMatrix, k: int = 10) -> FeatureMatrix:
    """Fill each missing cell with the mean of that feature over the k nearest
    rows (by overlap-rescaled Euclidean distance) that observe it.
    """
    if k < 1:
        raise DataError("k must be >= 1")
    if not fm.missing_mask.any():
        return fm.copy()
    observed = ~fm.missing_mask
    if not observed.any(axis=1).all():
        bad = int(np.flatnonzero(~observed.any(axis=1))[0])
        raise DataError(f"subject {bad} has no observed features")
    never = ~observed.any(axis=0)
    if never.any():
        bad = [fm.feature_names[j] for j in np.flatnonzero(never)]
        raise DataError(f"feature(s) missing in every row, cannot impute: {bad}")

    dist = _masked_sq_distances(fm.values, observed)
    out = fm.values.copy()
    n = fm.n_subjects
    for i in range(n):
        missing_cols = np.flatnonzero(fm.missing_mask[i])
        if missing_cols.size == 0:
            continue
        # stable order: by distance, ties broken by original index
        order = np.argsort(dist[i], kind="stable")
        order = order[order != i]
        for j in missing_cols:
            donors = order[observed[order, j]][:k]
            if donors.size == 0:
                raise DataError(
                    f"cannot impute subject {i}, feature {fm.feature_names[j]!r}: "
                    "no donor row observes it")
            out[i, j] = fm.values[donors, j].mean()
    return FeatureMatrix(list(fm.feature_names), out,
                         np.zeros_like(fm.missing_mask), fm.labels.copy())


def normalize_unit_variance(fm: FeatureMatrix):
    """Z-score every column (sample std, ddof=1). Constant columns map to
    zeros and are flagged. Returns (normalized matrix, stats dict).
    """
    if fm.missing_mask.any():
        raise DataError("normalize requires a fully imputed matrix")
    mean = fm.values.mean(axis=0)
    std = fm.values.std(axis=0, ddof=1) if fm.n_subjects > 1 else np.zeros(fm.n_features)
    constant = std == 0.0
    safe = np.where(constant, 1.0, std)
    values = np.where(constant, 0.0, (fm.values - mean) / safe)
    stats = {"mean": mean, "std": std, "constant": constant}
    return FeatureMatrix(list(fm.feature_names), values,
                         fm.missing_mask.copy(), fm.labels.copy()), stats


def make_splits(labels: np.ndarray, spec: SplitSpec, repetition: int) -> Split:
    """Draw the (train, val, test) split for one repetition.

    Deterministic in (spec.seed, repetition): train takes exactly
    labeled_per_class uniform draws per class; val and test come from the
    shuffled remainder.
    """
    rng = make_rng(spec.seed, "split", repetition)
    labels = np.asarray(labels)
    classes = sorted(int(c) for c in np.unique(labels) if c != UNLABELED)
    if len(classes) < 2:
        raise DataError("need at least two labeled classes to split")
    train = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if members.size < spec.labeled_per_class:
            raise DataError(f"class {c} has {members.size} members, "
                            f"need {spec.labeled_per_class}")
        train.append(rng.choice(members, size=spec.labeled_per_class, replace=False))
    train = np.sort(np.concatenate(train))
    rest = np.setdiff1d(np.flatnonzero(labels != UNLABELED), train)
    if rest.size < spec.val_size + spec.test_size:
        raise DataError(f"only {rest.size} labeled subjects left for "
                        f"val ({spec.val_size}) + test ({spec.test_size})")
    rest = rng.permutation(rest)
    val = np.sort(rest[:spec.val_size])
    test = np.sort(rest[spec.val_size:spec.val_size + spec.test_size])
    return Split(train, val, test)


def generate_synthetic(n_per_class: int, n_features: int, n_informative: int,
                       cluster_spread: float = 1.0, seed: int = 0,
                       margin: float = 2.0, noise_rank: int = 3,
                       noise_scale: float = 0.3) -> FeatureMatrix:
    """Two-class Gaussian cohort with planted informative feature groups.

    The class centroids differ by `margin` (Euclidean), spread evenly across
    the informative dimensions; those dimensions split into two named groups
    ("infA_*", "infB_*"). The remaining variation carries no class signal but
    is correlated across features through a rank-`noise_rank` latent factor
    (as in real checkup panels), so nearest-neighbor structure is meaningful;
    noise_rank=0 gives fully independent features. All per-subject noise is
    scaled by `cluster_spread`.
    """
    if n_informative > n_features:
        raise DataError("n_informative cannot exceed n_features")
    rng = make_rng(seed, "synth")
    n = 2 * n_per_class
    if noise_rank > 0:
        latent = rng.standard_normal((n, noise_rank))
        loadings = rng.standard_normal((noise_rank, n_features)) / np.sqrt(noise_rank)
        base = latent @ loadings + noise_scale * rng.standard_normal((n, n_features))
    else:
        base = rng.standard_normal((n, n_features))
    values = cluster_spread * base
    if n_informative > 0:
        delta = margin / np.sqrt(n_informative)
        values[n_per_class:, :n_informative] += delta
    labels = np.concatenate([np.zeros(n_per_class, dtype=np.int64),
                             np.ones(n_per_class, dtype=np.int64)])
    perm = rng.permutation(n)
    values, labels = values[perm], labels[perm]

    n_a = (n_informative + 1) // 2
    names = ([f"infA_{i}" for i in range(n_a)]
             + [f"infB_{i}" for i in range(n_informative - n_a)]
             + [f"noise_{i}" for i in range(n_features - n_informative)])
    return FeatureMatrix(names, values, np.zeros((n, n_features), dtype=bool), labels)
