"""Linear-probe evaluation of frozen embeddings.

Embeddings are scored per binary task with an L2-regularised logistic
regression whose penalty is picked by stratified k-fold cross-validated
AUROC. Reported AUROCs carry DeLong 95% confidence intervals, and tasks are
summarised by their unweighted mean (the composite score).
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm, rankdata
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import StratifiedKFold
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from ._fileio import atomic_open, atomic_write_bytes
from .audio_io import ClipManifestEntry, Waveform, segment_clips
from .contrastive import embed_batch

logger = logging.getLogger(__name__)

DEFAULT_PENALTY_GRID = tuple(np.logspace(-4, 4, 9))
DEFAULT_K_FOLDS = 5


# --------------------------------------------------------------------------
# AUROC and DeLong intervals


def _split_by_label(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUROC needs both positive and negative examples")
    return pos, neg


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: share of (positive, negative) pairs ranked correctly, ties count 1/2."""
    pos, neg = _split_by_label(scores, labels)
    m, n = pos.size, neg.size
    ranks = rankdata(np.concatenate([pos, neg]))  # midranks
    # twice the U statistic is an exact integer; dividing once keeps auroc(s) + auroc(-s) == 1
    twice_u = 2.0 * ranks[:m].sum() - m * (m + 1)
    return float(twice_u / (2.0 * m * n))


class AUROCInterval(NamedTuple):
    auroc: float
    ci_low: float
    ci_high: float
    variance: float
    degenerate: bool


def delong_components(scores, labels):
    """Structural components (V10 per positive, V01 per negative) and the AUROC."""
    pos, neg = _split_by_label(scores, labels)
    m, n = pos.size, neg.size
    r_all = rankdata(np.concatenate([pos, neg]))
    r_pos, r_neg = rankdata(pos), rankdata(neg)
    v10 = (r_all[:m] - r_pos) / n
    v01 = 1.0 - (r_all[m:] - r_neg) / m
    return auroc(scores, labels), v10, v01


def delong_ci(scores, labels, level: float = 0.95) -> AUROCInterval:
    """AUROC with a DeLong confidence interval, clipped to [0, 1].

    With a single example in either class the variance is undefined; with
    zero variance the interval has no width. Both cases come back flagged
    ``degenerate`` with ``ci_low == ci_high == auroc``.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    auc, v10, v01 = delong_components(scores, labels)
    m, n = v10.size, v01.size
    if m < 2 or n < 2:
        return AUROCInterval(auc, auc, auc, float("nan"), True)
    var = float(np.var(v10, ddof=1) / m + np.var(v01, ddof=1) / n)
    if var <= 0.0:
        return AUROCInterval(auc, auc, auc, 0.0, True)
    half = norm.ppf(0.5 + level / 2.0) * math.sqrt(var)
    return AUROCInterval(auc, max(0.0, auc - half), min(1.0, auc + half), var, False)


# --------------------------------------------------------------------------
# Linear probe


def _standardize_fit(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def _logistic_fit(X, y, penalty, tol=1e-6, max_iter=10_000, init=None):
    """Minimise mean log-loss + penalty/2 * ||w||^2 (intercept unpenalised).

    Full-batch accelerated gradient descent (Nesterov momentum, fixed step
    1/L, adaptive restart) until the gradient norm is <= ``tol``.
    """
    n, d = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    lipschitz = np.linalg.norm(Xb, 2) ** 2 / (4.0 * n) + penalty
    step = 1.0 / lipschitz
    reg = np.full(d + 1, penalty)
    reg[-1] = 0.0

    def grad(theta):
        p = expit(Xb @ theta)
        return Xb.T @ (p - y) / n + reg * theta

    theta = np.zeros(d + 1) if init is None else init.copy()
    prev = theta.copy()
    momentum_t = 1.0
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        g = grad(theta)
        if np.linalg.norm(g) <= tol:
            break
        look = theta + ((momentum_t - 1.0) / (momentum_t + 2.0)) * (theta - prev)
        g_look = grad(look)
        new = look - step * g_look
        if np.dot(g_look, new - theta) > 0:  # restart when momentum points uphill
            momentum_t = 1.0
            new = theta - step * g
        else:
            momentum_t += 1.0
        prev, theta = theta, new
    return theta, n_iter


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Logistic regression with a cross-validated ridge penalty.

    Features are standardised on the training data. For every penalty in
    ``penalty_grid`` the mean AUROC over stratified ``k_folds`` held-out folds
    is computed; the best penalty (ties go to the larger one) is refit on
    all training rows.
    """

    def __init__(self, penalty_grid=DEFAULT_PENALTY_GRID, k_folds=DEFAULT_K_FOLDS, tol=1e-6,
                 max_iter=10_000, random_state=0):
        self.penalty_grid = penalty_grid
        self.k_folds = k_folds
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        grid = sorted(float(p) for p in self.penalty_grid)
        if not grid:
            raise ValueError("penalty grid is empty")
        if any(p <= 0 for p in grid):
            raise ValueError("penalties must be positive")
        classes = np.unique(y)
        if classes.size != 2 or not set(classes.tolist()) <= {0, 1}:
            raise ValueError(f"linear probe needs binary 0/1 labels with both classes, got {classes}")
        y = y.astype(np.float64)
        if min(np.sum(y == 0), np.sum(y == 1)) < self.k_folds:
            raise ValueError(f"need at least k_folds={self.k_folds} examples of each class")

        folds = list(StratifiedKFold(self.k_folds, shuffle=True, random_state=self.random_state).split(X, y))
        cv = np.zeros((len(grid), len(folds)))
        for f, (tr, va) in enumerate(folds):
            mean, scale = _standardize_fit(X[tr])
            Xtr, Xva = (X[tr] - mean) / scale, (X[va] - mean) / scale
            theta = None
            # strongest penalty first; each solution warm-starts the next
            for g in reversed(range(len(grid))):
                theta, _ = _logistic_fit(Xtr, y[tr], grid[g], self.tol, self.max_iter, theta)
                cv[g, f] = auroc(Xva @ theta[:-1] + theta[-1], y[va])
        self.cv_scores_ = cv.mean(axis=1)
        best = max(range(len(grid)), key=lambda g: (self.cv_scores_[g], g))
        self.penalty_ = grid[best]
        self.penalty_grid_ = np.array(grid)

        self.mean_, self.scale_ = _standardize_fit(X)
        theta, self.n_iter_ = _logistic_fit((X - self.mean_) / self.scale_, y, self.penalty_, self.tol,
                                            self.max_iter)
        self.coef_, self.intercept_ = theta[:-1], theta[-1]
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def score(self, X, y, sample_weight=None):
        """AUROC of the decision function (not accuracy)."""
        return auroc(self.decision_function(X), y)


@dataclass
class ProbeFit:
    coef: np.ndarray
    intercept: float
    penalty: float
    cv_scores: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def decision_function(self, X):
        return ((np.asarray(X, dtype=np.float64) - self.mean) / self.scale) @ self.coef + self.intercept


def fit_linear_probe(X, y, penalty_grid: Sequence[float] = DEFAULT_PENALTY_GRID,
                     k_folds: int = DEFAULT_K_FOLDS, rng: int | np.random.Generator = 0) -> ProbeFit:
    """Functional form of :class:`LinearProbe`; returns weights and the chosen penalty."""
    X = X.values if isinstance(X, EmbeddingMatrix) else X
    seed = int(rng.integers(2**31)) if isinstance(rng, np.random.Generator) else rng
    probe = LinearProbe(penalty_grid, k_folds, random_state=seed).fit(X, y)
    return ProbeFit(probe.coef_, float(probe.intercept_), probe.penalty_, probe.cv_scores_, probe.mean_,
                    probe.scale_)


# --------------------------------------------------------------------------
# Sliding-window embedding


def mean_pool(window_embeddings) -> np.ndarray:
    return np.mean(np.asarray(window_embeddings, dtype=np.float64), axis=0)


def embed_clip_sliding(w: Waveform, encoder, win_s: float = 2.0, step_s: float = 1.0,
                       feature_fn=None) -> np.ndarray:
    """Encode every ``win_s`` window (hop ``step_s``) and average the embeddings."""
    windows = segment_clips(w, win_s, step_s)
    if not windows:
        raise ValueError(f"clip of {w.duration_s:.3f}s is shorter than the {win_s}s window")
    return mean_pool(embed_batch(encoder, windows, feature_fn))


# --------------------------------------------------------------------------
# Embedding matrices


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        ids = tuple(str(i) for i in self.ids)
        if values.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got shape {values.shape}")
        if len(ids) != values.shape[0]:
            raise ValueError(f"{len(ids)} ids for {values.shape[0]} rows")
        bad = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
        if bad.size:
            raise ValueError(f"non-finite embedding values in row {int(bad[0])} (id {ids[bad[0]]!r})")
        if len(set(ids)) != len(ids):
            raise ValueError("embedding ids are not unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        index = {k: i for i, k in enumerate(self.ids)}
        missing = [k for k in ids if k not in index]
        if missing:
            raise KeyError(f"no embedding for clip id {missing[0]!r}")
        return self.values[[index[k] for k in ids]]


_EMB_MAGIC = b"HEMB"
_EMB_HEADER = struct.Struct("<4sIIId")


def export_embeddings(m: EmbeddingMatrix, path, binary: bool | None = None) -> None:
    """CSV (``id,dim_0..dim_{D-1}``) unless ``binary`` or the path ends in ``.bin``."""
    if binary is None:
        binary = str(path).endswith(".bin")
    if binary:
        ids = "\n".join(m.ids).encode()
        rows, cols = m.values.shape
        atomic_write_bytes(path, _EMB_HEADER.pack(_EMB_MAGIC, 1, rows, cols, 0.0)
                           + np.ascontiguousarray(m.values, dtype="<f4").tobytes()
                           + struct.pack("<I", len(ids)) + ids)
        return
    with atomic_open(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *[f"dim_{j}" for j in range(m.dim)]])
        for key, row in zip(m.ids, m.values):
            writer.writerow([key, *[repr(float(v)) for v in row]])


def import_embeddings(path) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == _EMB_MAGIC:
        _, version, rows, cols, _ = _EMB_HEADER.unpack_from(data)
        off = _EMB_HEADER.size
        values = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        off += rows * cols * 4
        (n_ids,) = struct.unpack_from("<I", data, off)
        ids = data[off + 4 : off + 4 + n_ids].decode().split("\n") if rows else []
        return EmbeddingMatrix(tuple(ids), values.astype(np.float64))

    reader = csv.reader(data.decode("utf-8").splitlines())
    header = next(reader, None)
    if not header or header[0] != "id":
        raise ValueError(f"{path}: embedding CSV must start with an 'id' column")
    dim = len(header) - 1
    ids, rows = [], []
    for i, row in enumerate(reader):
        if not row:
            continue
        if len(row) - 1 != dim:
            raise ValueError(f"{path}: row {i} has {len(row) - 1} dimensions, expected {dim}")
        values = [float(v) for v in row[1:]]
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"{path}: non-finite value in row {i} (id {row[0]!r})")
        ids.append(row[0])
        rows.append(values)
    return EmbeddingMatrix(tuple(ids), np.array(rows, dtype=np.float64).reshape(len(rows), dim))


# --------------------------------------------------------------------------
# Reports


@dataclass
class TaskResult:
    task: str
    auroc: float
    ci_low: float
    ci_high: float
    n_pos: int
    n_neg: int
    degenerate: bool = False
    penalty: float = float("nan")

    def __post_init__(self):
        if not 0.0 <= self.ci_low <= self.auroc <= self.ci_high <= 1.0:
            raise ValueError(f"inconsistent interval for {self.task}: {self.ci_low} <= {self.auroc} <= {self.ci_high}")


@dataclass
class EvalReport:
    tasks: list[TaskResult] = field(default_factory=list)

    @property
    def composite(self) -> float:
        return composite_score(self)

    def __len__(self):
        return len(self.tasks)


REPORT_COLUMNS = ("task", "auroc", "ci_low", "ci_high", "n_pos", "n_neg")


def composite_score(report: EvalReport | Sequence[float]) -> float:
    """Unweighted mean AUROC across tasks."""
    values = [t.auroc for t in report.tasks] if isinstance(report, EvalReport) else list(report)
    if not values:
        raise ValueError("composite score of an empty report")
    return math.fsum(values) / len(values)


def write_report(report: EvalReport, path) -> None:
    with atomic_open(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for t in report.tasks:
            writer.writerow([t.task, repr(t.auroc), repr(t.ci_low), repr(t.ci_high), t.n_pos, t.n_neg])
        if report.tasks:
            writer.writerow(["composite", repr(report.composite), "", "", "", ""])


def read_report(path) -> EvalReport:
    tasks = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected report header {header}")
        for row in reader:
            if not row or row[0] == "composite":
                continue
            tasks.append(TaskResult(row[0], float(row[1]), float(row[2]), float(row[3]), int(row[4]), int(row[5])))
    return EvalReport(tasks)


def evaluate_tasks(embeddings: EmbeddingMatrix, entries: Sequence[ClipManifestEntry], tasks: Sequence[str],
                   penalty_grid=DEFAULT_PENALTY_GRID, k_folds=DEFAULT_K_FOLDS, seed: int = 0,
                   train_split: str = "probe_train", eval_split: str = "probe_eval") -> EvalReport:
    """Probe every task: fit on ``train_split`` clips, report DeLong intervals on ``eval_split``."""
    report = EvalReport()
    for task in tasks:
        def rows(split):
            chosen = [e for e in entries if e.split == split and e.task_labels.get(task) is not None]
            return embeddings.rows([e.clip_id for e in chosen]), np.array([e.task_labels[task] for e in chosen])

        X_tr, y_tr = rows(train_split)
        X_ev, y_ev = rows(eval_split)
        if y_ev.size == 0 or len(set(y_ev.tolist())) < 2:
            raise ValueError(f"task {task!r}: evaluation split needs both classes")
        probe = LinearProbe(penalty_grid, k_folds, random_state=seed).fit(X_tr, y_tr)
        ci = delong_ci(probe.decision_function(X_ev), y_ev)
        report.tasks.append(TaskResult(task, ci.auroc, ci.ci_low, ci.ci_high, int(np.sum(y_ev == 1)),
                                       int(np.sum(y_ev == 0)), ci.degenerate, probe.penalty_))
        logger.info("task %s auroc %.4f [%.4f, %.4f] penalty %g", task, ci.auroc, ci.ci_low, ci.ci_high,
                    probe.penalty_)
    return report
