"""Validation protocols for shared-response fits.

Time-segment matching
    Leave one subject out; locate each held-out ``segment_len``-TR window of
    that subject's shared-space test response by Pearson correlation with
    the mean response of the remaining subjects. Windows that overlap the
    true one (other than itself) are not candidates. Every window start is
    tried, so the result is deterministic.

Scene-recall matching
    Average recall TRs per scene, project them into the shared space and
    classify the held-out subject's scene vectors with a linear one-vs-rest
    SVM trained on the other subjects.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ProtocolError
from .linalg import zscore_rows
from .models import FitConfig, fit_model, normalize_model_id, project

logger = logging.getLogger(__name__)

PROTOCOLS = ("time-segment", "scene-recall")

# correlations closer than this are treated as tied
TIE_TOL = 1e-12


@dataclass(frozen=True)
class EvalSpec:
    """Evaluation protocol settings.

    ``zscore`` standardizes every voxel time course within each data block
    (training half, test half, recall run) before fitting or projecting.
    """

    protocol: str = "time-segment"
    segment_len: int = 9
    svm_c: float = 1.0
    zscore: bool = True

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ProtocolError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        if self.segment_len < 1:
            raise ProtocolError("segment_len must be >= 1")
        if not self.svm_c > 0:
            raise ProtocolError("svm_c must be positive")


@dataclass
class EvalResult:
    correct: int
    trials: int
    chance: float
    meta: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct / self.trials if self.trials else float("nan")

    def __add__(self, other: "EvalResult") -> "EvalResult":
        trials = self.trials + other.trials
        chance = (self.chance * self.trials + other.chance * other.trials) / trials if trials else float("nan")
        return EvalResult(self.correct + other.correct, trials, chance)


def split_halves(t: int) -> tuple[range, range]:
    """First ceil(t/2) TRs and the remainder."""
    if t < 2:
        raise ProtocolError(f"need at least 2 TRs to split, got {t}")
    half = (t + 1) // 2
    return range(0, half), range(half, t)


def n_candidates(t: int, segment_len: int) -> int:
    return t - segment_len + 1


def time_segment_chance(t: int, segment_len: int = 9) -> float:
    """Trial-weighted chance over both folds of a t-TR run.

    Each fold has m * n_f trials at chance 1 / n_f, so the weighted chance is
    2 / (n_1 + n_2); for equal halves this is 1 / (number of window starts).
    """
    first, second = split_halves(t)
    n1 = n_candidates(len(first), segment_len)
    n2 = n_candidates(len(second), segment_len)
    if min(n1, n2) < 1:
        raise ProtocolError(f"test half shorter than segment_len={segment_len}")
    return 2.0 / (n1 + n2)


def _window_matrix(response: np.ndarray, segment_len: int) -> np.ndarray:
    """Rows are flattened (k x segment_len) windows, centered and unit-norm."""
    win = sliding_window_view(response, segment_len, axis=1)
    win = win.transpose(1, 0, 2).reshape(win.shape[1], -1)
    win = win - win.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(win, axis=1, keepdims=True)
    # zero-variance windows correlate as 0 with everything
    norms[norms == 0] = np.inf
    return win / norms


def segment_match_counts(responses, segment_len: int) -> tuple[int, int]:
    """Leave-one-subject-out segment matching on shared-space responses.

    Parameters
    ----------
    responses : list of ndarray, each (k, T)
        Projected test data, one per subject.

    Returns
    -------
    (correct, trials)
    """
    responses = [np.asarray(r, dtype=np.float64) for r in responses]
    m = len(responses)
    if m < 2:
        raise ProtocolError("segment matching needs at least 2 subjects")
    t = responses[0].shape[1]
    n = n_candidates(t, segment_len)
    if n < 1:
        raise ProtocolError(f"test half of {t} TRs is shorter than segment_len={segment_len}")
    total = np.sum(responses, axis=0)
    starts = np.arange(n)
    gap = np.abs(starts[:, None] - starts[None, :])
    excluded = (gap < segment_len) & (gap > 0)
    correct = 0
    for i in range(m):
        reference = (total - responses[i]) / (m - 1)
        corr = _window_matrix(responses[i], segment_len) @ _window_matrix(reference, segment_len).T
        corr[excluded] = -np.inf
        # near-equal correlations (rounding noise) count as ties -> earliest start
        best = corr.max(axis=1, keepdims=True)
        pred = np.argmax(corr >= best - TIE_TOL, axis=1)
        correct += int(np.sum(pred == starts))
    return correct, m * n


def prepare_blocks(xs, zscore: bool):
    """Optionally z-score every voxel time course of each block."""
    return [zscore_rows(x) for x in xs] if zscore else [np.asarray(x, dtype=np.float64) for x in xs]


def time_segment_match(fit, test_xs, spec: EvalSpec = EvalSpec()) -> EvalResult:
    """Score one fit on held-out data (already prepared)."""
    responses = [project(fit, x, i) for i, x in enumerate(test_xs)]
    correct, trials = segment_match_counts(responses, spec.segment_len)
    chance = 1.0 / n_candidates(responses[0].shape[1], spec.segment_len)
    return EvalResult(correct, trials, chance)


def evaluate_time_segment(xs, fitter, spec: EvalSpec = EvalSpec()) -> EvalResult:
    """Two-fold time-segment protocol.

    ``fitter(train_xs, fold)`` returns a FactorFit; the halves swap roles and
    the folds are pooled by exact trial counts.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    t = xs[0].shape[1]
    halves = split_halves(t)
    if len(halves[1]) < spec.segment_len:
        raise ProtocolError(f"test half of {len(halves[1])} TRs is shorter than segment_len={spec.segment_len}")
    result = None
    fits = []
    for fold, (train, test) in enumerate([halves, halves[::-1]]):
        train_xs = prepare_blocks([x[:, train] for x in xs], spec.zscore)
        test_xs = prepare_blocks([x[:, test] for x in xs], spec.zscore)
        fit = fitter(train_xs, fold)
        fits.append(fit)
        res = time_segment_match(fit, test_xs, spec)
        result = res if result is None else result + res
    result.meta["fits"] = fits
    return result


# ----------------------------------------------------------------- scenes


@dataclass
class SceneTable:
    """Per-subject scene id for every recall TR (-1 for unlabeled TRs)."""

    scene_ids: list

    @classmethod
    def from_intervals(cls, intervals, lengths) -> "SceneTable":
        """Build from per-subject ``(start_tr, scene_id)`` interval starts."""
        out = []
        for pairs, t in zip(intervals, lengths):
            ids = np.full(t, -1, dtype=np.int64)
            pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
            for start, scene in pairs[np.argsort(pairs[:, 0], kind="stable")]:
                ids[start:] = scene
            out.append(ids)
        return cls(out)

    @classmethod
    def from_dataset(cls, dataset) -> "SceneTable":
        if dataset.labels is None:
            raise ProtocolError("recall dataset has no scene labels")
        ids = dataset.scene_per_tr()
        return cls([ids.copy() for _ in range(dataset.n_subjects)])

    @property
    def n_scenes(self) -> int:
        return len(self.usable_scenes())

    def usable_scenes(self) -> np.ndarray:
        """Scene ids present for at least two subjects."""
        counts: dict[int, int] = {}
        for ids in self.scene_ids:
            for s in np.unique(ids[ids >= 0]):
                counts[int(s)] = counts.get(int(s), 0) + 1
        return np.array(sorted(s for s, c in counts.items() if c >= 2), dtype=np.int64)


@numba.njit(cache=True)
def _dual_cd(xa, signs, C, tol, max_epochs, seed):
    """Dual coordinate descent for each column of ``signs`` in turn.

    Stops a problem once the spread of projected gradients over one epoch
    drops below ``tol``. Returns weights (n_prob, d), duals and epochs used.
    """
    n, d = xa.shape
    n_prob = signs.shape[1]
    w = np.zeros((n_prob, d))
    alpha = np.zeros((n, n_prob))
    qdiag = np.empty(n)
    for i in range(n):
        qdiag[i] = xa[i] @ xa[i]
    np.random.seed(seed)
    epochs = np.zeros(n_prob, np.int64)
    order = np.arange(n)
    for c in range(n_prob):
        for ep in range(max_epochs):
            np.random.shuffle(order)
            pg_max = -np.inf
            pg_min = np.inf
            for i in order:
                yi = signs[i, c]
                g = 0.0
                for j in range(d):
                    g += w[c, j] * xa[i, j]
                g = yi * g - 1.0
                a = alpha[i, c]
                if a <= 0.0:
                    pg = min(g, 0.0)
                elif a >= C:
                    pg = max(g, 0.0)
                else:
                    pg = g
                pg_max = max(pg_max, pg)
                pg_min = min(pg_min, pg)
                if pg != 0.0 and qdiag[i] > 0.0:
                    new_a = min(max(a - g / qdiag[i], 0.0), C)
                    step = (new_a - a) * yi
                    for j in range(d):
                        w[c, j] += step * xa[i, j]
                    alpha[i, c] = new_a
            epochs[c] = ep + 1
            if pg_max - pg_min < tol:
                break
    return w, alpha, epochs


class LinearSVM:
    """One-vs-rest linear SVM with hinge loss and L2 penalty.

    Each binary problem minimizes ``0.5 ||w||^2 + C sum_i max(0, 1 - y_i (w.x_i + b))``
    with the bias handled as an extra constant feature (so it is penalized
    too). Solved in the dual by coordinate descent over samples in a seeded
    random order per epoch.
    """

    def __init__(self, C: float = 1.0, tol: float = 1e-5, max_epochs: int = 50000, seed: int = 0):
        self.C = C
        self.tol = tol
        self.max_epochs = max_epochs
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        n = X.shape[0]
        xa = np.ascontiguousarray(np.hstack([X, np.ones((n, 1))]))
        if self.classes_.size == 1:
            signs = np.ones((n, 1))
        else:
            signs = np.where(y[:, None] == self.classes_[None, :], 1.0, -1.0)
        w, alpha, epochs = _dual_cd(xa, np.ascontiguousarray(signs), float(self.C), float(self.tol),
                                    int(self.max_epochs), int(self.seed))
        self.dual_coef_ = alpha
        self.n_epochs_ = epochs
        self.converged_ = bool(np.all(epochs < self.max_epochs))
        self.coef_ = w[:, :-1]
        self.intercept_ = w[:, -1]
        return self

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef_.T + self.intercept_

    def predict(self, X) -> np.ndarray:
        if self.classes_.size == 1:
            return np.full(np.shape(X)[0], self.classes_[0])
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def primal_objective(self, X, y) -> np.ndarray:
        """Per-class value of the penalized hinge objective."""
        signs = np.where(np.asarray(y)[:, None] == self.classes_[None, :], 1.0, -1.0)
        margins = signs * self.decision_function(X)
        reg = 0.5 * (np.sum(self.coef_**2, axis=1) + self.intercept_**2)
        return reg + self.C * np.maximum(0.0, 1.0 - margins).sum(axis=0)


def scene_vectors(fit, recall_xs, table: SceneTable, zscore: bool = True):
    """Per subject: scene ids and the (n_scenes_i, k) projected scene means."""
    out = []
    for i, (x, ids) in enumerate(zip(recall_xs, table.scene_ids)):
        x = zscore_rows(x) if zscore else np.asarray(x, dtype=np.float64)
        scenes = np.unique(ids[ids >= 0])
        means = np.stack([x[:, ids == s].mean(axis=1) for s in scenes], axis=1)
        out.append((scenes, project(fit, means, i).T))
    return out


def scene_classification(vectors, c: float = 1.0) -> EvalResult:
    """Leave-one-subject-out scene classification.

    ``vectors`` is a list of ``(scene_ids, features)`` pairs, one per subject.
    Scenes seen by fewer than two subjects are dropped.
    """
    present: dict[int, int] = {}
    for ids, _ in vectors:
        for s in np.unique(ids):
            present[int(s)] = present.get(int(s), 0) + 1
    usable = np.array(sorted(s for s, n in present.items() if n >= 2), dtype=np.int64)
    dropped = sorted(s for s, n in present.items() if n < 2)
    if dropped:
        logger.warning("excluding %d scene(s) present for fewer than 2 subjects: %s", len(dropped), dropped)
    if usable.size == 0:
        raise ProtocolError("no scene is present for at least two subjects")
    keep = [(ids[np.isin(ids, usable)], feats[np.isin(ids, usable)]) for ids, feats in vectors]

    correct = trials = 0
    for i, (test_ids, test_x) in enumerate(keep):
        if test_ids.size == 0:
            continue
        train_ids = np.concatenate([ids for j, (ids, _) in enumerate(keep) if j != i])
        train_x = np.vstack([f for j, (_, f) in enumerate(keep) if j != i])
        mu = train_x.mean(axis=0)
        sd = train_x.std(axis=0)
        sd[sd == 0] = 1.0
        clf = LinearSVM(C=c).fit((train_x - mu) / sd, train_ids)
        pred = clf.predict((test_x - mu) / sd)
        correct += int(np.sum(pred == test_ids))
        trials += test_ids.size
    return EvalResult(correct, trials, 1.0 / usable.size, meta={"excluded_scenes": dropped})


def scene_recall_match(fit, recall_xs, table: SceneTable, spec: EvalSpec = EvalSpec("scene-recall")) -> EvalResult:
    """Score a fit trained on movie data against labeled recall data."""
    return scene_classification(scene_vectors(fit, recall_xs, table, spec.zscore), spec.svm_c)


def whole_volume_accuracy(dataset, model_id: str, spec: EvalSpec = EvalSpec(), k: int = 100,
                          k1: int = 500, k2: int = 100, seed: int = 0, recall=None,
                          max_iter: int = 100, tol: float = 1e-6) -> EvalResult:
    """Single fit over every in-mask voxel (the non-searchlight baseline).

    ``k``, and ``k1``/``k2`` for SR-GICA, are capped to what the data allows.
    """
    model_id = normalize_model_id(model_id)
    xs = dataset.subjects
    v = dataset.n_voxels
    t_fit = dataset.n_trs if spec.protocol == "scene-recall" else len(split_halves(dataset.n_trs)[1])

    def fitter(train_xs, fold):
        kk = min(k, t_fit - 1, v if model_id in ("SRM", "SR-ICA") else len(train_xs) * v)
        cfg = FitConfig(k=kk, max_iter=max_iter, tol=tol, seed=seed + fold)
        if model_id == "SR-GICA":
            kk1 = min(k1, v, t_fit)
            return fit_model(model_id, train_xs, FitConfig(k=min(k2, kk), max_iter=max_iter, tol=tol,
                                                           seed=seed + fold), k1=kk1)
        return fit_model(model_id, train_xs, cfg)

    if spec.protocol == "time-segment":
        return evaluate_time_segment(xs, fitter, spec)
    if recall is None:
        raise ProtocolError("scene-recall evaluation needs a recall dataset")
    fit = fitter(prepare_blocks(xs, spec.zscore), 0)
    return scene_recall_match(fit, recall.subjects, SceneTable.from_dataset(recall), spec)


REPORT_COLUMNS = ("protocol", "model", "k", "accuracy", "chance", "n_trials", "seed")


def write_report(rows, path) -> None:
    """CSV evaluation report, one row per (protocol, model, k) result."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("accuracy", "chance"):
                if isinstance(out.get(key), float) and math.isfinite(out[key]):
                    out[key] = f"{out[key]:.6g}"
            writer.writerow(out)
