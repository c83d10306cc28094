"""Searchlight sweep: fit and score a model at every center, keep the best k.

Every (center, k, fold) fit draws its random state from
``SeedSequence([seed, center_id, k, fold])`` and BLAS is pinned to a single
thread while a center is processed, so maps are bit-identical for any
number of workers.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .errors import FormatError, ProtocolError, RankError
from .evaluation import (
    EvalResult,
    EvalSpec,
    SceneTable,
    prepare_blocks,
    scene_classification,
    scene_vectors,
    segment_match_counts,
    split_halves,
)
from .models import FitConfig, fit_model, max_feasible_k, normalize_model_id, project
from .volume import SearchlightIndex, SubjectDataset, unflatten

logger = logging.getLogger(__name__)

DEFAULT_K_GRID = (10, 25, 50, 75, 100, 125)

FLAG_NOT_CONVERGED = 0x01
FLAG_K_SKIPPED = 0x02
FLAG_ABSENT = 0x80


@dataclass(frozen=True)
class SweepConfig:
    model: str = "SRM"
    k_grid: tuple = DEFAULT_K_GRID
    eval: EvalSpec = EvalSpec()
    seed: int = 0
    n_jobs: int = 1
    max_iter: int = 100
    tol: float = 1e-6
    contrast: str = "logcosh"
    k1: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "model", normalize_model_id(self.model))
        grid = tuple(int(k) for k in self.k_grid)
        if not grid or min(grid) < 1:
            raise ValueError("k_grid must be a non-empty list of positive ints")
        object.__setattr__(self, "k_grid", grid)


def derive_seed(seed: int, center_id: int, k: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, center_id, k, fold]).generate_state(1)[0])


@dataclass
class ResultMaps:
    """Per-center sweep results.

    ``accuracy`` is NaN and ``best_k`` 0 where a center is absent.
    ``acc_by_k``, ``n_iter_by_k`` and ``converged_by_k`` keep per-k
    diagnostics (NaN / 0 / False for skipped k).
    """

    dims: tuple
    centers: np.ndarray
    accuracy: np.ndarray
    best_k: np.ndarray
    flags: np.ndarray
    k_grid: tuple = ()
    acc_by_k: np.ndarray | None = None
    n_iter_by_k: np.ndarray | None = None
    converged_by_k: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.accuracy)

    def _volume(self, values, fill, dtype):
        vol = np.full(self.dims, fill, dtype=dtype)
        d = self.defined
        vol[tuple(self.centers[d].T)] = values[d]
        return vol

    def accuracy_volume(self) -> np.ndarray:
        return self._volume(self.accuracy, np.nan, np.float64)

    def k_volume(self) -> np.ndarray:
        return self._volume(self.best_k, 0, np.int64)

    def equals(self, other: "ResultMaps") -> bool:
        """Bit-level equality of the maps and diagnostics."""
        same = (
            tuple(self.dims) == tuple(other.dims)
            and np.array_equal(self.centers, other.centers)
            and self.accuracy.tobytes() == other.accuracy.tobytes()
            and np.array_equal(self.best_k, other.best_k)
            and np.array_equal(self.flags, other.flags)
        )
        if same and self.acc_by_k is not None and other.acc_by_k is not None:
            same = self.acc_by_k.tobytes() == other.acc_by_k.tobytes()
        return same


@dataclass
class _CenterOutcome:
    acc: np.ndarray
    n_iter: np.ndarray
    converged: np.ndarray
    correct: np.ndarray
    trials: np.ndarray


def _fit_cfg(cfg: SweepConfig, k: int, seed: int) -> FitConfig:
    return FitConfig(k=k, max_iter=cfg.max_iter, tol=cfg.tol, seed=seed, contrast=cfg.contrast)


def fit_center(cfg: SweepConfig, train_xs, k: int, center_id: int, fold: int):
    """Fit ``cfg.model`` at one center and fold with the derived seed."""
    fcfg = _fit_cfg(cfg, k, derive_seed(cfg.seed, center_id, k, fold))
    if cfg.model == "SR-GICA":
        v, t = train_xs[0].shape
        k1 = min(v, t) if cfg.k1 is None else min(cfg.k1, v, t)
        return fit_model("SR-GICA", train_xs, fcfg, k1=k1)
    return fit_model(cfg.model, train_xs, fcfg)


def _folds(xs, cfg: SweepConfig):
    """Prepared (train, test) per fold for the time-segment protocol."""
    t = xs[0].shape[1]
    halves = split_halves(t)
    if len(halves[1]) < cfg.eval.segment_len:
        raise ProtocolError(
            f"test half of {len(halves[1])} TRs is shorter than segment_len={cfg.eval.segment_len}"
        )
    out = []
    for train, test in (halves, halves[::-1]):
        out.append((
            prepare_blocks([x[:, train] for x in xs], cfg.eval.zscore),
            prepare_blocks([x[:, test] for x in xs], cfg.eval.zscore),
        ))
    return out


def evaluate_center(xs, cfg: SweepConfig, center_id: int, recall_xs=None, table=None) -> _CenterOutcome:
    """Score every k of ``cfg.k_grid`` at one center."""
    n_k = len(cfg.k_grid)
    acc = np.full(n_k, np.nan)
    n_iter = np.zeros(n_k, dtype=np.int64)
    conv = np.zeros(n_k, dtype=bool)
    correct = np.zeros(n_k, dtype=np.int64)
    trials = np.zeros(n_k, dtype=np.int64)
    m, v, t = len(xs), xs[0].shape[0], xs[0].shape[1]

    if cfg.eval.protocol == "time-segment":
        folds = _folds(xs, cfg)
        t_train = min(len(h) for h in split_halves(t))
    else:
        movie = prepare_blocks(xs, cfg.eval.zscore)
        t_train = t
    limit = max_feasible_k(cfg.model, m, v, t_train)

    for j, k in enumerate(cfg.k_grid):
        if k > limit:
            continue
        try:
            if cfg.eval.protocol == "time-segment":
                res = EvalResult(0, 0, 0.0)
                iters, ok = 0, True
                for fold, (train_xs, test_xs) in enumerate(folds):
                    fit = fit_center(cfg, train_xs, k, center_id, fold)
                    responses = [project(fit, x, i) for i, x in enumerate(test_xs)]
                    c, n = segment_match_counts(responses, cfg.eval.segment_len)
                    res = res + EvalResult(c, n, 0.0)
                    iters += fit.n_iter
                    ok &= fit.converged
            else:
                fit = fit_center(cfg, movie, k, center_id, 0)
                res = scene_classification(scene_vectors(fit, recall_xs, table, cfg.eval.zscore), cfg.eval.svm_c)
                iters, ok = fit.n_iter, fit.converged
        except RankError as exc:
            logger.debug("center %d: k=%d skipped (%s)", center_id, k, exc)
            continue
        acc[j] = res.accuracy
        correct[j], trials[j] = res.correct, res.trials
        n_iter[j], conv[j] = iters, ok
    return _CenterOutcome(acc, n_iter, conv, correct, trials)


def _run_chunk(data, recall_data, neighborhoods, center_ids, cfg, table):
    out = []
    with threadpool_limits(limits=1):
        for rows, cid in zip(neighborhoods, center_ids):
            xs = [x[rows] for x in data]
            recall_xs = None if recall_data is None else [x[rows] for x in recall_data]
            out.append(evaluate_center(xs, cfg, int(cid), recall_xs, table))
    return out


def _chunks(n: int, n_jobs: int):
    if n == 0:
        return []
    n_chunks = min(n, max(1, n_jobs) * 4)
    return [c for c in np.array_split(np.arange(n), n_chunks) if c.size]


def sweep(dataset: SubjectDataset, index: SearchlightIndex, cfg: SweepConfig,
          recall: SubjectDataset | None = None) -> ResultMaps:
    """Run the model/protocol pair at every searchlight center.

    For the time-segment protocol each k is scored on both half-splits and
    the folds are pooled by trial count; the best k is the one with highest
    accuracy (smallest k on ties). The scene-recall protocol trains on the
    whole of ``dataset`` and tests on the labeled ``recall`` dataset.
    """
    if tuple(index.dims) != dataset.grid.dims:
        raise ProtocolError("searchlight index and dataset use different grids")
    table = None
    recall_data = None
    if cfg.eval.protocol == "scene-recall":
        if recall is None:
            raise ProtocolError("scene-recall sweep needs a recall dataset")
        if not recall.grid.same_as(dataset.grid):
            raise ProtocolError("recall dataset uses a different grid")
        table = SceneTable.from_dataset(recall)
        recall_data = recall.data

    chunks = _chunks(len(index), cfg.n_jobs)
    jobs = (
        delayed(_run_chunk)(dataset.data, recall_data, index.neighborhoods[c], c, cfg, table)
        for c in chunks
    )
    if cfg.n_jobs == 1:
        parts = [job[0](*job[1], **job[2]) for job in jobs]
    else:
        parts = Parallel(n_jobs=cfg.n_jobs, backend="loky")(jobs)
    outcomes = [o for part in parts for o in part]
    return _assemble(index, cfg, outcomes)


def _assemble(index: SearchlightIndex, cfg: SweepConfig, outcomes) -> ResultMaps:
    n = len(index)
    n_k = len(cfg.k_grid)
    acc_by_k = np.full((n, n_k), np.nan)
    n_iter = np.zeros((n, n_k), dtype=np.int64)
    conv = np.zeros((n, n_k), dtype=bool)
    for i, o in enumerate(outcomes):
        acc_by_k[i], n_iter[i], conv[i] = o.acc, o.n_iter, o.converged
    accuracy = np.full(n, np.nan)
    best_k = np.zeros(n, dtype=np.int64)
    flags = np.zeros(n, dtype=np.uint8)
    k_arr = np.asarray(cfg.k_grid)
    for i in range(n):
        row = acc_by_k[i]
        ok = ~np.isnan(row)
        if not ok.any():
            flags[i] = FLAG_ABSENT | FLAG_K_SKIPPED
            continue
        best = np.max(row[ok])
        j = np.flatnonzero(ok & (row == best))
        j = j[np.argmin(k_arr[j])]
        accuracy[i], best_k[i] = row[j], k_arr[j]
        if not ok.all():
            flags[i] |= FLAG_K_SKIPPED
        if not conv[i, ok].all():
            flags[i] |= FLAG_NOT_CONVERGED
    return ResultMaps(tuple(index.dims), index.centers.copy(), accuracy, best_k, flags,
                      cfg.k_grid, acc_by_k, n_iter, conv)


def threshold_map(maps: ResultMaps, floor: float) -> ResultMaps:
    """Mark centers with accuracy below ``floor`` absent."""
    if not 0.0 <= floor <= 1.0:
        raise ValueError(f"floor must lie in [0, 1], got {floor}")
    drop = maps.defined & (maps.accuracy < floor)
    accuracy = maps.accuracy.copy()
    best_k = maps.best_k.copy()
    flags = maps.flags.copy()
    accuracy[drop] = np.nan
    best_k[drop] = 0
    flags[drop] |= FLAG_ABSENT
    return ResultMaps(maps.dims, maps.centers, accuracy, best_k, flags, maps.k_grid,
                      maps.acc_by_k, maps.n_iter_by_k, maps.converged_by_k, dict(maps.meta))


# ------------------------------------------------------------ aggregation


def aggregate_accuracy(dataset: SubjectDataset, index: SearchlightIndex, cfg: SweepConfig,
                       best_k=None, recall: SubjectDataset | None = None) -> EvalResult:
    """One accuracy from the concatenated shared responses of all centers.

    Each center is refit at its own best k (``best_k``: per-center array or a
    ResultMaps; swept when omitted) with the same derived seeds as the sweep.
    The per-center test responses are stacked along the feature axis and the
    protocol runs once on the composite response.
    """
    if best_k is None:
        best_k = sweep(dataset, index, cfg, recall).best_k
    elif isinstance(best_k, ResultMaps):
        best_k = best_k.best_k
    best_k = np.asarray(best_k, dtype=np.int64)
    use = np.flatnonzero(best_k > 0)
    if use.size == 0:
        raise ProtocolError("no center has a defined best k")

    with threadpool_limits(limits=1):
        if cfg.eval.protocol == "time-segment":
            result = None
            composite = {0: [], 1: []}
            for cid in use:
                xs = [x[index.neighborhoods[cid]] for x in dataset.data]
                for fold, (train_xs, test_xs) in enumerate(_folds(xs, cfg)):
                    fit = fit_center(cfg, train_xs, int(best_k[cid]), int(cid), fold)
                    composite[fold].append([project(fit, x, i) for i, x in enumerate(test_xs)])
            for fold in (0, 1):
                responses = [np.vstack(parts) for parts in zip(*composite[fold])]
                c, n = segment_match_counts(responses, cfg.eval.segment_len)
                res = EvalResult(c, n, 1.0 / (responses[0].shape[1] - cfg.eval.segment_len + 1))
                result = res if result is None else result + res
            return result

        if recall is None:
            raise ProtocolError("scene-recall aggregation needs a recall dataset")
        table = SceneTable.from_dataset(recall)
        per_center = []
        for cid in use:
            rows = index.neighborhoods[cid]
            movie = prepare_blocks([x[rows] for x in dataset.data], cfg.eval.zscore)
            fit = fit_center(cfg, movie, int(best_k[cid]), int(cid), 0)
            per_center.append(scene_vectors(fit, [x[rows] for x in recall.data], table, cfg.eval.zscore))
        vectors = [(parts[0][0], np.hstack([feats for _, feats in parts])) for parts in zip(*per_center)]
        return scene_classification(vectors, cfg.eval.svm_c)


# ------------------------------------------------------------ file formats

MAPS_MAGIC = b"MSRM1"
_VOXEL_DTYPE = np.dtype([("accuracy", "<f8"), ("k", "<u2"), ("flags", "u1")])


def save_result_maps(maps: ResultMaps, path) -> None:
    """MSRM1: magic, grid dims, then one packed record per voxel (x-fastest).

    Voxels that are not defined carry accuracy NaN, k 0 and the 0x80 flag.
    """
    dims = tuple(maps.dims)
    rec = np.zeros(int(np.prod(dims)), dtype=_VOXEL_DTYPE)
    rec["accuracy"] = np.nan
    rec["flags"] = FLAG_ABSENT
    flat = maps.centers[:, 0] + dims[0] * (maps.centers[:, 1] + dims[1] * maps.centers[:, 2])
    rec["accuracy"][flat] = maps.accuracy
    rec["k"][flat] = maps.best_k
    rec["flags"][flat] = maps.flags
    with open(path, "wb") as f:
        f.write(struct.pack("<5s3I", MAPS_MAGIC, *dims))
        f.write(rec.tobytes())


def load_result_maps(path) -> ResultMaps:
    buf = Path(path).read_bytes()
    head = struct.calcsize("<5s3I")
    if len(buf) < head or buf[:5] != MAPS_MAGIC:
        raise FormatError(f"{path}: not an MSRM1 result-map file")
    dims = struct.unpack_from("<3I", buf, 5)
    n = int(np.prod(dims))
    if len(buf) != head + n * _VOXEL_DTYPE.itemsize:
        raise FormatError(f"{path}: expected {n} voxel records")
    rec = np.frombuffer(buf, dtype=_VOXEL_DTYPE, count=n, offset=head)
    keep = np.flatnonzero(~np.isnan(rec["accuracy"]) | ((rec["flags"] & FLAG_ABSENT) == 0))
    centers = unflatten(keep, dims)
    return ResultMaps(tuple(dims), centers, rec["accuracy"][keep].copy(),
                      rec["k"][keep].astype(np.int64), rec["flags"][keep].copy())


def export_csv(maps: ResultMaps, path) -> int:
    """Write ``x,y,z,accuracy,k`` for every defined center; returns row count."""
    d = np.flatnonzero(maps.defined)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "z", "accuracy", "k"])
        for i in d:
            x, y, z = maps.centers[i]
            writer.writerow([int(x), int(y), int(z), repr(float(maps.accuracy[i])), int(maps.best_k[i])])
    return d.size
