"""Shared-response factor models ``X_i ~ W_i S``.

Five models share one interface: ``fit_*(xs, cfg) -> FactorFit`` where
``xs`` is a list of m subject matrices of shape (v, t). ``project`` maps
held-out data of one subject into the shared space.

=========  ==========================================  ================
model      fitting                                     W_i columns
=========  ==========================================  ================
PCA        truncated SVD of the stacked data           general
SRM        alternating S-step / Procrustes W-step      orthonormal
ICA        PCA whitening + symmetric FastICA, stacked  general
SR-ICA     per-subject FastICA coupled through S       orthonormal
SR-GICA    two-stage PCA then FastICA                  general
=========  ==========================================  ================
"""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from .errors import FormatError, InvalidInput, RankError
from .linalg import compact_svd, pseudo_inverse, sym_inv_sqrt

MODEL_IDS = ("PCA", "SRM", "ICA", "SR-ICA", "SR-GICA")
ORTHONORMAL_MODELS = frozenset({"SRM", "SR-ICA"})
CONTRASTS = ("logcosh", "cube")

# relative cutoff below which a whitening direction counts as absent
_WHITEN_RTOL = 1e-10


@dataclass
class FitConfig:
    """Settings shared by all models.

    ``tol`` is the convergence threshold: relative objective decrease for
    SRM, the unmixing-change criterion for the FastICA family.
    """

    k: int
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0
    contrast: str = "logcosh"

    def __post_init__(self):
        if self.k < 1:
            raise RankError(f"factor count must be >= 1, got {self.k}")
        if not self.tol > 0:
            raise InvalidInput(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise InvalidInput(f"max_iter must be >= 1, got {self.max_iter}")
        if self.contrast not in CONTRASTS:
            raise InvalidInput(f"unknown contrast {self.contrast!r}; choose from {CONTRASTS}")


@dataclass
class FactorFit:
    w: list
    s: np.ndarray
    model_id: str
    objective_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_iter: int = 0
    converged: bool = True
    meta: dict = field(default_factory=dict)
    _unmixing: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_subjects(self) -> int:
        return len(self.w)

    @property
    def k(self) -> int:
        return self.s.shape[0]

    @property
    def objective(self) -> float:
        if self.objective_trace.size:
            return float(self.objective_trace[-1])
        return float(self.meta.get("objective", np.nan))

    def unmixing(self, subject: int) -> np.ndarray:
        """k x v matrix taking subject data into the shared space."""
        if not 0 <= subject < self.n_subjects:
            raise IndexError(f"subject {subject} out of range for {self.n_subjects} subjects")
        if subject not in self._unmixing:
            w = self.w[subject]
            self._unmixing[subject] = w.T if self.model_id in ORTHONORMAL_MODELS else pseudo_inverse(w)
        return self._unmixing[subject]


def project(fit: FactorFit, x_new, subject: int) -> np.ndarray:
    """Shared-space response of held-out data ``x_new`` (v x t') of one subject."""
    x_new = np.asarray(x_new, dtype=np.float64)
    u = fit.unmixing(subject)
    if x_new.ndim != 2 or x_new.shape[0] != u.shape[1]:
        raise InvalidInput(f"expected {u.shape[1]} rows, got shape {x_new.shape}")
    return u @ x_new


def objective(xs, ws, s) -> float:
    """SRM cost (1/m) sum_i ||X_i - W_i S||_F^2."""
    return float(np.mean([np.sum((x - w @ s) ** 2) for x, w in zip(xs, ws)]))


def _stack_inputs(xs) -> np.ndarray:
    if isinstance(xs, np.ndarray) and xs.ndim == 2:
        xs = [xs]
    shapes = {np.shape(x) for x in xs}
    if len(shapes) != 1:
        raise InvalidInput(f"subjects must share one (v, t) shape, got {sorted(shapes)}")
    arr = np.asarray(xs, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise InvalidInput(f"expected a list of 2-D matrices, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InvalidInput("data contains NaN or infinite entries")
    return arr


def _check_k(k: int, limit: int, what: str) -> None:
    if not 1 <= k <= limit:
        raise RankError(f"k={k} is infeasible; {what} allows 1 <= k <= {limit}")


def random_orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Haar-distributed matrix with orthonormal columns (QR of a Gaussian)."""
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


# ---------------------------------------------------------------- PCA / SRM


def fit_pca(xs, cfg: FitConfig) -> FactorFit:
    """PCA on the spatially stacked data; W is partitioned into blocks."""
    xs = _stack_inputs(xs)
    m, v, t = xs.shape
    _check_k(cfg.k, min(m * v, t), "the stacked matrix")
    stacked = xs.reshape(m * v, t)
    u, s, _ = compact_svd(stacked)
    w = u[:, : cfg.k]
    shared = w.T @ stacked
    residual = float(np.sum(s[cfg.k :] ** 2))
    return FactorFit(
        w=list(w.reshape(m, v, cfg.k)),
        s=shared,
        model_id="PCA",
        meta={"objective": residual, "singular_values": s},
    )


def _procrustes(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    u, _, vt = compact_svd(x @ s.T)
    return u @ vt


def fit_srm(xs, cfg: FitConfig, init=None) -> FactorFit:
    """Deterministic SRM by block-coordinate descent.

    Each iteration solves the orthogonal Procrustes problem for every W_i
    given S, then sets S to the mean of ``W_i.T @ X_i``. Both steps are
    exact minimizers, so ``objective_trace`` never increases. Iteration stops
    once the decrease falls below ``tol`` times the current objective.

    Parameters
    ----------
    init : list of ndarray, optional
        Starting W_i (v x k, orthonormal columns). Drawn from ``cfg.seed``
        when omitted.

    Notes
    -----
    With k = v each W_i is square orthogonal and the fit is
    hyperalignment.
    """
    xs = _stack_inputs(xs)
    m, v, t = xs.shape
    _check_k(cfg.k, min(v, t), "orthonormal subject maps")
    if init is None:
        rng = np.random.default_rng(cfg.seed)
        ws = [random_orthonormal(rng, v, cfg.k) for _ in range(m)]
    else:
        ws = [np.asarray(w, dtype=np.float64).copy() for w in init]
        if len(ws) != m or any(w.shape != (v, cfg.k) for w in ws):
            raise InvalidInput(f"init must hold {m} matrices of shape {(v, cfg.k)}")

    shared = np.mean([w.T @ x for w, x in zip(ws, xs)], axis=0)
    trace = [objective(xs, ws, shared)]
    converged = False
    n_iter = 0
    for n_iter in range(1, cfg.max_iter + 1):
        ws = [_procrustes(x, shared) for x in xs]
        shared = np.mean([w.T @ x for w, x in zip(ws, xs)], axis=0)
        trace.append(objective(xs, ws, shared))
        if trace[-2] - trace[-1] <= cfg.tol * trace[-1]:
            converged = True
            break
    return FactorFit(ws, shared, "SRM", np.asarray(trace), n_iter, converged)


# ------------------------------------------------------------ FastICA family


def _logcosh(y):
    g = np.tanh(y)
    return g, 1.0 - g**2


def _cube(y):
    return y**3, 3.0 * y**2


_CONTRAST_FNS = {"logcosh": _logcosh, "cube": _cube}
_CONTRAST_G = {
    "logcosh": lambda y: np.logaddexp(y, -y) - np.log(2.0),
    "cube": lambda y: y**4 / 4.0,
}


@functools.cache
def _gaussian_reference(contrast: str) -> float:
    """E{G(nu)} for a standard normal nu."""
    big_g = _CONTRAST_G[contrast]
    val, _ = integrate.quad(
        lambda x: float(big_g(np.array(x))) * np.exp(-x * x / 2) / np.sqrt(2 * np.pi),
        -np.inf,
        np.inf,
    )
    return val


def negentropy_surrogate(s: np.ndarray, contrast: str = "logcosh") -> float:
    """Sum over rows of (E{G(s_j)} - E{G(nu)})**2."""
    ref = _gaussian_reference(contrast)
    return float(np.sum((_CONTRAST_G[contrast](s).mean(axis=1) - ref) ** 2))


def whiten(x: np.ndarray, k: int):
    """Center rows and project onto the top-k principal directions.

    Returns ``(z, basis, dewhiten)`` with ``z`` (k x t) having identity
    sample covariance, ``basis`` the orthonormal left singular vectors and
    ``dewhiten`` such that ``x - mean ~ dewhiten @ z``.
    """
    t = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    u, s, vt = compact_svd(xc)
    if k > s.size or s[k - 1] <= _WHITEN_RTOL * s[0]:
        raise RankError(f"cannot whiten to k={k}: data rank is lower")
    z = np.sqrt(t) * vt[:k]
    return z, u[:, :k], u[:, :k] * (s[:k] / np.sqrt(t))


def decorrelate(b: np.ndarray) -> np.ndarray:
    """Symmetric decorrelation ``(B B^T)^{-1/2} B`` of unmixing rows."""
    return sym_inv_sqrt(b @ b.T) @ b


def fastica_symmetric(z, contrast="logcosh", max_iter=100, tol=1e-6, rng=None, init=None):
    """Symmetric fixed-point FastICA on whitened data ``z`` (k x t).

    Returns ``(b, trace, n_iter, converged)`` where ``b`` is the orthogonal
    k x k unmixing matrix.
    """
    k, t = z.shape
    g_fn = _CONTRAST_FNS[contrast]
    if init is None:
        rng = np.random.default_rng(rng)
        b = random_orthonormal(rng, k, k)
    else:
        b = decorrelate(np.asarray(init, dtype=np.float64))
    trace = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        g, gp = g_fn(b @ z)
        b_new = decorrelate(g @ z.T / t - gp.mean(axis=1)[:, None] * b)
        delta = np.max(np.abs(np.abs(np.einsum("ij,ij->i", b_new, b)) - 1.0))
        b = b_new
        trace.append(negentropy_surrogate(b @ z, contrast))
        if delta < tol:
            converged = True
            break
    return b, np.asarray(trace), n_iter, converged


def _skewness(s: np.ndarray) -> np.ndarray:
    c = s - s.mean(axis=1, keepdims=True)
    return (c**3).mean(axis=1)


def canonicalize(ws, s, energy):
    """Flip rows of ``s`` to non-negative skew and sort by descending energy.

    Columns of every W_i receive the same flips and permutation.
    """
    signs = np.where(_skewness(s) < 0, -1.0, 1.0)
    order = np.argsort(-np.asarray(energy), kind="stable")
    ws = [(w * signs)[:, order] for w in ws]
    s = (s * signs[:, None])[order]
    return ws, s


def fit_ica(xs, cfg: FitConfig, init=None) -> FactorFit:
    """FastICA on the stacked data; the mixing matrix is split per subject.

    The stacked matrix is whitened to k dimensions so every row of S has
    unit variance. ``init`` is an optional k x k starting unmixing matrix.
    """
    xs = _stack_inputs(xs)
    m, v, t = xs.shape
    _check_k(cfg.k, min(m * v, t), "the stacked matrix")
    z, _, dewhiten = whiten(xs.reshape(m * v, t), cfg.k)
    b, trace, n_iter, converged = fastica_symmetric(
        z, cfg.contrast, cfg.max_iter, cfg.tol, rng=cfg.seed, init=init
    )
    shared = b @ z
    w = dewhiten @ b.T
    ws = list(w.reshape(m, v, cfg.k))
    ws, shared = canonicalize(ws, shared, np.sum(w**2, axis=0))
    return FactorFit(ws, shared, "ICA", trace, n_iter, converged)


def fit_srica(xs, cfg: FitConfig) -> FactorFit:
    """Shared-response ICA with orthonormal subject maps.

    Every subject is whitened separately to k dimensions; ``A_i`` is the
    orthonormal basis of that subspace and ``Z_i`` the whitened
    coordinates. W_i is kept inside the subspace as ``A_i R_i^T`` with
    ``R_i`` orthogonal, so ``W_i^T`` applied to the whitened voxel data
    gives ``R_i Z_i``. One iteration:

    1. ``S = mean_i R_i Z_i``
    2. shared fixed-point target ``T = g(S) - diag(E{g'(S)}) S``
    3. ``R_i <- E{T Z_i^T}`` for each subject
    4. ``R_i <- (R_i R_i^T)^{-1/2} R_i``

    For one subject steps 2-4 are exactly symmetric FastICA. With several
    subjects every R_i is pulled towards the same target, which keeps the
    subjects aligned; a per-subject ``- diag(E{g'}) R_i`` term instead
    amplifies disagreement between subjects and does not converge.

    The run converges once ``max | |W_i^n^T W_i^{n-1}| - I | < tol`` for all
    subjects (absolute values, since ICA components may flip sign between
    iterations).
    """
    xs = _stack_inputs(xs)
    m, v, t = xs.shape
    _check_k(cfg.k, min(v, t), "orthonormal subject maps")
    g_fn = _CONTRAST_FNS[cfg.contrast]
    bases, zs = [], []
    for x in xs:
        z, basis, _ = whiten(x, cfg.k)
        zs.append(z)
        bases.append(basis)
    rng = np.random.default_rng(cfg.seed)
    rs = [random_orthonormal(rng, cfg.k, cfg.k) for _ in range(m)]
    eye = np.eye(cfg.k)

    trace, deltas = [], []
    converged = False
    n_iter = 0
    for n_iter in range(1, cfg.max_iter + 1):
        shared = np.mean([r @ z for r, z in zip(rs, zs)], axis=0)
        g, gp = g_fn(shared)
        target = g - gp.mean(axis=1)[:, None] * shared
        new_rs = [decorrelate(target @ z.T / t) for z in zs]
        delta = max(np.abs(np.abs(rn @ r.T) - eye).max() for rn, r in zip(new_rs, rs))
        rs = new_rs
        deltas.append(delta)
        trace.append(negentropy_surrogate(np.mean([r @ z for r, z in zip(rs, zs)], axis=0), cfg.contrast))
        if delta < cfg.tol:
            converged = True
            break

    shared = np.mean([r @ z for r, z in zip(rs, zs)], axis=0)
    ws = [basis @ r.T for basis, r in zip(bases, rs)]
    energy = np.sum([np.sum((w.T @ x) ** 2, axis=1) for w, x in zip(ws, xs)], axis=0)
    ws, shared = canonicalize(ws, shared, energy)
    return FactorFit(ws, shared, "SR-ICA", np.asarray(trace), n_iter, converged,
                     meta={"deltas": np.asarray(deltas)})


def fit_srgica(xs, cfg: FitConfig, k1: int | None = None, k2: int | None = None) -> FactorFit:
    """Shared-response group ICA.

    Per-subject PCA ``X_i = F_i P_i`` (k1 components), PCA of the stacked
    ``P = G Y`` (k2 components), FastICA ``Y = A S``; then
    ``W_i = F_i G_i A``. ``k1`` defaults to min(v, t) and ``k2`` to ``cfg.k``.
    """
    xs = _stack_inputs(xs)
    m, v, t = xs.shape
    k1 = min(v, t) if k1 is None else k1
    k2 = cfg.k if k2 is None else k2
    _check_k(k1, min(v, t), "the first (per-subject) PCA")
    _check_k(k2, min(m * k1, t), "the second (group) PCA")

    fs, ps = [], []
    for x in xs:
        f = compact_svd(x).u[:, :k1]
        fs.append(f)
        ps.append(f.T @ x)
    p = np.vstack(ps)
    g = compact_svd(p).u[:, :k2]
    y = g.T @ p
    z, _, dewhiten = whiten(y, k2)
    b, trace, n_iter, converged = fastica_symmetric(
        z, cfg.contrast, cfg.max_iter, cfg.tol, rng=cfg.seed
    )
    shared = b @ z
    mixing = dewhiten @ b.T
    ws = [f @ gi @ mixing for f, gi in zip(fs, g.reshape(m, k1, k2))]
    energy = np.sum([np.sum(w**2, axis=0) for w in ws], axis=0)
    ws, shared = canonicalize(ws, shared, energy)
    return FactorFit(ws, shared, "SR-GICA", trace, n_iter, converged, meta={"k1": k1, "k2": k2})


FITTERS = {
    "PCA": fit_pca,
    "SRM": fit_srm,
    "ICA": fit_ica,
    "SR-ICA": fit_srica,
    "SR-GICA": fit_srgica,
}


def normalize_model_id(name: str) -> str:
    key = name.strip().upper().replace("_", "-")
    aliases = {"SRICA": "SR-ICA", "SRGICA": "SR-GICA", "GICA": "SR-GICA"}
    key = aliases.get(key, key)
    if key not in MODEL_IDS:
        raise InvalidInput(f"unknown model {name!r}; choose from {', '.join(MODEL_IDS)}")
    return key


def max_feasible_k(model_id: str, m: int, v: int, t: int) -> int:
    """Largest k the model accepts for m subjects of v x t data."""
    if model_id in ("PCA", "ICA"):
        return min(m * v, t)
    if model_id == "SR-GICA":
        return min(m * min(v, t), t)
    return min(v, t)


def fit_model(model_id: str, xs, cfg: FitConfig, **kwargs) -> FactorFit:
    return FITTERS[normalize_model_id(model_id)](xs, cfg, **kwargs)


# ------------------------------------------------------------ serialization

FIT_MAGIC = b"MSRF1"
_FIT_HEADER = struct.Struct("<5sB4I")


def save_fit(fit: FactorFit, path) -> None:
    """MSRF1 container: header, W blocks, S, then iteration diagnostics."""
    m = fit.n_subjects
    v, k = fit.w[0].shape
    t = fit.s.shape[1]
    with open(path, "wb") as f:
        f.write(_FIT_HEADER.pack(FIT_MAGIC, MODEL_IDS.index(fit.model_id), m, v, k, t))
        f.write(np.ascontiguousarray(np.stack(fit.w), dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(fit.s, dtype="<f8").tobytes())
        f.write(struct.pack("<IBI", fit.n_iter, int(fit.converged), fit.objective_trace.size))
        f.write(np.asarray(fit.objective_trace, dtype="<f8").tobytes())


def load_fit(path) -> FactorFit:
    buf = Path(path).read_bytes()
    if len(buf) < _FIT_HEADER.size:
        raise FormatError(f"{path}: file too short for an MSRF1 header")
    magic, code, m, v, k, t = _FIT_HEADER.unpack_from(buf, 0)
    if magic != FIT_MAGIC or code >= len(MODEL_IDS):
        raise FormatError(f"{path}: not an MSRF1 factor-fit file")
    pos = _FIT_HEADER.size
    n_main = m * v * k + k * t
    if len(buf) < pos + 8 * n_main + 9:
        raise FormatError(f"{path}: truncated factor-fit payload")
    w = np.frombuffer(buf, "<f8", m * v * k, pos).reshape(m, v, k).copy()
    pos += 8 * m * v * k
    s = np.frombuffer(buf, "<f8", k * t, pos).reshape(k, t).copy()
    pos += 8 * k * t
    n_iter, converged, n_trace = struct.unpack_from("<IBI", buf, pos)
    pos += 9
    if len(buf) != pos + 8 * n_trace:
        raise FormatError(f"{path}: objective trace length does not match file size")
    trace = np.frombuffer(buf, "<f8", n_trace, pos).copy()
    return FactorFit(list(w), s, MODEL_IDS[code], trace, n_iter, bool(converged))
