"""Synthetic multi-subject volumes with planted shared responses.

Inside each planted box, subject i sees ``Q_i S0 + noise`` where ``Q_i`` has
orthonormal columns (distinct per subject) and ``S0`` is shared. Voxels
outside every box carry unit-variance Gaussian noise only.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, SpecError
from .linalg import zscore_rows
from .models import random_orthonormal
from .volume import SubjectDataset, VolumeGrid

SOURCE_KINDS = ("laplacian", "gaussian", "sinusoid-mix")


@dataclass(frozen=True)
class PlantedRegion:
    """Axis-aligned box ``lo <= (x, y, z) < hi`` carrying a shared response."""

    lo: tuple
    hi: tuple
    k_true: int = 10
    snr_db: float = 10.0
    source_kind: str = "laplacian"

    @property
    def n_voxels(self) -> int:
        return int(np.prod(np.subtract(self.hi, self.lo)))

    def coords(self) -> np.ndarray:
        """Box voxels in x-fastest order."""
        axes = [np.arange(a, b) for a, b in zip(self.lo, self.hi)]
        z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


@dataclass(frozen=True)
class SceneSpec:
    """Scene structure for a recall-style dataset."""

    n_scenes: int = 50
    trs_per_scene: int = 4
    snr_db: float = 10.0


@dataclass(frozen=True)
class SynthSpec:
    m: int = 5
    dims: tuple = (12, 12, 12)
    regions: tuple = ()
    t: int = 120
    seed: int = 0
    tr_seconds: float = 2.0
    scenes: SceneSpec | None = None


@dataclass
class GroundTruth:
    regions: list
    region_rows: list
    sources: list
    maps: list
    dims: tuple = ()
    extra: dict = field(default_factory=dict)

    def region_mask(self, i: int) -> np.ndarray:
        mask = np.zeros(self.dims, dtype=bool)
        mask[tuple(self.regions[i].coords().T)] = True
        return mask

    def informative_mask(self) -> np.ndarray:
        """Union of regions that carry any signal (snr > -inf)."""
        mask = np.zeros(self.dims, dtype=bool)
        for i, region in enumerate(self.regions):
            if region.snr_db > -np.inf:
                mask |= self.region_mask(i)
        return mask


def validate(spec: SynthSpec) -> None:
    if spec.m < 1 or spec.t < 2:
        raise SpecError(f"need m >= 1 and t >= 2, got m={spec.m}, t={spec.t}")
    if len(spec.dims) != 3 or min(spec.dims) < 1:
        raise SpecError(f"grid dims must be three positive ints, got {spec.dims}")
    occupied = np.zeros(spec.dims, dtype=bool)
    for region in spec.regions:
        lo, hi = np.asarray(region.lo), np.asarray(region.hi)
        if lo.shape != (3,) or hi.shape != (3,) or (lo < 0).any() or (hi > spec.dims).any() or (hi <= lo).any():
            raise SpecError(f"region box {region.lo}-{region.hi} is empty or outside grid {spec.dims}")
        if region.source_kind not in SOURCE_KINDS:
            raise SpecError(f"unknown source kind {region.source_kind!r}")
        if not 1 <= region.k_true <= min(125, region.n_voxels, spec.t):
            raise SpecError(
                f"k_true={region.k_true} must be in [1, min(125, box voxels, t)]"
            )
        if np.isnan(region.snr_db):
            raise SpecError("snr_db is NaN")
        box = tuple(region.coords().T)
        if occupied[box].any():
            raise SpecError("planted regions overlap")
        occupied[box] = True
    if spec.scenes is not None:
        sc = spec.scenes
        if sc.n_scenes < 2 or sc.trs_per_scene < 1 or np.isnan(sc.snr_db):
            raise SpecError("scene structure needs >= 2 scenes of >= 1 TR and a valid snr")


def make_sources(rng: np.random.Generator, kind: str, k: int, t: int) -> np.ndarray:
    """k x t sources with zero-mean, unit-variance rows."""
    if kind == "laplacian":
        s = rng.laplace(size=(k, t))
    elif kind == "gaussian":
        s = rng.standard_normal((k, t))
    else:
        freqs = rng.uniform(0.01, 0.2, size=(k, 3, 1))
        phases = rng.uniform(0, 2 * np.pi, size=(k, 3, 1))
        amps = rng.uniform(0.5, 1.5, size=(k, 3, 1))
        s = (amps * np.sin(2 * np.pi * freqs * np.arange(t) + phases)).sum(axis=1)
    return zscore_rows(s)


def _mix(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    if snr_db == np.inf:
        return signal
    if snr_db == -np.inf:
        return noise
    power = np.mean(signal**2)
    return signal + noise * np.sqrt(power / 10 ** (snr_db / 10))


def generate(spec: SynthSpec):
    """Draw a dataset and its ground truth; deterministic in ``spec.seed``.

    Returns
    -------
    dataset : SubjectDataset
    truth : GroundTruth
    """
    validate(spec)
    rng = np.random.default_rng(spec.seed)
    grid = VolumeGrid(np.ones(spec.dims, dtype=bool))
    data = rng.standard_normal((spec.m, grid.n_voxels, spec.t))
    rows_l, sources_l, maps_l = [], [], []
    for region in spec.regions:
        rows = grid.rows_at(region.coords())
        s0 = make_sources(rng, region.source_kind, region.k_true, spec.t)
        qs = [random_orthonormal(rng, rows.size, region.k_true) for _ in range(spec.m)]
        signal = np.stack([q @ s0 for q in qs])
        noise = rng.standard_normal(signal.shape)
        data[:, rows, :] = _mix(signal, noise, region.snr_db)
        rows_l.append(rows)
        sources_l.append(s0)
        maps_l.append(qs)
    truth = GroundTruth(list(spec.regions), rows_l, sources_l, maps_l, tuple(spec.dims))
    return SubjectDataset(data, grid, spec.tr_seconds), truth


def generate_recall(spec: SynthSpec, truth: GroundTruth) -> SubjectDataset:
    """Recall-style dataset reusing the subject maps of ``truth``.

    Every planted region gets one random k-vector per scene, shared across
    subjects; during the TRs of scene j the region of subject i shows
    ``Q_i p_j`` plus noise at ``spec.scenes.snr_db``. Scenes run in order,
    ``trs_per_scene`` TRs each, and are recorded as dataset labels.
    """
    validate(spec)
    if spec.scenes is None:
        raise SpecError("spec has no scene structure")
    sc = spec.scenes
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    t = sc.n_scenes * sc.trs_per_scene
    grid = VolumeGrid(np.ones(spec.dims, dtype=bool))
    data = rng.standard_normal((spec.m, grid.n_voxels, t))
    scene_of_tr = np.repeat(np.arange(sc.n_scenes), sc.trs_per_scene)
    for region, rows, qs in zip(truth.regions, truth.region_rows, truth.maps):
        patterns = rng.standard_normal((region.k_true, sc.n_scenes))
        shared = patterns[:, scene_of_tr]
        signal = np.stack([q @ shared for q in qs])
        noise = rng.standard_normal(signal.shape)
        snr = sc.snr_db if region.snr_db > -np.inf else -np.inf
        data[:, rows, :] = _mix(signal, noise, snr)
    labels = np.stack([np.arange(sc.n_scenes) * sc.trs_per_scene, np.arange(sc.n_scenes)], axis=1)
    return SubjectDataset(data, grid, spec.tr_seconds, labels)


def empirical_snr_db(dataset: SubjectDataset, truth: GroundTruth, i: int) -> float:
    """Recompute a region's SNR from the data and its known signal."""
    rows = truth.region_rows[i]
    signal = np.stack([q @ truth.sources[i] for q in truth.maps[i]])
    noise = dataset.data[:, rows, :] - signal
    return float(10 * np.log10(np.mean(signal**2) / np.mean(noise**2)))


PRESETS = {
    "planted-small": SynthSpec(
        m=4, dims=(16, 16, 16), t=80,
        regions=(PlantedRegion((0, 0, 0), (10, 10, 10), k_true=8, snr_db=10.0),),
    ),
    "planted-medium": SynthSpec(
        m=5, dims=(12, 12, 12), t=120,
        regions=(PlantedRegion((0, 0, 0), (5, 5, 5), k_true=10, snr_db=10.0),),
    ),
    "noise-small": SynthSpec(m=4, dims=(16, 16, 16), t=80),
    "recall-small": SynthSpec(
        m=5, dims=(7, 7, 7), t=200,
        regions=(PlantedRegion((1, 1, 1), (6, 6, 6), k_true=10, snr_db=10.0),),
        scenes=SceneSpec(n_scenes=50, trs_per_scene=4, snr_db=10.0),
    ),
}


def preset(name: str, **overrides) -> SynthSpec:
    if name not in PRESETS:
        raise SpecError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return replace(PRESETS[name], **{k: v for k, v in overrides.items() if v is not None})


# ------------------------------------------------------------ sidecar file

TRUTH_MAGIC = b"MSRG1"
_KIND_CODES = {kind: i for i, kind in enumerate(SOURCE_KINDS)}


def save_truth(truth: GroundTruth, path) -> None:
    """MSRG1 sidecar: per region the box, k, snr, source kind, S0 and Q_i."""
    m = len(truth.maps[0]) if truth.maps else 0
    t = truth.sources[0].shape[1] if truth.sources else 0
    with open(path, "wb") as f:
        f.write(struct.pack("<5s6I", TRUTH_MAGIC, len(truth.regions), m, t, *truth.dims))
        for region, s0, qs in zip(truth.regions, truth.sources, truth.maps):
            f.write(struct.pack("<7IdB", *region.lo, *region.hi, region.k_true,
                                region.snr_db, _KIND_CODES[region.source_kind]))
            f.write(np.ascontiguousarray(s0, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(np.stack(qs), dtype="<f8").tobytes())


def load_truth(path) -> GroundTruth:
    buf = Path(path).read_bytes()
    if buf[:5] != TRUTH_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:5]!r}")
    try:
        _, n_regions, m, t, nx, ny, nz = struct.unpack_from("<5s6I", buf, 0)
        dims = (nx, ny, nz)
        grid_rows = VolumeGrid(np.ones(dims, dtype=bool))
        pos = struct.calcsize("<5s6I")
        regions, rows_l, sources, maps = [], [], [], []
        rec = struct.Struct("<7IdB")
        for _ in range(n_regions):
            vals = rec.unpack_from(buf, pos)
            pos += rec.size
            region = PlantedRegion(tuple(vals[0:3]), tuple(vals[3:6]), vals[6], vals[7], SOURCE_KINDS[vals[8]])
            k, v = region.k_true, region.n_voxels
            s0 = np.frombuffer(buf, "<f8", k * t, pos).reshape(k, t).copy()
            pos += 8 * k * t
            qs = np.frombuffer(buf, "<f8", m * v * k, pos).reshape(m, v, k).copy()
            pos += 8 * m * v * k
            regions.append(region)
            rows_l.append(grid_rows.rows_at(region.coords()))
            sources.append(s0)
            maps.append(list(qs))
    except (struct.error, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed ground-truth file ({exc})") from None
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes in ground-truth file")
    return GroundTruth(regions, rows_l, sources, maps, dims)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev dilation of a boolean volume by ``radius`` voxels."""
    return ndimage.maximum_filter(mask.astype(np.uint8), size=2 * radius + 1, mode="constant") > 0

