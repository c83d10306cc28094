"""Volumetric multi-subject data: grids, masks, file I/O and searchlights.

Flat voxel coordinates use x-fastest order everywhere::

    flat = x + nx * (y + ny * z)

which matches ``numpy.ravel(order="F")`` on an ``(nx, ny, nz)`` array.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse

from .errors import FormatError, ShapeMismatch

DATASET_MAGIC = b"MSRD1"
_HEADER = struct.Struct("<5s6If")


def flat_index(coords, dims) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64)
    nx, ny, _ = dims
    return coords[..., 0] + nx * (coords[..., 1] + ny * coords[..., 2])


def unflatten(flat, dims) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.int64)
    nx, ny, _ = dims
    x = flat % nx
    y = (flat // nx) % ny
    z = flat // (nx * ny)
    return np.stack([x, y, z], axis=-1)


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """A 3-D grid plus the bijection between in-mask voxels and data rows.

    Parameters
    ----------
    mask : ndarray of bool, shape (nx, ny, nz)
    voxels : ndarray of int, optional
        Flat (x-fastest) coordinate of each data row. Defaults to the
        in-mask voxels in ascending flat order.
    """

    mask: np.ndarray
    voxels: np.ndarray = None
    row_of: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 3 or min(mask.shape) < 1:
            raise ShapeMismatch(f"mask must be a non-empty 3-D array, got shape {mask.shape}")
        if not mask.any():
            raise ShapeMismatch("mask has no in-mask voxels")
        in_mask = np.flatnonzero(mask.ravel(order="F"))
        if self.voxels is None:
            voxels = in_mask
        else:
            voxels = np.asarray(self.voxels, dtype=np.int64).ravel()
            if voxels.size != in_mask.size or not np.array_equal(np.sort(voxels), in_mask):
                raise ShapeMismatch("voxel list does not cover exactly the in-mask voxels")
        row_of = np.full(mask.size, -1, dtype=np.int64)
        row_of[voxels] = np.arange(voxels.size)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "voxels", voxels.astype(np.int64))
        object.__setattr__(self, "row_of", row_of)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.mask.shape)

    @property
    def n_voxels(self) -> int:
        return int(self.voxels.size)

    def coords(self) -> np.ndarray:
        """(v, 3) integer coordinates of the data rows."""
        return unflatten(self.voxels, self.dims)

    def rows_at(self, coords) -> np.ndarray:
        """Data-row index for each coordinate (-1 when outside the mask)."""
        return self.row_of[flat_index(coords, self.dims)]

    def same_as(self, other: "VolumeGrid") -> bool:
        return np.array_equal(self.mask, other.mask) and np.array_equal(self.voxels, other.voxels)


@dataclass(frozen=True, eq=False)
class SubjectDataset:
    """Per-subject voxel-by-TR matrices sharing one grid.

    ``data`` is stored as a single (m, v, t) float64 array; ``subjects``
    gives the list-of-matrices view. ``labels`` optionally holds
    ``(start_tr, scene_id)`` interval starts.
    """

    data: np.ndarray
    grid: VolumeGrid
    tr_seconds: float = 2.0
    labels: np.ndarray | None = None

    def __post_init__(self):
        data = self.data
        if isinstance(data, (list, tuple)):
            shapes = {np.shape(x) for x in data}
            if len(shapes) != 1:
                raise ShapeMismatch(f"subjects have differing shapes: {sorted(shapes)}")
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeMismatch(f"expected (m, v, t) data, got shape {data.shape}")
        if data.shape[1] != self.grid.n_voxels:
            raise ShapeMismatch(
                f"data has {data.shape[1]} voxel rows but the mask has {self.grid.n_voxels}"
            )
        if not self.tr_seconds > 0:
            raise ShapeMismatch("tr_seconds must be positive")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).reshape(-1, 2)
            if labels.size and (labels[:, 0].min() < 0 or labels[:, 0].max() >= data.shape[2]):
                raise ShapeMismatch("label start TR outside the time axis")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)

    @property
    def n_subjects(self) -> int:
        return self.data.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.data.shape[1]

    @property
    def n_trs(self) -> int:
        return self.data.shape[2]

    @property
    def subjects(self) -> list[np.ndarray]:
        return list(self.data)

    def scene_per_tr(self) -> np.ndarray:
        """Scene id for every TR (-1 before the first label)."""
        out = np.full(self.n_trs, -1, dtype=np.int64)
        if self.labels is None:
            return out
        order = np.argsort(self.labels[:, 0], kind="stable")
        for start, scene in self.labels[order]:
            out[start:] = scene
        return out


def save_dataset(dataset: SubjectDataset, path) -> None:
    """Write ``dataset`` in the little-endian MSRD1 container."""
    m, v, t = dataset.data.shape
    nx, ny, nz = dataset.grid.dims
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATASET_MAGIC, m, v, t, nx, ny, nz, dataset.tr_seconds))
        f.write(dataset.grid.mask.ravel(order="F").astype(np.uint8).tobytes())
        f.write(dataset.grid.voxels.astype("<u4").tobytes())
        f.write(np.ascontiguousarray(dataset.data, dtype="<f8").tobytes())
        if dataset.labels is not None:
            f.write(struct.pack("<I", dataset.labels.shape[0]))
            f.write(dataset.labels.astype("<u4").tobytes())


def load_dataset(path) -> SubjectDataset:
    """Read an MSRD1 file.

    Raises
    ------
    FormatError
        Bad magic, truncated header, mask or coordinate section.
    ShapeMismatch
        The subject blocks (and optional label section) do not add up to
        the declared ``m`` blocks of ``v x t`` values.
    """
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: file too short for an MSRD1 header")
    magic, m, v, t, nx, ny, nz, tr = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if min(m, v, t, nx, ny, nz) < 1:
        raise FormatError(f"{path}: zero dimension in header")
    pos = _HEADER.size
    n_cells = nx * ny * nz
    if len(buf) < pos + n_cells + 4 * v:
        raise FormatError(f"{path}: truncated mask/coordinate section")
    mask = np.frombuffer(buf, dtype=np.uint8, count=n_cells, offset=pos)
    if mask.max() > 1:
        raise FormatError(f"{path}: mask bytes must be 0 or 1")
    mask = mask.astype(bool).reshape((nx, ny, nz), order="F")
    pos += n_cells
    voxels = np.frombuffer(buf, dtype="<u4", count=v, offset=pos).astype(np.int64)
    pos += 4 * v
    try:
        grid = VolumeGrid(mask, voxels)
    except ShapeMismatch as exc:
        raise FormatError(f"{path}: {exc}") from None

    n_data = m * v * t * 8
    rest = len(buf) - pos - n_data
    if rest < 0:
        raise ShapeMismatch(f"{path}: subject blocks hold fewer values than {m} x {v} x {t}")
    data = np.frombuffer(buf, dtype="<f8", count=m * v * t, offset=pos).reshape(m, v, t)
    pos += n_data
    labels = None
    if rest > 0:
        n_labels = struct.unpack_from("<I", buf, pos)[0] if rest >= 4 else -1
        if rest != 4 + 8 * n_labels:
            raise ShapeMismatch(
                f"{path}: {rest} trailing bytes are neither a label section nor consistent "
                f"with {m} subject blocks of {v} x {t}"
            )
        labels = np.frombuffer(buf, dtype="<u4", count=2 * n_labels, offset=pos + 4)
        labels = labels.astype(np.int64).reshape(n_labels, 2)
    return SubjectDataset(data.copy(), grid, float(tr), labels)


def downsample_by_2(dataset: SubjectDataset) -> SubjectDataset:
    """Mean-pool 2x2x2 voxel blocks.

    Only in-mask members contribute to a block's time course; a block is in
    the new mask when at least one member is. Dimensions halve with ceiling.
    """
    grid = dataset.grid
    dims = grid.dims
    new_dims = tuple((d + 1) // 2 for d in dims)
    block_coords = grid.coords() // 2
    block_flat = flat_index(block_coords, new_dims)

    new_mask = np.zeros(new_dims, dtype=bool)
    new_mask[tuple(block_coords.T)] = True
    new_grid = VolumeGrid(new_mask)
    new_rows = new_grid.row_of[block_flat]

    counts = np.bincount(new_rows, minlength=new_grid.n_voxels).astype(np.float64)
    pool = sparse.csr_matrix(
        (1.0 / counts[new_rows], (new_rows, np.arange(grid.n_voxels))),
        shape=(new_grid.n_voxels, grid.n_voxels),
    )
    pooled = np.stack([pool @ x for x in dataset.data])
    return SubjectDataset(pooled, new_grid, dataset.tr_seconds, dataset.labels)


def block_population(dataset: SubjectDataset) -> np.ndarray:
    """Number of in-mask source voxels behind each row of the downsampled grid."""
    grid = dataset.grid
    new_dims = tuple((d + 1) // 2 for d in grid.dims)
    pooled = np.zeros(new_dims, dtype=np.int64)
    np.add.at(pooled, tuple((grid.coords() // 2).T), 1)
    return pooled.ravel(order="F")[pooled.ravel(order="F") > 0]


@dataclass(frozen=True, eq=False)
class SearchlightIndex:
    """Valid cube searchlights over a grid.

    ``centers`` is (n, 3); ``neighborhoods`` is (n, (2r+1)**3) data-row
    indices, members ordered x-fastest within the cube.
    """

    centers: np.ndarray
    neighborhoods: np.ndarray
    dims: tuple[int, int, int]
    radius: int = 2

    def __len__(self) -> int:
        return int(self.centers.shape[0])

    @property
    def size(self) -> int:
        return (2 * self.radius + 1) ** 3


def cube_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dz, dy, dx = np.meshgrid(r, r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel(), dz.ravel()], axis=1)


def build_searchlights(grid: VolumeGrid, mask=None, radius: int = 2) -> SearchlightIndex:
    """Enumerate centers whose full cube lies inside the volume and the mask.

    Centers are ordered x-fastest. ``mask`` defaults to the grid's mask; a
    different mask restricts centers and members further.
    """
    if radius not in (1, 2, 3):
        raise ValueError(f"searchlight radius must be 1, 2 or 3, got {radius}")
    mask = grid.mask if mask is None else np.asarray(mask, dtype=bool) & grid.mask
    size = 2 * radius + 1
    fits = ndimage.minimum_filter(mask.astype(np.uint8), size=size, mode="constant", cval=0)
    center_flat = np.flatnonzero(fits.ravel(order="F"))
    centers = unflatten(center_flat, grid.dims)
    offsets = cube_offsets(radius)
    members = centers[:, None, :] + offsets[None, :, :]
    neighborhoods = grid.rows_at(members) if len(centers) else np.zeros((0, size**3), np.int64)
    return SearchlightIndex(centers, neighborhoods.astype(np.int64), grid.dims, radius)


def extract_searchlight(dataset: SubjectDataset, index: SearchlightIndex, center_id: int) -> list[np.ndarray]:
    """Per-subject (cube size) x t submatrices for one center."""
    if not 0 <= center_id < len(index):
        raise IndexError(f"center {center_id} out of range for {len(index)} searchlights")
    rows = index.neighborhoods[center_id]
    return [x[rows] for x in dataset.data]
