import itertools

import numpy as np
import pytest

from oracles import brute_centers
from slsrm.errors import FormatError, ShapeMismatch
from slsrm.volume import (
    SubjectDataset,
    VolumeGrid,
    block_population,
    build_searchlights,
    downsample_by_2,
    extract_searchlight,
    flat_index,
    load_dataset,
    save_dataset,
    unflatten,
)


def full_grid(dims):
    return VolumeGrid(np.ones(dims, dtype=bool))


def brute_block_means(vol, mask):
    """Loop over every output block and average its in-mask members."""
    nx, ny, nz, t = vol.shape
    out = {}
    for bx, by, bz in itertools.product(range((nx + 1) // 2), range((ny + 1) // 2), range((nz + 1) // 2)):
        members = [
            vol[x, y, z]
            for x in range(2 * bx, min(2 * bx + 2, nx))
            for y in range(2 * by, min(2 * by + 2, ny))
            for z in range(2 * bz, min(2 * bz + 2, nz))
            if mask[x, y, z]
        ]
        if members:
            out[(bx, by, bz)] = np.mean(members, axis=0)
    return out


def volume_dataset(vol, mask=None):
    """(nx, ny, nz, t) arrays -> single-subject dataset."""
    mask = np.ones(vol.shape[:3], bool) if mask is None else mask
    grid = VolumeGrid(mask)
    rows = vol.reshape(-1, vol.shape[3], order="F")[grid.voxels]
    return SubjectDataset(rows[None], grid)


class TestGrid:
    def test_flat_roundtrip(self):
        dims = (3, 4, 5)
        flat = np.arange(60)
        c = unflatten(flat, dims)
        np.testing.assert_array_equal(flat_index(c, dims), flat)
        assert tuple(c[1]) == (1, 0, 0) and tuple(c[3]) == (0, 1, 0)

    def test_custom_voxel_order(self):
        mask = np.zeros((2, 2, 1), bool)
        mask[0, 0, 0] = mask[1, 1, 0] = True
        grid = VolumeGrid(mask, voxels=[3, 0])
        assert grid.rows_at([[1, 1, 0], [0, 0, 0], [1, 0, 0]]).tolist() == [0, 1, -1]

    def test_bad_voxels(self):
        with pytest.raises(ShapeMismatch):
            VolumeGrid(np.ones((2, 1, 1), bool), voxels=[0, 0])

    def test_empty_mask(self):
        with pytest.raises(ShapeMismatch):
            VolumeGrid(np.zeros((2, 2, 2), bool))


class TestDataset:
    def test_ragged_subjects(self):
        with pytest.raises(ShapeMismatch):
            SubjectDataset([np.zeros((8, 10)), np.zeros((8, 11))], full_grid((2, 2, 2)))

    def test_voxel_count(self):
        with pytest.raises(ShapeMismatch):
            SubjectDataset(np.zeros((1, 7, 3)), full_grid((2, 2, 2)))

    def test_scene_per_tr(self):
        ds = SubjectDataset(np.zeros((1, 1, 6)), full_grid((1, 1, 1)), labels=[[4, 1], [1, 0]])
        assert ds.scene_per_tr().tolist() == [-1, 0, 0, 0, 1, 1]


class TestFileFormat:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        mask = rng.random((2, 2, 2)) < 0.9
        mask[0, 0, 0] = True
        grid = VolumeGrid(mask)
        ds = SubjectDataset(rng.standard_normal((2, grid.n_voxels, 10)), grid, 1.5, labels=[[0, 3], [5, 4]])
        path = tmp_path / "d.msrd"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.n_subjects == 2 and back.subjects[0].shape == (grid.n_voxels, 10)
        np.testing.assert_array_equal(back.data, ds.data)
        np.testing.assert_array_equal(back.grid.voxels, grid.voxels)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.tr_seconds == 1.5
        save_dataset(back, tmp_path / "e.msrd")
        assert path.read_bytes() == (tmp_path / "e.msrd").read_bytes()

    def test_m2_v8_t10(self, tmp_path):
        ds = SubjectDataset(np.arange(160.0).reshape(2, 8, 10), full_grid((2, 2, 2)))
        save_dataset(ds, tmp_path / "x")
        back = load_dataset(tmp_path / "x")
        assert [x.shape for x in back.subjects] == [(8, 10), (8, 10)]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE!" + bytes(40))
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "x")

    def test_truncated(self, tmp_path):
        ds = SubjectDataset(np.ones((2, 8, 10)), full_grid((2, 2, 2)))
        save_dataset(ds, tmp_path / "x")
        buf = (tmp_path / "x").read_bytes()
        (tmp_path / "y").write_bytes(buf[:-8])
        with pytest.raises((FormatError, ShapeMismatch)):
            load_dataset(tmp_path / "y")


class TestDownsample:
    def test_uniform(self):
        tc = np.random.default_rng(1).standard_normal(7)
        vol = np.broadcast_to(tc, (4, 4, 4, 7)).copy()
        out = downsample_by_2(volume_dataset(vol))
        assert out.grid.dims == (2, 2, 2)
        np.testing.assert_allclose(out.data[0], np.broadcast_to(tc, (8, 7)), atol=1e-14)

    def test_half_and_half(self):
        c = np.array([1.0, -2.0, 0.5])
        vol = np.zeros((2, 2, 2, 3))
        vol[0] = c
        vol[1] = 3 * c
        out = downsample_by_2(volume_dataset(vol))
        np.testing.assert_allclose(out.data[0, 0], 2 * c)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        dims = tuple(rng.integers(3, 7, size=3)) if seed else (6, 6, 6)
        vol = rng.standard_normal(dims + (10,))
        mask = rng.random(dims) < 0.7
        mask.flat[0] = True
        out = downsample_by_2(volume_dataset(vol, mask))
        oracle = brute_block_means(vol, mask)
        assert out.n_voxels == len(oracle)
        coords = out.grid.coords()
        for row, c in enumerate(coords):
            np.testing.assert_allclose(out.data[0, row], oracle[tuple(c)], atol=1e-12)
        pop = block_population(volume_dataset(vol, mask))
        assert pop.sum() == mask.sum()


class TestSearchlights:
    def test_single_center(self):
        idx = build_searchlights(full_grid((5, 5, 5)))
        assert len(idx) == 1 and tuple(idx.centers[0]) == (2, 2, 2)
        np.testing.assert_array_equal(idx.neighborhoods[0], np.arange(125))

    def test_7_cube(self):
        idx = build_searchlights(full_grid((7, 7, 7)))
        assert len(idx) == 27
        assert sorted(map(tuple, idx.centers)) == list(itertools.product(range(2, 5), repeat=3))

    def test_too_small(self):
        assert len(build_searchlights(full_grid((4, 9, 9)))) == 0

    def test_radius(self):
        with pytest.raises(ValueError):
            build_searchlights(full_grid((5, 5, 5)), radius=4)
        assert len(build_searchlights(full_grid((5, 5, 5)), radius=1)) == 27

    @pytest.mark.parametrize("seed", range(10))
    def test_random_mask_oracle(self, seed):
        rng = np.random.default_rng(seed)
        dims = tuple(rng.integers(5, 10, size=3))
        mask = rng.random(dims) < 0.97
        idx = build_searchlights(VolumeGrid(mask))
        assert [tuple(c) for c in idx.centers] == brute_centers(mask)

    def test_members(self):
        rng = np.random.default_rng(3)
        grid = full_grid((6, 7, 8))
        idx = build_searchlights(grid)
        coords = grid.coords()
        for cid in rng.choice(len(idx), 5, replace=False):
            c = idx.centers[cid]
            members = coords[idx.neighborhoods[cid]]
            assert np.abs(members - c).max() == 2
            assert len({tuple(m) for m in members}) == 125

    def test_extract(self):
        rng = np.random.default_rng(4)
        grid = full_grid((6, 6, 6))
        ds = SubjectDataset(rng.standard_normal((2, 216, 5)), grid)
        idx = build_searchlights(grid)
        for cid in range(len(idx)):
            blocks = extract_searchlight(ds, idx, cid)
            for i in range(2):
                loop = np.stack([ds.data[i, r] for r in idx.neighborhoods[cid]])
                np.testing.assert_array_equal(blocks[i], loop)
        with pytest.raises(IndexError):
            extract_searchlight(ds, idx, len(idx))

    def test_single_searchlight_returns_whole(self):
        grid = full_grid((5, 5, 5))
        ds = SubjectDataset(np.random.default_rng(5).standard_normal((3, 125, 4)), grid)
        blocks = extract_searchlight(ds, build_searchlights(grid), 0)
        for b, x in zip(blocks, ds.subjects):
            np.testing.assert_array_equal(b, x)

    def test_containment(self):
        grid = full_grid((10, 5, 5))
        data = np.zeros((1, 250, 2))
        data[0, grid.coords()[:, 0] >= 5] = 1.0
        ds = SubjectDataset(data, grid)
        idx = build_searchlights(grid)
        left = int(np.flatnonzero(idx.centers[:, 0] == 2)[0])
        right = int(np.flatnonzero(idx.centers[:, 0] == 7)[0])
        assert np.all(extract_searchlight(ds, idx, left)[0] == 0)
        assert np.all(extract_searchlight(ds, idx, right)[0] == 1)
