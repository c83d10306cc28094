import csv

import numpy as np
import pytest

from slsrm.errors import FormatError, ProtocolError
from slsrm.evaluation import EvalSpec, evaluate_time_segment
from slsrm.models import FitConfig, fit_srm
from slsrm.searchlight import (
    FLAG_ABSENT,
    FLAG_K_SKIPPED,
    ResultMaps,
    SweepConfig,
    aggregate_accuracy,
    derive_seed,
    export_csv,
    load_result_maps,
    save_result_maps,
    sweep,
    threshold_map,
)
from slsrm.synth import PlantedRegion, SynthSpec, generate, generate_recall, preset
from slsrm.volume import SearchlightIndex, build_searchlights


def two_region_data(seed=0, t=60):
    spec = SynthSpec(m=4, dims=(10, 5, 5), t=t, seed=seed, regions=(
        PlantedRegion((0, 0, 0), (5, 5, 5), k_true=5, snr_db=10.0),
        PlantedRegion((5, 0, 0), (10, 5, 5), k_true=5, snr_db=-np.inf),
    ))
    return generate(spec)


@pytest.fixture(scope="module")
def small():
    ds, truth = two_region_data()
    index = build_searchlights(ds.grid)
    cfg = SweepConfig(model="SRM", k_grid=(3, 5), seed=1)
    return ds, truth, index, cfg, sweep(ds, index, cfg)


def test_derive_seed():
    assert derive_seed(0, 1, 10, 0) == derive_seed(0, 1, 10, 0)
    seeds = {derive_seed(0, c, k, f) for c in range(5) for k in (5, 10) for f in (0, 1)}
    assert len(seeds) == 20


def test_config_normalizes():
    cfg = SweepConfig(model="srm", k_grid=[5, 10])
    assert cfg.model == "SRM" and cfg.k_grid == (5, 10)
    with pytest.raises(ValueError):
        SweepConfig(k_grid=())


def test_separates_regions():
    # informative box at x < 5, pure-noise box at x >= 11, background between
    spec = SynthSpec(m=4, dims=(16, 5, 5), t=60, seed=3, regions=(
        PlantedRegion((0, 0, 0), (5, 5, 5), k_true=5, snr_db=10.0),
        PlantedRegion((11, 0, 0), (16, 5, 5), k_true=5, snr_db=-np.inf),
    ))
    ds, truth = generate(spec)
    maps = sweep(ds, build_searchlights(ds.grid), SweepConfig(model="SRM", k_grid=(3, 5)))
    at = tuple(maps.centers.T)
    pos = maps.accuracy[truth.region_mask(0)[at]]
    neg = maps.accuracy[truth.region_mask(1)[at]]
    assert pos.size == neg.size == 3
    # AUC by counting all (informative, noise) pairs
    auc = np.mean([(p > q) + 0.5 * (p == q) for p in pos for q in neg])
    assert auc > 0.95


def test_single_center_by_hand(small):
    ds, _, index, cfg, maps = small
    cid = 1
    one = SearchlightIndex(index.centers[[cid]], index.neighborhoods[[cid]], index.dims)
    single = sweep(ds, one, cfg)
    xs = [x[index.neighborhoods[cid]] for x in ds.data]
    accs = []
    for k in cfg.k_grid:
        # center id inside the one-center index is 0
        res = evaluate_time_segment(
            xs, lambda train, fold: fit_srm(train, FitConfig(k=k, seed=derive_seed(cfg.seed, 0, k, fold))),
            cfg.eval,
        )
        accs.append(res.accuracy)
    np.testing.assert_array_equal(single.acc_by_k[0], accs)
    assert single.accuracy[0] == max(accs)
    assert single.best_k[0] == cfg.k_grid[int(np.argmax(accs))]


def test_parallel_bit_identical(small):
    ds, _, index, cfg, maps = small
    par = sweep(ds, index, SweepConfig(model="SRM", k_grid=(3, 5), seed=1, n_jobs=2))
    assert maps.equals(par)


def test_skipped_k():
    ds, _ = two_region_data(t=30)
    index = build_searchlights(ds.grid)
    maps = sweep(ds, index, SweepConfig(model="SRM", k_grid=(3, 20), seed=0))
    assert np.all(maps.flags & FLAG_K_SKIPPED)
    assert np.all(np.isnan(maps.acc_by_k[:, 1]))
    assert np.all(maps.best_k == 3)
    maps = sweep(ds, index, SweepConfig(model="SRM", k_grid=(20,), seed=0))
    assert np.all(maps.flags & FLAG_ABSENT) and not maps.defined.any()


def test_threshold(small):
    *_, maps = small
    assert threshold_map(maps, 0.0).equals(maps)
    med = np.median(maps.accuracy)
    kept = threshold_map(maps, med)
    assert kept.defined.sum() == np.sum(maps.accuracy >= med)
    assert np.all(kept.flags[~kept.defined] & FLAG_ABSENT)
    with pytest.raises(ValueError):
        threshold_map(maps, 1.5)


def test_threshold_above_max():
    maps = ResultMaps((3, 1, 1), np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]),
                      np.array([0.2, 0.5, 0.7]), np.array([5, 5, 10]), np.zeros(3, np.uint8))
    assert not threshold_map(maps, 0.71).defined.any()
    assert threshold_map(maps, 0.5).best_k.tolist() == [0, 5, 10]


def test_file_roundtrip(small, tmp_path):
    *_, maps = small
    save_result_maps(maps, tmp_path / "m")
    back = load_result_maps(tmp_path / "m")
    assert back.dims == maps.dims
    np.testing.assert_array_equal(back.centers, maps.centers)
    assert back.accuracy.tobytes() == maps.accuracy.tobytes()
    np.testing.assert_array_equal(back.best_k, maps.best_k)
    np.testing.assert_array_equal(back.flags, maps.flags)
    buf = (tmp_path / "m").read_bytes()
    assert len(buf) == 17 + 250 * 11
    (tmp_path / "x").write_bytes(buf[:-1])
    with pytest.raises(FormatError):
        load_result_maps(tmp_path / "x")


def test_export_csv(small, tmp_path):
    *_, maps = small
    n = export_csv(maps, tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert n == len(rows) == maps.defined.sum()
    assert float(rows[0]["accuracy"]) == maps.accuracy[0]
    assert [int(rows[0][c]) for c in "xyz"] == maps.centers[0].tolist()


class TestAggregate:
    def test_single_center_equals_sweep(self, small):
        ds, _, index, cfg, maps = small
        one = SearchlightIndex(index.centers[[0]], index.neighborhoods[[0]], index.dims)
        single = sweep(ds, one, cfg)
        agg = aggregate_accuracy(ds, one, cfg, single)
        assert agg.accuracy == single.accuracy[0]

    def test_duplicate_center(self):
        ds, _ = two_region_data(seed=2)
        index = build_searchlights(ds.grid)
        cfg = SweepConfig(model="PCA", k_grid=(4,))
        one = SearchlightIndex(index.centers[[0]], index.neighborhoods[[0]], index.dims)
        dup = SearchlightIndex(index.centers[[0, 0]], index.neighborhoods[[0, 0]], index.dims)
        a = aggregate_accuracy(ds, one, cfg, np.array([4]))
        b = aggregate_accuracy(ds, dup, cfg, np.array([4, 4]))
        assert a.accuracy == b.accuracy

    def test_planted_aggregate(self, small):
        ds, _, index, cfg, maps = small
        agg = aggregate_accuracy(ds, index, cfg, maps)
        assert agg.accuracy >= np.nanmax(maps.accuracy) - 0.05

    def test_no_defined_center(self, small):
        ds, _, index, cfg, _ = small
        with pytest.raises(ProtocolError):
            aggregate_accuracy(ds, index, cfg, np.zeros(len(index), dtype=int))


def test_scene_recall_sweep():
    spec = preset("recall-small")
    ds, truth = generate(spec)
    rec = generate_recall(spec, truth)
    index = build_searchlights(ds.grid)
    index = SearchlightIndex(index.centers[:2], index.neighborhoods[:2], index.dims)
    cfg = SweepConfig(model="SRM", k_grid=(10,), eval=EvalSpec("scene-recall"))
    maps = sweep(ds, index, cfg, recall=rec)
    assert np.all(maps.accuracy >= 10 * 0.02)
    with pytest.raises(ProtocolError):
        sweep(ds, index, cfg)


def test_grid_mismatch(small):
    ds, *_ = small
    other = build_searchlights(generate(SynthSpec(m=2, dims=(6, 6, 6), t=20))[0].grid)
    with pytest.raises(ProtocolError):
        sweep(ds, other, SweepConfig())
