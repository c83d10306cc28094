import itertools

import numpy as np
import pytest

from slsrm.errors import FormatError, SpecError
from slsrm.evaluation import evaluate_time_segment, time_segment_chance
from slsrm.models import FitConfig, fit_srm
from slsrm.synth import (
    PRESETS,
    PlantedRegion,
    SynthSpec,
    dilate,
    empirical_snr_db,
    generate,
    generate_recall,
    load_truth,
    make_sources,
    preset,
    save_truth,
)
from slsrm.volume import save_dataset


def region_spec(snr, t=120, seed=0, dims=(5, 5, 5), k=10):
    return SynthSpec(m=4, dims=dims, t=t, seed=seed,
                     regions=(PlantedRegion((0, 0, 0), (5, 5, 5), k_true=k, snr_db=snr),))


class TestValidate:
    @pytest.mark.parametrize("region", [
        PlantedRegion((0, 0, 0), (6, 5, 5)),
        PlantedRegion((2, 2, 2), (2, 4, 4)),
        PlantedRegion((0, 0, 0), (5, 5, 5), k_true=0),
        PlantedRegion((0, 0, 0), (5, 5, 5), snr_db=float("nan")),
        PlantedRegion((0, 0, 0), (5, 5, 5), source_kind="cauchy"),
    ])
    def test_bad_region(self, region):
        with pytest.raises(SpecError):
            generate(SynthSpec(m=2, dims=(5, 5, 5), t=20, regions=(region,)))

    def test_overlap(self):
        a = PlantedRegion((0, 0, 0), (3, 3, 3), k_true=2)
        b = PlantedRegion((2, 2, 2), (4, 4, 4), k_true=2)
        with pytest.raises(SpecError):
            generate(SynthSpec(m=2, dims=(5, 5, 5), t=20, regions=(a, b)))

    def test_unknown_preset(self):
        with pytest.raises(SpecError):
            preset("nope")


class TestGenerate:
    def test_deterministic(self):
        for name in ("planted-small", "recall-small"):
            a, ta = generate(preset(name, seed=7))
            b, tb = generate(preset(name, seed=7))
            assert a.data.tobytes() == b.data.tobytes()
            assert ta.sources[0].tobytes() == tb.sources[0].tobytes()
        c, _ = generate(preset("planted-small", seed=8))
        assert c.data.tobytes() != generate(preset("planted-small", seed=7))[0].data.tobytes()

    def test_file_bytes_identical(self, tmp_path):
        for tag in "ab":
            ds, truth = generate(preset("planted-medium", seed=3))
            save_dataset(ds, tmp_path / f"{tag}.msrd")
            save_truth(truth, tmp_path / f"{tag}.truth")
        assert (tmp_path / "a.msrd").read_bytes() == (tmp_path / "b.msrd").read_bytes()
        assert (tmp_path / "a.truth").read_bytes() == (tmp_path / "b.truth").read_bytes()

    @pytest.mark.parametrize("kind", ["laplacian", "gaussian", "sinusoid-mix"])
    def test_sources_standardized(self, kind):
        s = make_sources(np.random.default_rng(0), kind, 4, 300)
        np.testing.assert_allclose(s.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(s.std(axis=1), 1, atol=1e-12)

    @pytest.mark.parametrize("snr", [0.0, 10.0, 20.0])
    def test_snr(self, snr):
        ds, truth = generate(region_spec(snr))
        assert abs(empirical_snr_db(ds, truth, 0) - snr) < 0.5

    def test_noise_free_exact(self):
        ds, truth = generate(region_spec(np.inf, t=200))
        xs = [x[truth.region_rows[0]] for x in ds.data]
        fit = fit_srm(xs, FitConfig(k=10, max_iter=500, tol=1e-12))
        assert fit.objective < 1e-8
        for x, q in zip(xs, truth.maps[0]):
            np.testing.assert_allclose(x, q @ truth.sources[0], atol=1e-12)

    def test_noise_only_region_at_chance(self):
        ds, truth = generate(region_spec(-np.inf, t=120, seed=2))
        res = evaluate_time_segment(ds.subjects, lambda xs, f: fit_srm(xs, FitConfig(k=10, seed=f)))
        assert res.chance == pytest.approx(time_segment_chance(120))
        assert res.accuracy <= 3 * res.chance
        assert not truth.informative_mask().any()

    def test_region_rows(self):
        spec = SynthSpec(m=2, dims=(6, 5, 5), t=20, regions=(PlantedRegion((1, 0, 0), (3, 2, 2), k_true=2),))
        ds, truth = generate(spec)
        coords = ds.grid.coords()[truth.region_rows[0]]
        assert {tuple(c) for c in coords} == set(itertools.product(range(1, 3), range(2), range(2)))
        assert truth.region_mask(0).sum() == 8

    def test_recall(self):
        spec = preset("recall-small")
        ds, truth = generate(spec)
        rec = generate_recall(spec, truth)
        assert rec.n_trs == 200 and rec.n_subjects == 5
        ids = rec.scene_per_tr()
        assert ids.tolist() == np.repeat(np.arange(50), 4).tolist()
        with pytest.raises(SpecError):
            generate_recall(preset("planted-small"), truth)

    def test_presets_valid(self):
        for name in PRESETS:
            spec = preset(name)
            assert spec.m >= 2


class TestTruthFile:
    def test_roundtrip(self, tmp_path):
        spec = SynthSpec(m=3, dims=(8, 8, 6), t=30, regions=(
            PlantedRegion((0, 0, 0), (3, 3, 3), k_true=4, snr_db=5.0),
            PlantedRegion((4, 4, 2), (8, 7, 6), k_true=2, snr_db=-np.inf, source_kind="sinusoid-mix"),
        ))
        _, truth = generate(spec)
        save_truth(truth, tmp_path / "g")
        back = load_truth(tmp_path / "g")
        assert back.regions == truth.regions and back.dims == truth.dims
        for a, b in zip(back.sources, truth.sources):
            np.testing.assert_array_equal(a, b)
        for qa, qb in zip(back.maps, truth.maps):
            np.testing.assert_array_equal(np.stack(qa), np.stack(qb))
        np.testing.assert_array_equal(back.informative_mask(), truth.informative_mask())

    def test_corrupt(self, tmp_path):
        _, truth = generate(region_spec(10.0, t=20))
        save_truth(truth, tmp_path / "g")
        buf = (tmp_path / "g").read_bytes()
        (tmp_path / "h").write_bytes(buf[:-3])
        with pytest.raises(FormatError):
            load_truth(tmp_path / "h")
        (tmp_path / "h").write_bytes(b"XXXXX" + buf[5:])
        with pytest.raises(FormatError):
            load_truth(tmp_path / "h")


def test_dilate_brute_force():
    rng = np.random.default_rng(0)
    mask = rng.random((7, 6, 5)) < 0.05
    out = dilate(mask, 2)
    pts = np.argwhere(mask)
    for c in itertools.product(range(7), range(6), range(5)):
        expect = bool(len(pts)) and np.abs(pts - c).max(axis=1).min() <= 2
        assert out[c] == expect
