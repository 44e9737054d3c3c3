"""Scene network: fitting, sampling, likelihood, serialization."""

import itertools
import json

import numpy as np
import pytest

from highway_risk import scene_model as sm
from highway_risk.validation import DataError

from conftest import make_single_bin_bn, point_edges


def record(fore_gap=10.0, fore_velocity=20.0, rel_velocity=0.0, length=4.0,
           width=2.0, attentive=1, aggressiveness=0.5):
    return sm.VehicleRecord(fore_gap=fore_gap, fore_velocity=fore_velocity,
                            rel_velocity=rel_velocity, length=length,
                            width=width, attentive=attentive,
                            aggressiveness=aggressiveness)


def two_variable_spec():
    """rel_velocity with 2 bins conditioned on fore_velocity with 2 bins;
    everything else single-bin."""
    return sm.DiscretizationSpec({
        "fore_gap": point_edges(10.0),
        "fore_velocity": np.array([0.0, 10.0, 20.0]),
        "rel_velocity": np.array([-2.0, 0.0, 2.0]),
        "length": point_edges(4.0),
        "width": point_edges(2.0),
        "aggressiveness": point_edges(0.5),
    })


def two_variable_bn(rows):
    spec = two_variable_spec()
    return sm.SceneBayesNet.from_tables(spec, {
        "rel_velocity": rows,
        "fore_gap": [[1.0], [1.0]],
        "length": [[1.0]],
        "width": [[1.0]],
        "aggressiveness": [[1.0]],
        "attentive": [[0.0, 1.0]],
    })


class TestFit:
    def test_single_bin_degenerate(self):
        spec = sm.DiscretizationSpec({v: point_edges(x) for v, x in [
            ("fore_gap", 10.0), ("fore_velocity", 20.0), ("rel_velocity", 0.0),
            ("length", 4.0), ("width", 2.0), ("aggressiveness", 0.5)]})
        bn = sm.SceneBayesNet(smoothing=0.0, discretization=spec).fit(
            [record(aggressiveness=0.5)])
        for var in ("fore_gap", "rel_velocity", "length", "width",
                    "aggressiveness"):
            assert bn.cpts_[var].shape[1] == 1
            assert np.all(bn.cpts_[var] == 1.0)

    def test_symmetric_counts_with_smoothing(self):
        spec = two_variable_spec()
        recs = [record(fore_velocity=5.0, rel_velocity=-1.0),
                record(fore_velocity=5.0, rel_velocity=1.0)]
        bn = sm.SceneBayesNet(smoothing=1.0, discretization=spec).fit(recs)
        np.testing.assert_allclose(bn.cpts_["rel_velocity"][0], [0.5, 0.5])

    def test_refit_recovers_generating_network(self):
        # oracle: the hand-built generating network itself
        rows = np.array([[0.9, 0.1], [0.2, 0.8]])
        gen = two_variable_bn(rows)
        rng = np.random.default_rng(0)
        road = sm.RoadSpec(length=500.0)
        records = []
        for _ in range(5000):
            scene = gen.sample(2, road, rng)
            records.extend(r for r in sm.scene_records(scene)
                           if r.fore_velocity is not None)
        refit = sm.SceneBayesNet(smoothing=0.0,
                                 discretization=gen.discretization_,
                                 parents=gen.parents_).fit(records)
        assert np.abs(refit.cpts_["rel_velocity"] - rows).max() < 0.03

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            sm.SceneBayesNet().fit([])

    def test_out_of_range_names_variable(self):
        spec = two_variable_spec()
        with pytest.raises(DataError, match="rel_velocity"):
            sm.SceneBayesNet(discretization=spec).fit(
                [record(fore_velocity=5.0, rel_velocity=99.0)])

    def test_zero_smoothing_zero_counts_uniform(self):
        spec = two_variable_spec()
        # only the first fore_velocity row ever observed
        bn = sm.SceneBayesNet(smoothing=0.0, discretization=spec).fit(
            [record(fore_velocity=5.0, rel_velocity=-1.0)])
        np.testing.assert_allclose(bn.cpts_["rel_velocity"][1], [0.5, 0.5])

    def test_fit_cpt_rows_normalized(self, fitted_bn):
        for var, rows in fitted_bn.cpts_.items():
            assert np.all(rows >= 0)
            np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)


class TestSampling:
    def test_single_bin_deterministic_scene(self):
        bn = make_single_bin_bn(fore_gap=10.0, fore_velocity=20.0,
                                rel_velocity=0.0)
        scene = bn.sample(1, sm.RoadSpec(length=100.0), np.random.default_rng(0))
        assert len(scene) == 1
        assert scene.vehicles[0].velocity == pytest.approx(20.0)

    def test_three_vehicle_placement_matches_sampled_gaps(self, fitted_bn):
        rng = np.random.default_rng(3)
        scene = fitted_bn.sample(3, sm.RoadSpec(length=1000.0), rng)
        assert [v.position for v in scene.vehicles] == sorted(
            v.position for v in scene.vehicles)
        for rear, fore in zip(scene.vehicles, scene.vehicles[1:]):
            gap = (fore.position - rear.position
                   - (fore.length + rear.length) / 2.0)
            assert gap == pytest.approx(rear.record.fore_gap)

    def test_sampled_values_lie_inside_their_bins(self, fitted_bn):
        rng = np.random.default_rng(4)
        spec = fitted_bn.discretization_
        for _ in range(50):
            scene = fitted_bn.sample(4, sm.RoadSpec(length=2000.0), rng)
            for v in scene.vehicles:
                for var in ("fore_gap", "rel_velocity", "length", "width",
                            "aggressiveness"):
                    lo, hi = spec.bin_bounds(var, v.record.bins[var])
                    assert lo <= v.record.value(var) <= hi

    def test_placement_error_when_road_too_short(self):
        bn = make_single_bin_bn(fore_gap=50.0)
        with pytest.raises(DataError):
            bn.sample(5, sm.RoadSpec(length=100.0), np.random.default_rng(0))

    def test_bin_frequencies_match_enumeration(self):
        # two-vehicle chain where the relative velocity is pinned at zero, so
        # each vehicle's velocity bin equals the latent fore-velocity bin and
        # the joint over gap bins has an exact enumeration oracle
        spec = sm.DiscretizationSpec({
            "fore_gap": np.array([5.0, 10.0, 20.0]),
            "fore_velocity": np.array([5.0, 15.0, 25.0]),
            "rel_velocity": point_edges(0.0),
            "length": point_edges(4.0),
            "width": point_edges(2.0),
            "aggressiveness": point_edges(0.5),
        })
        gap_rows = np.array([[0.3, 0.7], [0.6, 0.4]])  # conditioned on vf
        parents = dict(sm.DEFAULT_PARENTS)
        parents["fore_gap"] = "fore_velocity"
        parents["rel_velocity"] = "fore_velocity"
        bn = sm.SceneBayesNet.from_tables(spec, {
            "fore_gap": gap_rows,
            "rel_velocity": [[1.0], [1.0]],
            "length": [[1.0]],
            "width": [[1.0]],
            "aggressiveness": [[1.0]],
            "attentive": [[0.0, 1.0]],
        }, parents=parents)
        rng = np.random.default_rng(1)
        road = sm.RoadSpec(length=500.0)
        n = 50_000
        counts = np.zeros((2, 2, 2))  # (vf bin, leader gap bin, ego gap bin)
        for _ in range(n):
            scene = bn.sample(2, road, rng)
            ego, leader = scene.vehicles[0], scene.vehicles[1]
            vf_bin = spec.bin_of_clamped("fore_velocity", leader.velocity)
            counts[vf_bin, leader.record.bins["fore_gap"],
                   ego.record.bins["fore_gap"]] += 1
        for k, lb, eb in itertools.product(range(2), range(2), range(2)):
            p_cell = 0.5 * gap_rows[k, lb] * gap_rows[k, eb]
            se = np.sqrt(p_cell * (1 - p_cell) / n)
            assert abs(counts[k, lb, eb] / n - p_cell) < max(4 * se, 1e-3)


class TestLikelihood:
    def test_single_bin_scene_loglik_zero(self):
        bn = make_single_bin_bn()
        scene = bn.sample(3, sm.RoadSpec(length=200.0),
                          np.random.default_rng(0))
        assert bn.log_likelihood(scene) == pytest.approx(0.0, abs=1e-12)

    def test_hand_cpt_product(self):
        # leader marginal 0.3 in bin 0, ego conditional 0.1 in bin 1:
        # build a single-vehicle scene then check the one-vehicle term
        rows = np.array([[0.3, 0.7], [0.6, 0.4]])
        bn = two_variable_bn(rows)
        scene = bn.sample(1, sm.RoadSpec(length=100.0),
                          np.random.default_rng(5))
        rec = scene.vehicles[0].record
        marginal = 0.5 * rows[0] + 0.5 * rows[1]
        expected = np.log(marginal[rec.bins["rel_velocity"]])
        assert bn.log_likelihood(scene) == pytest.approx(expected, abs=1e-12)

    def test_likelihoods_normalize_over_assignments(self):
        # for any fixed chain of conditioning rows, the bin-level likelihood
        # sums to 1 over the exhaustive assignment enumeration
        rows = np.array([[0.3, 0.7], [0.6, 0.4]])
        bn = two_variable_bn(rows)
        for ego_row in range(2):
            total = 0.0
            for lb, eb in itertools.product(range(2), range(2)):
                p_l = np.exp(bn.vehicle_log_prob(
                    {"rel_velocity": lb, "fore_gap": 0, "length": 0,
                     "width": 0, "aggressiveness": 0, "attentive": 1}, None))
                p_e = np.exp(bn.vehicle_log_prob(
                    {"rel_velocity": eb, "fore_gap": 0, "length": 0,
                     "width": 0, "aggressiveness": 0, "attentive": 1},
                    ego_row))
                total += p_l * p_e
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_out_of_range_value_raises(self, fitted_bn):
        scene = fitted_bn.sample(2, sm.RoadSpec(length=1000.0),
                                 np.random.default_rng(6))
        bad = sm.VehicleRecord(fore_gap=1e9, fore_velocity=20.0,
                               rel_velocity=0.0, length=4.0, width=2.0,
                               attentive=1, aggressiveness=0.5)
        scene.vehicles[0].record = bad
        with pytest.raises(DataError, match="fore_gap"):
            fitted_bn.log_likelihood(scene)

    def test_chain_decomposition_additivity(self, fitted_bn):
        rng = np.random.default_rng(7)
        scene = fitted_bn.sample(4, sm.RoadSpec(length=2000.0), rng)
        spec = fitted_bn.discretization_
        total = 0.0
        records = [v.record for v in scene.vehicles]
        for i, rec in enumerate(reversed(records)):
            fv_bin = (None if i == 0 else
                      spec.bin_of_clamped("fore_velocity", rec.fore_velocity))
            total += fitted_bn.vehicle_log_prob(rec.bins, fv_bin)
        assert fitted_bn.log_likelihood(scene) == pytest.approx(total,
                                                                abs=1e-10)


class TestMarginals:
    def test_mixture_over_prior(self):
        rows = np.array([[0.2, 0.8], [0.6, 0.4]])
        bn = two_variable_bn(rows)
        marg = bn.first_vehicle_marginals()
        np.testing.assert_allclose(marg["rel_velocity"][0], [0.4, 0.6])

    def test_single_fore_velocity_bin_returns_row(self):
        bn = make_single_bin_bn()
        marg = bn.first_vehicle_marginals()
        np.testing.assert_allclose(marg["rel_velocity"],
                                   bn.cpts_["rel_velocity"])

    def test_marginals_normalized_for_random_cpts(self):
        rng = np.random.default_rng(8)
        raw = rng.random((2, 2)) + 0.1
        rows = raw / raw.sum(axis=1, keepdims=True)
        bn = two_variable_bn(rows)
        for var, dist in bn.first_vehicle_marginals().items():
            np.testing.assert_allclose(dist.sum(axis=1), 1.0, atol=1e-9)


class TestRoundTripFit:
    def test_fit_sample_round_trip(self):
        rows = np.array([[0.85, 0.15], [0.35, 0.65]])
        gen = two_variable_bn(rows)
        rng = np.random.default_rng(9)
        road = sm.RoadSpec(length=500.0)
        records = []
        for _ in range(50_000):
            scene = gen.sample(2, road, rng)
            records.extend(r for r in sm.scene_records(scene)
                           if r.fore_velocity is not None)
        refit = sm.SceneBayesNet(smoothing=0.0,
                                 discretization=gen.discretization_,
                                 parents=gen.parents_).fit(records)
        assert np.abs(refit.cpts_["rel_velocity"] - rows).max() < 0.02


class TestSerialization:
    def test_round_trip_is_byte_exact(self, fitted_bn, tmp_path):
        path1, path2 = tmp_path / "a.json", tmp_path / "b.json"
        fitted_bn.save(path1)
        sm.SceneBayesNet.load(path1).save(path2)
        assert path1.read_bytes() == path2.read_bytes()

    def test_round_trip_preserves_likelihoods(self, fitted_bn, tmp_path):
        path = tmp_path / "bn.json"
        fitted_bn.save(path)
        loaded = sm.SceneBayesNet.load(path)
        scene = fitted_bn.sample(3, sm.RoadSpec(length=1000.0),
                                 np.random.default_rng(10))
        assert loaded.log_likelihood(scene) == fitted_bn.log_likelihood(scene)

    def test_file_is_human_readable_json(self, fitted_bn, tmp_path):
        path = tmp_path / "bn.json"
        fitted_bn.save(path)
        data = json.loads(path.read_text())
        assert set(data["variables"]) == set(sm.VARIABLES)
        assert "cpts" in data and "edges" in data and "parents" in data


class TestRecordsFile:
    def test_write_read_round_trip(self, burn_in_records, tmp_path):
        path = tmp_path / "records.jsonl"
        sm.write_records(path, burn_in_records[:50], header={"seed": 1})
        loaded, header = sm.read_records(path)
        assert header == {"seed": 1}
        assert len(loaded) == 50
        assert loaded[0].fore_gap == burn_in_records[0].fore_gap

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(DataError):
            sm.read_records(path)
