"""Simulator: kinematics, collision detection, rollouts, burn-in."""

import io
import json
import math

import numpy as np
import pytest

from highway_risk import driver_models as dm
from highway_risk import scene_model as sm
from highway_risk import traffic_sim as ts


def locked_params(**overrides):
    """Driver that never updates its action (inattentive forever)."""
    base = dict(max_accel=4.0, desired_velocity=30.0, min_gap=2.0,
                time_headway=1.0, comfort_decel=3.0, politeness=0.3,
                safe_decel=2.0, advantage_threshold=0.3,
                p_lose_attention=0.0, p_regain_attention=0.0, attentive=False)
    base.update(overrides)
    return dm.DriverParams(**base)


def vehicle(position, velocity, params=None, length=4.0, width=2.0, lane=0):
    return sm.VehicleState(position=position, velocity=velocity, length=length,
                           width=width, lane=lane,
                           params=params or locked_params())


def closing_scene(gap=30.0, rear_v=10.0, lead_v=0.0):
    road = sm.RoadSpec(length=10_000.0)
    rear = vehicle(0.0, rear_v)
    lead = vehicle(gap + 4.0, lead_v)
    return sm.Scene(road=road, vehicles=[rear, lead])


class TestBicycleStep:
    def test_uniform_motion(self):
        pos, off, hdg, vel = ts.bicycle_step(0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.1)
        assert pos == pytest.approx(1.0, abs=1e-12)
        assert off == 0.0 and hdg == 0.0 and vel == 10.0

    def test_velocity_clamped_at_zero(self):
        _, _, _, vel = ts.bicycle_step(0.0, 0.0, 0.0, 0.0, -5.0, 0.0, 0.1)
        assert vel == 0.0

    def test_constant_acceleration_against_closed_form(self):
        # closed form: v(t) = a t, x(t) = a t^2 / 2; explicit Euler with the
        # old velocity on the right-hand side undershoots by a dt (n-1) n / 2
        pos = off = hdg = vel = 0.0
        for _ in range(50):
            pos, off, hdg, vel = ts.bicycle_step(pos, off, hdg, vel, 2.0, 0.0,
                                                 0.1)
        assert vel == pytest.approx(10.0, abs=1e-9)
        euler_distance = 2.0 * 0.1 ** 2 * 49 * 50 / 2
        assert pos == pytest.approx(euler_distance, abs=1e-9)   # 24.5 m
        assert 0.5 * 2.0 * 5.0 ** 2 == 25.0                     # exact value

    def test_heading_wraps(self):
        _, _, hdg, _ = ts.bicycle_step(0.0, 0.0, 3.14, 10.0, 0.0, 10.0, 0.1)
        assert -math.pi < hdg <= math.pi

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            ts.bicycle_step(0, 0, 0, 1, 0, 0, 0.0)


class TestDetectCollisions:
    def test_clear_gap(self):
        scene = closing_scene(gap=5.0)
        assert ts.detect_collisions(scene) == set()

    def test_bumper_overlap(self):
        road = sm.RoadSpec(length=1000.0)
        # fore vehicle rear bumper at 30.0, rear vehicle front bumper at 30.5
        rear = vehicle(28.5, 10.0)
        fore = vehicle(32.0, 10.0)
        scene = sm.Scene(road=road, vehicles=[rear, fore])
        assert ts.detect_collisions(scene) == {(0, 1)}

    def test_matches_brute_force_on_random_scenes(self):
        rng = np.random.default_rng(0)
        for circular in (False, True):
            road = sm.RoadSpec(length=200.0, circular=circular)
            for _ in range(50):
                n = rng.integers(2, 8)
                positions = np.sort(rng.uniform(0, 190, n))
                lengths = rng.uniform(3.5, 30.0, n)
                vehicles = [vehicle(p, 10.0, length=l)
                            for p, l in zip(positions, lengths)]
                scene = sm.Scene(road=road, vehicles=vehicles)
                brute = set()
                for i in range(n):
                    for j in range(i + 1, n):
                        d = abs(positions[j] - positions[i])
                        if circular:
                            d = min(d % 200.0, 200.0 - d % 200.0)
                        if d - (lengths[i] + lengths[j]) / 2 <= 0:
                            brute.add((i, j))
                assert ts.detect_collisions(scene) == brute

    def test_cross_lane_rectangles(self):
        road = sm.RoadSpec(length=1000.0, lane_count=2)
        a = vehicle(10.0, 10.0, lane=0)
        b = vehicle(10.0, 10.0, lane=1)
        scene = sm.Scene(road=road, vehicles=[a, b])
        # lanes 3.7 m apart, widths 2 m: no overlap
        assert ts.detect_collisions(scene) == set()
        b.lane_offset = -1.9  # slide toward lane 0
        assert ts.detect_collisions(scene) == {(0, 1)}


class TestRollout:
    def config(self, h, horizon=100):
        return ts.SimConfig(dt=0.1, horizon=horizon, window_start=h,
                            noise=False, errors=True)

    def test_empty_horizon(self):
        scene = closing_scene()
        res = ts.rollout(scene, 0, self.config(0, horizon=0),
                         np.random.default_rng(0))
        assert res.collision_step is None
        assert not res.collided_in_window

    def test_constant_closing_contact_time(self):
        # 30 m gap closing at 10 m/s -> contact at exactly 3.0 s (step 30)
        scene = closing_scene(gap=30.0, rear_v=10.0, lead_v=0.0)
        res = ts.rollout(scene, 0, self.config(h=20), np.random.default_rng(0))
        assert res.collision_step == 30
        assert res.partner == 1
        assert res.collided_in_window
        assert res.terminated_early

    def test_window_start_excludes_early_collision(self):
        scene = closing_scene(gap=30.0, rear_v=10.0, lead_v=0.0)
        res = ts.rollout(scene, 0, self.config(h=40), np.random.default_rng(0))
        assert res.collision_step == 30
        assert not res.collided_in_window
        assert res.terminated_early

    def test_non_ego_collision_does_not_terminate(self):
        road = sm.RoadSpec(length=10_000.0)
        # vehicles 1 and 2 collide; ego (0) cruises far behind
        ego = vehicle(0.0, 5.0)
        rear = vehicle(500.0, 20.0)
        lead = vehicle(530.0, 0.0)
        scene = sm.Scene(road=road, vehicles=[ego, rear, lead])
        res = ts.rollout(scene, 0, self.config(h=0, horizon=200),
                         np.random.default_rng(0))
        assert res.collision_step is None
        assert not res.collided_in_window

    def test_identical_seeds_identical_results(self, fitted_bn):
        scene = fitted_bn.sample(6, sm.RoadSpec(length=2000.0),
                                 np.random.default_rng(11))
        cfg = ts.SimConfig(horizon=150, window_start=50)
        a = ts.rollout(scene, 0, cfg, np.random.default_rng(5))
        b = ts.rollout(scene, 0, cfg, np.random.default_rng(5))
        assert a == b

    def test_trace_emission(self):
        scene = closing_scene(gap=30.0, rear_v=10.0, lead_v=0.0)
        buf = io.StringIO()
        res = ts.rollout(scene, 0, self.config(h=20), np.random.default_rng(0),
                         trace=buf)
        lines = [json.loads(line) for line in buf.getvalue().splitlines()]
        assert len(lines) == (res.collision_step + 1) * 2
        assert {rec["vehicle"] for rec in lines} == {0, 1}
        final = [rec for rec in lines if rec["step"] == res.collision_step]
        assert any(rec["collided"] for rec in final)
        # no state transitions applied after the terminal step
        assert max(rec["step"] for rec in lines) == res.collision_step

    def test_batch_matches_single_rollouts_when_deterministic(self):
        scene = closing_scene(gap=30.0, rear_v=10.0, lead_v=0.0)
        cfg = self.config(h=20)
        steps = ts.simulate_scene_batch([scene], 5, cfg,
                                        np.random.default_rng(0), 0)
        assert np.all(steps == 30)

    def test_first_collision_steps_shape_and_range(self, fitted_bn):
        scene = fitted_bn.sample(5, sm.RoadSpec(length=2000.0),
                                 np.random.default_rng(12))
        cfg = ts.SimConfig(horizon=100, window_start=0)
        first = ts.first_collision_steps(scene, 7, cfg,
                                         np.random.default_rng(1))
        assert first.shape == (7, 5)
        assert np.all((first >= -1) & (first <= 100))


class TestCircularRoad:
    def test_positions_stay_on_road(self):
        road = sm.RoadSpec(length=400.0, circular=True)
        scene = ts.burn_in_scene(road, 12, 300, np.random.default_rng(3))
        cfg = ts.SimConfig(horizon=200, window_start=100)
        first = ts.first_collision_steps(scene, 10, cfg,
                                         np.random.default_rng(4))
        assert first.shape == (10, 12)
        for v in scene.vehicles:
            assert 0 <= v.position < road.length

    def test_wrap_gap_collision_detected(self):
        road = sm.RoadSpec(length=100.0, circular=True)
        a = vehicle(1.0, 10.0)
        b = vehicle(99.0, 10.0)  # 2 m apart through the wrap, lengths 4
        scene = sm.Scene(road=road, vehicles=[a, b])
        assert ts.detect_collisions(scene) == {(0, 1)}


class TestBurnIn:
    def test_single_vehicle(self):
        road = sm.RoadSpec(length=200.0, circular=True)
        scene = ts.burn_in_scene(road, 1, 100, np.random.default_rng(0))
        assert len(scene) == 1
        assert not scene.vehicles[0].collided

    def test_zero_steps_returns_initialization(self):
        road = sm.RoadSpec(length=500.0, circular=True)
        scene = ts.burn_in_scene(road, 10, 0, np.random.default_rng(1))
        assert len(scene) == 10
        spacing = np.diff([v.position for v in scene.vehicles])
        assert np.all(spacing > 0)

    def test_seventy_vehicles_collision_free(self):
        road = sm.RoadSpec(length=70 * 30.0, circular=True)
        scene = ts.burn_in_scene(road, 70, 600, np.random.default_rng(2))
        assert len(scene) == 70
        assert ts.detect_collisions(scene) == set()
        records = sm.scene_records(scene)
        assert all(r.fore_gap > 0 for r in records)

    def test_infeasible_placement_rejected(self):
        road = sm.RoadSpec(length=50.0, circular=True)
        with pytest.raises(Exception):
            ts.burn_in_scene(road, 40, 10, np.random.default_rng(3))

    def test_aggressiveness_uniform(self):
        road = sm.RoadSpec(length=70 * 30.0, circular=True)
        scene = ts.burn_in_scene(road, 70, 0, np.random.default_rng(4))
        aggs = [v.params.aggressiveness for v in scene.vehicles]
        assert 0.0 <= min(aggs) and max(aggs) <= 1.0
        assert np.std(aggs) > 0.15  # spread consistent with uniform draws


class TestIdmEquilibrium:
    def test_follower_converges_to_preferred_gap(self):
        # leader starts exactly at its desired velocity -> stays constant;
        # follower equilibrium gap is (s0 + v T) / sqrt(1 - (v/v0)^4),
        # within 1% of s0 + v T for v well below the follower's v0
        road = sm.RoadSpec(length=100_000.0)
        leader_params = dm.DriverParams(
            max_accel=2.0, desired_velocity=8.0, min_gap=2.0,
            time_headway=1.0, comfort_decel=2.0, politeness=0.3,
            safe_decel=2.0, advantage_threshold=0.3, attentive=True)
        follower_params = dm.DriverParams(
            max_accel=2.0, desired_velocity=32.0, min_gap=2.0,
            time_headway=1.0, comfort_decel=2.0, politeness=0.3,
            safe_decel=2.0, advantage_threshold=0.3, attentive=True)
        follower = vehicle(0.0, 8.0, params=follower_params)
        leader = vehicle(34.0, 8.0, params=leader_params)
        scene = sm.Scene(road=road, vehicles=[follower, leader])
        cfg = ts.SimConfig(dt=0.1, horizon=3000, window_start=0, noise=False,
                           errors=False)
        first = ts.first_collision_steps(scene, 1, cfg,
                                         np.random.default_rng(0))
        assert np.all(first < 0)  # no contact on the way in
        # re-simulate while tracking the final gap
        state = ts._stack_scene_states([(scene, 1)])
        engine = ts._LaneEngine(road, cfg, state, np.random.default_rng(0))
        active = np.ones(1, dtype=bool)
        for _ in range(3000):
            fore_gap, fore_closing, _, _, _ = engine._geometry()
            engine._act_and_move(fore_gap, fore_closing, active)
        gap = (engine.s["position"][0, 1] - engine.s["position"][0, 0]
               - (engine.s["length"][0, 0] + engine.s["length"][0, 1]) / 2)
        target = 2.0 + 8.0 * 1.0
        assert abs(gap - target) / target < 0.01
