"""Time propagation of scenes: kinematics, collision detection, rollouts.

Scenes advance in fixed 0.1 s steps. Each step every driver produces a
longitudinal and lateral acceleration through the errorable pipeline
(reaction delay, attentiveness freeze, Gaussian action noise), vehicles move
under a kinematic bicycle model integrated with forward Euler, and contacts
are detected. A rollout tracks the ego vehicle: its first collision ends the
trajectory, and the trajectory scores 1 when that collision happens at or
after the window-start step.

Single-lane scenes run through a vectorized engine that simulates many
rollouts (possibly of many scenes) as one array program; multi-lane scenes
fall back to a per-vehicle path built from the scalar driver ops.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import driver_models
from .scene_model import RoadSpec, Scene, VehicleState  # noqa: F401  (re-exported)
from .validation import DataError, NumericalError, as_rng

TWO_PI = 2.0 * math.pi
VELOCITY_FLOOR_FOR_TURNING = 1.0  # m/s, keeps the yaw-rate mapping bounded


def wrap_angle(angle):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - angle, TWO_PI)


def bicycle_step(position, lane_offset, heading, velocity, accel_long, accel_lat, dt):
    """One forward-Euler step of the kinematic bicycle model.

    The lateral acceleration maps to a yaw rate through the current speed
    (floored at 1 m/s); velocity clamps at zero, so vehicles never reverse.
    Returns (position, lane_offset, heading, velocity).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    new_position = position + velocity * math.cos(heading) * dt
    new_offset = lane_offset + velocity * math.sin(heading) * dt
    turn_rate = accel_lat / max(velocity, VELOCITY_FLOOR_FOR_TURNING)
    new_heading = float(wrap_angle(heading + turn_rate * dt))
    new_velocity = max(velocity + accel_long * dt, 0.0)
    return new_position, new_offset, new_heading, new_velocity


@dataclass(frozen=True)
class SimConfig:
    """Rollout configuration; window_start is the first step at which a
    collision counts toward the trajectory label."""

    dt: float = 0.1
    horizon: int = 200
    window_start: int = 100
    noise: bool = True
    errors: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not (0 <= self.window_start <= self.horizon):
            raise ValueError("require 0 <= window_start <= horizon")


@dataclass(frozen=True)
class RolloutResult:
    """Outcome of one ego-centric rollout."""

    collision_step: int | None
    partner: int | None
    collided_in_window: bool
    terminated_early: bool


# ----------------------------------------------------------------------
# collision detection
# ----------------------------------------------------------------------

def _longitudinal_gap(scene, rear, fore):
    d = fore.position - rear.position
    if scene.road.circular:
        d = d % scene.road.length
        d = min(d, scene.road.length - d)
    else:
        d = abs(d)
    return d - (rear.length + fore.length) / 2.0


def _rect_axes(heading):
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, s], [-s, c]])


def _rects_overlap(center_a, half_a, heading_a, center_b, half_b, heading_b):
    """Separating-axis test for two oriented rectangles."""
    axes = np.vstack([_rect_axes(heading_a), _rect_axes(heading_b)])
    delta = np.asarray(center_b) - np.asarray(center_a)
    ext_a = np.array([half_a[0], half_a[1]])
    ext_b = np.array([half_b[0], half_b[1]])
    axes_a = _rect_axes(heading_a)
    axes_b = _rect_axes(heading_b)
    for axis in axes:
        ra = abs(axis @ axes_a[0]) * ext_a[0] + abs(axis @ axes_a[1]) * ext_a[1]
        rb = abs(axis @ axes_b[0]) * ext_b[0] + abs(axis @ axes_b[1]) * ext_b[1]
        if abs(axis @ delta) > ra + rb:
            return False
    return True


def detect_collisions(scene):
    """All colliding vehicle index pairs in a scene.

    Same-lane pairs collide when the bumper-to-bumper gap is <= 0 (wrap-around
    gaps on circular roads); cross-lane pairs when their oriented footprint
    rectangles overlap.
    """
    pairs = set()
    vehicles = scene.vehicles
    for i in range(len(vehicles)):
        for j in range(i + 1, len(vehicles)):
            a, b = vehicles[i], vehicles[j]
            if a.lane == b.lane:
                if _longitudinal_gap(scene, a, b) <= 0:
                    pairs.add((i, j))
            else:
                ca = (a.position, a.lane * scene.road.lane_width + a.lane_offset)
                cb = (b.position, b.lane * scene.road.lane_width + b.lane_offset)
                if _rects_overlap(ca, (a.length / 2, a.width / 2), a.heading,
                                  cb, (b.length / 2, b.width / 2), b.heading):
                    pairs.add((i, j))
    return pairs


# ----------------------------------------------------------------------
# vectorized single-lane engine
# ----------------------------------------------------------------------

_PARAM_FIELDS = ("max_accel", "desired_velocity", "min_gap", "time_headway",
                 "comfort_decel", "p_lose_attention", "p_regain_attention")


def _stack_scene_states(scene_reps):
    """Stack (scene, repetitions) pairs into (rows, L) state arrays."""
    blocks = {k: [] for k in ("position", "velocity", "lane_offset", "heading",
                              "length", "width", "attentive", "last_along",
                              "last_alat", *_PARAM_FIELDS)}
    for scene, reps in scene_reps:
        row = {
            "position": [v.position for v in scene.vehicles],
            "velocity": [v.velocity for v in scene.vehicles],
            "lane_offset": [v.lane_offset for v in scene.vehicles],
            "heading": [v.heading for v in scene.vehicles],
            "length": [v.length for v in scene.vehicles],
            "width": [v.width for v in scene.vehicles],
            "attentive": [v.params.attentive for v in scene.vehicles],
            "last_along": [v.accel for v in scene.vehicles],
            "last_alat": [v.turn_rate * max(v.velocity, VELOCITY_FLOOR_FOR_TURNING)
                          for v in scene.vehicles],
        }
        for f in _PARAM_FIELDS:
            row[f] = [getattr(v.params, f) for v in scene.vehicles]
        for k, vals in row.items():
            blocks[k].append(np.tile(np.asarray(vals, dtype=float), (reps, 1)))
    state = {k: np.vstack(v) for k, v in blocks.items()}
    state["attentive"] = state["attentive"].astype(bool)
    return state


class _LaneEngine:
    """Array simulator for single-lane scenes; rows are independent rollouts."""

    def __init__(self, road, config, state, rng):
        self.road = road
        self.cfg = config
        self.s = state
        self.rng = rng
        self.R, self.L = state["position"].shape
        if config.errors:
            self.delay = int(math.ceil(driver_models.REACTION_TIME / config.dt - 1e-12))
        else:
            self.delay = 0
        self.obs_ring = []

    # -- geometry ------------------------------------------------------

    def _geometry(self):
        """Fore gap/closing per vehicle plus per-vehicle contact flags."""
        pos, vel, length = self.s["position"], self.s["velocity"], self.s["length"]
        order = np.argsort(pos, axis=1, kind="stable")
        pos_s = np.take_along_axis(pos, order, 1)
        vel_s = np.take_along_axis(vel, order, 1)
        len_s = np.take_along_axis(length, order, 1)
        gap_next = pos_s[:, 1:] - pos_s[:, :-1] - (len_s[:, 1:] + len_s[:, :-1]) / 2.0
        closing_next = vel_s[:, :-1] - vel_s[:, 1:]
        if self.road.circular and self.L > 1:
            wrap_gap = (pos_s[:, 0] + self.road.length - pos_s[:, -1]
                        - (len_s[:, 0] + len_s[:, -1]) / 2.0)
            wrap_closing = vel_s[:, -1] - vel_s[:, 0]
            fore_gap_s = np.concatenate([gap_next, wrap_gap[:, None]], axis=1)
            fore_closing_s = np.concatenate([closing_next, wrap_closing[:, None]],
                                            axis=1)
        else:
            pad_gap = np.full((self.R, 1), driver_models.BIG_GAP)
            fore_gap_s = np.concatenate([gap_next, pad_gap], axis=1)
            fore_closing_s = np.concatenate([closing_next, np.zeros((self.R, 1))],
                                            axis=1)
        contact_fore_s = fore_gap_s <= 0.0
        contact_s = contact_fore_s.copy()
        contact_s[:, 1:] |= contact_fore_s[:, :-1]
        if self.road.circular and self.L > 1:
            contact_s[:, 0] |= contact_fore_s[:, -1]
        fore_gap = np.empty_like(pos)
        fore_closing = np.empty_like(pos)
        contact = np.empty((self.R, self.L), dtype=bool)
        np.put_along_axis(fore_gap, order, fore_gap_s, 1)
        np.put_along_axis(fore_closing, order, fore_closing_s, 1)
        np.put_along_axis(contact, order, contact_s, 1)
        return fore_gap, fore_closing, contact, order, contact_fore_s

    # -- one transition -------------------------------------------------

    def _act_and_move(self, fore_gap, fore_closing, active):
        s, cfg = self.s, self.cfg
        self.obs_ring.append((s["velocity"].copy(), fore_gap, fore_closing))
        if len(self.obs_ring) > self.delay + 1:
            self.obs_ring.pop(0)
        d_vel, d_gap, d_closing = self.obs_ring[0]

        if cfg.errors:
            att = driver_models.attentiveness_step_arrays(
                s["attentive"], s["p_lose_attention"], s["p_regain_attention"],
                self.rng)
        else:
            att = np.ones_like(s["attentive"])

        safe_gap = np.maximum(d_gap, 1e-6)
        idm = driver_models.idm_accel_arrays(
            s["max_accel"], s["desired_velocity"], s["min_gap"],
            s["time_headway"], s["comfort_decel"], d_vel, safe_gap, d_closing)
        along_cmd = np.where(d_gap <= 0.0, -s["max_accel"], idm)
        alat_cmd = np.zeros_like(along_cmd)
        if cfg.noise:
            along_cmd = along_cmd + self.rng.normal(
                0.0, driver_models.ACTION_NOISE_LONG, along_cmd.shape)
            alat_cmd = alat_cmd + self.rng.normal(
                0.0, driver_models.ACTION_NOISE_LAT, alat_cmd.shape)

        along = np.where(att, along_cmd, s["last_along"])
        alat = np.where(att, alat_cmd, s["last_alat"])

        dt = cfg.dt
        vel, hdg = s["velocity"], s["heading"]
        new_pos = s["position"] + vel * np.cos(hdg) * dt
        if self.road.circular:
            new_pos = np.mod(new_pos, self.road.length)
        new_off = s["lane_offset"] + vel * np.sin(hdg) * dt
        new_hdg = wrap_angle(
            hdg + alat / np.maximum(vel, VELOCITY_FLOOR_FOR_TURNING) * dt)
        new_vel = np.maximum(vel + along * dt, 0.0)

        keep = active[:, None]
        s["position"] = np.where(keep, new_pos, s["position"])
        s["velocity"] = np.where(keep, new_vel, s["velocity"])
        s["lane_offset"] = np.where(keep, new_off, s["lane_offset"])
        s["heading"] = np.where(keep, new_hdg, s["heading"])
        s["attentive"] = np.where(keep, att, s["attentive"])
        s["last_along"] = np.where(keep, along, s["last_along"])
        s["last_alat"] = np.where(keep, alat, s["last_alat"])

    # -- main loops ------------------------------------------------------

    def run_ego(self, ego_col):
        """Simulate until each row's ego vehicle first collides (or horizon);
        returns (collision_step, partner) arrays with -1 for none."""
        cfg = self.cfg
        ego_step = np.full(self.R, -1, dtype=int)
        ego_partner = np.full(self.R, -1, dtype=int)
        active = np.ones(self.R, dtype=bool)
        for k in range(cfg.horizon + 1):
            fore_gap, fore_closing, contact, order, contact_fore_s = self._geometry()
            hit = active & contact[:, ego_col]
            if np.any(hit):
                ego_step[hit] = k
                ego_partner[hit] = self._ego_partners(hit, ego_col, order,
                                                      contact_fore_s)
                active &= ~hit
            if k == cfg.horizon or not active.any():
                break
            self._check_finite(k)
            self._act_and_move(fore_gap, fore_closing, active)
        return ego_step, ego_partner

    def run_all(self):
        """Simulate the full horizon with no terminal states; returns the
        (rows, L) matrix of first contact steps (-1 for never)."""
        cfg = self.cfg
        first = np.full((self.R, self.L), -1, dtype=int)
        active = np.ones(self.R, dtype=bool)
        for k in range(cfg.horizon + 1):
            fore_gap, fore_closing, contact, _, _ = self._geometry()
            newly = contact & (first < 0)
            first[newly] = k
            if k == cfg.horizon:
                break
            self._check_finite(k)
            self._act_and_move(fore_gap, fore_closing, active)
        return first

    def _ego_partners(self, hit, ego_col, order, contact_fore_s):
        partners = []
        for r in np.nonzero(hit)[0]:
            row_order = order[r]
            slot = int(np.nonzero(row_order == ego_col)[0][0])
            partner = -1
            if contact_fore_s[r, slot]:
                partner = int(row_order[(slot + 1) % self.L])
            elif slot > 0 and contact_fore_s[r, slot - 1]:
                partner = int(row_order[slot - 1])
            elif self.road.circular and slot == 0 and contact_fore_s[r, self.L - 1]:
                partner = int(row_order[self.L - 1])
            partners.append(partner)
        return np.asarray(partners, dtype=int)

    def _check_finite(self, step):
        if not (np.all(np.isfinite(self.s["position"]))
                and np.all(np.isfinite(self.s["velocity"]))):
            raise NumericalError(f"non-finite vehicle state at step {step}")


def simulate_scene_batch(scenes, reps, config, rng, ego_index):
    """Ego first-collision steps for `reps` rollouts of each scene, as a
    (len(scenes), reps) array. All scenes must share the road and size."""
    road = scenes[0].road
    L = len(scenes[0])
    if any(len(s) != L or s.road != road for s in scenes):
        raise ValueError("batched scenes must share road and vehicle count")
    if road.lane_count != 1:
        steps = np.empty((len(scenes), reps), dtype=int)
        for i, scene in enumerate(scenes):
            for r in range(reps):
                res = _general_rollout(scene, ego_index, config, rng)
                steps[i, r] = -1 if res.collision_step is None else res.collision_step
        return steps
    state = _stack_scene_states([(s, reps) for s in scenes])
    engine = _LaneEngine(road, config, state, as_rng(rng))
    ego_step, _ = engine.run_ego(ego_index)
    return ego_step.reshape(len(scenes), reps)


def first_collision_steps(scene, n_rollouts, config, rng):
    """First contact step per (rollout, vehicle) with no terminal states;
    -1 where a vehicle never collides. Used for per-vehicle labeling."""
    if scene.road.lane_count != 1:
        raise NotImplementedError("per-vehicle labeling supports single-lane scenes")
    state = _stack_scene_states([(scene, n_rollouts)])
    engine = _LaneEngine(scene.road, config, state, as_rng(rng))
    return engine.run_all()


def low_ttc_labels(scene, config, rng, threshold=3.0):
    """Per-vehicle binary labels: 1 when a vehicle's time-to-collision drops
    below the threshold at any step inside the scoring window of a single
    shared trajectory (contact counts as zero TTC)."""
    if scene.road.lane_count != 1:
        raise NotImplementedError("low-TTC labeling supports single-lane scenes")
    state = _stack_scene_states([(scene, 1)])
    engine = _LaneEngine(scene.road, config, state, as_rng(rng))
    active = np.ones(1, dtype=bool)
    hit = np.zeros(engine.L, dtype=bool)
    for k in range(config.horizon + 1):
        fore_gap, fore_closing, contact, _, _ = engine._geometry()
        if k >= config.window_start:
            gap, closing = fore_gap[0], fore_closing[0]
            with np.errstate(divide="ignore", invalid="ignore"):
                ttc = np.where(closing > 0, gap / closing, np.inf)
            hit |= (gap <= 0) | (ttc < threshold)
        if k == config.horizon:
            break
        engine._act_and_move(fore_gap, fore_closing, active)
    return hit.astype(float)


def rollout(scene, ego_index, config, rng, trace=None):
    """Simulate one trajectory of a scene and report the ego outcome.

    The trajectory ends at the horizon or at the ego's first collision,
    whichever comes first; the result is positive only when that collision
    step is at or past the window start. An optional trace path receives one
    JSON line per (step, vehicle) while the trajectory is alive.
    """
    rng = as_rng(rng)
    if not (0 <= ego_index < len(scene)):
        raise ValueError(f"ego index {ego_index} out of range")
    if scene.road.lane_count != 1:
        return _general_rollout(scene, ego_index, config, rng, trace=trace)
    state = _stack_scene_states([(scene, 1)])
    engine = _LaneEngine(scene.road, config, state, rng)
    if trace is None:
        ego_step, partner = engine.run_ego(ego_index)
        return _result_from_step(int(ego_step[0]), int(partner[0]), config)
    with _open_trace(trace) as sink:
        return _traced_rollout(engine, ego_index, config, sink)


def _result_from_step(step, partner, config):
    if step < 0:
        return RolloutResult(None, None, False, False)
    return RolloutResult(
        collision_step=step,
        partner=partner if partner >= 0 else None,
        collided_in_window=step >= config.window_start,
        terminated_early=step < config.horizon,
    )


class _open_trace:
    def __init__(self, target):
        self.target = target
        self.handle = None
        self.owned = False

    def __enter__(self):
        if hasattr(self.target, "write"):
            self.handle = self.target
        else:
            self.handle = open(self.target, "w")
            self.owned = True
        return self.handle

    def __exit__(self, *exc):
        if self.owned:
            self.handle.close()
        return False


def _traced_rollout(engine, ego_index, config, sink):
    s = engine.s
    ego_step, partner = -1, -1
    for k in range(config.horizon + 1):
        fore_gap, fore_closing, contact, order, contact_fore_s = engine._geometry()
        for i in range(engine.L):
            sink.write(json.dumps({
                "step": k,
                "vehicle": i,
                "position": s["position"][0, i],
                "lane_offset": s["lane_offset"][0, i],
                "heading": s["heading"][0, i],
                "velocity": s["velocity"][0, i],
                "fore_gap": min(fore_gap[0, i], driver_models.BIG_GAP),
                "fore_closing": fore_closing[0, i],
                "accel": s["last_along"][0, i],
                "collided": bool(contact[0, i]),
            }) + "\n")
        if contact[0, ego_index]:
            ego_step = k
            partner = int(engine._ego_partners(
                np.array([True]), ego_index, order, contact_fore_s)[0])
            break
        if k == config.horizon:
            break
        engine._check_finite(k)
        engine._act_and_move(fore_gap, fore_closing, np.array([True]))
    return _result_from_step(ego_step, partner, config)


# ----------------------------------------------------------------------
# multi-lane fallback path
# ----------------------------------------------------------------------

def _lane_view(scene, idx, lane):
    """Nearest fore/rear neighbors of vehicle idx's slot in the given lane."""
    me = scene.vehicles[idx]
    road = scene.road
    fore_gap, fore_vel = driver_models.BIG_GAP, me.velocity
    rear_gap, rear_vel = driver_models.BIG_GAP, me.velocity
    for j, other in enumerate(scene.vehicles):
        if j == idx or other.lane != lane:
            continue
        ahead = other.position - me.position
        if road.circular:
            ahead = ahead % road.length
            behind = road.length - ahead
        else:
            behind = -ahead
        shared = (me.length + other.length) / 2.0
        if ahead >= 0 and ahead - shared < fore_gap:
            fore_gap, fore_vel = ahead - shared, other.velocity
        if behind >= 0 and behind - shared < rear_gap:
            rear_gap, rear_vel = behind - shared, other.velocity
    return driver_models.LaneView(fore_gap=fore_gap, fore_velocity=fore_vel,
                                  rear_gap=rear_gap, rear_velocity=rear_vel)


def _general_rollout(scene, ego_index, config, rng, trace=None):
    """Object-level rollout supporting multiple lanes and lane changes.

    Slower than the array engine; used when the road has more than one lane.
    """
    road = scene.road
    work = Scene(road=road, vehicles=[
        VehicleState(position=v.position, velocity=v.velocity, length=v.length,
                     width=v.width, params=v.params, lane=v.lane,
                     lane_offset=v.lane_offset, heading=v.heading,
                     accel=v.accel, turn_rate=v.turn_rate)
        for v in scene.vehicles
    ])
    states = [driver_models.DriverState(attentive=v.params.attentive,
                                        last_action=(v.accel, 0.0))
              for v in work.vehicles]
    targets = [None] * len(work.vehicles)

    for k in range(config.horizon + 1):
        colliding = detect_collisions(work)
        ego_hits = [p for p in colliding if ego_index in p]
        if ego_hits:
            i, j = ego_hits[0]
            return _result_from_step(k, j if i == ego_index else i, config)
        if k == config.horizon:
            break
        actions = []
        for i, v in enumerate(work.vehicles):
            view = _lane_view(work, i, v.lane)
            obs = driver_models.Observation(
                velocity=v.velocity, fore_gap=view.fore_gap,
                fore_closing=v.velocity - view.fore_velocity)
            action, states[i] = driver_models.errorable_step(
                states[i], v.params, obs, rng, dt=config.dt,
                noise=config.noise, errors=config.errors)
            along, alat = action
            if states[i].attentive and targets[i] is None and road.lane_count > 1:
                left = _lane_view(work, i, v.lane + 1) \
                    if v.lane + 1 < road.lane_count else None
                right = _lane_view(work, i, v.lane - 1) if v.lane > 0 else None
                decision = driver_models.mobil_decide(
                    v.params, v.velocity, v.length,
                    _lane_view(work, i, v.lane), left, right)
                if decision == "left":
                    targets[i] = v.lane + 1
                elif decision == "right":
                    targets[i] = v.lane - 1
            if targets[i] is not None:
                goal = (targets[i] - v.lane) * road.lane_width
                lateral_vel = v.velocity * math.sin(v.heading)
                alat += np.clip(0.4 * (goal - v.lane_offset) - 1.2 * lateral_vel,
                                -2.5, 2.5)
            actions.append((along, alat))
        for i, (v, (along, alat)) in enumerate(zip(work.vehicles, actions)):
            pos, off, hdg, vel = bicycle_step(
                v.position, v.lane_offset, v.heading, v.velocity, along, alat,
                config.dt)
            if road.circular:
                pos = pos % road.length
            v.position, v.lane_offset, v.heading, v.velocity = pos, off, hdg, vel
            v.accel = along
            v.turn_rate = alat / max(vel, VELOCITY_FLOOR_FOR_TURNING)
            if not (math.isfinite(pos) and math.isfinite(vel)):
                raise NumericalError(f"non-finite vehicle state at step {k + 1}")
            if targets[i] is not None:
                goal = (targets[i] - v.lane) * road.lane_width
                if abs(v.lane_offset - goal) < 0.1:
                    v.lane_offset -= goal
                    v.lane = targets[i]
                    targets[i] = None
    return RolloutResult(None, None, False, False)


# ----------------------------------------------------------------------
# burn-in scene generation
# ----------------------------------------------------------------------

def burn_in_scene(road, num_vehicles, burn_in_steps, rng, config=None):
    """Heuristic scene generation: vehicles at jittered equal spacing with
    uniform aggressiveness, simulated for a burn-in period during which
    contacts are resolved by separation instead of ending the run.

    A colliding rear vehicle is reset to its fore vehicle's velocity with the
    gap reopened to its preferred standstill distance plus one meter.
    """
    rng = as_rng(rng)
    config = config or SimConfig(noise=True, errors=True,
                                 horizon=burn_in_steps, window_start=0)
    slot = road.length / num_vehicles
    lengths = rng.uniform(3.9, 5.3, num_vehicles)
    if slot < lengths.max() + 2.0:
        raise DataError(
            f"cannot place {num_vehicles} vehicles on a {road.length:.0f} m road")
    widths = np.clip(1.4 + 0.1 * lengths + rng.uniform(-0.1, 0.1, num_vehicles),
                     1.5, 2.6)
    jitter_span = 0.3 * (slot - lengths.max() - 1.0)
    positions = (np.arange(num_vehicles) * slot
                 + rng.uniform(-jitter_span, jitter_span, num_vehicles))
    positions -= positions.min()
    velocities = rng.uniform(20.0, 35.0, num_vehicles)
    agg = rng.uniform(0.0, 1.0, num_vehicles)
    stationary_attentive = (driver_models.P_REGAIN_ATTENTION
                            / (driver_models.P_REGAIN_ATTENTION
                               + driver_models.P_LOSE_ATTENTION))
    attentive = rng.random(num_vehicles) < stationary_attentive
    draws = driver_models.sample_driver_params_batch(agg, rng)

    state = {
        "position": positions[None, :].astype(float),
        "velocity": velocities[None, :],
        "lane_offset": np.zeros((1, num_vehicles)),
        "heading": np.zeros((1, num_vehicles)),
        "length": lengths[None, :],
        "width": widths[None, :],
        "attentive": attentive[None, :],
        "last_along": np.zeros((1, num_vehicles)),
        "last_alat": np.zeros((1, num_vehicles)),
    }
    for f in _PARAM_FIELDS:
        if f in draws:
            state[f] = draws[f][None, :]
    state["p_lose_attention"] = np.full((1, num_vehicles),
                                        driver_models.P_LOSE_ATTENTION)
    state["p_regain_attention"] = np.full((1, num_vehicles),
                                          driver_models.P_REGAIN_ATTENTION)

    engine = _LaneEngine(road, config, state, rng)
    active = np.ones(1, dtype=bool)
    for k in range(burn_in_steps):
        fore_gap, fore_closing, contact, order, contact_fore_s = engine._geometry()
        if np.any(contact_fore_s[0]):
            _separate(engine, road)
            fore_gap, fore_closing, contact, order, contact_fore_s = engine._geometry()
        engine._act_and_move(fore_gap, fore_closing, active)
    _separate(engine, road)

    s = engine.s
    order = np.argsort(s["position"][0], kind="stable")
    vehicles = []
    for i in order:
        params = driver_models.DriverParams(
            **{f: float(draws[f][i]) for f in driver_models.PARAM_RANGE},
            aggressiveness=float(agg[i]),
            attentive=bool(s["attentive"][0, i]),
        )
        vel = float(s["velocity"][0, i])
        vehicles.append(VehicleState(
            position=float(s["position"][0, i]),
            velocity=vel,
            length=float(lengths[i]),
            width=float(widths[i]),
            params=params,
            lane_offset=float(s["lane_offset"][0, i]),
            heading=float(s["heading"][0, i]),
            accel=float(s["last_along"][0, i]),
            turn_rate=float(s["last_alat"][0, i])
            / max(vel, VELOCITY_FLOOR_FOR_TURNING),
        ))
    return Scene(road=road, vehicles=vehicles)


def _separate(engine, road):
    """Resolve contacts by pulling rear vehicles back to a safe gap."""
    s = engine.s
    n = s["position"].shape[1]
    for _ in range(n):
        moved = False
        pos, length = s["position"][0], s["length"][0]
        row_order = np.argsort(pos, kind="stable")
        for slot in range(n - 1, -1, -1):
            i = row_order[slot]
            j = row_order[(slot + 1) % n]
            if slot == n - 1 and not road.circular:
                continue
            fore_pos = pos[j] + (road.length if slot == n - 1 else 0.0)
            gap = fore_pos - pos[i] - (length[i] + length[j]) / 2.0
            if gap <= 0:
                desired = s["min_gap"][0, i] + 1.0
                pos[i] = fore_pos - (length[i] + length[j]) / 2.0 - desired
                s["velocity"][0, i] = s["velocity"][0, j]
                moved = True
        if road.circular:
            s["position"][0] = np.mod(s["position"][0], road.length)
        if not moved:
            break
