"""Ego-centric prediction features.

A feature vector describes one vehicle (the ego) and its K nearest same-lane
neighbors: physical state, well-behavedness indicators, and the full set of
behavioral parameters. Everything is relative, so the vector is invariant to
shifting the whole scene along the road.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .traffic_sim import detect_collisions
from .validation import DataError

DEFAULT_TTC_CAP = 30.0  # s; keeps diverging-traffic TTC bounded for the net

_PHYSICAL = (
    ("lane_offset", "m"),
    ("heading", "rad"),
    ("velocity", "m/s"),
    ("length", "m"),
    ("width", "m"),
    ("acceleration", "m/s^2"),
    ("turn_rate", "rad/s"),
    ("time_to_collision", "s"),
)
_INDICATORS = (
    ("colliding", "bool"),
    ("out_of_lane", "bool"),
    ("negative_velocity", "bool"),
)
_BEHAVIORAL = (
    ("max_accel", "m/s^2"),
    ("desired_velocity", "m/s"),
    ("min_gap", "m"),
    ("time_headway", "s"),
    ("comfort_decel", "m/s^2"),
    ("politeness", ""),
    ("safe_decel", "m/s^2"),
    ("advantage_threshold", "m/s^2"),
    ("reaction_time", "s"),
    ("p_lose_attention", ""),
    ("p_regain_attention", ""),
    ("aggressiveness", ""),
    ("attentive", "bool"),
)


@dataclass(frozen=True)
class FeatureEntry:
    name: str
    index: int
    unit: str
    group: str  # physical | indicator | behavioral


class FeatureSchema:
    """Fixed name-to-index mapping for feature vectors; serialized next to
    every dataset so downstream consumers can interpret columns."""

    def __init__(self, neighbor_count=2):
        self.neighbor_count = neighbor_count
        entries = []

        def add(prefix, fields, group):
            for name, unit in fields:
                entries.append(FeatureEntry(f"{prefix}{name}", len(entries),
                                            unit, group))

        add("ego.", _PHYSICAL, "physical")
        add("ego.", _INDICATORS, "indicator")
        add("ego.", _BEHAVIORAL, "behavioral")
        for k in range(neighbor_count):
            half = (neighbor_count + 1) // 2
            side = "fore" if k < half else "rear"
            rank = k if k < half else k - half
            prefix = f"{side}{rank}."
            add(prefix, _PHYSICAL, "physical")
            add(prefix, _BEHAVIORAL, "behavioral")
            entries.append(FeatureEntry(f"{prefix}relative_distance",
                                        len(entries), "m", "physical"))
            entries.append(FeatureEntry(f"{prefix}valid", len(entries),
                                        "bool", "indicator"))
        self.entries = tuple(entries)
        self.index = {e.name: e.index for e in entries}

    def __len__(self):
        return len(self.entries)

    def names(self):
        return [e.name for e in self.entries]

    def group_indices(self, group):
        return [e.index for e in self.entries if e.group == group]

    def to_json_dict(self):
        return {
            "neighbor_count": self.neighbor_count,
            "entries": [
                {"name": e.name, "index": e.index, "unit": e.unit, "group": e.group}
                for e in self.entries
            ],
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            data = json.load(f)
        schema = cls(neighbor_count=data["neighbor_count"])
        stored = [e["name"] for e in data["entries"]]
        if stored != schema.names():
            raise DataError("feature schema file does not match this layout")
        return schema

    def digest(self):
        payload = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def time_to_collision(gap, closing_speed, cap=DEFAULT_TTC_CAP):
    """Seconds until contact at the current closing speed, capped.

    Diverging or matched-speed traffic returns the cap; vehicles already in
    contact return 0.
    """
    if gap <= 0:
        return 0.0
    if closing_speed <= 0:
        return float(cap)
    return float(min(gap / closing_speed, cap))


def _neighbor_chain(scene, ego_index):
    """Indices of same-lane neighbors ordered fore-first then rear-first,
    with their bumper distances to the ego."""
    ego = scene.vehicles[ego_index]
    road = scene.road
    same_lane = [i for i, v in enumerate(scene.vehicles)
                 if i != ego_index and v.lane == ego.lane]
    fore, rear = [], []
    for i in same_lane:
        other = scene.vehicles[i]
        ahead = other.position - ego.position
        if road.circular:
            ahead = ahead % road.length
            behind = road.length - ahead
        else:
            behind = -ahead
        shared = (ego.length + other.length) / 2.0
        if road.circular:
            if ahead <= behind:
                fore.append((ahead - shared, i))
            else:
                rear.append((behind - shared, i))
        elif ahead > 0:
            fore.append((ahead - shared, i))
        else:
            rear.append((behind - shared, i))
    fore.sort()
    rear.sort()
    return fore, rear


def _vehicle_block(scene, idx, ttc_cap):
    v = scene.vehicles[idx]
    fore, _ = _neighbor_chain(scene, idx)
    if fore:
        gap, j = fore[0]
        closing = v.velocity - scene.vehicles[j].velocity
        ttc = time_to_collision(max(gap, 0.0), closing, ttc_cap) if gap > 0 else 0.0
    else:
        ttc = float(ttc_cap)
    p = v.params
    physical = [v.lane_offset, v.heading, v.velocity, v.length, v.width,
                v.accel, v.turn_rate, ttc]
    behavioral = [p.max_accel, p.desired_velocity, p.min_gap, p.time_headway,
                  p.comfort_decel, p.politeness, p.safe_decel,
                  p.advantage_threshold, p.reaction_time, p.p_lose_attention,
                  p.p_regain_attention, p.aggressiveness, float(p.attentive)]
    return physical, behavioral


def extract_features(scene, ego_index, schema=None, ttc_cap=DEFAULT_TTC_CAP):
    """Feature vector for one vehicle of a scene.

    Neighbor blocks fill nearest-fore-first then nearest-rear-first within
    the ego's lane; absent neighbors are zero-filled with a zero validity
    flag.
    """
    schema = schema or FeatureSchema()
    ego = scene.vehicles[ego_index]
    road = scene.road

    fore, rear = _neighbor_chain(scene, ego_index)
    if road.lane_count == 1:
        gaps = [g for g, _ in fore[:1]] + [g for g, _ in rear[:1]]
        colliding = any(g <= 0 for g in gaps)
    else:
        colliding = any(ego_index in pair for pair in detect_collisions(scene))
    out_of_lane = abs(ego.lane_offset) > (road.lane_width - ego.width) / 2.0
    negative_velocity = ego.velocity < 0

    physical, behavioral = _vehicle_block(scene, ego_index, ttc_cap)
    values = physical + [float(colliding), float(out_of_lane),
                         float(negative_velocity)] + behavioral

    half = (schema.neighbor_count + 1) // 2
    slots = [fore[i] if i < len(fore) else None for i in range(half)]
    slots += [rear[i] if i < len(rear) else None
              for i in range(schema.neighbor_count - half)]
    for slot in slots:
        if slot is None:
            values += [0.0] * (len(_PHYSICAL) + len(_BEHAVIORAL)) + [0.0, 0.0]
        else:
            gap, j = slot
            n_physical, n_behavioral = _vehicle_block(scene, j, ttc_cap)
            values += n_physical + n_behavioral + [max(gap, 0.0), 1.0]
    x = np.asarray(values, dtype=float)
    if len(x) != len(schema):
        raise DataError("feature vector does not match schema length")
    return x


def label_low_ttc(trace, ego_index, threshold=3.0, window=(100, 200)):
    """1 when the ego's time-to-collision drops below the threshold at any
    step of the window, judged from a trajectory trace.

    The trace is an iterable of per-(step, vehicle) records as emitted by the
    simulator. A trace that stops before the window's last step is acceptable
    only when it ends with the ego in a collision (the trajectory terminated);
    otherwise the trace does not cover the window and is an error.
    """
    start, end = window
    last_step = -1
    ego_collided_at = None
    hit = False
    for rec in trace:
        step = rec["step"]
        last_step = max(last_step, step)
        if rec["vehicle"] != ego_index:
            continue
        if rec.get("collided") and ego_collided_at is None:
            ego_collided_at = step
        if start <= step <= end:
            gap, closing = rec["fore_gap"], rec["fore_closing"]
            ttc = time_to_collision(gap, closing) if gap > 0 else 0.0
            if ttc < threshold:
                hit = True
    if last_step < end and ego_collided_at is None:
        raise DataError(
            f"trace ends at step {last_step} before the window end {end} "
            "without a terminating collision")
    if hit:
        return 1
    if ego_collided_at is not None and start <= ego_collided_at <= end:
        return 1
    return 0


def behavioral_correlation_curve(x, labels_by_horizon, schema):
    """Ratio of the strongest behavioral-feature correlation to the strongest
    overall correlation with the collision label, per horizon.

    Uses absolute Pearson correlation; constant features count as 0, and a
    horizon whose labels are constant yields a missing (None) point.
    """
    if len(labels_by_horizon) < 2:
        raise ValueError("need at least two horizons")
    x = np.asarray(x, dtype=float)
    behavioral = schema.group_indices("behavioral")
    xc = x - x.mean(axis=0)
    x_std = xc.std(axis=0)
    curve = []
    for h in sorted(labels_by_horizon):
        y = np.asarray(labels_by_horizon[h], dtype=float)
        yc = y - y.mean()
        y_std = yc.std()
        if y_std == 0:
            curve.append((h, None))
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = (xc * yc[:, None]).mean(axis=0) / (x_std * y_std)
        corr = np.abs(np.where(x_std > 0, corr, 0.0))
        overall = corr.max()
        if overall == 0:
            curve.append((h, None))
            continue
        curve.append((h, float(corr[behavioral].max() / overall)))
    return curve
