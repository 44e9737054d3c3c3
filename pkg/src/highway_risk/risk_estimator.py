"""Monte Carlo risk estimation and weighted dataset assembly.

A scene's risk is the fraction of simulated trajectories in which the ego
vehicle collides inside the scoring window. Datasets pair each evaluated
scene's ego feature vector with that risk estimate and an importance weight
(1 when scenes come straight from the natural scene distribution).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import features as features_mod
from .traffic_sim import first_collision_steps, simulate_scene_batch
from .validation import DataError, as_rng, substream

# scenes per simulation chunk; fixed by configuration (never by thread count)
# so results are independent of execution order and parallelism
DEFAULT_CHUNK_SCENES = 200


@dataclass(frozen=True)
class RiskEstimate:
    """Monte Carlo estimate of a scene's window-collision probability."""

    p_hat: float
    n: int
    stderr: float

    @classmethod
    def from_outcomes(cls, outcomes):
        outcomes = np.asarray(outcomes, dtype=float)
        n = outcomes.size
        p = float(outcomes.sum() / n)
        return cls(p_hat=p, n=n, stderr=float(np.sqrt(p * (1.0 - p) / n)))


@dataclass
class WeightedSample:
    """One dataset row: features, risk label, importance weight, provenance."""

    x: np.ndarray
    y: float
    w: float
    domain: str
    scene_id: int
    ego_id: int
    collision_steps: list = field(default=None, compare=False)

    def __post_init__(self):
        if self.w <= 0:
            raise ValueError("importance weight must be positive")
        if not (0.0 <= self.y <= 1.0):
            raise ValueError("label must lie in [0, 1]")


def window_outcomes(steps, config):
    """Binary window-collision outcomes from first-collision step indices
    (-1 meaning no collision)."""
    steps = np.asarray(steps)
    return (steps >= config.window_start) & (steps >= 0)


def estimate_risk(scene, ego_index, n, config, seed):
    """Estimate a scene's ego collision risk from n independent rollouts."""
    if n < 1:
        raise ValueError("need at least one rollout")
    rng = as_rng(seed)
    try:
        steps = simulate_scene_batch([scene], n, config, rng, ego_index)
    except NumericalError as e:
        raise NumericalError(f"{e} (while estimating risk over {n} rollouts)")
    return RiskEstimate.from_outcomes(window_outcomes(steps[0], config))


def build_dataset(scene_bn, proposal, num_scenes, num_vehicles, road, config,
                  seed, ego_index=0, n_rollouts=100, domain="source",
                  schema=None, chunk_scenes=DEFAULT_CHUNK_SCENES, first_scene=0):
    """Sample scenes, estimate each one's ego risk, and return weighted rows.

    Scenes come from the natural scene model, or — when a proposal network is
    given — with the ego vehicle's features drawn from the proposal and
    weighted by the natural-to-proposal likelihood ratio. Simulation runs in
    fixed-size scene chunks with one RNG stream per chunk, keyed by global
    scene indices so chunked and parallel executions agree.
    """
    from .importance_sampler import sample_with_proposal  # local: avoids cycle

    schema = schema or features_mod.FeatureSchema()
    samples = []
    for start in range(first_scene, first_scene + num_scenes, chunk_scenes):
        count = min(chunk_scenes, first_scene + num_scenes - start)
        scenes, weights = [], []
        for i in range(start, start + count):
            rng = substream(seed, "scene", i)
            if proposal is None:
                scenes.append(scene_bn.sample(num_vehicles, road, rng))
                weights.append(1.0)
            else:
                scene, w = sample_with_proposal(
                    scene_bn, proposal, ego_index, num_vehicles, road, rng)
                scenes.append(scene)
                weights.append(w)
        steps = simulate_scene_batch(
            scenes, n_rollouts, config, substream(seed, "sim", start), ego_index)
        outcomes = window_outcomes(steps, config)
        for offset, (scene, w) in enumerate(zip(scenes, weights)):
            x = features_mod.extract_features(scene, ego_index, schema=schema)
            samples.append(WeightedSample(
                x=x,
                y=float(outcomes[offset].mean()),
                w=float(w),
                domain=domain,
                scene_id=start + offset,
                ego_id=ego_index,
                collision_steps=[int(s) for s in steps[offset]],
            ))
    return samples


def scene_samples_all_vehicles(scene, scene_id, config, seed, n_rollouts=100,
                               domain="target", schema=None):
    """One weighted sample per vehicle of a scene, from shared rollouts.

    All rollouts run the full horizon with no terminal states; each vehicle's
    label is the fraction of rollouts whose first contact involving it falls
    inside the window. Per-vehicle rows all carry unit weight (per-vehicle
    importance weights are undefined under a proposal, so this path is
    restricted to proposal-free data).
    """
    schema = schema or features_mod.FeatureSchema()
    steps = first_collision_steps(scene, n_rollouts, config, as_rng(seed))
    outcomes = window_outcomes(steps, config)
    samples = []
    for i in range(len(scene)):
        x = features_mod.extract_features(scene, i, schema=schema)
        samples.append(WeightedSample(
            x=x,
            y=float(outcomes[:, i].mean()),
            w=1.0,
            domain=domain,
            scene_id=scene_id,
            ego_id=i,
            collision_steps=[int(s) for s in steps[:, i]],
        ))
    return samples


def unconditional_collision_prob(samples):
    """Importance-sampled estimate of the overall window-collision
    probability: the mean of w * y over the dataset."""
    if not samples:
        raise DataError("cannot estimate a collision probability from no samples")
    return float(np.mean([s.w * s.y for s in samples]))


def weighted_estimate_stderr(samples):
    values = np.asarray([s.w * s.y for s in samples])
    return float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0


# ----------------------------------------------------------------------
# dataset files: one JSON object per line, header first
# ----------------------------------------------------------------------

def write_dataset(path, samples, header=None, schema=None, mode="w"):
    """Write samples as line-delimited JSON with a header line; appendable
    with mode='a' (the header is only written for a fresh file)."""
    with open(path, mode) as f:
        if mode == "w":
            f.write(json.dumps({"kind": "weighted-samples",
                                "header": header or {}}) + "\n")
        for s in samples:
            row = {
                "x": [float(v) for v in s.x],
                "y": s.y,
                "w": s.w,
                "domain": s.domain,
                "scene_id": s.scene_id,
                "ego_id": s.ego_id,
            }
            if s.collision_steps is not None:
                row["collision_steps"] = s.collision_steps
            f.write(json.dumps(row) + "\n")
    if schema is not None and mode == "w":
        schema.save(str(path) + ".schema.json")


def read_dataset(path):
    """Read a dataset file; returns (samples, header)."""
    samples = []
    header = {}
    with open(path) as f:
        first = f.readline()
        if not first:
            raise DataError(f"dataset file {path} is empty")
        head = json.loads(first)
        if head.get("kind") != "weighted-samples":
            raise DataError(f"{path} is not a weighted-sample dataset")
        header = head.get("header", {})
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            samples.append(WeightedSample(
                x=np.asarray(row["x"], dtype=float),
                y=float(row["y"]),
                w=float(row["w"]),
                domain=row["domain"],
                scene_id=int(row["scene_id"]),
                ego_id=int(row["ego_id"]),
                collision_steps=row.get("collision_steps"),
            ))
    return samples, header
