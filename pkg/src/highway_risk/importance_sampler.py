"""Proposal-based scene sampling and cross-entropy proposal learning.

Only one vehicle per scene (the ego) is drawn from the proposal network; the
rest follow the natural scene model, so the likelihood ratio reduces to the
ego's conditional probability under the natural model over its probability
under the proposal. The cross-entropy loop scores sampled scenes by their
window-collision rate, refits the proposal's ego tables on the elite set,
and blends the refit into the current proposal.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .scene_model import RoadSpec, VehicleRecord, place_chain
from .traffic_sim import SimConfig, simulate_scene_batch
from .risk_estimator import window_outcomes
from .validation import DataError, as_rng, subseed, substream


@dataclass(frozen=True)
class CemConfig:
    """Cross-entropy optimization settings."""

    population: int = 200
    rollouts_per_candidate: int = 20
    elite_fraction: float = 0.1
    blend: float = 0.7              # weight of the elite refit in each update
    smoothing: float = 1.0          # pseudo-count for the elite refit
    max_iterations: int = 30
    window: tuple = (100, 200)      # scoring window in steps
    ego_index: int = 0              # rear-most vehicle by default
    num_vehicles: int = 5
    road: RoadSpec = field(default_factory=lambda: RoadSpec(length=2000.0))
    dt: float = 0.1
    noise: bool = True
    errors: bool = True
    stop_prob: float | None = None  # stop early past this collision probability

    def __post_init__(self):
        if not (0.0 < self.elite_fraction <= 1.0):
            raise ValueError("elite fraction must lie in (0, 1]")
        if int(self.population * self.elite_fraction) < 1:
            raise ValueError("elite fraction must yield at least one elite")
        if not (0.0 < self.blend <= 1.0):
            raise ValueError("blend must lie in (0, 1]")
        if self.smoothing < 0:
            raise ValueError("smoothing must be >= 0")

    def sim_config(self):
        start, horizon = self.window
        return SimConfig(dt=self.dt, horizon=horizon, window_start=start,
                         noise=self.noise, errors=self.errors)


@dataclass
class CemIterationRecord:
    iteration: int
    collision_prob: float
    attentive_rate: float
    mean_aggressiveness: float
    mean_rel_velocity: float
    degenerate: bool = False


@dataclass
class CemHistory:
    records: list = field(default_factory=list)

    def collision_probs(self):
        return [r.collision_prob for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "collision_prob", "attentive_rate",
                             "mean_aggressiveness", "mean_rel_velocity",
                             "degenerate"])
            for r in self.records:
                writer.writerow([r.iteration, repr(r.collision_prob),
                                 repr(r.attentive_rate),
                                 repr(r.mean_aggressiveness),
                                 repr(r.mean_rel_velocity), int(r.degenerate)])


def check_shared_structure(scene_bn, proposal):
    if scene_bn.parents_ != proposal.parents_:
        raise DataError("proposal and scene model use different dependency maps")
    a, b = scene_bn.discretization_, proposal.discretization_
    for var, edges in a.edges.items():
        if not np.array_equal(edges, b.edges[var]):
            raise DataError(f"proposal bins differ from the scene model on '{var}'")


def check_support(scene_bn, proposal):
    """The proposal must give positive probability wherever the natural model
    does, otherwise importance weights are unbounded."""
    for var, rows in scene_bn.cpts_.items():
        bad = (rows > 0) & (proposal.cpts_[var] <= 0)
        if np.any(bad):
            raise DataError(f"proposal has zero mass on supported bins of '{var}'")


def sample_with_proposal(scene_bn, proposal, ego_index, num_vehicles, road, rng):
    """Sample a scene with the ego vehicle drawn from the proposal.

    Returns (scene, weight) where the weight is the natural model's
    conditional probability of the ego's bin assignment over the proposal's,
    both conditioned on the realized fore-velocity bin.
    """
    if not (0 <= ego_index < num_vehicles):
        raise ValueError(f"ego index {ego_index} out of range")
    rng = as_rng(rng)
    spec = scene_bn.discretization_
    ego_chain_pos = num_vehicles - 1 - ego_index  # chain runs front to rear

    chain = []
    weight = 1.0
    fore_velocity_bin = None
    fore_velocity_value = None
    for c in range(num_vehicles):
        if c == 0:
            fore_velocity_bin = int(np.searchsorted(
                np.cumsum(scene_bn.fore_velocity_prior_), rng.random(),
                side="right"))
            fore_velocity_value = spec.sample_value(
                "fore_velocity", fore_velocity_bin, rng)
        use_proposal = c == ego_chain_pos
        cpts = proposal.cpts_ if use_proposal else scene_bn.cpts_
        bins, values = scene_bn.sample_vehicle(fore_velocity_bin, rng, cpts=cpts)
        if use_proposal:
            log_p = scene_bn.vehicle_log_prob(bins, fore_velocity_bin)
            log_q = scene_bn.vehicle_log_prob(bins, fore_velocity_bin,
                                              cpts=proposal.cpts_)
            if not np.isfinite(log_q):
                raise DataError("proposal assigned zero probability to a drawn bin")
            weight = float(np.exp(log_p - log_q))
        velocity = max(fore_velocity_value + values["rel_velocity"], 0.0)
        chain.append((VehicleRecord(
            fore_gap=values["fore_gap"],
            fore_velocity=fore_velocity_value,
            rel_velocity=values["rel_velocity"],
            length=values["length"],
            width=values["width"],
            attentive=int(values["attentive"]),
            aggressiveness=values["aggressiveness"],
            bins=bins,
        ), velocity))
        fore_velocity_value = velocity
        fore_velocity_bin = spec.bin_of_clamped("fore_velocity", velocity)
    return place_chain(chain, road, rng), weight


def cem_iteration(proposal, scene_bn, config, seed):
    """One cross-entropy update; returns (new proposal, iteration record).

    Candidates are scored by the fraction of their rollouts containing an
    ego collision inside the window. The elite set is the top elite-fraction
    by score (ties resolved by candidate index); when every score is zero the
    whole population is used and the record is flagged degenerate.
    """
    sim_cfg = config.sim_config()
    scenes, ego_bins, ego_values = [], [], []
    for i in range(config.population):
        rng = substream(seed, "candidate", i)
        scene, _ = sample_with_proposal(
            scene_bn, proposal, config.ego_index, config.num_vehicles,
            config.road, rng)
        scenes.append(scene)
        record = scene.vehicles[config.ego_index].record
        ego_bins.append(record.bins)
        ego_values.append(record)

    steps = simulate_scene_batch(scenes, config.rollouts_per_candidate, sim_cfg,
                                 substream(seed, "score"), config.ego_index)
    scores = window_outcomes(steps, sim_cfg).mean(axis=1)

    degenerate = bool(np.all(scores == 0))
    if degenerate:
        elite_idx = np.arange(config.population)
    else:
        n_elite = max(1, int(config.population * config.elite_fraction))
        elite_idx = np.argsort(-scores, kind="stable")[:n_elite]

    updates = {}
    for var in scene_bn.order_:
        old_rows = proposal.cpts_[var]
        counts = np.zeros_like(old_rows)
        parent = scene_bn.parents_[var]
        for i in elite_idx:
            bins = ego_bins[i]
            row = 0 if parent is None else bins[parent]
            counts[row, bins[var]] += 1.0
        # pseudo-counts only where the natural model has support, so the
        # proposal never drifts onto assignments with zero importance weight
        support = (scene_bn.cpts_[var] > 0).astype(float)
        smoothed = counts + config.smoothing * support
        totals = smoothed.sum(axis=1, keepdims=True)
        uniform = support / np.maximum(support.sum(axis=1, keepdims=True), 1.0)
        fit = np.divide(smoothed, totals, out=uniform, where=totals > 0)
        updates[var] = config.blend * fit + (1.0 - config.blend) * old_rows

    new_proposal = proposal.with_cpts(updates)
    record = CemIterationRecord(
        iteration=-1,  # assigned by the caller
        collision_prob=float(scores.mean()),
        attentive_rate=float(np.mean([r.attentive for r in ego_values])),
        mean_aggressiveness=float(np.mean([r.aggressiveness for r in ego_values])),
        mean_rel_velocity=float(np.mean([r.rel_velocity for r in ego_values])),
        degenerate=degenerate,
    )
    return new_proposal, record


def run_cem(scene_bn, config, seed):
    """Learn a collision-seeking proposal starting from the scene model.

    Iterates until the iteration budget is exhausted or the measured
    window-collision probability exceeds the configured stopping threshold.
    Returns the proposal and the per-iteration history.
    """
    check_support(scene_bn, scene_bn)
    proposal = scene_bn
    history = CemHistory()
    for it in range(config.max_iterations):
        proposal, record = cem_iteration(proposal, scene_bn, config,
                                         subseed(seed, "iteration", it))
        record.iteration = it
        history.records.append(record)
        if config.stop_prob is not None and record.collision_prob >= config.stop_prob:
            break
    return proposal, history
