"""Experiment configuration and the end-to-end pipeline stages.

The full experiment: generate the artificial target domain by burn-in
simulation, fit the scene model to its vehicle records, learn a
collision-seeking proposal, build the weighted source dataset, train the
four predictor variants across a sweep of target positive-risk counts, and
emit report tables. Every stage derives its randomness from the master seed
and embeds the resolved configuration in its output files, so a rerun with
one seed reproduces every artifact byte for byte.
"""

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import yaml

from . import features as features_mod
from . import metrics as metrics_mod
from . import predictor as predictor_mod
from . import risk_estimator as risk_mod
from . import scene_model as scene_mod
from . import traffic_sim as sim_mod
from .importance_sampler import CemConfig
from .validation import DataError, subseed, substream


@dataclass(frozen=True)
class TargetConfig:
    """Artificial real-world data protocol."""

    train_scenes: int = 10
    validation_scenes: int = 6
    vehicles: int = 70
    burn_in_steps: int = 600
    rollouts: int = 100
    spacing: float = 24.0  # road meters per vehicle


@dataclass(frozen=True)
class SourceConfig:
    num_scenes: int = 2000
    vehicles: int = 20
    rollouts: int = 100
    road_length: float = 4000.0
    # fraction of scenes whose ego is drawn from the proposal; the rest come
    # straight from the natural scene model with unit weight
    proposal_fraction: float = 0.5


@dataclass(frozen=True)
class SweepConfig:
    """Predictor comparison across methods and target positive-risk counts."""

    methods: tuple = predictor_mod.VARIANTS
    positive_counts: tuple = (1, 3, 10)
    networks_per_method: int = 5
    epochs: int = 25
    batch_size: int = 64
    adversarial_weight: float = 0.5
    grid: tuple = (
        {"encoder": (128, 64), "classifier": (), "learning_rate": 1e-3,
         "dropout_keep": 1.0},
        {"encoder": (128, 64), "classifier": (64,), "learning_rate": 3e-4,
         "dropout_keep": 1.0},
        {"encoder": (256, 128, 64), "classifier": (), "learning_rate": 3e-4,
         "dropout_keep": 1.0},
        {"encoder": (128, 64), "classifier": (), "learning_rate": 3e-4,
         "dropout_keep": 0.8},
    )

    def __post_init__(self):
        if list(self.positive_counts) != sorted(self.positive_counts):
            raise ValueError("positive counts must be non-decreasing")
        for m in self.methods:
            if m not in predictor_mod.VARIANTS:
                raise ValueError(f"unknown method '{m}'")


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    n_bins: int = 8
    smoothing: float = 1.0
    sim: sim_mod.SimConfig = field(default_factory=sim_mod.SimConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    cem: CemConfig = field(default_factory=lambda: CemConfig(
        population=1200, rollouts_per_candidate=10, elite_fraction=0.05,
        max_iterations=15, num_vehicles=20,
        road=scene_mod.RoadSpec(length=4000.0)))
    sweep: SweepConfig = field(default_factory=SweepConfig)
    neighbor_count: int = 2

    def target_road(self):
        return scene_mod.RoadSpec(
            length=self.target.vehicles * self.target.spacing, circular=True)

    def source_road(self):
        return scene_mod.RoadSpec(length=self.source.road_length, circular=False)

    def to_dict(self):
        return asdict(self)


def _merge_dataclass(cls, data, **overrides):
    if data is None:
        data = {}
    kwargs = dict(data)
    kwargs.update(overrides)
    return cls(**kwargs)


def load_config(path=None, seed=None):
    """Build an ExperimentConfig from a YAML file plus optional seed override."""
    data = {}
    if path is not None:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    cfg = ExperimentConfig(
        master_seed=data.get("master_seed", 0),
        n_bins=data.get("n_bins", 8),
        smoothing=data.get("smoothing", 1.0),
        sim=_merge_dataclass(sim_mod.SimConfig, data.get("sim")),
        target=_merge_dataclass(TargetConfig, data.get("target")),
        source=_merge_dataclass(SourceConfig, data.get("source")),
        cem=_load_cem(data.get("cem")),
        sweep=_load_sweep(data.get("sweep")),
        neighbor_count=data.get("neighbor_count", 2),
    )
    if seed is not None:
        cfg = replace(cfg, master_seed=int(seed))
    return cfg


def _load_cem(data):
    defaults = ExperimentConfig.__dataclass_fields__["cem"].default_factory()
    if not data:
        return defaults
    data = dict(data)
    road = data.pop("road", None)
    if road is not None:
        data["road"] = scene_mod.RoadSpec(**road)
    if "window" in data:
        data["window"] = tuple(data["window"])
    merged = asdict(defaults)
    merged["road"] = defaults.road
    merged.update(data)
    if isinstance(merged["road"], dict):
        merged["road"] = scene_mod.RoadSpec(**merged["road"])
    merged["window"] = tuple(merged["window"])
    return CemConfig(**merged)


def _load_sweep(data):
    if not data:
        return SweepConfig()
    data = dict(data)
    for key in ("methods", "positive_counts"):
        if key in data:
            data[key] = tuple(data[key])
    if "grid" in data:
        grid = []
        for point in data["grid"]:
            point = dict(point)
            for k in ("encoder", "classifier"):
                if k in point:
                    point[k] = tuple(point[k])
            grid.append(point)
        data["grid"] = tuple(grid)
    return SweepConfig(**data)


def provenance(config, seed=None, **extra):
    head = {"config": config.to_dict(),
            "master_seed": config.master_seed if seed is None else seed}
    head.update(extra)
    return head


def write_csv(path, columns, rows, header=None):
    """Deterministic CSV writer; provenance goes into leading comment lines."""
    with open(path, "w", newline="") as f:
        if header:
            f.write("# " + json.dumps(header, sort_keys=True) + "\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def _format_cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ----------------------------------------------------------------------
# pipeline stages
# ----------------------------------------------------------------------

def _target_scene_job(args):
    (config_dict, scene_id, master_seed, label_mode) = args
    cfg = _config_from_dict(config_dict)
    road = cfg.target_road()
    scene = sim_mod.burn_in_scene(
        road, cfg.target.vehicles, cfg.target.burn_in_steps,
        substream(master_seed, "burn-in", scene_id))
    schema = features_mod.FeatureSchema(cfg.neighbor_count)
    samples = risk_mod.scene_samples_all_vehicles(
        scene, scene_id, cfg.sim, subseed(master_seed, "target-sim", scene_id),
        n_rollouts=cfg.target.rollouts, schema=schema)
    if label_mode == "low-ttc":
        # surrogate labels from one shared trajectory per scene, mirroring
        # observational data where only a single realization exists
        labels = sim_mod.low_ttc_labels(
            scene, cfg.sim, substream(master_seed, "ttc-label", scene_id))
        samples = [replace_label(s, float(labels[i]))
                   for i, s in enumerate(samples)]
    records = scene_mod.scene_records(scene)
    return samples, records


def replace_label(sample, y):
    return risk_mod.WeightedSample(
        x=sample.x, y=y, w=sample.w, domain=sample.domain,
        scene_id=sample.scene_id, ego_id=sample.ego_id,
        collision_steps=sample.collision_steps)


def _config_from_dict(d):
    cfg = load_config(None)
    return replace(
        cfg,
        master_seed=d["master_seed"],
        n_bins=d["n_bins"],
        smoothing=d["smoothing"],
        sim=sim_mod.SimConfig(**d["sim"]),
        target=TargetConfig(**d["target"]),
        source=SourceConfig(**d["source"]),
        cem=_load_cem(d["cem"]),
        sweep=_load_sweep(d["sweep"]),
        neighbor_count=d["neighbor_count"],
    )


def build_target_data(config, out_dir, threads=1, label_mode="risk"):
    """Generate the artificial target domain.

    Writes the continuous-label train and validation datasets, the
    Bernoulli-binarized train variant, and the per-vehicle records used to
    fit the scene model. Train and validation come from disjoint simulations.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    total = config.target.train_scenes + config.target.validation_scenes
    jobs = [(config.to_dict(), i, config.master_seed, label_mode)
            for i in range(total)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_target_scene_job, jobs))
    else:
        results = [_target_scene_job(j) for j in jobs]

    schema = features_mod.FeatureSchema(config.neighbor_count)
    train, val, records = [], [], []
    for scene_id, (samples, recs) in enumerate(results):
        if scene_id < config.target.train_scenes:
            train.extend(samples)
        else:
            val.extend(samples)
        records.extend(recs)

    expected = config.target.train_scenes * config.target.vehicles
    if len(train) != expected:
        raise DataError(f"expected {expected} train samples, got {len(train)}")

    head = provenance(config, label_mode=label_mode)
    risk_mod.write_dataset(out_dir / "target_train.jsonl", train, head, schema)
    risk_mod.write_dataset(out_dir / "target_val.jsonl", val, head, schema)
    binarized = predictor_mod.binarize_labels(
        train, substream(config.master_seed, "binarize"))
    risk_mod.write_dataset(out_dir / "target_train_binary.jsonl", binarized,
                           head, schema)
    scene_mod.write_records(out_dir / "records.jsonl", records, head)
    return train, val, records


def fit_scene_model(config, records):
    return scene_mod.SceneBayesNet(
        n_bins=config.n_bins, smoothing=config.smoothing).fit(records)


def _source_chunk_job(args):
    (config_dict, bn_dict, proposal_dict, start, count) = args
    cfg = _config_from_dict(config_dict)
    bn = _bn_from_dict(bn_dict)
    proposal = _bn_from_dict(proposal_dict) if proposal_dict else None
    return risk_mod.build_dataset(
        bn, proposal, count, cfg.source.vehicles, cfg.source_road(), cfg.sim,
        cfg.master_seed, n_rollouts=cfg.source.rollouts, domain="source",
        schema=features_mod.FeatureSchema(cfg.neighbor_count),
        first_scene=start)


def _bn_from_dict(d):
    spec = scene_mod.DiscretizationSpec(
        {v: np.asarray(e) for v, e in d["edges"].items()})
    return scene_mod.SceneBayesNet.from_tables(
        spec, {v: np.asarray(r) for v, r in d["cpts"].items()},
        parents=d["parents"],
        fore_velocity_prior=np.asarray(d["fore_velocity_prior"]),
        smoothing=d.get("smoothing", 1.0))


def build_source_data(config, scene_bn, proposal, out_path, threads=1):
    """Sample and evaluate the weighted source dataset.

    When a proposal is given, a configured fraction of scenes draw their ego
    from it (weighted by the likelihood ratio) and the remainder come from
    the natural model with unit weight, so the dataset spans both the
    oversampled dangerous region and the typical one.
    """
    schema = features_mod.FeatureSchema(config.neighbor_count)
    total = config.source.num_scenes
    n_proposal = (int(round(total * config.source.proposal_fraction))
                  if proposal is not None else 0)
    parts = [(proposal, 0, n_proposal), (None, n_proposal, total - n_proposal)]
    samples = []
    for part_proposal, first, count in parts:
        if count <= 0:
            continue
        samples.extend(_build_source_part(config, scene_bn, part_proposal,
                                          first, count, schema, threads))
    if len(samples) != total:
        raise DataError(f"expected {total} source samples, got {len(samples)}")
    head = provenance(config, proposal=proposal is not None,
                      proposal_scenes=n_proposal)
    risk_mod.write_dataset(out_path, samples, head, schema)
    return samples


def _build_source_part(config, scene_bn, proposal, first, count, schema,
                       threads):
    chunk = risk_mod.DEFAULT_CHUNK_SCENES
    if threads > 1:
        bn_dict = scene_bn.to_json_dict()
        prop_dict = proposal.to_json_dict() if proposal is not None else None
        starts = [(s, min(chunk, first + count - s))
                  for s in range(first, first + count, chunk)]
        jobs = [(config.to_dict(), bn_dict, prop_dict, s, c)
                for s, c in starts]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(_source_chunk_job, jobs))
        return [s for block in blocks for s in block]
    return risk_mod.build_dataset(
        scene_bn, proposal, count, config.source.vehicles,
        config.source_road(), config.sim, config.master_seed,
        n_rollouts=config.source.rollouts, domain="source", schema=schema,
        first_scene=first)


# ----------------------------------------------------------------------
# predictor sweep
# ----------------------------------------------------------------------

def _subset_with_positives(samples, count, rng):
    """All negative-risk samples plus `count` positives, order shuffled."""
    positives = [s for s in samples if s.y > 0]
    negatives = [s for s in samples if s.y <= 0]
    if len(positives) < count:
        raise DataError(
            f"target training set has {len(positives)} positive-risk samples, "
            f"fewer than the requested {count}")
    picked = [positives[i] for i in rng.permutation(len(positives))[:count]]
    subset = negatives + picked
    order = rng.permutation(len(subset))
    return [subset[i] for i in order]


def _train_one(args):
    (source, target, validation, settings) = args
    model = predictor_mod.RiskPredictor(**settings)
    model.fit(source, target, validation)
    x_val = np.stack([s.x for s in validation])
    y_val = np.asarray([s.y for s in validation])
    w_val = np.asarray([s.w for s in validation])
    preds = model.predict_proba(x_val)
    row = {
        "nll_all": metrics_mod.nll(preds, y_val, w_val),
        "nll_positive": metrics_mod.nll(preds, y_val, w_val,
                                        subset="positive-risk"),
        "ap": metrics_mod.average_precision(preds, (y_val > 0).astype(int)),
        "best_epoch": model.best_epoch_,
    }
    return row


def train_sweep(config, source, target_train, validation, threads=1):
    """Grid-select hyperparameters per method, then train seeds across the
    positive-count sweep. Returns (result rows, summary rows)."""
    sweep = config.sweep
    results = []

    best_settings = {}
    grid_count = max(sweep.positive_counts)
    for method in sweep.methods:
        scored = []
        for gi, point in enumerate(sweep.grid):
            settings = dict(point)
            settings.update(
                variant=method, epochs=sweep.epochs,
                batch_size=sweep.batch_size,
                adversarial_weight=(sweep.adversarial_weight
                                    if method.startswith("dann") else 0.0),
                seed=subseed(config.master_seed, "grid", method, gi),
            )
            subset = _subset_with_positives(
                target_train, grid_count,
                substream(config.master_seed, "subset", grid_count))
            row = _train_one((source if method != "target-only" else [],
                              subset, validation, settings))
            scored.append((row["nll_all"], gi))
        best_settings[method] = dict(sweep.grid[min(scored)[1]])

    jobs = []
    for method in sweep.methods:
        for count in sweep.positive_counts:
            subset = _subset_with_positives(
                target_train, count,
                substream(config.master_seed, "subset", count))
            for net_i in range(sweep.networks_per_method):
                settings = dict(best_settings[method])
                settings.update(
                    variant=method, epochs=sweep.epochs,
                    batch_size=sweep.batch_size,
                    adversarial_weight=(sweep.adversarial_weight
                                        if method.startswith("dann") else 0.0),
                    seed=subseed(config.master_seed, "net", method, count, net_i),
                )
                jobs.append(((method, count, net_i),
                             (source if method != "target-only" else [],
                              subset, validation, settings)))

    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_train_one, [j[1] for j in jobs]))
    else:
        rows = [_train_one(j[1]) for j in jobs]

    for ((method, count, net_i), _), row in zip(jobs, rows):
        results.append({"method": method, "positive_count": count,
                        "seed": net_i, **row})

    summary = []
    for method in sweep.methods:
        for count in sweep.positive_counts:
            cell = [r for r in results
                    if r["method"] == method and r["positive_count"] == count]
            for metric in ("nll_all", "nll_positive", "ap"):
                vals = np.asarray([r[metric] for r in cell])
                se = (vals.std(ddof=1) / np.sqrt(len(vals))
                      if len(vals) > 1 else 0.0)
                summary.append({"method": method, "positive_count": count,
                                "metric": metric, "mean": float(vals.mean()),
                                "stderr": float(se), "n": len(vals)})
    return results, summary


# ----------------------------------------------------------------------
# correlation-by-horizon report
# ----------------------------------------------------------------------

def horizon_correlation_table(samples, horizons_s, schema, dt=0.1):
    """Behavioral-to-overall correlation ratio per prediction horizon.

    Labels for horizon h are the per-sample fraction of rollouts whose first
    ego contact happened within h seconds, reconstructed from the stored
    collision-step lists.
    """
    if not horizons_s:
        raise DataError("need at least one horizon")
    rows = [s for s in samples if s.collision_steps is not None]
    if not rows:
        raise DataError("dataset carries no collision-step lists")
    x = np.stack([s.x for s in rows])
    steps = np.asarray([s.collision_steps for s in rows])
    labels = {}
    for h in horizons_s:
        h_steps = int(round(h / dt))
        labels[h] = ((steps >= 0) & (steps <= h_steps)).mean(axis=1)
    curve = features_mod.behavioral_correlation_curve(x, labels, schema)
    return curve
