"""High-risk highway scene generation and collision-risk prediction.

The package covers the full pipeline: a discrete Bayesian-network scene
model fit from per-vehicle records, collision-inclusive driver models,
time-stepped traffic simulation, Monte Carlo risk estimation with
importance sampling, cross-entropy proposal learning, ego-centric feature
extraction, and a domain-adaptive neural risk predictor.
"""

from .driver_models import (DriverParams, DriverState, LaneView, Observation,
                            errorable_step, idm_accel, mobil_decide,
                            sample_driver_params)
from .features import (FeatureSchema, behavioral_correlation_curve,
                       extract_features, label_low_ttc, time_to_collision)
from .importance_sampler import (CemConfig, CemHistory, cem_iteration,
                                 run_cem, sample_with_proposal)
from .metrics import average_precision, nll
from .predictor import (Mlp, MlpSpec, RiskPredictor, binarize_labels,
                        domain_adversarial_loss, grad_check,
                        weighted_cross_entropy)
from .risk_estimator import (RiskEstimate, WeightedSample, build_dataset,
                             estimate_risk, read_dataset,
                             unconditional_collision_prob, write_dataset)
from .scene_model import (DiscretizationSpec, RoadSpec, Scene, SceneBayesNet,
                          VehicleRecord, VehicleState, scene_records)
from .traffic_sim import (RolloutResult, SimConfig, bicycle_step,
                          burn_in_scene, detect_collisions, rollout)
from .validation import DataError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "DriverParams", "DriverState", "LaneView", "Observation", "errorable_step",
    "idm_accel", "mobil_decide", "sample_driver_params",
    "FeatureSchema", "behavioral_correlation_curve", "extract_features",
    "label_low_ttc", "time_to_collision",
    "CemConfig", "CemHistory", "cem_iteration", "run_cem",
    "sample_with_proposal",
    "average_precision", "nll",
    "Mlp", "MlpSpec", "RiskPredictor", "binarize_labels",
    "domain_adversarial_loss", "grad_check", "weighted_cross_entropy",
    "RiskEstimate", "WeightedSample", "build_dataset", "estimate_risk",
    "read_dataset", "unconditional_collision_prob", "write_dataset",
    "DiscretizationSpec", "RoadSpec", "Scene", "SceneBayesNet",
    "VehicleRecord", "VehicleState", "scene_records",
    "RolloutResult", "SimConfig", "bicycle_step", "burn_in_scene",
    "detect_collisions", "rollout",
    "DataError", "NumericalError",
]
