"""Driver behavior models: car-following acceleration, lane-change decisions,
reaction delay, and attentiveness dynamics.

All drivers act through a two-part pipeline: an attentive driver computes a
longitudinal acceleration from a (possibly delayed) observation of its fore
vehicle and a lateral acceleration from the lane-change logic, then perturbs
both with Gaussian noise; an inattentive driver repeats its last executed
action verbatim. Attentiveness evolves as a two-state Markov chain.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .validation import as_rng

# Car-following / lane-change parameter bounds as (least aggressive, most
# aggressive) pairs. A driver's parameters are drawn around the linear
# interpolation between the two columns.
PARAM_RANGE = {
    "max_accel": (2.0, 6.0),          # m/s^2
    "desired_velocity": (25.0, 35.0),  # m/s
    "min_gap": (4.0, 0.0),             # m
    "time_headway": (1.0, 0.2),        # s
    "comfort_decel": (2.0, 5.0),       # m/s^2
    "politeness": (0.5, 0.1),
    "safe_decel": (2.0, 2.0),          # m/s^2
    "advantage_threshold": (0.7, 0.01),  # m/s^2
}
PARAM_STD_FRACTION = 0.03  # std of each parameter = 3% of its range

# Error-model constants shared by every driver.
REACTION_TIME = 0.2          # s
P_LOSE_ATTENTION = 0.05      # per step, attentive -> inattentive
P_REGAIN_ATTENTION = 0.3     # per step, inattentive -> attentive

# Std of the Gaussian perturbation applied to attentive drivers' actions.
ACTION_NOISE_LONG = 0.5      # m/s^2
ACTION_NOISE_LAT = 0.1       # m/s^2

BIG_GAP = 1e9  # sentinel fore gap when no vehicle is ahead


@dataclass(frozen=True)
class DriverParams:
    """Per-driver behavioral parameters; collectively the policy parameters."""

    max_accel: float
    desired_velocity: float
    min_gap: float
    time_headway: float
    comfort_decel: float
    politeness: float
    safe_decel: float
    advantage_threshold: float
    reaction_time: float = REACTION_TIME
    p_lose_attention: float = P_LOSE_ATTENTION
    p_regain_attention: float = P_REGAIN_ATTENTION
    aggressiveness: float = 0.5
    attentive: bool = True

    def validate(self):
        for name, (lo_val, hi_val) in PARAM_RANGE.items():
            lo, hi = min(lo_val, hi_val), max(lo_val, hi_val)
            value = getattr(self, name)
            if not (lo - 1e-12 <= value <= hi + 1e-12):
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        if not (0.0 <= self.aggressiveness <= 1.0):
            raise ValueError(f"aggressiveness={self.aggressiveness} outside [0, 1]")
        if self.reaction_time < 0:
            raise ValueError("reaction_time must be >= 0")
        for name in ("p_lose_attention", "p_regain_attention"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name}={p} outside [0, 1]")
        return self


def _interp_truncated_normal(agg, least, most, rng):
    """Draw around the interpolated mean, truncated to a symmetric window.

    The window is centered on the mean and clipped to stay inside the
    [least, most] interval, so the sample mean equals the interpolated value
    at every aggressiveness level (including the endpoints, where the
    distribution degenerates to the column value). Sampling uses the exact
    inverse-CDF of the truncated normal.
    """
    agg = np.asarray(agg, dtype=float)
    mu = least + agg * (most - least)
    sigma = PARAM_STD_FRACTION * abs(most - least)
    if sigma == 0.0:
        return np.broadcast_to(mu, agg.shape).copy()
    lo, hi = min(least, most), max(least, most)
    half = np.minimum(mu - lo, hi - mu)
    k = half / sigma
    u_lo, u_hi = ndtr(-k), ndtr(k)
    u = u_lo + rng.random(agg.shape) * (u_hi - u_lo)
    x = mu + sigma * ndtri(u)
    # guard the inverse CDF against roundoff at the window edges
    return np.clip(x, mu - half, mu + half)


def sample_driver_params_batch(agg, rng):
    """Vectorized parameter draw; returns a dict of arrays keyed by PARAM_RANGE."""
    agg = np.asarray(agg, dtype=float)
    if np.any((agg < 0) | (agg > 1)):
        raise ValueError("aggressiveness values must lie in [0, 1]")
    rng = as_rng(rng)
    return {
        name: _interp_truncated_normal(agg, least, most, rng)
        for name, (least, most) in PARAM_RANGE.items()
    }


def sample_driver_params(agg, rng, attentive=True):
    """Draw one driver's parameters given its aggressiveness in [0, 1]."""
    draws = sample_driver_params_batch(np.asarray([agg]), rng)
    return DriverParams(
        **{name: float(v[0]) for name, v in draws.items()},
        aggressiveness=float(agg),
        attentive=bool(attentive),
    )


def idm_accel(params, velocity, gap, closing_speed):
    """Car-following acceleration for a single driver.

    closing_speed is the rear velocity minus the fore velocity (positive when
    closing in). The gap must be positive; once vehicles are in contact the
    simulator takes over and this function must not be called.
    """
    if gap <= 0:
        raise ValueError("idm_accel requires a positive gap; contact is the simulator's job")
    if velocity < 0:
        raise ValueError("idm_accel requires a non-negative velocity")
    return float(
        idm_accel_arrays(
            params.max_accel,
            params.desired_velocity,
            params.min_gap,
            params.time_headway,
            params.comfort_decel,
            velocity,
            gap,
            closing_speed,
        )
    )


def idm_accel_arrays(max_accel, desired_velocity, min_gap, time_headway,
                     comfort_decel, velocity, gap, closing_speed):
    """Vectorized car-following law; all arguments broadcast."""
    desired_gap = min_gap + velocity * time_headway + (
        velocity * closing_speed / (2.0 * np.sqrt(max_accel * comfort_decel))
    )
    return max_accel * (
        1.0 - (velocity / desired_velocity) ** 4 - (desired_gap / gap) ** 2
    )


@dataclass(frozen=True)
class LaneView:
    """Kinematics of the nearest fore and rear vehicles in one lane, relative
    to the ego's (current or prospective) slot. Sentinel gaps mean absent."""

    fore_gap: float = BIG_GAP
    fore_velocity: float = 0.0
    rear_gap: float = BIG_GAP
    rear_velocity: float = 0.0


def mobil_decide(params, velocity, ego_length, current, left=None, right=None):
    """Lane-change decision: 'stay', 'left', or 'right'.

    A candidate lane passes the safety criterion when the prospective new
    follower would not have to brake harder than the safe deceleration, and is
    adopted when the ego's acceleration advantage, politeness-weighted against
    both followers' disadvantages, exceeds the advantage threshold. Follower
    accelerations are evaluated with the deciding driver's own parameters.
    Missing neighbors use sentinel gaps and never veto.
    """

    def accel(v, gap, closing):
        gap = max(gap, 1e-6)
        return idm_accel_arrays(
            params.max_accel, params.desired_velocity, params.min_gap,
            params.time_headway, params.comfort_decel, max(v, 0.0), gap, closing,
        )

    a_ego_now = accel(velocity, current.fore_gap, velocity - current.fore_velocity)
    # old follower: before, it trails the ego; after, it trails the ego's fore vehicle
    a_old_before = accel(current.rear_velocity, current.rear_gap,
                         current.rear_velocity - velocity)
    old_gap_after = current.rear_gap + ego_length + current.fore_gap
    a_old_after = accel(current.rear_velocity, old_gap_after,
                        current.rear_velocity - current.fore_velocity)

    best, best_gain = "stay", -math.inf
    for name, view in (("left", left), ("right", right)):
        if view is None:
            continue
        a_new_after = accel(view.rear_velocity, view.rear_gap,
                            view.rear_velocity - velocity)
        if a_new_after < -params.safe_decel:
            continue  # safety veto, incentive never consulted
        new_gap_before = view.rear_gap + ego_length + view.fore_gap
        a_new_before = accel(view.rear_velocity, new_gap_before,
                             view.rear_velocity - view.fore_velocity)
        a_ego_after = accel(velocity, view.fore_gap, velocity - view.fore_velocity)
        gain = (a_ego_after - a_ego_now) + params.politeness * (
            (a_new_after - a_new_before) + (a_old_after - a_old_before)
        )
        if gain > params.advantage_threshold and gain > best_gain:
            best, best_gain = name, gain
    return best


@dataclass(frozen=True)
class Observation:
    """What a driver perceives at one timestep."""

    velocity: float
    fore_gap: float = BIG_GAP
    fore_closing: float = 0.0


@dataclass(frozen=True)
class DriverState:
    """Evolving per-driver state: observation delay buffer, attentiveness,
    and the last executed (longitudinal, lateral) acceleration."""

    buffer: tuple = ()
    attentive: bool = True
    last_action: tuple = (0.0, 0.0)


def delay_steps(params, dt):
    return int(math.ceil(params.reaction_time / dt - 1e-12))


def errorable_step(state, params, observation, rng, *, dt=0.1, noise=True,
                   errors=True):
    """Advance a driver by one step; returns (action, new_state).

    The observation buffer always advances. Attentiveness takes one Markov
    step; an inattentive driver repeats its last executed action bit for bit,
    while an attentive driver acts on the observation from delay_steps ago
    (the buffer warm-up repeats the earliest observation) and perturbs the
    result with Gaussian noise.
    """
    rng = as_rng(rng)
    depth = delay_steps(params, dt) + 1
    buffer = (state.buffer + (observation,))[-depth:]
    delayed = buffer[0]

    attentive = state.attentive
    if errors:
        u = rng.random()
        attentive = (u >= params.p_lose_attention) if state.attentive \
            else (u < params.p_regain_attention)

    if not attentive:
        action = state.last_action
    else:
        if delayed.fore_gap <= 0:
            along = -params.max_accel  # in contact: emergency braking
        else:
            along = idm_accel(params, max(delayed.velocity, 0.0),
                              delayed.fore_gap, delayed.fore_closing)
        alat = 0.0  # lateral command comes from the simulator's lane-change logic
        if noise:
            along = along + rng.normal(0.0, ACTION_NOISE_LONG)
            alat = alat + rng.normal(0.0, ACTION_NOISE_LAT)
        action = (float(along), float(alat))

    return action, DriverState(buffer=buffer, attentive=attentive, last_action=action)


def attentiveness_step_arrays(attentive, p_lose, p_regain, rng):
    """One vectorized Markov step of the attentiveness chain."""
    u = rng.random(attentive.shape)
    return np.where(attentive, u >= p_lose, u < p_regain)
