"""Shared toy-model builders for the test suite."""

import numpy as np
import pytest

from highway_risk import scene_model as sm


def point_edges(value):
    """Zero-width bin containing exactly one value."""
    return np.array([value, value], dtype=float)


def make_single_bin_bn(fore_gap=10.0, fore_velocity=20.0, rel_velocity=0.0,
                       length=4.0, width=2.0, aggressiveness=1.0,
                       attentive_prob=1.0):
    """Scene network whose every variable has one zero-width bin, so sampling
    is fully deterministic (aggressiveness 0 or 1 also makes driver
    parameters degenerate)."""
    spec = sm.DiscretizationSpec({
        "fore_gap": point_edges(fore_gap),
        "fore_velocity": point_edges(fore_velocity),
        "rel_velocity": point_edges(rel_velocity),
        "length": point_edges(length),
        "width": point_edges(width),
        "aggressiveness": point_edges(aggressiveness),
    })
    cpts = {
        "fore_gap": [[1.0]],
        "rel_velocity": [[1.0]],
        "length": [[1.0]],
        "width": [[1.0]],
        "aggressiveness": [[1.0]],
        "attentive": [[1.0 - attentive_prob, attentive_prob]],
    }
    return sm.SceneBayesNet.from_tables(spec, cpts)


def make_two_bin_bn(p_close_velocity=0.1, p_small_gap=0.1):
    """Two-vehicle-toy network: relative velocity is either -5 (diverging,
    always safe) or +30 (closing fast), and the fore gap is either 2.5 m
    (contact on the first step when closing) or 400 m (unreachable within a
    short horizon). Both active bins of each variable are zero-width; the
    middle structural bin carries zero probability. With noise and the error
    model disabled every outcome is a deterministic function of the bin
    assignment."""
    spec = sm.DiscretizationSpec({
        "fore_gap": np.array([2.5, 2.5, 400.0, 400.0]),
        "fore_velocity": point_edges(10.0),
        "rel_velocity": np.array([-5.0, -5.0, 30.0, 30.0]),
        "length": point_edges(4.0),
        "width": point_edges(2.0),
        "aggressiveness": point_edges(1.0),
    })
    q_dv = p_close_velocity
    q_gap = p_small_gap
    cpts = {
        # one row per fore_velocity bin (single bin here)
        "rel_velocity": [[1.0 - q_dv, 0.0, q_dv]],
        # one row per rel_velocity bin
        "fore_gap": [[q_gap, 0.0, 1.0 - q_gap]] * 3,
        "length": [[1.0]],
        "width": [[1.0]],
        "aggressiveness": [[1.0]],
        "attentive": [[0.0, 1.0]],
    }
    return sm.SceneBayesNet.from_tables(spec, cpts)


@pytest.fixture(scope="session")
def burn_in_records():
    """Vehicle records from a handful of burn-in simulations; used wherever a
    realistically fitted scene model is needed."""
    from highway_risk import traffic_sim as ts

    records = []
    for i in range(10):
        scene = ts.burn_in_scene(sm.RoadSpec(length=30 * 24.0, circular=True),
                                 30, 400, np.random.default_rng(900 + i))
        records.extend(sm.scene_records(scene))
    return records


@pytest.fixture(scope="session")
def fitted_bn(burn_in_records):
    return sm.SceneBayesNet(n_bins=8, smoothing=1.0).fit(burn_in_records)
