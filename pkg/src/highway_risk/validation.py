"""Shared input-validation and RNG helpers."""

import numpy as np


class DataError(ValueError):
    """Bad input data (out-of-range values, empty datasets, malformed files)."""


class NumericalError(RuntimeError):
    """Non-finite values encountered during simulation or training."""


def as_rng(seed_or_rng):
    """Coerce an int seed, a seed sequence, or an existing Generator to a Generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def _entropy(master_seed, key):
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    for part in key:
        if isinstance(part, str):
            entropy.append(int.from_bytes(part.encode()[:8].ljust(8, b"\0"), "little"))
        else:
            entropy.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return entropy


def substream(master_seed, *key):
    """Derive an independent, order-insensitive RNG stream from a master seed and a key.

    String key parts are hashed into ints so streams like ("scene", 7) and
    ("rollout", 7) never collide.
    """
    return np.random.default_rng(np.random.SeedSequence(_entropy(master_seed, key)))


def subseed(master_seed, *key):
    """Derive a stable integer seed; feeds nested substream derivations."""
    state = np.random.SeedSequence(_entropy(master_seed, key)).generate_state(1)
    return int(state[0])


def check_finite(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite values")
    return arr


def check_unit_interval(name, value):
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_probability_rows(name, rows, tol=1e-9):
    """Validate a CPT: rows of non-negative entries each summing to 1 within tol."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2:
        raise ValueError(f"{name}: expected a 2-d table, got shape {rows.shape}")
    if np.any(rows < 0):
        raise ValueError(f"{name}: negative probability entries")
    sums = rows.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"{name}: rows must sum to 1 (max deviation {np.abs(sums - 1).max():.3g})")
    return rows


def check_feature_matrix(x, expected_dim=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected a 1-d or 2-d feature array, got shape {x.shape}")
    if expected_dim is not None and x.shape[1] != expected_dim:
        raise ValueError(f"feature dimension mismatch: expected {expected_dim}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise DataError("feature matrix contains non-finite values")
    return x
