"""Generative scene model for single-lane highway traffic.

A scene is an ordered row of vehicles, each described by seven features:
gap to the vehicle ahead, velocity of the vehicle ahead, relative velocity
(own minus fore), length, width, attentiveness, and aggressiveness. A
discrete Bayesian network over binned versions of these features generates
scenes vehicle by vehicle, front to rear: the head vehicle is drawn with the
fore-velocity marginalized out, and every subsequent vehicle conditions on
the realized velocity of the vehicle ahead of it. Continuous values are
drawn uniformly inside the selected bin.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import driver_models
from .validation import DataError, as_rng, check_probability_rows

VARIABLES = (
    "fore_gap",
    "fore_velocity",
    "rel_velocity",
    "length",
    "width",
    "attentive",
    "aggressiveness",
)
BINARY_VARIABLES = frozenset({"attentive"})

# Per-vehicle dependency structure. fore_velocity is observed (it is the
# realized velocity of the vehicle ahead), so it precedes all sampled nodes.
DEFAULT_PARENTS = {
    "rel_velocity": "fore_velocity",
    "fore_gap": "rel_velocity",
    "length": None,
    "width": "length",
    "attentive": None,
    "aggressiveness": None,
}


@dataclass(frozen=True)
class RoadSpec:
    """Geometry the scene lives on."""

    length: float = 2000.0
    circular: bool = False
    lane_count: int = 1
    lane_width: float = 3.7

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("road length must be positive")
        if self.lane_count < 1:
            raise ValueError("lane count must be >= 1")


@dataclass(frozen=True)
class VehicleRecord:
    """One vehicle's feature tuple, linked to its fore vehicle through
    fore_gap / fore_velocity. Head vehicles on an open road have no fore
    vehicle and carry None for the linkage fields."""

    fore_gap: float | None
    fore_velocity: float | None
    rel_velocity: float | None
    length: float
    width: float
    attentive: int
    aggressiveness: float
    bins: dict = field(default=None, compare=False)

    def value(self, var):
        return getattr(self, var)


@dataclass
class VehicleState:
    """Physical and behavioral state of one vehicle in a scene."""

    position: float
    velocity: float
    length: float
    width: float
    params: driver_models.DriverParams
    lane: int = 0
    lane_offset: float = 0.0
    heading: float = 0.0
    collided: bool = False
    accel: float = 0.0
    turn_rate: float = 0.0
    record: VehicleRecord | None = None


@dataclass
class Scene:
    """Ordered vehicles on a road; index 0 is the rear-most vehicle."""

    road: RoadSpec
    vehicles: list

    def __post_init__(self):
        positions = [v.position for v in self.vehicles]
        if any(not np.isfinite(p) for p in positions):
            raise ValueError("vehicle positions must be finite")
        if positions != sorted(positions):
            raise ValueError("vehicles must be ordered by increasing position")

    def __len__(self):
        return len(self.vehicles)


class DiscretizationSpec:
    """Ordered bin edges per variable. Continuous variables may use
    zero-width bins (degenerate point masses); binary variables take the
    bin index itself as the value."""

    def __init__(self, edges):
        self.edges = {}
        for var in VARIABLES:
            if var in BINARY_VARIABLES:
                continue
            e = np.asarray(edges[var], dtype=float)
            if e.ndim != 1 or e.size < 2:
                raise ValueError(f"{var}: need at least 2 bin edges")
            if np.any(np.diff(e) < 0):
                raise ValueError(f"{var}: bin edges must be non-decreasing")
            self.edges[var] = e

    @classmethod
    def from_data(cls, values_by_var, n_bins=8):
        """Quantile edges from fitting data; aggressiveness uses equal-width
        bins on [0, 1]."""
        edges = {}
        for var in VARIABLES:
            if var in BINARY_VARIABLES:
                continue
            if var == "aggressiveness":
                edges[var] = np.linspace(0.0, 1.0, n_bins + 1)
                continue
            vals = np.asarray(values_by_var[var], dtype=float)
            if vals.size == 0:
                raise DataError(f"no data to discretize variable '{var}'")
            qs = np.quantile(vals, np.linspace(0.0, 1.0, n_bins + 1))
            edges[var] = np.unique(qs)  # collapse duplicate quantiles
        return cls(edges)

    def n_bins(self, var):
        if var in BINARY_VARIABLES:
            return 2
        return len(self.edges[var]) - 1

    def bin_of(self, var, value):
        """Bin index of a value; raises DataError outside the outermost edges."""
        if var in BINARY_VARIABLES:
            b = int(value)
            if b not in (0, 1):
                raise DataError(f"variable '{var}' must be 0 or 1, got {value}")
            return b
        e = self.edges[var]
        if not (e[0] <= value <= e[-1]):
            raise DataError(
                f"value {value} for variable '{var}' outside discretization "
                f"range [{e[0]}, {e[-1]}]"
            )
        idx = int(np.searchsorted(e, value, side="right")) - 1
        return min(max(idx, 0), len(e) - 2)

    def bin_of_clamped(self, var, value):
        """Bin index for conditioning lookups; out-of-range values clamp to
        the nearest bin (sampled chains may drift past the fitted range)."""
        if var in BINARY_VARIABLES:
            return int(bool(value))
        e = self.edges[var]
        idx = int(np.searchsorted(e, value, side="right")) - 1
        return min(max(idx, 0), len(e) - 2)

    def sample_value(self, var, bin_idx, rng):
        if var in BINARY_VARIABLES:
            return float(bin_idx)
        lo, hi = self.edges[var][bin_idx], self.edges[var][bin_idx + 1]
        return float(lo + rng.random() * (hi - lo))

    def bin_bounds(self, var, bin_idx):
        if var in BINARY_VARIABLES:
            return float(bin_idx), float(bin_idx)
        e = self.edges[var]
        return float(e[bin_idx]), float(e[bin_idx + 1])


class SceneBayesNet(BaseEstimator):
    """Discrete Bayesian network scene generator.

    Fitted attributes:
      discretization_ : DiscretizationSpec
      parents_        : dict variable -> parent (or None)
      cpts_           : dict variable -> array (n_parent_bins, n_bins)
      fore_velocity_prior_ : array over fore_velocity bins, used to
                             marginalize the head vehicle's missing fore link
      order_          : sampling order of the per-vehicle variables

    The network is immutable after fitting; derive modified copies with
    `with_cpts`.
    """

    def __init__(self, n_bins=8, smoothing=1.0, parents=None, discretization=None):
        self.n_bins = n_bins
        self.smoothing = smoothing
        self.parents = parents
        self.discretization = discretization

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def fit(self, records):
        """Fit CPTs by smoothed counting over per-vehicle records."""
        records = list(records)
        if not records:
            raise DataError("cannot fit a scene model on an empty dataset")
        if self.smoothing < 0:
            raise ValueError("smoothing pseudo-count must be >= 0")
        parents = dict(DEFAULT_PARENTS if self.parents is None else self.parents)
        self._check_dag(parents)

        if self.discretization is not None:
            spec = self.discretization
        else:
            values = {
                var: [r.value(var) for r in records if r.value(var) is not None]
                for var in VARIABLES
                if var not in BINARY_VARIABLES
            }
            spec = DiscretizationSpec.from_data(values, n_bins=self.n_bins)

        order = self._topological_order(parents)
        cpts = {}
        for var in order:
            parent = parents[var]
            n_rows = 1 if parent is None else self._parent_bins(spec, parent)
            counts = np.zeros((n_rows, spec.n_bins(var)))
            for r in records:
                value = r.value(var)
                if value is None:
                    continue  # open-road head vehicles lack fore-linked values
                if parent is not None:
                    pv = r.value(parent)
                    if pv is None:
                        continue
                    # conditioning values clamp to the nearest bin, like the
                    # sampling chain and likelihood lookups do
                    row = spec.bin_of_clamped(parent, pv)
                else:
                    row = 0
                counts[row, spec.bin_of(var, value)] += 1.0
            cpts[var] = self._normalize_counts(counts, self.smoothing)

        self.discretization_ = spec
        self.parents_ = parents
        self.order_ = order
        self.cpts_ = cpts
        self.fore_velocity_prior_ = np.full(
            spec.n_bins("fore_velocity"), 1.0 / spec.n_bins("fore_velocity")
        )
        return self

    @classmethod
    def from_tables(cls, discretization, cpts, parents=None, fore_velocity_prior=None,
                    smoothing=1.0):
        """Build a fitted network directly from tables (used by tests, the
        proposal optimizer, and deserialization)."""
        net = cls(smoothing=smoothing, parents=parents)
        parents = dict(DEFAULT_PARENTS if parents is None else parents)
        net._check_dag(parents)
        net.discretization_ = discretization
        net.parents_ = parents
        net.order_ = net._topological_order(parents)
        net.cpts_ = {}
        for var in net.order_:
            rows = check_probability_rows(f"cpt[{var}]", np.asarray(cpts[var], dtype=float))
            expected = (1 if parents[var] is None
                        else net._parent_bins(discretization, parents[var]),
                        discretization.n_bins(var))
            if rows.shape != expected:
                raise ValueError(f"cpt[{var}]: expected shape {expected}, got {rows.shape}")
            net.cpts_[var] = rows
        n_vf = discretization.n_bins("fore_velocity")
        if fore_velocity_prior is None:
            net.fore_velocity_prior_ = np.full(n_vf, 1.0 / n_vf)
        else:
            net.fore_velocity_prior_ = check_probability_rows(
                "fore_velocity_prior", np.asarray(fore_velocity_prior)[None, :]
            )[0]
        return net

    def with_cpts(self, updates):
        """Copy of this network with some CPTs replaced (rows renormalized)."""
        cpts = {var: rows.copy() for var, rows in self.cpts_.items()}
        for var, rows in updates.items():
            rows = np.asarray(rows, dtype=float)
            if np.any(rows < 0):
                raise ValueError(f"cpt[{var}]: negative entries")
            cpts[var] = rows / rows.sum(axis=1, keepdims=True)
        return SceneBayesNet.from_tables(
            self.discretization_, cpts, parents=self.parents_,
            fore_velocity_prior=self.fore_velocity_prior_, smoothing=self.smoothing,
        )

    @staticmethod
    def _normalize_counts(counts, smoothing):
        n_bins = counts.shape[1]
        smoothed = counts + smoothing
        totals = smoothed.sum(axis=1, keepdims=True)
        rows = np.divide(smoothed, totals, out=np.zeros_like(smoothed),
                         where=totals > 0)
        empty = totals[:, 0] <= 0  # zero observations and zero smoothing
        rows[empty] = 1.0 / n_bins
        return rows

    def _check_dag(self, parents):
        sampled = [v for v in VARIABLES if v != "fore_velocity"]
        if set(parents) != set(sampled):
            raise ValueError("parent map must cover exactly the sampled variables")
        for var, parent in parents.items():
            if parent is not None and parent not in VARIABLES:
                raise ValueError(f"unknown parent '{parent}' for '{var}'")
        self._topological_order(parents)  # raises on cycles

    @staticmethod
    def _topological_order(parents):
        order, placed = [], {"fore_velocity"}
        pending = [v for v in VARIABLES if v != "fore_velocity"]
        while pending:
            progress = [v for v in pending
                        if parents[v] is None or parents[v] in placed]
            if not progress:
                raise ValueError("parent map contains a cycle")
            for v in progress:
                order.append(v)
                placed.add(v)
                pending.remove(v)
        return order

    @staticmethod
    def _parent_bins(spec, parent):
        return spec.n_bins(parent)

    # ------------------------------------------------------------------
    # sampling
    # ------------------------------------------------------------------

    def _parent_row(self, var, bins, fore_velocity_bin):
        parent = self.parents_[var]
        if parent is None:
            return 0
        if parent == "fore_velocity":
            return fore_velocity_bin
        return bins[parent]

    def _draw_bin(self, row, rng):
        return int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))

    def sample_vehicle(self, fore_velocity_bin, rng, cpts=None):
        """Draw one vehicle's bins and values conditioned on the fore-velocity
        bin (None marginalizes it over the prior, as for the head vehicle)."""
        cpts = self.cpts_ if cpts is None else cpts
        spec = self.discretization_
        if fore_velocity_bin is None:
            fore_velocity_bin = self._draw_bin(self.fore_velocity_prior_, rng)
        bins, values = {"fore_velocity": fore_velocity_bin}, {}
        for var in self.order_:
            row = cpts[var][self._parent_row(var, bins, fore_velocity_bin)]
            b = min(self._draw_bin(row, rng), spec.n_bins(var) - 1)
            bins[var] = b
            values[var] = spec.sample_value(var, b, rng)
        return bins, values

    def sample(self, num_vehicles, road, rng):
        """Sample a scene of num_vehicles on the given road.

        Vehicles are generated front to rear along the conditioning chain and
        placed bumper to bumper using the sampled fore gaps; the returned
        scene lists them rear-most first with the rear vehicle centered at 0.
        """
        if num_vehicles < 1:
            raise ValueError("num_vehicles must be >= 1")
        rng = as_rng(rng)
        chain = self._sample_chain(num_vehicles, rng)
        return self._place_chain(chain, road, rng)

    def _sample_chain(self, num_vehicles, rng):
        spec = self.discretization_
        chain = []
        fore_velocity_bin = None
        fore_velocity_value = None
        for i in range(num_vehicles):
            if i == 0:
                fore_velocity_bin = self._draw_bin(self.fore_velocity_prior_, rng)
                fore_velocity_value = spec.sample_value(
                    "fore_velocity", fore_velocity_bin, rng)
            bins, values = self.sample_vehicle(fore_velocity_bin, rng)
            velocity = max(fore_velocity_value + values["rel_velocity"], 0.0)
            record = VehicleRecord(
                fore_gap=values["fore_gap"],
                fore_velocity=fore_velocity_value,
                rel_velocity=values["rel_velocity"],
                length=values["length"],
                width=values["width"],
                attentive=int(values["attentive"]),
                aggressiveness=values["aggressiveness"],
                bins=bins,
            )
            chain.append((record, velocity))
            fore_velocity_value = velocity
            fore_velocity_bin = spec.bin_of_clamped("fore_velocity", velocity)
        return chain

    def _place_chain(self, chain, road, rng):
        return place_chain(chain, road, rng)

    # ------------------------------------------------------------------
    # likelihood
    # ------------------------------------------------------------------

    def vehicle_log_prob(self, bins, fore_velocity_bin, cpts=None):
        """Log probability of one vehicle's bin assignment given the fore
        velocity bin. None marginalizes the fore velocity over its prior:
        all fore-velocity children are summed out jointly, so the result is
        exact for any dependency map."""
        cpts = self.cpts_ if cpts is None else cpts
        total = 0.0
        vf_children = []
        for var in self.order_:
            if var not in bins:
                continue
            parent = self.parents_[var]
            if parent == "fore_velocity" and fore_velocity_bin is None:
                vf_children.append(var)
                continue
            if parent is not None and parent != "fore_velocity" \
                    and parent not in bins:
                continue
            row = self._parent_row(var, bins, fore_velocity_bin)
            p = float(cpts[var][row, bins[var]])
            if p <= 0:
                return -np.inf
            total += np.log(p)
        if vf_children:
            mix = self.fore_velocity_prior_.copy()
            for var in vf_children:
                mix = mix * cpts[var][:, bins[var]]
            p = float(mix.sum())
            if p <= 0:
                return -np.inf
            total += np.log(p)
        return total

    def log_likelihood(self, scene):
        """Log probability of a scene's bin assignment under the chain
        decomposition (uniform-within-bin densities cancel in every ratio
        used downstream and are excluded)."""
        records = scene_records(scene)
        spec = self.discretization_
        total = 0.0
        # iterate front to rear; the head vehicle marginalizes fore_velocity
        for i, record in enumerate(reversed(records)):
            bins = record.bins or self._record_bins(record)
            if i == 0:
                fv_bin = None
            else:
                fv_bin = spec.bin_of_clamped("fore_velocity", record.fore_velocity)
            total += self.vehicle_log_prob(bins, fv_bin)
        return float(total)

    def _record_bins(self, record):
        spec = self.discretization_
        bins = {}
        for var in self.order_:
            value = record.value(var)
            if value is None:
                continue
            bins[var] = spec.bin_of(var, value)
        return bins

    def first_vehicle_marginals(self):
        """Per-variable distributions for the head vehicle: the fore-velocity
        parent is summed out over its prior; other tables are returned as-is."""
        out = {}
        for var in self.order_:
            if self.parents_[var] == "fore_velocity":
                out[var] = (self.fore_velocity_prior_ @ self.cpts_[var])[None, :]
            else:
                out[var] = self.cpts_[var].copy()
        return out

    # ------------------------------------------------------------------
    # serialization
    # ------------------------------------------------------------------

    def to_json_dict(self):
        spec = self.discretization_
        return {
            "variables": list(VARIABLES),
            "edges": {v: spec.edges[v].tolist() for v in spec.edges},
            "parents": self.parents_,
            "cpts": {v: rows.tolist() for v, rows in self.cpts_.items()},
            "fore_velocity_prior": self.fore_velocity_prior_.tolist(),
            "smoothing": self.smoothing,
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            data = json.load(f)
        spec = DiscretizationSpec({v: np.asarray(e) for v, e in data["edges"].items()})
        return cls.from_tables(
            spec,
            {v: np.asarray(rows) for v, rows in data["cpts"].items()},
            parents=data["parents"],
            fore_velocity_prior=np.asarray(data["fore_velocity_prior"]),
            smoothing=data.get("smoothing", 1.0),
        )


def place_chain(chain, road, rng):
    """Realize a front-to-rear chain of (record, velocity) pairs as a scene.

    Gaps are bumper to bumper; the rear-most vehicle is centered at 0 and the
    returned scene lists vehicles rear-most first. Raises when the chain does
    not fit on the road.
    """
    centers = [0.0]
    for i in range(1, len(chain)):
        fore_record = chain[i - 1][0]
        record = chain[i][0]
        step = (fore_record.length + record.length) / 2.0 + record.fore_gap
        centers.append(centers[-1] - step)
    front_bumper = centers[0] + chain[0][0].length / 2.0
    rear_bumper = centers[-1] - chain[-1][0].length / 2.0
    if front_bumper - rear_bumper > road.length:
        raise DataError(
            f"cannot place {len(chain)} vehicles spanning "
            f"{front_bumper - rear_bumper:.1f} m on a {road.length:.1f} m road"
        )
    shift = -centers[-1]
    vehicles = []
    for (record, velocity), center in zip(reversed(chain), reversed(centers)):
        params = driver_models.sample_driver_params(
            record.aggressiveness, rng, attentive=bool(record.attentive))
        vehicles.append(VehicleState(
            position=center + shift,
            velocity=velocity,
            length=record.length,
            width=record.width,
            params=params,
            record=record,
        ))
    return Scene(road=road, vehicles=vehicles)


def write_records(path, records, header=None):
    """Write vehicle records as line-delimited JSON with a header line."""
    with open(path, "w") as f:
        f.write(json.dumps({"kind": "vehicle-records", "header": header or {}})
                + "\n")
        for r in records:
            f.write(json.dumps({
                "fore_gap": r.fore_gap,
                "fore_velocity": r.fore_velocity,
                "rel_velocity": r.rel_velocity,
                "length": r.length,
                "width": r.width,
                "attentive": r.attentive,
                "aggressiveness": r.aggressiveness,
            }) + "\n")


def read_records(path):
    """Read a vehicle-records file; returns (records, header)."""
    records = []
    with open(path) as f:
        first = f.readline()
        if not first:
            raise DataError(f"records file {path} is empty")
        head = json.loads(first)
        if head.get("kind") != "vehicle-records":
            raise DataError(f"{path} is not a vehicle-records file")
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            records.append(VehicleRecord(
                fore_gap=row["fore_gap"],
                fore_velocity=row["fore_velocity"],
                rel_velocity=row["rel_velocity"],
                length=row["length"],
                width=row["width"],
                attentive=int(row["attentive"]),
                aggressiveness=row["aggressiveness"],
            ))
    if not records:
        raise DataError(f"records file {path} contains no records")
    return records, head.get("header", {})


def scene_records(scene):
    """Per-vehicle feature records for a scene, deriving the fore linkage
    from geometry when the scene was not produced by sampling.

    On a circular road the front-most vehicle's fore neighbor is the
    rear-most one through the wrap; on an open road it has no fore vehicle
    and its linkage fields are None.
    """
    records = []
    vehicles = scene.vehicles
    n = len(vehicles)
    for i, v in enumerate(vehicles):
        if v.record is not None:
            records.append(v.record)
            continue
        if i + 1 < n:
            fore = vehicles[i + 1]
            gap = fore.position - v.position - (fore.length + v.length) / 2.0
        elif scene.road.circular and n > 1:
            fore = vehicles[0]
            gap = (fore.position + scene.road.length - v.position
                   - (fore.length + v.length) / 2.0)
        else:
            fore = None
            gap = None
        records.append(VehicleRecord(
            fore_gap=gap,
            fore_velocity=None if fore is None else fore.velocity,
            rel_velocity=None if fore is None else v.velocity - fore.velocity,
            length=v.length,
            width=v.width,
            attentive=int(v.params.attentive),
            aggressiveness=v.params.aggressiveness,
        ))
    return records
