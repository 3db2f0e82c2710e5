"""Geo-tagged sample collections and distance-based neighborhood queries.

Samples carry a position (planar meters or geodetic degrees), a role
(query or database), and a fixed-width feature vector standing in for
image content.  A dataset bundles both roles with the two radii that
define positives (within ``r_pos`` meters) and negatives (beyond
``r_neg`` meters); the annulus between them is deliberately neither.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "PositionMode",
    "Role",
    "Position",
    "GeoSample",
    "GeoDataset",
    "distance_m",
    "synth_dataset",
    "save_csv",
    "load_csv",
]

EARTH_RADIUS_M = 6_371_000.0


class PositionMode(Enum):
    PLANAR = "planar"
    GEODETIC = "geodetic"


class Role(Enum):
    QUERY = "query"
    DATABASE = "database"


@dataclass(frozen=True)
class Position:
    """A point either on a local plane (meters) or on the globe (degrees)."""

    mode: PositionMode
    a: float  # x meters, or latitude degrees
    b: float  # y meters, or longitude degrees

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError(f"non-finite position ({self.a}, {self.b})")
        if self.mode is PositionMode.GEODETIC:
            if not -90.0 <= self.a <= 90.0:
                raise ValueError(f"latitude {self.a} outside [-90, 90]")
            if not -180.0 <= self.b <= 180.0:
                raise ValueError(f"longitude {self.b} outside [-180, 180]")


def distance_m(p: Position, q: Position) -> float:
    """Meters between two positions; both must share a mode."""
    if p.mode is not q.mode:
        raise ValueError(f"cannot mix position modes {p.mode.value} and {q.mode.value}")
    if p.mode is PositionMode.PLANAR:
        return math.hypot(p.a - q.a, p.b - q.b)
    # Haversine on a spherical Earth.
    lat1, lon1, lat2, lon2 = map(math.radians, (p.a, p.b, q.a, q.b))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class GeoSample:
    id: int
    role: Role
    position: Position
    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 1:
            raise ValueError(f"features must be 1-d, got shape {f.shape}")
        object.__setattr__(self, "features", f)


@dataclass
class GeoDataset:
    """Query and database samples plus the positive/negative radii."""

    queries: list[GeoSample]
    database: list[GeoSample]
    r_pos: float = 10.0
    r_neg: float = 25.0
    _db_by_id: dict[int, GeoSample] = field(init=False, repr=False)
    _q_by_id: dict[int, GeoSample] = field(init=False, repr=False)

    def __post_init__(self):
        if not (0.0 < self.r_pos < self.r_neg):
            raise ValueError(f"need 0 < r_pos < r_neg, got {self.r_pos}, {self.r_neg}")
        if not self.database:
            raise ValueError("database must be non-empty")
        modes = {s.position.mode for s in self.queries} | {
            s.position.mode for s in self.database
        }
        if len(modes) != 1:
            raise ValueError("all samples must share one position mode")
        dims = {s.features.shape[0] for s in self.queries} | {
            s.features.shape[0] for s in self.database
        }
        if len(dims) != 1:
            raise ValueError(f"inconsistent feature widths {sorted(dims)}")
        ids = [s.id for s in self.queries] + [s.id for s in self.database]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique across roles")
        self._db_by_id = {s.id: s for s in self.database}
        self._q_by_id = {s.id: s for s in self.queries}

    @property
    def mode(self) -> PositionMode:
        return self.database[0].position.mode

    @property
    def feature_dim(self) -> int:
        return self.database[0].features.shape[0]

    def sample(self, sample_id: int) -> GeoSample:
        s = self._db_by_id.get(sample_id) or self._q_by_id.get(sample_id)
        if s is None:
            raise KeyError(f"no sample with id {sample_id}")
        return s

    def positive_set(self, query_id: int) -> list[int]:
        """Database ids within r_pos meters of the query, ascending."""
        q = self._q_by_id.get(query_id)
        if q is None:
            raise KeyError(f"no query with id {query_id}")
        return sorted(
            s.id
            for s in self.database
            if distance_m(q.position, s.position) <= self.r_pos
        )

    def negative_set(self, query_id: int) -> list[int]:
        """Database ids strictly beyond r_neg meters, ascending."""
        q = self._q_by_id.get(query_id)
        if q is None:
            raise KeyError(f"no query with id {query_id}")
        return sorted(
            s.id
            for s in self.database
            if distance_m(q.position, s.position) > self.r_neg
        )


def synth_dataset(
    seed: int,
    n_places: int = 20,
    db_per_place: int = 8,
    query_fraction: float = 1.0,
    feature_dim: int = 32,
    view_noise: float = 0.5,
    spacing_m: float = 100.0,
    r_pos: float = 10.0,
    r_neg: float = 25.0,
    buffer_per_place: int = 0,
) -> GeoDataset:
    """Planar toy world: well-separated places, co-located views per place.

    Place centers sit on a square grid ``spacing_m`` apart, so samples of
    different places are always farther than ``r_neg`` and samples of the
    same place always within ``r_pos`` (offsets are confined to a disk of
    radius ``r_pos / 2``).  Each sample's feature vector is the place
    latent plus isotropic view noise.  ``buffer_per_place`` optionally adds
    database samples in the annulus between the radii, which belong to
    neither the positive nor the negative set of their place's query.
    """
    if n_places < 2:
        raise ValueError("need at least 2 places")
    if db_per_place < 1:
        raise ValueError("need at least 1 database sample per place")
    if not 0.0 <= query_fraction <= 1.0:
        raise ValueError(f"query_fraction {query_fraction} outside [0, 1]")
    if spacing_m <= 2.0 * r_neg:
        raise ValueError(
            f"spacing_m {spacing_m} must exceed 2 * r_neg = {2 * r_neg} so places "
            "cannot overlap across the negative radius"
        )
    rng = np.random.default_rng(seed)
    side = math.ceil(math.sqrt(n_places))
    centers = [
        (spacing_m * (i % side), spacing_m * (i // side)) for i in range(n_places)
    ]
    latents = rng.normal(size=(n_places, feature_dim))

    if buffer_per_place > 0 and r_neg - r_pos <= 2.0:
        raise ValueError("buffer samples need r_neg - r_pos > 2 meters of annulus")

    def offset(radius: float) -> tuple[float, float]:
        # Uniform over a disk of the given radius.
        ang = rng.uniform(0.0, 2.0 * math.pi)
        r = math.sqrt(rng.uniform(0.0, 1.0)) * radius
        return r * math.cos(ang), r * math.sin(ang)

    next_id = 0
    database: list[GeoSample] = []
    place_center_pos: list[Position] = []
    for p in range(n_places):
        cx, cy = centers[p]
        place_center_pos.append(Position(PositionMode.PLANAR, cx, cy))
        for _ in range(db_per_place):
            dx, dy = offset(r_pos / 2.0)
            feats = latents[p] + rng.normal(size=feature_dim) * view_noise
            database.append(
                GeoSample(
                    next_id,
                    Role.DATABASE,
                    Position(PositionMode.PLANAR, cx + dx, cy + dy),
                    feats,
                )
            )
            next_id += 1
        for _ in range(buffer_per_place):
            # Annulus strictly between the radii: near the place but neither
            # positive nor negative for its query.
            ang = rng.uniform(0.0, 2.0 * math.pi)
            r = rng.uniform(r_pos + 1.0, r_neg - 1.0)
            feats = latents[p] + rng.normal(size=feature_dim) * view_noise
            database.append(
                GeoSample(
                    next_id,
                    Role.DATABASE,
                    Position(PositionMode.PLANAR, cx + r * math.cos(ang), cy + r * math.sin(ang)),
                    feats,
                )
            )
            next_id += 1

    n_queries = int(round(query_fraction * n_places))
    query_places = sorted(rng.choice(n_places, size=n_queries, replace=False).tolist())
    queries: list[GeoSample] = []
    for p in query_places:
        cx, cy = centers[p]
        dx, dy = offset(r_pos / 2.0)
        feats = latents[p] + rng.normal(size=feature_dim) * view_noise
        queries.append(
            GeoSample(
                next_id,
                Role.QUERY,
                Position(PositionMode.PLANAR, cx + dx, cy + dy),
                feats,
            )
        )
        next_id += 1

    return GeoDataset(queries=queries, database=database, r_pos=r_pos, r_neg=r_neg)


def save_csv(ds: GeoDataset, csv_path: str | Path) -> None:
    """Write samples as CSV plus a sibling ``.meta.json`` with the radii.

    Rows are ordered database first then queries, ascending id within each
    role, so a reload reproduces the dataset byte for byte.
    """
    csv_path = Path(csv_path)
    f_dim = ds.feature_dim
    header = ["id", "role", "lat_or_x", "lon_or_y"] + [f"f{i}" for i in range(f_dim)]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in sorted(ds.database, key=lambda s: s.id) + sorted(
            ds.queries, key=lambda s: s.id
        ):
            w.writerow(
                [s.id, s.role.value, repr(s.position.a), repr(s.position.b)]
                + [repr(float(x)) for x in s.features]
            )
    meta = {
        "mode": ds.mode.value,
        "r_pos": ds.r_pos,
        "r_neg": ds.r_neg,
        "feature_dim": f_dim,
    }
    with open(csv_path.with_suffix(".meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_csv(csv_path: str | Path) -> GeoDataset:
    csv_path = Path(csv_path)
    meta_path = csv_path.with_suffix(".meta.json")
    if not meta_path.exists():
        raise FileNotFoundError(f"missing metadata sidecar {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    mode = PositionMode(meta["mode"])
    queries: list[GeoSample] = []
    database: list[GeoSample] = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_feat = len(header) - 4
        if n_feat != meta["feature_dim"]:
            raise ValueError(
                f"csv has {n_feat} feature columns, metadata says {meta['feature_dim']}"
            )
        for row in reader:
            sid = int(row[0])
            role = Role(row[1])
            pos = Position(mode, float(row[2]), float(row[3]))
            feats = np.array([float(x) for x in row[4:]], dtype=np.float64)
            sample = GeoSample(sid, role, pos, feats)
            (queries if role is Role.QUERY else database).append(sample)
    return GeoDataset(
        queries=queries, database=database, r_pos=meta["r_pos"], r_neg=meta["r_neg"]
    )
