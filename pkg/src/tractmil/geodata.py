"""Data ingestion and geospatial plumbing.

Loads embeddings, atlas labels, tract boundaries, and income tables; assigns
images to tracts by even-odd point-in-polygon; groups instances into bags;
and produces stratified and city-holdout split plans.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .bags import InstanceEmbedding, TractBag
from .errors import ConfigError, DataError, FormatError, GeometryError, TractMILError

logger = logging.getLogger(__name__)

GEOID_LENGTH = 11

# USDA Food Access Research Atlas low-income/low-access tract flags
DEFAULT_FLAG_COLUMNS = (
    "LILATracts_1And10",
    "LILATracts_halfAnd10",
    "LILATracts_1And20",
    "LILATracts_Vehicle",
)
DEFAULT_TRACT_COLUMN = "CensusTract"
DEFAULT_INCOME_COLUMNS = ("GEOID", "median_household_income")
DEFAULT_GEOID_PROPERTY = "GEOID10"

__all__ = [
    "TractBoundary",
    "SplitPlan",
    "load_embeddings",
    "load_atlas",
    "load_boundaries",
    "load_income",
    "point_in_rings",
    "assign_to_tracts",
    "build_bags",
    "stratified_split",
    "holdout_city_split",
    "save_split",
    "load_split",
]


def normalize_geoid(value) -> str:
    """Zero-pad a tract identifier to the canonical 11-character GEOID."""
    return str(value).strip().zfill(GEOID_LENGTH)


@dataclass
class TractBoundary:
    """A tract's polygon or multi-polygon with rings as (lon, lat) vertex lists."""

    tract_id: str
    geometry: dict  # raw feature geometry, kept verbatim for re-emission
    rings: list[np.ndarray] = field(init=False, repr=False)
    bbox: tuple[float, float, float, float] = field(init=False, repr=False)

    def __post_init__(self):
        gtype = self.geometry.get("type")
        coords = self.geometry.get("coordinates")
        if gtype == "Polygon":
            ring_lists = list(coords)
        elif gtype == "MultiPolygon":
            ring_lists = [ring for poly in coords for ring in poly]
        else:
            raise GeometryError(f"tract {self.tract_id}: unsupported geometry type {gtype!r}")
        self.rings = []
        for ring in ring_lists:
            arr = np.asarray(ring, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 4:
                raise GeometryError(
                    f"tract {self.tract_id}: ring must have >= 4 (lon, lat) vertices"
                )
            if not np.array_equal(arr[0], arr[-1]):
                raise GeometryError(f"tract {self.tract_id}: ring is not closed")
            self.rings.append(arr)
        lons = np.concatenate([r[:, 0] for r in self.rings])
        lats = np.concatenate([r[:, 1] for r in self.rings])
        self.bbox = (float(lons.min()), float(lats.min()), float(lons.max()), float(lats.max()))


@dataclass
class SplitPlan:
    """Disjoint assignment of tract IDs to train/validation/test partitions."""

    train: set[str]
    validation: set[str]
    test: set[str]
    seed: int
    method: str  # "stratified" | "city-holdout"

    def __post_init__(self):
        self.train = set(self.train)
        self.validation = set(self.validation)
        self.test = set(self.test)
        if (
            self.train & self.validation
            or self.train & self.test
            or self.validation & self.test
        ):
            raise DataError("split partitions must be pairwise disjoint")
        if self.method == "stratified" and not (self.train and self.validation and self.test):
            raise DataError("stratified split requires nonempty train/validation/test")

    def partition(self, name: str) -> set[str]:
        if name not in ("train", "validation", "test"):
            raise ConfigError(f"unknown partition {name!r}")
        return getattr(self, name)

    @property
    def all_ids(self) -> set[str]:
        return self.train | self.validation | self.test


def load_embeddings(path) -> list[InstanceEmbedding]:
    """Parse a newline-delimited embeddings file into instances.

    Each line is one JSON record {image_id, lat, lon, city, embedding}.
    Enforces a uniform embedding dimension across records and unique image ids.
    """
    instances: list[InstanceEmbedding] = []
    seen_ids: set[str] = set()
    dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
            try:
                inst = InstanceEmbedding(
                    image_id=str(record["image_id"]),
                    lat=float(record["lat"]),
                    lon=float(record["lon"]),
                    city=str(record["city"]),
                    features=np.asarray(record["embedding"], dtype=np.float64),
                )
            except KeyError as exc:
                raise FormatError(f"{path}: line {lineno}: missing field {exc}") from exc
            except (TractMILError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
            if dim is None:
                dim = inst.dim
            elif inst.dim != dim:
                raise FormatError(
                    f"{path}: line {lineno}: embedding has {inst.dim} values, expected {dim}"
                )
            if inst.image_id in seen_ids:
                raise FormatError(f"{path}: line {lineno}: duplicate image_id {inst.image_id!r}")
            seen_ids.add(inst.image_id)
            instances.append(inst)
    if not instances:
        logger.warning("%s: no embedding records found", path)
    else:
        logger.info("loaded %d embeddings (M=%d) from %s", len(instances), dim, path)
    return instances


_TRUE_VALUES = {"1", "true"}
_FALSE_VALUES = {"0", "false", ""}


def _parse_flag(value, column: str, lineno: int) -> int:
    text = str(value).strip().lower()
    if text in _TRUE_VALUES:
        return 1
    if text in _FALSE_VALUES:
        return 0
    raise FormatError(f"line {lineno}: column {column!r}: cannot interpret flag value {value!r}")


def load_atlas(
    path,
    tract_column: str = DEFAULT_TRACT_COLUMN,
    flag_columns: tuple[str, str, str, str] = DEFAULT_FLAG_COLUMNS,
) -> dict[str, int]:
    """Read the atlas table; a tract is labeled 1 when any of the four flags is set."""
    if len(flag_columns) != 4:
        raise ConfigError(f"expected exactly 4 flag columns, got {len(flag_columns)}")
    labels: dict[str, int] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        available = reader.fieldnames or []
        for column in (tract_column, *flag_columns):
            if column not in available:
                raise ConfigError(
                    f"{path}: missing column {column!r}; available columns: {available}"
                )
        for lineno, row in enumerate(reader, start=2):
            tract_id = normalize_geoid(row[tract_column])
            if tract_id in labels:
                raise FormatError(f"{path}: line {lineno}: duplicate tract {tract_id}")
            flags = [_parse_flag(row[c], c, lineno) for c in flag_columns]
            labels[tract_id] = 1 if any(flags) else 0
    return labels


def load_boundaries(path, geoid_property: str = DEFAULT_GEOID_PROPERTY) -> list[TractBoundary]:
    """Read a GeoJSON feature collection of tract boundaries, in file order."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("type") != "FeatureCollection" or "features" not in doc:
        raise FormatError(f"{path}: expected a GeoJSON FeatureCollection")
    boundaries: list[TractBoundary] = []
    seen: set[str] = set()
    for idx, feature in enumerate(doc["features"]):
        properties = feature.get("properties") or {}
        if geoid_property not in properties:
            raise FormatError(
                f"{path}: feature {idx}: missing property {geoid_property!r}; "
                f"available: {sorted(properties)}"
            )
        tract_id = normalize_geoid(properties[geoid_property])
        if tract_id in seen:
            raise FormatError(f"{path}: duplicate GEOID {tract_id}")
        seen.add(tract_id)
        boundaries.append(TractBoundary(tract_id=tract_id, geometry=feature["geometry"]))
    return boundaries


def load_income(
    path,
    tract_column: str = DEFAULT_INCOME_COLUMNS[0],
    income_column: str = DEFAULT_INCOME_COLUMNS[1],
) -> dict[str, float]:
    """Read the tract income table; empty income cells are treated as missing."""
    incomes: dict[str, float] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        available = reader.fieldnames or []
        for column in (tract_column, income_column):
            if column not in available:
                raise ConfigError(
                    f"{path}: missing column {column!r}; available columns: {available}"
                )
        for lineno, row in enumerate(reader, start=2):
            tract_id = normalize_geoid(row[tract_column])
            raw = (row[income_column] or "").strip()
            if not raw:
                continue
            try:
                value = float(raw)
            except ValueError as exc:
                raise FormatError(
                    f"{path}: line {lineno}: cannot parse income {raw!r}"
                ) from exc
            if not math.isfinite(value):
                raise FormatError(f"{path}: line {lineno}: non-finite income")
            incomes[tract_id] = value
    return incomes


def point_in_rings(lon: float, lat: float, rings: list[np.ndarray]) -> bool:
    """Even-odd (ray casting) containment over every ring of a tract.

    Counting crossings across outer rings and holes together implements the
    even-odd rule directly: a point inside a hole accumulates an even count.
    """
    crossings = 0
    for ring in rings:
        x0 = ring[:-1, 0]
        y0 = ring[:-1, 1]
        x1 = ring[1:, 0]
        y1 = ring[1:, 1]
        straddles = (y0 > lat) != (y1 > lat)
        idx = np.nonzero(straddles)[0]
        if idx.size == 0:
            continue
        x_at_lat = (x1[idx] - x0[idx]) * (lat - y0[idx]) / (y1[idx] - y0[idx]) + x0[idx]
        crossings += int(np.count_nonzero(lon < x_at_lat))
    return crossings % 2 == 1


def assign_to_tracts(
    points: list[InstanceEmbedding], boundaries: list[TractBoundary]
) -> dict[str, str]:
    """Map each image_id to the tract whose boundary contains it.

    A point matching multiple boundaries takes the first in file order (with a
    warning); points contained by no boundary are dropped (with a count).
    Bounding-box prefiltering accelerates the scan without changing results.
    """
    if not boundaries:
        raise DataError("no boundaries provided for spatial join")
    assignment: dict[str, str] = {}
    unmatched = 0
    multiple = 0
    for point in points:
        lon, lat = point.lon, point.lat
        matches = []
        for boundary in boundaries:
            min_lon, min_lat, max_lon, max_lat = boundary.bbox
            if lon < min_lon or lon > max_lon or lat < min_lat or lat > max_lat:
                continue
            if point_in_rings(lon, lat, boundary.rings):
                matches.append(boundary.tract_id)
        if not matches:
            unmatched += 1
            continue
        if len(matches) > 1:
            multiple += 1
            logger.warning(
                "image %s matches %d tracts; keeping first (%s)",
                point.image_id,
                len(matches),
                matches[0],
            )
        assignment[point.image_id] = matches[0]
    if unmatched:
        logger.warning("%d points matched no tract boundary and were dropped", unmatched)
    if multiple:
        logger.warning("%d points matched multiple boundaries", multiple)
    return assignment


def build_bags(
    instances: list[InstanceEmbedding],
    assignment: dict[str, str],
    labels: dict[str, int] | None = None,
    incomes: dict[str, float] | None = None,
) -> list[TractBag]:
    """Group instances into per-tract bags, preserving input order throughout.

    Bags appear in order of their tract's first occurrence in the instance
    stream. Tracts without an atlas row become inference-only bags (no label);
    labeled tracts without any image are skipped with a warning.
    """
    labels = labels or {}
    incomes = incomes or {}
    grouped: dict[str, list[InstanceEmbedding]] = {}
    for inst in instances:
        tract_id = assignment.get(inst.image_id)
        if tract_id is None:
            continue
        grouped.setdefault(tract_id, []).append(inst)
    bags = [
        TractBag(
            tract_id=tract_id,
            instances=members,
            label=labels.get(tract_id),
            income=incomes.get(tract_id),
            city=members[0].city,
        )
        for tract_id, members in grouped.items()
    ]
    missing = set(labels) - set(grouped)
    if missing:
        logger.warning("%d labeled tracts have no images and were skipped", len(missing))
    return bags


def _split_class(ids: list[str], ratios, rng: np.random.Generator):
    """Shuffle one class's tract ids and cut at floor boundaries; leftovers to train."""
    ids = sorted(ids)
    rng.shuffle(ids)
    n = len(ids)
    n_val = math.floor(ratios[1] * n)
    n_test = math.floor(ratios[2] * n)
    test = ids[:n_test]
    val = ids[n_test : n_test + n_val]
    train = ids[n_test + n_val :]
    return train, val, test


def stratified_split(
    bags: list[TractBag],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitPlan:
    """Per-class shuffled 60/20/20 split over labeled tracts.

    Each class is shuffled by the seed and cut at floor boundaries, so every
    partition's class share deviates from the global share by at most one
    tract per class.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be non-negative, got {ratios}")
    by_class: dict[int, list[str]] = {0: [], 1: []}
    for bag in bags:
        if bag.label is not None:
            by_class[bag.label].append(bag.tract_id)
    for cls, ids in by_class.items():
        if len(ids) < 3:
            raise DataError(
                f"class {cls} has only {len(ids)} labeled tracts; need >= 3 to stratify"
            )
    rng = np.random.default_rng(seed)
    train: list[str] = []
    val: list[str] = []
    test: list[str] = []
    for cls in (0, 1):
        tr, va, te = _split_class(by_class[cls], ratios, rng)
        train += tr
        val += va
        test += te
    return SplitPlan(train=set(train), validation=set(val), test=set(test), seed=seed, method="stratified")


def holdout_city_split(
    bags: list[TractBag],
    city: str,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> SplitPlan:
    """Leave-one-city-out protocol: the named city's labeled tracts form the test set.

    The remaining tracts are split into train plus a stratified validation
    slice of ``val_fraction`` used for model selection.
    """
    if not (0.0 <= val_fraction < 1.0):
        raise ConfigError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    labeled = [b for b in bags if b.label is not None]
    known_cities = sorted({b.city for b in labeled})
    if city not in known_cities:
        raise DataError(f"unknown city {city!r}; known cities: {known_cities}")
    test = {b.tract_id for b in labeled if b.city == city}
    rest_by_class: dict[int, list[str]] = {0: [], 1: []}
    for bag in labeled:
        if bag.city != city:
            rest_by_class[bag.label].append(bag.tract_id)
    rng = np.random.default_rng(seed)
    train: list[str] = []
    val: list[str] = []
    for cls in (0, 1):
        ids = sorted(rest_by_class[cls])
        rng.shuffle(ids)
        n_val = math.floor(val_fraction * len(ids))
        val += ids[:n_val]
        train += ids[n_val:]
    return SplitPlan(train=set(train), validation=set(val), test=test, seed=seed, method="city-holdout")


def save_split(plan: SplitPlan, path) -> None:
    """Persist a split plan as JSON with sorted id lists."""
    doc = {
        "method": plan.method,
        "seed": plan.seed,
        "train": sorted(plan.train),
        "validation": sorted(plan.validation),
        "test": sorted(plan.test),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_split(path) -> SplitPlan:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return SplitPlan(
            train=set(doc["train"]),
            validation=set(doc["validation"]),
            test=set(doc["test"]),
            seed=int(doc["seed"]),
            method=str(doc["method"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc
