"""Deterministic synthetic benchmark data: planted-witness bags on a tract grid.

Negative bags draw every instance from a background Gaussian; positive bags
replace a fixed fraction of instances with draws from a witness Gaussian
shifted along one fixed random unit direction. Tracts are disjoint unit grid
squares so the spatial join can recover the generator's assignment exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .bags import InstanceEmbedding, TractBag
from .errors import ConfigError
from .geodata import DEFAULT_FLAG_COLUMNS, DEFAULT_TRACT_COLUMN, TractBoundary

__all__ = ["SynthConfig", "SynthDataset", "generate", "write_dataset", "is_witness"]

# interior margin keeps sampled points off shared square edges, where the
# even-odd rule's tie-breaking between adjacent tracts is unspecified
_CELL_MARGIN = 0.05


@dataclass
class SynthConfig:
    """Generator settings; every draw is a pure function of ``seed``."""

    n_tracts: int = 600
    k_min: int = 5
    k_max: int = 20
    m: int = 32
    positive_rate: float = 0.28
    witness_rate: float = 0.2
    separation: float = 2.0
    noise_std: float = 0.75
    n_cities: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_tracts < 1:
            raise ConfigError("n_tracts must be >= 1")
        if not (1 <= self.k_min <= self.k_max):
            raise ConfigError("bag size range requires 1 <= k_min <= k_max")
        if self.m < 1:
            raise ConfigError("embedding dimension must be >= 1")
        if not (0.0 < self.positive_rate < 1.0):
            raise ConfigError("positive_rate must lie in (0, 1)")
        if not (0.0 < self.witness_rate <= 1.0):
            raise ConfigError("witness_rate must lie in (0, 1]")
        if self.separation < 0.0:
            raise ConfigError("separation must be >= 0")
        if self.noise_std <= 0.0:
            raise ConfigError("noise_std must be positive")
        if self.n_cities < 1:
            raise ConfigError("n_cities must be >= 1")


@dataclass
class SynthDataset:
    bags: list[TractBag]
    boundaries: list[TractBoundary]
    incomes: dict[str, float]
    config: SynthConfig


def is_witness(image_id: str) -> bool:
    """True when the generator drew this instance from the witness distribution."""
    return image_id.endswith("-w")


def _tract_geoid(city_index: int, tract_index: int) -> str:
    # synthetic state 99 + city as county + tract index: 2 + 3 + 6 = 11 chars
    return f"99{city_index:03d}{tract_index:06d}"


def _square(col: int, row: int) -> dict:
    lon0, lat0 = float(col), float(row)
    ring = [
        [lon0, lat0],
        [lon0 + 1.0, lat0],
        [lon0 + 1.0, lat0 + 1.0],
        [lon0, lat0 + 1.0],
        [lon0, lat0],
    ]
    return {"type": "Polygon", "coordinates": [ring]}


def generate(config: SynthConfig) -> SynthDataset:
    """Build the full synthetic dataset: bags, grid boundaries, incomes.

    The positive class prior is exact by quota: round(positive_rate * n_tracts)
    tracts are positive, their identities shuffled by the seed.
    """
    rng = np.random.default_rng(config.seed)

    direction = rng.normal(size=config.m)
    direction /= np.linalg.norm(direction)
    witness_mean = config.separation * direction

    n_positive = round(config.positive_rate * config.n_tracts)
    labels = np.zeros(config.n_tracts, dtype=int)
    labels[:n_positive] = 1
    rng.shuffle(labels)

    grid_cols = math.ceil(math.sqrt(config.n_tracts))

    bags: list[TractBag] = []
    boundaries: list[TractBoundary] = []
    incomes: dict[str, float] = {}
    for i in range(config.n_tracts):
        city_index = i % config.n_cities
        city = f"synthcity{city_index:02d}"
        tract_id = _tract_geoid(city_index, i)
        label = int(labels[i])

        col, row = i % grid_cols, i // grid_cols
        boundaries.append(TractBoundary(tract_id=tract_id, geometry=_square(col, row)))

        k = int(rng.integers(config.k_min, config.k_max + 1))
        n_witness = math.ceil(config.witness_rate * k) if label == 1 else 0
        witness_slots = np.zeros(k, dtype=bool)
        if n_witness:
            witness_slots[rng.permutation(k)[:n_witness]] = True

        features = rng.normal(0.0, config.noise_std, size=(k, config.m))
        features[witness_slots] += witness_mean

        lons = col + rng.uniform(_CELL_MARGIN, 1.0 - _CELL_MARGIN, size=k)
        lats = row + rng.uniform(_CELL_MARGIN, 1.0 - _CELL_MARGIN, size=k)

        instances = [
            InstanceEmbedding(
                image_id=f"img-{tract_id}-{j:03d}-{'w' if witness_slots[j] else 'b'}",
                lat=float(lats[j]),
                lon=float(lons[j]),
                city=city,
                features=features[j],
            )
            for j in range(k)
        ]

        income = float(rng.normal(55000.0, 10000.0))
        if label == 1:
            income -= 15000.0
        income = max(income, 10000.0)
        incomes[tract_id] = income

        bags.append(
            TractBag(tract_id=tract_id, instances=instances, label=label, income=income, city=city)
        )

    return SynthDataset(bags=bags, boundaries=boundaries, incomes=incomes, config=config)


def write_dataset(dataset: SynthDataset, outdir) -> dict[str, str]:
    """Emit the dataset in the four ingestion file formats.

    Atlas flags encode the label by setting one of the four columns per
    positive tract (rotating by tract index), so ingestion exercises the
    flag-OR labeling path.
    """
    os.makedirs(outdir, exist_ok=True)
    paths = {
        "embeddings": os.path.join(outdir, "embeddings.jsonl"),
        "atlas": os.path.join(outdir, "atlas.csv"),
        "boundaries": os.path.join(outdir, "boundaries.geojson"),
        "income": os.path.join(outdir, "income.csv"),
    }

    with open(paths["embeddings"], "w", encoding="utf-8") as fh:
        for bag in dataset.bags:
            for inst in bag.instances:
                record = {
                    "image_id": inst.image_id,
                    "lat": inst.lat,
                    "lon": inst.lon,
                    "city": inst.city,
                    "embedding": inst.features.tolist(),
                }
                fh.write(json.dumps(record) + "\n")

    with open(paths["atlas"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([DEFAULT_TRACT_COLUMN, *DEFAULT_FLAG_COLUMNS])
        for index, bag in enumerate(dataset.bags):
            flags = [0, 0, 0, 0]
            if bag.label == 1:
                flags[index % 4] = 1
            writer.writerow([bag.tract_id, *flags])

    features = [
        {
            "type": "Feature",
            "geometry": boundary.geometry,
            "properties": {"GEOID10": boundary.tract_id},
        }
        for boundary in dataset.boundaries
    ]
    with open(paths["boundaries"], "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh, indent=2)
        fh.write("\n")

    with open(paths["income"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["GEOID", "median_household_income"])
        for bag in dataset.bags:
            writer.writerow([bag.tract_id, repr(dataset.incomes[bag.tract_id])])

    with open(os.path.join(outdir, "synth_config.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(dataset.config), fh, indent=2)
        fh.write("\n")

    return paths
