"""Domain types for instances (geolocated image embeddings) and tract bags."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError


@dataclass
class InstanceEmbedding:
    """One geolocated image's fixed-length feature vector.

    Features are widened to float64 on construction; model math is always
    double precision even when embeddings were stored single precision.
    """

    image_id: str
    lat: float
    lon: float
    city: str
    features: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 1 or self.features.size < 1:
            raise ShapeError(
                f"instance {self.image_id!r}: features must be a non-empty vector"
            )
        if not np.all(np.isfinite(self.features)):
            raise NumericError(f"instance {self.image_id!r}: non-finite feature value")
        if not (-90.0 <= self.lat <= 90.0):
            raise NumericError(f"instance {self.image_id!r}: lat {self.lat} out of range")
        if not (-180.0 <= self.lon <= 180.0):
            raise NumericError(f"instance {self.image_id!r}: lon {self.lon} out of range")

    @property
    def dim(self) -> int:
        return self.features.shape[0]


@dataclass
class TractBag:
    """A census tract's instances plus its binary label and optional income.

    The unit of classification. ``label`` is 1 for food insecure, 0 for food
    secure, or None for inference-only bags.
    """

    tract_id: str
    instances: list[InstanceEmbedding]
    label: int | None = None
    income: float | None = None
    city: str = ""
    _matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.instances) < 1:
            raise ShapeError(f"tract {self.tract_id}: empty bags are rejected")
        dims = {inst.dim for inst in self.instances}
        if len(dims) != 1:
            raise ShapeError(
                f"tract {self.tract_id}: instances have mixed feature lengths {sorted(dims)}"
            )
        if self.label is not None and self.label not in (0, 1):
            raise NumericError(f"tract {self.tract_id}: label must be 0 or 1")
        if not self.city and self.instances:
            self.city = self.instances[0].city
        self._matrix = np.vstack([inst.features for inst in self.instances])

    @property
    def size(self) -> int:
        """Number of instances K."""
        return len(self.instances)

    @property
    def dim(self) -> int:
        """Embedding dimension M."""
        return self._matrix.shape[1]

    @property
    def feature_matrix(self) -> np.ndarray:
        """The K x M instance matrix (treat as read-only)."""
        return self._matrix

    @property
    def image_ids(self) -> list[str]:
        return [inst.image_id for inst in self.instances]
