"""Core dataset records: geometry, queries and full samples."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyGeometryError, EmptyQuerySetError, NonFiniteError, NonUnitNormalError, ShapeMismatchError

SURFACE = 0
VOLUME = 1

PRESSURE = 0
VELOCITY = (1, 2, 3)
N_CHANNELS = 4


def _finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")


@dataclass
class PointCloud:
    """Geometry as ``N`` points, optionally with unit normals and areas."""

    points: np.ndarray
    normals: np.ndarray | None = None
    areas: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeMismatchError(f"points must be (N, 3), got {self.points.shape}")
        if len(self.points) == 0:
            raise EmptyGeometryError("point cloud is empty")
        _finite("points", self.points)
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise ShapeMismatchError("normals must match points")
            length = np.linalg.norm(self.normals, axis=1)
            ok = np.abs(length - 1.0) <= 1e-6
            if self.degenerate is not None:
                ok |= np.asarray(self.degenerate, dtype=bool) & (length == 0.0)
            if not np.all(ok):
                raise NonUnitNormalError("normals must have unit length")
        if self.areas is not None:
            self.areas = np.asarray(self.areas, dtype=np.float64).reshape(-1)
            if self.areas.shape != (n,):
                raise ShapeMismatchError("areas must have one entry per point")

    def __len__(self):
        return len(self.points)


@dataclass
class QuerySet:
    """``M`` query locations, each tagged surface (0) or volume (1)."""

    points: np.ndarray
    kind: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.kind = np.asarray(self.kind).astype(np.int64).reshape(-1)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeMismatchError(f"query points must be (M, 3), got {self.points.shape}")
        if len(self.points) == 0:
            raise EmptyQuerySetError("query set is empty")
        if self.kind.shape != (len(self.points),):
            raise ShapeMismatchError("one kind tag per query")
        if not np.all((self.kind == SURFACE) | (self.kind == VOLUME)):
            raise ShapeMismatchError("kind tags must be 0 (surface) or 1 (volume)")
        _finite("query points", self.points)

    def __len__(self):
        return len(self.points)

    @property
    def surface_index(self) -> np.ndarray:
        return np.flatnonzero(self.kind == SURFACE)

    @property
    def volume_index(self) -> np.ndarray:
        return np.flatnonzero(self.kind == VOLUME)


@dataclass
class FlowConstants:
    rho: float = 1.0
    v_ref: float = 1.0
    alpha: float = 0.0
    a_ref: float = 1.0


@dataclass
class FieldSample:
    """Geometry, simulation parameters, queries and their target fields.

    ``targets`` is ``(M, 4)``: surface rows carry pressure in channel 0,
    volume rows carry velocity in channels 1-3; other entries are unused.
    ``surface_normals`` / ``surface_areas`` / ``surface_shear`` align with the
    surface rows in query order and feed force integration.
    """

    geometry: PointCloud
    params: np.ndarray
    queries: QuerySet
    targets: np.ndarray
    surface_normals: np.ndarray | None = None
    surface_areas: np.ndarray | None = None
    surface_shear: np.ndarray | None = None
    flow: FlowConstants = field(default_factory=FlowConstants)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        _finite("params", self.params)
        _finite("targets", self.targets)
        if self.targets.ndim != 2 or self.targets.shape[0] != len(self.queries):
            raise ShapeMismatchError("targets need one row per query")
        n_s = len(self.queries.surface_index)
        for name in ("surface_normals", "surface_shear"):
            val = getattr(self, name)
            if val is not None and np.shape(val) != (n_s, 3):
                raise ShapeMismatchError(f"{name} must be ({n_s}, 3)")
        if self.surface_areas is not None and np.shape(self.surface_areas) != (n_s,):
            raise ShapeMismatchError(f"surface_areas must be ({n_s},)")

    @property
    def n_surface(self) -> int:
        return len(self.queries.surface_index)

    @property
    def n_volume(self) -> int:
        return len(self.queries.volume_index)

    def select(self, rows: np.ndarray) -> "FieldSample":
        """Sample restricted to query ``rows`` (in the given order)."""
        rows = np.asarray(rows, dtype=np.int64)
        surf_pos = np.full(len(self.queries), -1)
        surf_pos[self.queries.surface_index] = np.arange(self.n_surface)
        kept = surf_pos[rows]
        kept = kept[kept >= 0]

        def pick(arr):
            return None if arr is None else np.asarray(arr)[kept]

        return FieldSample(
            geometry=self.geometry,
            params=self.params,
            queries=QuerySet(self.queries.points[rows], self.queries.kind[rows]),
            targets=self.targets[rows],
            surface_normals=pick(self.surface_normals),
            surface_areas=pick(self.surface_areas),
            surface_shear=pick(self.surface_shear),
            flow=self.flow,
            meta=dict(self.meta),
        )
