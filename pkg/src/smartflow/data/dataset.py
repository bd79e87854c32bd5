"""On-disk dataset layout and normalization."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import DegenerateBoundsWarning, InvalidConfigError
from .arrayio import read_array, write_array
from .types import PRESSURE, SURFACE, VOLUME, FieldSample, FlowConstants, PointCloud, QuerySet

STD_FLOOR = 1e-8

_REQUIRED = ("geometry", "params", "queries", "kinds", "targets")
_OPTIONAL = {
    "geometry_normals": ("geometry", "normals"),
    "geometry_areas": ("geometry", "areas"),
    "surface_normals": (None, "surface_normals"),
    "surface_areas": (None, "surface_areas"),
    "surface_shear": (None, "surface_shear"),
}


def save_sample(directory: str | os.PathLike, sample: FieldSample) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "geometry.smrt", sample.geometry.points)
    write_array(out / "params.smrt", sample.params)
    write_array(out / "queries.smrt", sample.queries.points)
    write_array(out / "kinds.smrt", sample.queries.kind.astype(np.float64))
    write_array(out / "targets.smrt", sample.targets)
    for fname, (owner, attr) in _OPTIONAL.items():
        val = getattr(sample.geometry if owner else sample, attr)
        if val is not None:
            write_array(out / f"{fname}.smrt", val)
    meta = dict(sample.meta)
    meta["flow"] = asdict(sample.flow)
    meta["counts"] = {
        "geometry": len(sample.geometry),
        "surface": sample.n_surface,
        "volume": sample.n_volume,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_sample(directory: str | os.PathLike) -> FieldSample:
    src = Path(directory)
    arrays = {name: read_array(src / f"{name}.smrt") for name in _REQUIRED}
    opt = {name: read_array(src / f"{name}.smrt") for name in _OPTIONAL if (src / f"{name}.smrt").exists()}
    meta_path = src / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    flow = FlowConstants(**meta.pop("flow", {}))
    meta.pop("counts", None)
    geometry = PointCloud(arrays["geometry"], opt.get("geometry_normals"), opt.get("geometry_areas"))
    return FieldSample(
        geometry=geometry,
        params=arrays["params"],
        queries=QuerySet(arrays["queries"], arrays["kinds"].astype(np.int64)),
        targets=arrays["targets"],
        surface_normals=opt.get("surface_normals"),
        surface_areas=opt.get("surface_areas"),
        surface_shear=opt.get("surface_shear"),
        flow=flow,
        meta=meta,
    )


def list_samples(root: str | os.PathLike) -> list[Path]:
    root = Path(root)
    if (root / "targets.smrt").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "targets.smrt").exists())
    return dirs


def load_dataset(root: str | os.PathLike) -> list[FieldSample]:
    paths = list_samples(root)
    if not paths:
        raise InvalidConfigError(f"no samples found under {root}")
    return [load_sample(p) for p in paths]


@dataclass
class Normalizer:
    """Affine maps: coordinates to [-1, 1]^3, targets and parameters to z-scores."""

    coord_center: np.ndarray
    coord_scale: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    param_mean: np.ndarray
    param_std: np.ndarray

    def __post_init__(self):
        for name in ("coord_center", "coord_scale", "target_mean", "target_std", "param_mean", "param_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))

    @classmethod
    def fit(cls, samples: list[FieldSample]) -> "Normalizer":
        if not samples:
            raise InvalidConfigError("cannot fit a normalizer on zero samples")
        pts = np.concatenate([np.concatenate([s.geometry.points, s.queries.points]) for s in samples])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        center, scale = (hi + lo) / 2.0, (hi - lo) / 2.0
        flat = scale == 0.0
        if np.any(flat):
            warnings.warn(f"zero extent on axes {np.flatnonzero(flat).tolist()}", DegenerateBoundsWarning)
            center[flat], scale[flat] = 0.0, 1.0

        n_c = samples[0].targets.shape[1]
        mean, std = np.zeros(n_c), np.ones(n_c)
        for c in range(n_c):
            kind = SURFACE if c == PRESSURE else VOLUME
            vals = np.concatenate([s.targets[s.queries.kind == kind, c] for s in samples])
            if vals.size:
                mean[c], std[c] = vals.mean(), vals.std()
        params = np.stack([s.params for s in samples])
        return cls(
            coord_center=center,
            coord_scale=scale,
            target_mean=mean,
            target_std=np.maximum(std, STD_FLOOR),
            param_mean=params.mean(axis=0),
            param_std=np.maximum(params.std(axis=0), STD_FLOOR),
        )

    def coords(self, x):
        return (np.asarray(x, dtype=np.float64) - self.coord_center) / self.coord_scale

    def coords_inverse(self, x):
        return np.asarray(x, dtype=np.float64) * self.coord_scale + self.coord_center

    def targets(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def targets_inverse(self, y):
        return np.asarray(y, dtype=np.float64) * self.target_std + self.target_mean

    def params(self, xi):
        return (np.asarray(xi, dtype=np.float64) - self.param_mean) / self.param_std

    def params_inverse(self, xi):
        return np.asarray(xi, dtype=np.float64) * self.param_std + self.param_mean

    def apply(self, sample: FieldSample) -> "NormalizedSample":
        return NormalizedSample(
            geometry=self.coords(sample.geometry.points),
            params=self.params(sample.params),
            queries=self.coords(sample.queries.points),
            kind=sample.queries.kind,
            targets=self.targets(sample.targets),
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        return cls(**{k: np.array(v, dtype=np.float64) for k, v in data.items()})

    @classmethod
    def identity(cls, n_params: int, n_channels: int = 4) -> "Normalizer":
        return cls(np.zeros(3), np.ones(3), np.zeros(n_channels), np.ones(n_channels), np.zeros(n_params), np.ones(n_params))


@dataclass
class NormalizedSample:
    """Arrays of one sample in model units."""

    geometry: np.ndarray
    params: np.ndarray
    queries: np.ndarray
    kind: np.ndarray
    targets: np.ndarray

    @property
    def surface_index(self):
        return np.flatnonzero(self.kind == SURFACE)

    @property
    def volume_index(self):
        return np.flatnonzero(self.kind == VOLUME)


def normalize_fit_apply(samples: list[FieldSample]) -> tuple[Normalizer, list[NormalizedSample]]:
    norm = Normalizer.fit(samples)
    return norm, [norm.apply(s) for s in samples]

