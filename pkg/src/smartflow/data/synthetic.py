"""Analytic potential flow past a sphere as a synthetic dataset.

Inflow is ``U`` along +x, density 1 and free-stream pressure 0. On the
surface ``Cp = 1 - 9/4 sin^2(theta)``; in the volume

    u = U x_hat + U R^3 / (2 r^3) (x_hat - 3 cos(theta) r_hat)

which is the Cartesian form of ``u_r = U (1 - R^3/r^3) cos(theta)``,
``u_theta = -U (1 + R^3/(2 r^3)) sin(theta)``.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import InvalidConfigError
from .dataset import save_sample
from .types import N_CHANNELS, SURFACE, VOLUME, FieldSample, FlowConstants, PointCloud, QuerySet

RHO = 1.0
P_INF = 0.0
SHELL_OUTER = 4.0

# jitter ranges for generated datasets
RADIUS_RANGE = (0.8, 1.2)
CENTER_JITTER = 0.2
INFLOW_RANGE = (0.5, 1.5)


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` nearly uniform unit vectors on the sphere (golden-angle spiral)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    rho = np.sqrt(1.0 - z * z)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def surface_pressure(points, center, radius, inflow, rho=RHO):
    """Pressure on the sphere surface at ``points``."""
    rel = np.asarray(points, dtype=np.float64) - center
    cos_t = rel[:, 0] / np.linalg.norm(rel, axis=1)
    sin2 = 1.0 - cos_t * cos_t
    return P_INF + 0.5 * rho * inflow**2 * (1.0 - 2.25 * sin2)


def velocity(points, center, radius, inflow):
    """Potential-flow velocity ``(M, 3)`` at ``points`` outside the sphere."""
    rel = np.asarray(points, dtype=np.float64) - center
    r = np.linalg.norm(rel, axis=1, keepdims=True)
    r_hat = rel / r
    cos_t = r_hat[:, :1]
    k = radius**3 / r**3
    x_hat = np.array([1.0, 0.0, 0.0])
    return inflow * (x_hat + 0.5 * k * (x_hat - 3.0 * cos_t * r_hat))


def generate_sphere_flow(
    radius: float,
    center,
    inflow: float,
    counts: tuple[int, int, int] = (512, 2048, 2048),
    rng_seed=0,
) -> FieldSample:
    """One synthetic sample; ``counts`` is (geometry, surface, volume) points."""
    if not radius > 0 or not inflow > 0:
        raise InvalidConfigError("radius and inflow speed must be positive")
    n_geo, m_s, m_v = counts
    if min(counts) < 1:
        raise InvalidConfigError("all point counts must be >= 1")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    rng = np.random.default_rng(rng_seed)

    geo_n = fibonacci_sphere(n_geo)
    area = 4.0 * np.pi * radius**2
    geometry = PointCloud(center + radius * geo_n, geo_n, np.full(n_geo, area / n_geo))

    # rotated lattice so surface queries do not coincide with geometry points
    rot = Rotation.random(random_state=rng)
    surf_n = rot.apply(fibonacci_sphere(m_s))
    surf_n /= np.linalg.norm(surf_n, axis=1, keepdims=True)
    surf = center + radius * surf_n

    dirs = rng.normal(size=(m_v, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    u = 1.0 - rng.random(m_v)  # (0, 1]
    r = radius * np.cbrt(1.0 + u * (SHELL_OUTER**3 - 1.0))
    vol = center + r[:, None] * dirs

    targets = np.zeros((m_s + m_v, N_CHANNELS))
    targets[:m_s, 0] = surface_pressure(surf, center, radius, inflow)
    targets[m_s:, 1:] = velocity(vol, center, radius, inflow)

    return FieldSample(
        geometry=geometry,
        params=np.array([inflow, radius]),
        queries=QuerySet(np.concatenate([surf, vol]), np.r_[np.full(m_s, SURFACE), np.full(m_v, VOLUME)]),
        targets=targets,
        surface_normals=surf_n,
        surface_areas=np.full(m_s, area / m_s),
        surface_shear=np.zeros((m_s, 3)),
        flow=FlowConstants(rho=RHO, v_ref=float(inflow), alpha=0.0, a_ref=float(np.pi * radius**2)),
        meta={"radius": float(radius), "center": center.tolist(), "inflow": float(inflow)},
    )


def sample_seed(seed: int, index: int) -> int:
    return int(seed) ^ int(index)


def random_sphere_flow(seed: int, counts=(512, 2048, 2048)) -> FieldSample:
    """Sphere flow with radius, centre and inflow drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    radius = rng.uniform(*RADIUS_RANGE)
    center = rng.uniform(-CENTER_JITTER, CENTER_JITTER, 3)
    inflow = rng.uniform(*INFLOW_RANGE)
    sample = generate_sphere_flow(radius, center, inflow, counts, rng)
    sample.meta["seed"] = int(seed)
    return sample


def generate_dataset(
    out: str | os.PathLike,
    n_samples: int,
    seed: int,
    counts=(512, 2048, 2048),
    start: int = 0,
) -> list[Path]:
    """Write ``n_samples`` sample directories ``sample_0000`` ... under ``out``."""
    if n_samples < 1:
        raise InvalidConfigError("n_samples must be >= 1")
    out = Path(out)
    paths = []
    for i in range(start, start + n_samples):
        sample = random_sphere_flow(sample_seed(seed, i), counts)
        sample.meta["id"] = f"sample_{i:04d}"
        paths.append(save_sample(out / f"sample_{i:04d}", sample))
    return paths
