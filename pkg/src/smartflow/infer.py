"""Mesh-free prediction: encode the geometry once, decode queries in chunks."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import diffcore as dc
from .checkpoint import Checkpoint
from .data.dataset import Normalizer
from .data.types import PointCloud, QuerySet
from .errors import EmptyQuerySetError, InvalidConfigError
from .model import LatentGeometrySequence, SmartModel


def worker_count() -> int:
    """Chunk workers from ``SMART_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("SMART_THREADS", "1")))
    except ValueError:
        raise InvalidConfigError("SMART_THREADS must be an integer") from None


def _points(x) -> np.ndarray:
    if isinstance(x, (PointCloud, QuerySet)):
        return x.points
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def decode_chunks(
    model: SmartModel,
    latents: LatentGeometrySequence,
    queries: np.ndarray,
    xi: np.ndarray,
    chunk_size: int,
    workers: int = 1,
) -> np.ndarray:
    """Decode normalized ``queries`` against cached latents, ``chunk_size`` rows at a time."""
    if chunk_size < 1:
        raise InvalidConfigError("chunk_size must be >= 1")
    m = len(queries)
    out = np.empty((m, model.config.n_channels))
    starts = range(0, m, chunk_size)

    def run(start):
        with dc.no_grad():
            stop = min(start + chunk_size, m)
            out[start:stop] = model.decode(latents, queries[start:stop], xi).data

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, starts))
    else:
        for start in starts:
            run(start)
    return out


def predict_normalized(model: SmartModel, geometry, xi, queries, chunk_size: int, seed=0, workers=None) -> np.ndarray:
    """Prediction in model units for already-normalized inputs."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(queries) == 0:
        raise EmptyQuerySetError("no query points")
    with dc.no_grad():
        latents = model.encode(geometry, xi, seed)
    return decode_chunks(model, latents, queries, xi, chunk_size, workers or worker_count())


def predict_chunked(
    checkpoint: Checkpoint | tuple[SmartModel, Normalizer],
    geometry,
    xi,
    queries,
    chunk_size: int,
    rng_seed=0,
    workers: int | None = None,
) -> np.ndarray:
    """Physical-unit predictions ``(M, n_channels)`` for arbitrary query points."""
    if isinstance(checkpoint, Checkpoint):
        model, norm = checkpoint.model, checkpoint.normalizer
    else:
        model, norm = checkpoint
    if chunk_size < 1:
        raise InvalidConfigError("chunk_size must be >= 1")
    q = _points(queries)
    if len(q) == 0:
        raise EmptyQuerySetError("no query points")
    xi = np.asarray(xi, dtype=np.float64).reshape(-1)
    pred = predict_normalized(
        model, norm.coords(_points(geometry)), norm.params(xi), norm.coords(q), chunk_size, rng_seed, workers
    )
    return norm.targets_inverse(pred)
