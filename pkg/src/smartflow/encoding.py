"""Modulated sinusoidal positional encoding of 3D coordinates.

Each axis is embedded on its own into ``axis_dim`` features and the three
blocks are concatenated ``(x || y || z)``. Feature ``2i`` holds
``sin(gamma_2i(x) * x * f_i + beta_2i(x))`` and feature ``2i+1`` the cosine
analogue, with ``f_i = base ** (-2i / axis_dim)``. ``gamma`` and ``beta``
come from a small MLP of the scalar coordinate (shared by all three axes).
With ``gamma = 1`` and ``beta = 0`` this is the classic transformer encoding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import InvalidConfigError, NonFiniteError


@dataclass
class MpeParams:
    """Encoding layout plus the (optional) modulation network weights.

    ``scale`` multiplies the coordinate inside the sinusoid only; the
    modulation MLP always sees the raw coordinate.
    """

    axis_dim: int
    base: float = 10000.0
    scale: float = 1.0
    weights: dict[str, dc.DiffArray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.axis_dim < 2 or self.axis_dim % 2:
            raise InvalidConfigError(f"axis_dim must be even and >= 2, got {self.axis_dim}")

    @property
    def modulated(self) -> bool:
        return self.weights is not None


def init_modulation(axis_dim: int, rng: np.random.Generator) -> dict[str, dc.DiffArray]:
    """Modulation MLP ``1 -> axis_dim -> 2*axis_dim`` with a zero last layer.

    The zero output layer means gamma = 1, beta = 0 at initialization.
    """
    return {
        "w1": dc.DiffArray(rng.normal(0.0, 1.0, (1, axis_dim)), requires_grad=True),
        "b1": dc.DiffArray(np.zeros(axis_dim), requires_grad=True),
        "w2": dc.DiffArray(np.zeros((axis_dim, 2 * axis_dim)), requires_grad=True),
        "b2": dc.DiffArray(np.zeros(2 * axis_dim), requires_grad=True),
    }


def frequencies(axis_dim: int, base: float = 10000.0) -> np.ndarray:
    """Per-feature angular frequency; features 2i and 2i+1 share ``f_i``."""
    i = np.arange(axis_dim) // 2
    return base ** (-2.0 * i / axis_dim)


def _modulation(x: dc.DiffArray, weights: dict[str, dc.DiffArray], axis_dim: int):
    h = dc.gelu(dc.linear(x, weights["w1"], weights["b1"]))
    raw = dc.linear(h, weights["w2"], weights["b2"])
    gamma = dc.add(raw[:, :axis_dim], 1.0)
    beta = raw[:, axis_dim:]
    return gamma, beta


def encode_coordinates(x, params: MpeParams) -> dc.DiffArray:
    """Encode a vector of ``n`` scalar coordinates into ``(n, axis_dim)``."""
    x = dc.as_diff(x)
    x = x.reshape(-1, 1)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("coordinate is not finite")
    n = x.shape[0]
    arg = (x.data * params.scale) * frequencies(params.axis_dim, params.base)
    if params.modulated:
        gamma, beta = _modulation(x, params.weights, params.axis_dim)
        phase = dc.add(dc.mul(gamma, arg), beta)
    else:
        phase = dc.DiffArray(arg)
    s = dc.sin(phase[:, 0::2])
    c = dc.cos(phase[:, 1::2])
    pairs = dc.concat([s.reshape(n, -1, 1), c.reshape(n, -1, 1)], axis=2)
    return pairs.reshape(n, params.axis_dim)


def mpe_axis(x: float, params: MpeParams) -> dc.DiffArray:
    """Encoding of a single scalar coordinate, shape ``(axis_dim,)``."""
    return encode_coordinates(np.array([x], dtype=np.float64), params).reshape(params.axis_dim)


def mpe_point(points, params: MpeParams, d: int | None = None) -> dc.DiffArray:
    """Encode ``(n, 3)`` points (or one 3-vector) into ``(n, 3*axis_dim)``."""
    if d is not None:
        check_embed_dim(d)
        if d != 3 * params.axis_dim:
            raise InvalidConfigError(f"d={d} does not match 3 * axis_dim={3 * params.axis_dim}")
    pts = points.data if isinstance(points, dc.DiffArray) else np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    n = pts.shape[0]
    emb = encode_coordinates(pts.reshape(-1), params).reshape(n, 3 * params.axis_dim)
    return emb.reshape(3 * params.axis_dim) if single else emb


def check_embed_dim(d: int) -> int:
    if d < 6 or d % 6:
        raise InvalidConfigError(f"embedding dim must be a positive multiple of 6, got {d}")
    return d // 3


def sinusoidal_encoding(points, d: int, base: float = 10000.0, scale: float = 1.0) -> np.ndarray:
    """Classic per-axis sin/cos encoding (no learned modulation), plain numpy."""
    axis_dim = check_embed_dim(d)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    half = np.arange(0, axis_dim, 2)
    out = np.empty((n, 3, axis_dim))
    for axis in range(3):
        arg = (pts[:, axis : axis + 1] * scale) * base ** (-half / axis_dim)
        out[:, axis, 0::2] = np.sin(arg)
        out[:, axis, 1::2] = np.cos(arg)
    return out.reshape(n, d)
