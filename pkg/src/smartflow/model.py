"""Geometry encoder / physics decoder surrogate.

The encoder compresses an embedded geometry point cloud (plus simulation
parameters) into ``L`` latent geometries of ``K`` tokens each. Decoder block
``l`` lets every query attend to the latent geometry produced by encoder
block ``l``; queries never see each other, so any query subset yields exactly
the matching rows of the full prediction.

All inputs are expected in normalized units (coordinates in [-1, 1],
z-scored simulation parameters); see :mod:`smartflow.data`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .encoding import MpeParams, check_embed_dim, encode_coordinates, init_modulation
from .errors import EmptyGeometryError, EmptyQuerySetError, InvalidConfigError, ShapeMismatchError


@dataclass
class ModelConfig:
    d: int = 60
    K: int = 64
    n_sub: int = 256
    L: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    n_params: int = 2
    n_channels: int = 4
    share_weights: bool = True
    use_mpe: bool = True
    coarse_init: bool = True
    geometry_cross_attention: bool = True
    cross_layer_update: bool = True
    residual: bool = True
    pos_scale: float = 100.0
    pe_base: float = 10000.0
    ln_eps: float = 1e-5
    init_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        check_embed_dim(self.d)
        if self.K < 1 or self.L < 1 or self.n_sub < 1:
            raise InvalidConfigError("K, L and n_sub must be >= 1")
        if self.heads < 1 or self.d % self.heads:
            raise InvalidConfigError(f"heads={self.heads} must divide d={self.d}")
        if self.mlp_ratio < 1 or self.n_channels < 1 or self.n_params < 0:
            raise InvalidConfigError("mlp_ratio, n_channels must be >= 1 and n_params >= 0")

    @property
    def hidden(self) -> int:
        return self.d * self.mlp_ratio

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


class ParameterStore:
    """Ordered mapping of parameter name to trainable :class:`DiffArray`."""

    def __init__(self, arrays: dict[str, dc.DiffArray] | None = None):
        self._arrays: dict[str, dc.DiffArray] = {}
        for name, arr in (arrays or {}).items():
            self[name] = arr

    def __setitem__(self, name: str, value) -> None:
        arr = value if isinstance(value, dc.DiffArray) else dc.DiffArray(value)
        arr.requires_grad = True
        arr.name = name
        self._arrays[name] = arr

    def __getitem__(self, name: str) -> dc.DiffArray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def values(self):
        return self._arrays.values()

    def sub(self, prefix: str) -> dict[str, dc.DiffArray]:
        """Parameters under ``prefix`` keyed by the remainder of their name."""
        n = len(prefix)
        return {k[n:]: v for k, v in self._arrays.items() if k.startswith(prefix)}

    def groups(self) -> dict[str, list[str]]:
        """Names grouped by layer (the name up to its last dot)."""
        out: dict[str, list[str]] = {}
        for name in self._arrays:
            out.setdefault(name.rsplit(".", 1)[0], []).append(name)
        return out

    def numel(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._arrays.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._arrays):
            missing = set(self._arrays) - set(state)
            extra = set(state) - set(self._arrays)
            raise ShapeMismatchError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self._arrays[k].shape:
                raise ShapeMismatchError(f"{k}: {v.shape} != {self._arrays[k].shape}")
            self._arrays[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for a in self._arrays.values():
            a.grad = None


# ----------------------------------------------------------------------------
# parameter initialization


def _dense(store, prefix, fan_in, fan_out, rng, zero=False, std=None):
    if zero:
        w = np.zeros((fan_in, fan_out))
    elif std is not None:
        w = rng.normal(0.0, std, (fan_in, fan_out))
    else:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, (fan_in, fan_out))
    store[prefix + "w"] = w
    store[prefix + "b"] = np.zeros(fan_out)


def _norm(store, prefix, d):
    store[prefix + "g"] = np.ones(d)
    store[prefix + "b"] = np.zeros(d)


def _attention_params(store, prefix, cfg, rng):
    if cfg.residual:
        _norm(store, prefix + "ln_q.", cfg.d)
        _norm(store, prefix + "ln_kv.", cfg.d)
    bound = 1.0 / np.sqrt(cfg.d)
    for name in ("wq", "wk", "wv", "wo"):
        store[prefix + name] = rng.uniform(-bound, bound, (cfg.d, cfg.d))
    store[prefix + "bo"] = np.zeros(cfg.d)


def _mlp_params(store, prefix, cfg, rng):
    if cfg.residual:
        _norm(store, prefix + "ln.", cfg.d)
    _dense(store, prefix + "fc1.", cfg.d, cfg.hidden, rng)
    _dense(store, prefix + "fc2.", cfg.hidden, cfg.d, rng)


def _cond_params(store, prefix, cfg, rng):
    # last layer zero: gamma = 1, beta = 0 until trained
    if cfg.n_params:
        _dense(store, prefix + "fc1.", cfg.n_params, cfg.d, rng)
        _dense(store, prefix + "fc2.", cfg.d, 2 * cfg.hidden, rng, zero=True)


def init_params(cfg: ModelConfig, seed: int | None = None) -> ParameterStore:
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    store = ParameterStore()
    if cfg.use_mpe:
        for k, v in init_modulation(cfg.d // 3, rng).items():
            store["pe." + k] = v
    if not cfg.coarse_init:
        store["tokens"] = rng.normal(0.0, 1.0, (cfg.K, cfg.d))
    for l in range(cfg.L):
        pre = f"enc.{l}."
        if cfg.geometry_cross_attention:
            _attention_params(store, pre + "geo.", cfg, rng)
        _attention_params(store, pre + "ref.", cfg, rng)
        _mlp_params(store, pre + "mlp.", cfg, rng)
        _cond_params(store, pre + "cond.", cfg, rng)
    if not cfg.share_weights:
        for l in range(cfg.L):
            pre = f"dec.{l}."
            _attention_params(store, pre + "attn.", cfg, rng)
            _mlp_params(store, pre + "mlp.", cfg, rng)
            _cond_params(store, pre + "cond.", cfg, rng)
    if cfg.residual:
        _norm(store, "head.ln.", cfg.d)
    _dense(store, "head.fc1.", cfg.d, cfg.d, rng)
    _dense(store, "head.fc2.", cfg.d, cfg.n_channels, rng, std=0.02)
    return store


# ----------------------------------------------------------------------------
# building blocks


@dataclass(frozen=True)
class LatentGeometrySequence:
    """Per-block latent geometries ``E_G`` plus the final encoder state."""

    geometry: tuple[dc.DiffArray, ...]
    final: dc.DiffArray

    def __len__(self) -> int:
        return len(self.geometry)

    def __getitem__(self, l: int) -> dc.DiffArray:
        return self.geometry[l]


def _sample_indices(n: int, count: int, rng) -> np.ndarray:
    if n < 1:
        raise EmptyGeometryError("geometry has no points")
    rng = np.random.default_rng(rng)
    return rng.choice(n, size=count, replace=count > n)


def sample_coarse(g_embedded, K: int, rng) -> dc.DiffArray:
    """Initial coarse geometry: ``K`` rows drawn uniformly from the embedding.

    Without replacement when ``K <= N``, with replacement otherwise.
    """
    g_embedded = dc.as_diff(g_embedded)
    return g_embedded[_sample_indices(g_embedded.shape[0], K, rng)]


def sample_geometry_subset(g_embedded, n_sub: int, rng) -> dc.DiffArray:
    g_embedded = dc.as_diff(g_embedded)
    return g_embedded[_sample_indices(g_embedded.shape[0], n_sub, rng)]


def conditioning(p: dict, xi, cfg: ModelConfig):
    """``(gamma, beta)`` rows of width ``hidden`` from simulation parameters.

    Returns ``None`` (identity modulation) when there are no parameters.
    """
    if cfg.n_params == 0:
        return None
    xi = dc.as_diff(xi).reshape(1, cfg.n_params)
    h = dc.gelu(dc.linear(xi, p["fc1.w"], p["fc1.b"]))
    raw = dc.linear(h, p["fc2.w"], p["fc2.b"])
    return dc.add(raw[:, : cfg.hidden], 1.0), raw[:, cfg.hidden :]


def cross_attention(x, kv, p: dict, cfg: ModelConfig) -> dc.DiffArray:
    if not cfg.residual:
        return dc.multi_head_cross_attention(x, kv, p, cfg.heads)
    q = dc.layer_norm(x, p["ln_q.g"], p["ln_q.b"], cfg.ln_eps)
    k = dc.layer_norm(kv, p["ln_kv.g"], p["ln_kv.b"], cfg.ln_eps)
    return dc.add(x, dc.multi_head_cross_attention(q, k, p, cfg.heads))


def modulated_mlp(x, p: dict, modulation, cfg: ModelConfig) -> dc.DiffArray:
    """``W2 (act(W1 x + b1) * gamma + beta) + b2`` with optional pre-norm residual."""
    h = dc.layer_norm(x, p["ln.g"], p["ln.b"], cfg.ln_eps) if cfg.residual else x
    h = dc.gelu(dc.linear(h, p["fc1.w"], p["fc1.b"]))
    if modulation is not None:
        gamma, beta = modulation
        h = dc.add(dc.mul(h, gamma), beta)
    out = dc.linear(h, p["fc2.w"], p["fc2.b"])
    return dc.add(x, out) if cfg.residual else out


def encoder_block(e_prev, g_embedded, xi, params: ParameterStore, l: int, cfg: ModelConfig, rng):
    """One encoder block; returns ``(E_G, E_next)``, both ``K x d``."""
    e_prev = dc.as_diff(e_prev)
    if e_prev.shape != (cfg.K, cfg.d):
        raise ShapeMismatchError(f"latent shape {e_prev.shape} != {(cfg.K, cfg.d)}")
    pre = f"enc.{l}."
    if cfg.geometry_cross_attention:
        g_sub = sample_geometry_subset(g_embedded, cfg.n_sub, rng)
        e_geo = cross_attention(e_prev, g_sub, params.sub(pre + "geo."), cfg)
    else:
        e_geo = e_prev
    e_ca = cross_attention(e_prev, e_geo, params.sub(pre + "ref."), cfg)
    mod = conditioning(params.sub(pre + "cond."), xi, cfg)
    e_next = modulated_mlp(e_ca, params.sub(pre + "mlp."), mod, cfg)
    return e_geo, e_next


def decoder_prefixes(l: int, cfg: ModelConfig) -> tuple[str, str, str]:
    """Parameter prefixes (attention, mlp, conditioning) used by decoder block ``l``."""
    if cfg.share_weights:
        return f"enc.{l}.ref.", f"enc.{l}.mlp.", f"enc.{l}.cond."
    return f"dec.{l}.attn.", f"dec.{l}.mlp.", f"dec.{l}.cond."


def decoder_block(d_prev, latent, xi, params: ParameterStore, l: int, cfg: ModelConfig) -> dc.DiffArray:
    """Queries attend to one latent geometry, then a modulated MLP; row-local."""
    attn_pre, mlp_pre, cond_pre = decoder_prefixes(l, cfg)
    d_ca = cross_attention(d_prev, latent, params.sub(attn_pre), cfg)
    mod = conditioning(params.sub(cond_pre), xi, cfg)
    return modulated_mlp(d_ca, params.sub(mlp_pre), mod, cfg)


class SmartModel:
    """Configuration plus parameters, with encode / decode / forward."""

    def __init__(self, config: ModelConfig, params: ParameterStore | None = None):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config)

    def _check_xi(self, xi) -> np.ndarray:
        xi = np.asarray(xi.data if isinstance(xi, dc.DiffArray) else xi, dtype=np.float64).reshape(-1)
        if xi.size != self.config.n_params:
            raise ShapeMismatchError(f"expected {self.config.n_params} simulation parameters, got {xi.size}")
        if not np.all(np.isfinite(xi)):
            raise InvalidConfigError("simulation parameters must be finite")
        return xi

    def mpe_params(self) -> MpeParams:
        weights = self.params.sub("pe.") if self.config.use_mpe else None
        return MpeParams(self.config.d // 3, self.config.pe_base, self.config.pos_scale, weights)

    def embed(self, points) -> dc.DiffArray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatchError(f"points must be (n, 3), got {pts.shape}")
        n = pts.shape[0]
        return encode_coordinates(pts.reshape(-1), self.mpe_params()).reshape(n, self.config.d)

    def encode(self, geometry, xi, seed) -> LatentGeometrySequence:
        """Latent geometries for one geometry; never sees any query."""
        cfg = self.config
        pts = np.asarray(geometry, dtype=np.float64)
        if pts.size == 0:
            raise EmptyGeometryError("geometry has no points")
        xi = self._check_xi(xi)
        rng = np.random.default_rng(seed)
        g_emb = self.embed(pts)
        e = sample_coarse(g_emb, cfg.K, rng) if cfg.coarse_init else self.params["tokens"]
        latents = []
        for l in range(cfg.L):
            e_geo, e = encoder_block(e, g_emb, xi, self.params, l, cfg, rng)
            latents.append(e_geo)
        return LatentGeometrySequence(tuple(latents), e)

    def decode(self, latents: LatentGeometrySequence, queries, xi) -> dc.DiffArray:
        cfg = self.config
        q = np.asarray(queries, dtype=np.float64)
        if q.size == 0:
            raise EmptyQuerySetError("no query points")
        xi = self._check_xi(xi)
        h = self.embed(q)
        for l in range(cfg.L):
            kv = latents.geometry[l] if cfg.cross_layer_update else latents.final
            h = decoder_block(h, kv, xi, self.params, l, cfg)
        p = self.params
        if cfg.residual:
            h = dc.layer_norm(h, p["head.ln.g"], p["head.ln.b"], cfg.ln_eps)
        h = dc.gelu(dc.linear(h, p["head.fc1.w"], p["head.fc1.b"]))
        return dc.linear(h, p["head.fc2.w"], p["head.fc2.b"])

    def forward(self, geometry, xi, queries, seed) -> dc.DiffArray:
        """Predictions ``(M, n_channels)`` in normalized target units."""
        if np.asarray(queries).size == 0:
            raise EmptyQuerySetError("no query points")
        return self.decode(self.encode(geometry, xi, seed), queries, xi)

    __call__ = forward
