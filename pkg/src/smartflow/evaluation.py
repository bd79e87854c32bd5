"""Physical-space error metrics and aerodynamic force post-processing."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .checkpoint import Checkpoint
from .data.dataset import Normalizer, list_samples, load_sample
from .data.types import PRESSURE, SURFACE, VELOCITY, VOLUME, FieldSample
from .errors import InvalidFlowConstantsError, NonUnitNormalError, ShapeMismatchError
from .infer import predict_chunked
from .model import SmartModel
from .train import rel_l2


def surface_force(pressure, shear, normals, areas, check_normals: bool | None = None) -> np.ndarray:
    """``F = sum_i (-p_i n_i + tau_i) A_i`` over surface cells."""
    p = np.asarray(pressure, dtype=np.float64).reshape(-1)
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    a = np.asarray(areas, dtype=np.float64).reshape(-1)
    tau = np.zeros_like(n) if shear is None else np.asarray(shear, dtype=np.float64).reshape(-1, 3)
    if not (len(p) == len(n) == len(a) == len(tau)):
        raise ShapeMismatchError(f"cell counts differ: p {len(p)}, n {len(n)}, A {len(a)}, tau {len(tau)}")
    if check_normals is None:
        check_normals = dc.is_checked()
    if check_normals:
        bad = np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6
        if np.any(bad & (a > 0)):
            raise NonUnitNormalError(f"{int(np.sum(bad))} normals are not unit length")
    return np.sum((-p[:, None] * n + tau) * a[:, None], axis=0)


def drag_lift(force, alpha: float = 0.0, mode: str = "automotive") -> tuple[float, float]:
    """Project a force onto the drag and lift directions."""
    f = np.asarray(force, dtype=np.float64).reshape(3)
    if mode == "automotive":
        return float(f[0]), float(f[2])
    if mode == "aerospace":
        ca, sa = np.cos(alpha), np.sin(alpha)
        return float(f[0] * ca + f[2] * sa), float(-f[0] * sa + f[2] * ca)
    raise ValueError(f"unknown mode {mode!r}")


def force_coefficient(force: float, rho: float, v: float, a_ref: float) -> float:
    if not (rho > 0 and v > 0 and a_ref > 0):
        raise InvalidFlowConstantsError(f"need positive rho, v, A_ref (got {rho}, {v}, {a_ref})")
    return 2.0 * force / (rho * v * v * a_ref)


@dataclass
class MetricsReport:
    per_sample: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_sample": self.per_sample, "aggregate": self.aggregate}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())


def _rel(pred, truth, channels) -> float:
    with dc.no_grad():
        return rel_l2(pred[:, channels], truth[:, channels]).item()


def sample_metrics(sample: FieldSample, prediction: np.ndarray, sample_id: str = "") -> dict:
    """Relative L2 errors (and forces, when cell data exists) for one sample."""
    prediction = np.asarray(prediction, dtype=np.float64)
    if prediction.shape != sample.targets.shape:
        raise ShapeMismatchError(f"prediction {prediction.shape} vs targets {sample.targets.shape}")
    kind = sample.queries.kind
    surf, vol = kind == SURFACE, kind == VOLUME
    row = {"id": sample_id or sample.meta.get("id", "")}
    row["rel_l2_surface"] = _rel(prediction[surf], sample.targets[surf], [PRESSURE]) if surf.any() else None
    row["rel_l2_volume"] = _rel(prediction[vol], sample.targets[vol], list(VELOCITY)) if vol.any() else None
    if sample.surface_normals is not None and sample.surface_areas is not None:
        flow = sample.flow
        mode = "automotive" if flow.alpha == 0.0 else "aerospace"
        for tag, p in (("true", sample.targets[surf, PRESSURE]), ("pred", prediction[surf, PRESSURE])):
            force = surface_force(p, sample.surface_shear, sample.surface_normals, sample.surface_areas)
            fd, fl = drag_lift(force, flow.alpha, mode)
            row[f"F_d_{tag}"] = fd
            row[f"F_l_{tag}"] = fl
            row[f"C_d_{tag}"] = force_coefficient(fd, flow.rho, flow.v_ref, flow.a_ref)
            row[f"C_l_{tag}"] = force_coefficient(fl, flow.rho, flow.v_ref, flow.a_ref)
    return row


def aggregate(rows: list[dict]) -> dict:
    out = {"n_samples": len(rows)}
    for key in ("rel_l2_surface", "rel_l2_volume"):
        vals = np.array([r[key] for r in rows if r.get(key) is not None], dtype=np.float64)
        out[f"{key}_mean"] = float(np.mean(vals)) if vals.size else None
        out[f"{key}_std"] = float(np.std(vals)) if vals.size else None
    return out


def evaluate_predictions(samples: list[FieldSample], predictions: list[np.ndarray], ids=None) -> MetricsReport:
    ids = ids or [s.meta.get("id", str(i)) for i, s in enumerate(samples)]
    rows = [sample_metrics(s, p, i) for s, p, i in zip(samples, predictions, ids)]
    return MetricsReport(rows, aggregate(rows))


def evaluate_samples(
    model: SmartModel, normalizer: Normalizer, samples: list[FieldSample], chunk_size: int = 4096, seed=0, ids=None
) -> MetricsReport:
    preds = [
        predict_chunked((model, normalizer), s.geometry, s.params, s.queries, chunk_size, seed) for s in samples
    ]
    return evaluate_predictions(samples, preds, ids)


def evaluate_dataset(checkpoint: Checkpoint, dataset_dir, chunk_size: int = 4096, seed=0) -> MetricsReport:
    paths = list_samples(dataset_dir)
    if not paths:
        raise FileNotFoundError(f"no samples under {dataset_dir}")
    samples = [load_sample(p) for p in paths]
    ids = [s.meta.get("id") or p.name for s, p in zip(samples, paths)]
    return evaluate_samples(checkpoint.model, checkpoint.normalizer, samples, chunk_size, seed, ids)
