"""Acceptance gate: one test per criterion, each reported as PASS/FAIL in the summary.

The desk-scale learning criteria train the full configuration several times
(about 20 minutes per run on one CPU core). Deselect them with
``-m "not desk"`` for a quick pass.
"""
import json
import statistics
import time

import numpy as np
import pytest

from smartflow import diffcore as dc
from smartflow.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint
from smartflow.cli import run
from smartflow.data import (
    Normalizer,
    decode_array,
    encode_array,
    generate_dataset,
    generate_sphere_flow,
    load_dataset,
    parse_stl,
    random_sphere_flow,
)
from smartflow.data.synthetic import fibonacci_sphere
from smartflow.encoding import MpeParams, init_modulation, mpe_point, sinusoidal_encoding
from smartflow.errors import EmptyMeshError, TruncatedError
from smartflow.evaluation import drag_lift, evaluate_dataset, force_coefficient, surface_force
from smartflow.infer import predict_chunked
from smartflow.model import ModelConfig, SmartModel
from smartflow.train import TrainConfig, rel_l2, total_loss, train

from oracles import spot_check_groups
from test_data import ONE_TRIANGLE
from test_diffcore import OPS, grad_error

SMALL = dict(d=12, K=4, n_sub=8, L=2, heads=2, n_params=2, pos_scale=3.0)

# desk-scale learning setup shared by criteria 5 and 6
# With decoder blocks reusing the encoder weights, the transverse velocity
# channels never leave the zero prediction within the time budget. Separate
# decoder weights plus a longer LION momentum horizon (beta2) let them learn.
DESK_MODEL = dict(d=60, K=64, n_sub=256, L=4, heads=4, share_weights=False)
DESK_TRAIN = dict(lr=1e-3, epochs=20, beta2=0.999, m_surface=1024, m_volume=1024)
DESK_COUNTS = (512, 2048, 2048)
TIME_BUDGET_S = 30 * 60
ABLATIONS = {
    "full": {},
    "learnable_tokens": {"coarse_init": False},
    "final_latent_only": {"cross_layer_update": False},
    "no_geometry_attention": {"geometry_cross_attention": False},
}
SEEDS = (0, 1, 2)


def _perturbed(cfg: ModelConfig, seed: int, std: float) -> SmartModel:
    model = SmartModel(cfg)
    rng = np.random.default_rng(seed)
    for arr in model.params.values():
        arr.data = arr.data + rng.normal(0.0, std, arr.shape)
    return model


def test_criterion_01_gradients(criterion):
    with criterion(1, "analytic gradients match central differences") as c:
        start = time.perf_counter()
        worst_op = 0.0
        for name, (fn, shapes) in sorted(OPS.items()):
            rng = np.random.default_rng(sum(map(ord, name)))
            for trial in range(3):
                worst_op = max(worst_op, grad_error(fn, [rng.normal(size=s) for s in shapes], seed=trial))
        assert worst_op < 1e-4, worst_op

        worst_e2e, groups = 0.0, 0
        rng = np.random.default_rng(7)
        for share in (True, False):
            model = _perturbed(ModelConfig(**SMALL, share_weights=share), 1, 0.2)
            g = rng.uniform(-1, 1, (16, 3))
            xi = rng.normal(size=2)
            q = rng.uniform(-1, 1, (10, 3))
            kind = np.array([0] * 4 + [1] * 6)
            truth = rng.normal(size=(10, 4))
            dc.backward(total_loss(model.forward(g, xi, q, 9), truth, kind)[0], list(model.params.values()))
            worst = spot_check_groups(
                model.params, lambda: total_loss(model.forward(g, xi, q, 9), truth, kind)[0].item(), per_group=5
            )
            groups += len(worst)
            worst_e2e = max(worst_e2e, max(worst.values()))
        elapsed = time.perf_counter() - start
        c.detail = f"per-op {worst_op:.1e}, end-to-end {worst_e2e:.1e} over {groups} groups, {elapsed:.0f}s"
        assert worst_e2e < 1e-3, worst_e2e
        assert elapsed < 120


def test_criterion_02_query_independence(criterion):
    with criterion(2, "query subsets equal rows of the full prediction") as c:
        rng = np.random.default_rng(2)
        model = _perturbed(ModelConfig(), 0, 0.05)
        for trial in range(100):
            g = rng.uniform(-1, 1, (int(rng.integers(1, 600)), 3))
            xi = rng.normal(size=2)
            q = rng.uniform(-1.5, 1.5, (int(rng.integers(2, 300)), 3))
            seed = int(rng.integers(2**32))
            full = model.forward(g, xi, q, seed).data
            subset = rng.choice(len(q), size=int(rng.integers(1, len(q) + 1)), replace=False)
            part = model.forward(g, xi, q[subset], seed).data
            assert part.tobytes() == full[subset].tobytes(), f"trial {trial}"
        c.detail = "100 trials bitwise"


def test_criterion_03_chunked_inference(criterion):
    with criterion(3, "chunk sizes give bitwise identical outputs") as c:
        rng = np.random.default_rng(3)
        sample = random_sphere_flow(3)
        model = _perturbed(ModelConfig(), 3, 0.05)
        ckpt = Checkpoint(model, Normalizer.fit([sample]))
        q = rng.uniform(-4, 4, (5000, 3))
        outs = {
            size: predict_chunked(ckpt, sample.geometry, sample.params, q, size, rng_seed=5, workers=1)
            for size in (1, 7, 64, 5000)
        }
        ref = outs[5000].tobytes()
        assert all(o.tobytes() == ref for o in outs.values())
        c.detail = "M=5000, chunks 1/7/64/M"


def test_criterion_04_mpe_reduction(criterion):
    with criterion(4, "identity modulation reduces to the classic encoding") as c:
        rng = np.random.default_rng(4)
        pts = rng.uniform(-1, 1, (1000, 3))
        ref = sinusoidal_encoding(pts, 60, scale=100.0)
        assert np.array_equal(mpe_point(pts, MpeParams(20, scale=100.0)).data, ref)
        fresh = MpeParams(20, scale=100.0, weights=init_modulation(20, rng))
        assert np.array_equal(mpe_point(pts, fresh).data, ref)
        model = SmartModel(ModelConfig())
        assert np.array_equal(model.embed(pts).data, ref)
        c.detail = "1000 coordinates bitwise"


# --- desk-scale learning ------------------------------------------------------


class DeskRuns:
    """Trains each (variant, seed) at most once per session."""

    def __init__(self, root):
        self.root = root
        generate_dataset(root / "train", 200, seed=0, counts=DESK_COUNTS)
        generate_dataset(root / "test", 20, seed=1 << 20, counts=DESK_COUNTS)
        self.results: dict = {}

    def untrained(self, seed: int = 0) -> dict:
        cfg = ModelConfig(**DESK_MODEL, init_seed=seed)
        ckpt = Checkpoint(SmartModel(cfg), Normalizer.fit(load_dataset(self.root / "train")))
        return evaluate_dataset(ckpt, self.root / "test").aggregate

    def get(self, variant: str, seed: int) -> dict:
        key = (variant, seed)
        if key not in self.results:
            cfg = ModelConfig(**DESK_MODEL, **ABLATIONS[variant], init_seed=seed)
            start = time.perf_counter()
            ckpt = train(cfg, TrainConfig(**DESK_TRAIN, seed=seed), self.root / "train", self.root / f"{variant}_{seed}.smck")
            elapsed = time.perf_counter() - start
            agg = evaluate_dataset(ckpt, self.root / "test").aggregate
            self.results[key] = {**agg, "seconds": elapsed}
            print(f"{variant} seed {seed}: {json.dumps(self.results[key])}")
        return self.results[key]


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk"))


@pytest.mark.desk
def test_criterion_05_desk_learning(criterion, desk):
    with criterion(5, "desk-scale training beats the untrained model") as c:
        before = desk.untrained(0)
        after = desk.get("full", 0)
        s_ratio = after["rel_l2_surface_mean"] / before["rel_l2_surface_mean"]
        v_ratio = after["rel_l2_volume_mean"] / before["rel_l2_volume_mean"]
        c.detail = (
            f"surface {before['rel_l2_surface_mean']:.3f}->{after['rel_l2_surface_mean']:.3f} (x{s_ratio:.2f}), "
            f"volume {before['rel_l2_volume_mean']:.3f}->{after['rel_l2_volume_mean']:.3f} (x{v_ratio:.2f}), "
            f"{after['seconds'] / 60:.1f} min"
        )
        assert after["seconds"] <= TIME_BUDGET_S
        assert s_ratio <= 0.2 and v_ratio <= 0.2
        assert after["rel_l2_surface_mean"] < 0.15


@pytest.mark.desk
def test_criterion_06_ablation_directions(criterion, desk):
    with criterion(6, "ablated variants are not better than the full model") as c:
        median = {
            v: statistics.median(desk.get(v, s)["rel_l2_volume_mean"] for s in SEEDS) for v in ABLATIONS
        }
        full = median["full"]
        c.detail = ", ".join(f"{v} {m:.4f}" for v, m in median.items())
        for variant in ("learnable_tokens", "final_latent_only", "no_geometry_attention"):
            assert full <= median[variant], variant
        for variant in ("learnable_tokens", "final_latent_only"):
            assert median[variant] >= 1.1 * full, variant


# --- post-processing, metrics, formats, determinism ---------------------------


def test_criterion_07_force_integrator(criterion):
    with criterion(7, "surface force integration") as c:
        n, radius, p = 10_000, 1.3, 2.5
        normals = fibonacci_sphere(n)
        areas = np.full(n, 4 * np.pi * radius**2 / n)
        closed = np.linalg.norm(surface_force(np.full(n, p), np.zeros((n, 3)), normals, areas))
        assert closed < 1e-3 * p * 4 * np.pi * radius**2

        s = generate_sphere_flow(radius, [0.1, -0.1, 0.05], 1.2, (16, n, 8), 0)
        surf = s.queries.surface_index
        fd, fl = drag_lift(surface_force(s.targets[surf, 0], s.surface_shear, s.surface_normals, s.surface_areas))
        cd = force_coefficient(fd, s.flow.rho, s.flow.v_ref, s.flow.a_ref)
        cl = force_coefficient(fl, s.flow.rho, s.flow.v_ref, s.flow.a_ref)
        assert abs(cd) < 0.02 and abs(cl) < 0.02

        cell = surface_force([2.0], None, [[1.0, 0.0, 0.0]], [3.0])
        assert cell.tolist() == [-6.0, 0.0, 0.0]
        c.detail = f"|F| closed {closed:.1e}, C_d {cd:.1e}, C_l {cl:.1e}"


def test_criterion_08_metric_fidelity(criterion):
    with criterion(8, "relative L2 hand cases and loss additivity") as c:
        assert rel_l2(np.array([[4.0], [4.0]]), np.array([[3.0], [4.0]])).item() == pytest.approx(0.2, abs=1e-15)
        truth = np.array([[1.0, 0, 0, 0], [2.0, 0, 0, 0], [0, 3.0, 1.0, 2.0], [0, 4.0, 2.0, 2.0]])
        pred = truth + np.array([[0.5, 9, 9, 9], [0, 9, 9, 9], [9, 1.0, 0, 0], [9, 0, 0.5, 0]])
        kind = np.array([0, 0, 1, 1])
        total, ls, lv = total_loss(pred, truth, kind)
        hand_s = 0.5 / np.sqrt(5.0)
        hand_v = (1.0 / 5.0 + 0.5 / np.sqrt(5.0) + 0.0) / 3.0
        assert ls.item() == pytest.approx(hand_s, abs=1e-15)
        assert lv.item() == pytest.approx(hand_v, abs=1e-15)
        assert total.item() == ls.item() + lv.item()
        c.detail = f"surface {hand_s:.6f} + volume {hand_v:.6f}"


def test_criterion_09_format_round_trips(criterion):
    with criterion(9, "SMRT/SMCK round trips and STL parsing") as c:
        rng = np.random.default_rng(9)
        for arr in (rng.normal(size=(7, 3)), rng.normal(size=5).astype(np.float32), np.zeros((0, 4))):
            buf = encode_array(arr)
            back, end = decode_array(buf)
            assert end == len(buf) and back.dtype == arr.dtype and back.tobytes() == arr.tobytes()
            assert encode_array(back) == buf

        s = random_sphere_flow(0, (32, 16, 16))
        model = _perturbed(ModelConfig(**SMALL), 0, 0.1)
        buf = encode_checkpoint(Checkpoint(model, Normalizer.fit([s]), {"lr": 1e-3}))
        back = decode_checkpoint(buf)
        assert encode_checkpoint(back) == buf
        for name, arr in model.params.items():
            assert back.model.params[name].data.tobytes() == arr.data.tobytes()

        mesh = parse_stl(ONE_TRIANGLE)
        assert mesh.vertices[0].tolist() == [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
        assert mesh.normals[0].tolist() == [0, 0, 1]
        with pytest.raises(TruncatedError):
            parse_stl(ONE_TRIANGLE[:-1])
        with pytest.raises(EmptyMeshError):
            parse_stl(b"\x00" * 84)
        c.detail = "SMRT, SMCK, 1-triangle STL, truncated and empty STL"


def _pipeline(root) -> dict[str, bytes]:
    cfg = {"d": 12, "K": 8, "n_sub": 16, "L": 2, "heads": 2, "pos_scale": 10.0,
           "lr": 1e-3, "epochs": 2, "m_surface": 16, "m_volume": 16, "seed": 3}
    (root / "cfg.json").write_text(json.dumps(cfg))
    steps = [
        ["generate", "--out", str(root / "data"), "--samples", "3", "--seed", "11",
         "--geo-points", "64", "--surface-queries", "32", "--volume-queries", "32"],
        ["train", "--config", str(root / "cfg.json"), "--data", str(root / "data"),
         "--out", str(root / "m.smck"), "--log", str(root / "loss.csv")],
        ["eval", "--ckpt", str(root / "m.smck"), "--data", str(root / "data"),
         "--chunk-size", "10", "--report", str(root / "report.json")],
    ]
    for argv in steps:
        assert run(argv) == 0, argv[0]
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(criterion, tmp_path):
    with criterion(10, "generate, train, eval twice with identical bytes") as c:
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        first, second = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
        assert first.keys() == second.keys()
        differing = [k for k in first if first[k] != second[k]]
        assert not differing, differing
        load_checkpoint(tmp_path / "a" / "m.smck")
        c.detail = f"{len(first)} files identical"
