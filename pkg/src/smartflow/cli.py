"""Command-line entry point: ``smartflow {generate,train,predict,eval,stl2pc}``.

Exit status is 0 on success, 1 on a runtime error (message on stderr) and
2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, SmartError

log = logging.getLogger("smartflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _float_list(text: str) -> list[float]:
    if text.strip() == "":
        return []
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smartflow", description="Mesh-free aerodynamic field surrogate.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write synthetic sphere-flow samples")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--samples", required=True, type=_positive_int)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--geo-points", type=_positive_int, default=512)
    p.add_argument("--surface-queries", type=_positive_int, default=2048)
    p.add_argument("--volume-queries", type=_positive_int, default=2048)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", required=True, type=Path, help="JSON with model and training fields")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--log", type=Path, help="per-step loss CSV")

    p = sub.add_parser("predict", help="predict fields at query points")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--geometry", required=True, type=Path, help="SMRT (N, 3) points or binary STL")
    p.add_argument("--params", required=True, type=_float_list, help="comma-separated simulation parameters")
    p.add_argument("--queries", required=True, type=Path, help="SMRT (M, 3) points")
    p.add_argument("--chunk-size", required=True, type=_positive_int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--chunk-size", required=True, type=_positive_int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True, type=Path)

    p = sub.add_parser("stl2pc", help="convert a binary STL to a cell-centre point cloud")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--normals", type=Path)
    p.add_argument("--areas", type=Path)
    return parser


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _require_parent(path: Path) -> None:
    if path.exists() and path.is_dir():
        raise IsADirectoryError(f"output path is a directory: {path}")


def _cmd_generate(args) -> None:
    from .data import generate_dataset

    if args.out.exists() and any(args.out.glob("sample_*")):
        raise FileExistsError(f"{args.out} already holds samples")
    counts = (args.geo_points, args.surface_queries, args.volume_queries)
    paths = generate_dataset(args.out, args.samples, args.seed, counts)
    log.info("wrote %d samples under %s", len(paths), args.out)


def _cmd_train(args) -> None:
    from .data import list_samples
    from .train import split_config, train

    _require_file(args.config, "config")
    config = json.loads(args.config.read_text())
    if not isinstance(config, dict):
        raise InvalidConfigError("config must be a JSON object")
    model_cfg, train_cfg = split_config(config)
    if not list_samples(args.data):
        raise FileNotFoundError(f"no samples under {args.data}")
    _require_parent(args.out)
    train(model_cfg, train_cfg, args.data, args.out, args.log)
    log.info("checkpoint written to %s", args.out)


def _load_geometry(path: Path) -> np.ndarray:
    from .data import mesh_to_pointcloud, read_array, read_stl

    if path.suffix.lower() == ".stl":
        return mesh_to_pointcloud(read_stl(path)).points
    return read_array(path)


def _cmd_predict(args) -> None:
    from .checkpoint import load_checkpoint
    from .data import read_array, write_array
    from .infer import predict_chunked

    for path, what in ((args.ckpt, "checkpoint"), (args.geometry, "geometry"), (args.queries, "queries")):
        _require_file(path, what)
    _require_parent(args.out)
    ckpt = load_checkpoint(args.ckpt)
    geometry = _load_geometry(args.geometry)
    queries = read_array(args.queries)
    pred = predict_chunked(ckpt, geometry, np.array(args.params), queries, args.chunk_size, args.seed)
    write_array(args.out, pred)


def _cmd_eval(args) -> None:
    from .checkpoint import load_checkpoint
    from .data import list_samples
    from .evaluation import evaluate_dataset

    _require_file(args.ckpt, "checkpoint")
    if not list_samples(args.data):
        raise FileNotFoundError(f"no samples under {args.data}")
    _require_parent(args.report)
    report = evaluate_dataset(load_checkpoint(args.ckpt), args.data, args.chunk_size, args.seed)
    report.write(args.report)
    agg = report.aggregate
    log.info("surface rel L2 %.5f, volume rel L2 %.5f", agg["rel_l2_surface_mean"], agg["rel_l2_volume_mean"])


def _cmd_stl2pc(args) -> None:
    from .data import mesh_to_pointcloud, read_stl, write_array

    _require_file(args.input, "STL file")
    for path in (args.out, args.normals, args.areas):
        if path is not None:
            _require_parent(path)
    cloud = mesh_to_pointcloud(read_stl(args.input))
    write_array(args.out, cloud.points)
    if args.normals is not None:
        write_array(args.normals, cloud.normals)
    if args.areas is not None:
        write_array(args.areas, cloud.areas)
    if np.any(cloud.degenerate):
        log.warning("%d degenerate triangles (zero normal, zero area)", int(np.sum(cloud.degenerate)))


COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "stl2pc": _cmd_stl2pc,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (SmartError, OSError, ValueError, KeyError) as exc:
        print(f"smartflow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
