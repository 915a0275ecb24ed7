"""Command-line entry point: ``topotraj <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .datagen import generate_dataset, load_dataset, read_scene
from .diffcore import ConfigError, StateError
from .evaluate import evaluate, evaluate_baseline, perturbation_eval, run_ablation
from .model import VARIANTS
from .raster import rasterize_cloud
from .render import render_svg
from .topomap import InvalidMapError, OffRouteError, extract_local_route
from .train import TrainingDiverged, load_model, predict, prepare, train_loop

log = logging.getLogger("topotraj")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which we reserve for data errors
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write_json(path, obj) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_config(args) -> cfgmod.RunConfig:
    return cfgmod.load(args.config, args.set or ())


def _dataset(path):
    if path is None:
        raise UsageError("--data is required")
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"dataset directory not found: {p}")
    try:
        return load_dataset(p)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read dataset {p}: {e}") from e


def _model(path):
    p = Path(path)
    if not p.with_suffix(".json").is_file():
        raise DataError(f"checkpoint not found: {p}")
    try:
        return load_model(p)
    except (OSError, ValueError, KeyError, StateError) as e:
        raise DataError(f"cannot load checkpoint {p}: {e}") from e


# ---------------------------------------------------------------- commands


def cmd_datagen(args) -> int:
    rc = _load_config(args)
    if args.count <= 0:
        raise UsageError("--count must be positive")
    seed = rc.seed if args.seed is None else args.seed
    m = generate_dataset(args.count, seed, rc.datagen, args.out, args.split, rc.grid)
    print(f"wrote {m['count']} {args.split} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _load_config(args)
    scenes = _dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.yaml").write_text(rc.dump())
    res = train_loop(scenes, rc.model, rc.train, rc.input_settings(), out_dir=out)
    last = res.log[-1] if res.log else {}
    print(f"trained {res.steps} steps; final total loss {last.get('l_total', float('nan')):.6f}; "
          f"checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _load_config(args)
    scenes = _dataset(args.data)
    ms = rc.metrics
    if args.baseline:
        prepared = prepare(scenes, rc.input_settings())
        rep = evaluate_baseline(prepared, ms.baseline_window, ms.aligned, ms.ks, ms.ds)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --baseline)")
        model, settings = _model(args.checkpoint)
        prepared = prepare(scenes, settings)
        rep = evaluate(model, prepared, settings, aligned=ms.aligned, ks=ms.ks, ds=ms.ds,
                       label=model.config.variant)
    _write_json(args.report, rep.to_dict())
    print(f"{rep.label}: FDE {rep.fde_m:.3f} m, ADE {rep.ade_m:.3f} m over {rep.sample_count} samples")
    return EXIT_OK


def cmd_perturb(args) -> int:
    rc = _load_config(args)
    scenes = _dataset(args.data)
    model, settings = _model(args.checkpoint)
    prepared = prepare(scenes, settings)
    mags = args.magnitudes if args.magnitudes is not None else rc.metrics.magnitudes
    trials = args.trials if args.trials is not None else rc.metrics.trials
    if trials < 1 or any(m < 0 for m in mags):
        raise UsageError("--trials must be >= 1 and magnitudes >= 0")
    reps = perturbation_eval(model, prepared, settings, mags, trials, seed=rc.seed, aligned=rc.metrics.aligned,
                             constant=rc.metrics.constant_offset, label=model.config.variant)
    _write_json(args.report, [r.to_dict() for r in reps])
    for r in reps:
        dev = f" ± {r.fde_std:.3f}" if r.fde_std is not None else ""
        print(f"magnitude {r.magnitude_m:g} m: FDE {r.fde_m:.3f}{dev} m, ADE {r.ade_m:.3f} m")
    return EXIT_OK


def cmd_render(args) -> int:
    p = Path(args.sample)
    if not (p / "scene.json").is_file():
        raise DataError(f"not a sample directory: {p}")
    scene = read_scene(p)
    pred = None
    if args.checkpoint:
        model, settings = _model(args.checkpoint)
        pred = predict(model, prepare([scene], settings), settings)[0]
    else:
        settings = cfgmod.load(args.config, args.set or ()).input_settings()
    grid = settings.grid
    route = extract_local_route(scene.map, scene.pose, settings.forward_window, settings.backward_window)
    density = rasterize_cloud(scene.cloud, grid)[2]
    svg = render_svg(density, grid, route=route, gt=scene.gt_ego(), pred=pred)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = _load_config(args)
    train_scenes = _dataset(args.data)
    test_scenes = _dataset(args.test_data)
    for v in args.variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; expected some of {', '.join(VARIANTS)}")
    settings = rc.input_settings()
    reps = run_ablation(prepare(train_scenes, settings), prepare(test_scenes, settings), rc.model, rc.train,
                        settings, args.variants, out_dir=args.out, aligned=rc.metrics.aligned,
                        ks=rc.metrics.ks, ds=rc.metrics.ds)
    _write_json(args.report, [r.to_dict() for r in reps])
    for r in reps:
        print(f"{r.label:>13}: FDE {r.fde_m:.3f} m, ADE {r.ade_m:.3f} m")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (default: $%s or built-in defaults)"
                        % cfgmod.CONFIG_ENV)
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.lr=0.001 (repeatable)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="topotraj", description="Trajectory prediction from BEV scans and topometric maps.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("datagen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--seed", type=int, default=None, help="dataset seed (default: config seed)")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint (or the physics baseline)")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", action="store_true", help="evaluate the constant velocity and yaw baseline")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", parents=[common], help="evaluate under lateral map perturbations")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--magnitudes", type=_floats, default=None, help="comma-separated meters, e.g. 0,1,2,3")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("render", parents=[common], help="draw a sample (and a prediction) as SVG")
    p.add_argument("--sample", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate several model variants")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--variants", type=lambda s: [v for v in s.split(",") if v], default=list(VARIANTS))
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required; see --help")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InvalidMapError, OffRouteError, TrainingDiverged, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
