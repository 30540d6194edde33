"""Command-line entry point: ``pansharp <command> [options] [--section.key=value ...]``.

Exit codes: 0 success, 1 numeric failure, 2 input or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .errors import (ContractViolation, DegenerateReference, InsufficientSupport, NumericDomainError,
                     NumericFailure, PansharpError, RasterLoadError, UnsupportedConfiguration)

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")
    return path


def _load_pair(args):
    from .raster import MultispectralRaster, PanRaster, load_pgm, load_raster

    pan = load_pgm(args.pan) if str(args.pan).lower().endswith(".pgm") else load_raster(args.pan)
    ms = load_raster(args.ms)
    if not isinstance(pan, PanRaster):
        raise ContractViolation(f"{args.pan}: expected a single-band PAN raster")
    if not isinstance(ms, MultispectralRaster):
        raise ContractViolation(f"{args.ms}: expected a multispectral raster")
    return pan, ms


def _spec(args, cfg, bands):
    from .raster import SensorSpec

    if getattr(args, "sensor", None):
        spec = SensorSpec.load(args.sensor)
        if spec.bands != bands:
            raise UnsupportedConfiguration(f"{args.sensor} lists {spec.bands} MTF gains, MS has {bands} bands")
        return spec
    return cfg.sensor_spec(bands)


def _check_sizes(pan, ms, spec):
    if ms.height * spec.ratio != pan.height or ms.width * spec.ratio != pan.width:
        raise ContractViolation(f"PAN {pan.shape} and MS {ms.shape[1:]} are not related by ratio {spec.ratio}")


def _model_scale(cfg, pan):
    return cfg.model.scale or float(pan.radiometric_range[1])


def _init_weights(cfg, bands, scale):
    from .model import init_model

    m = cfg.model
    return init_model(bands, seed=m.seed, width=m.width, reduction=m.reduction,
                      attention_kernel=m.attention_kernel, scale=scale, variant=m.variant)


def _load_weights(path, bands):
    from .model import ModelWeights

    if not Path(path).with_suffix(".json").exists():
        raise RasterLoadError(f"weights file not found: {path}")
    w = ModelWeights.load(path)
    if w.bands != bands:
        raise ContractViolation(f"weights {path} expect {w.bands} bands, MS image has {bands}")
    return w


def _adapt_cfg(cfg, args, iterations=None):
    import dataclasses

    a = cfg.adaptation
    changes = {"seed": cfg.run.seed if args.seed is None else args.seed}
    if iterations is not None:
        changes["iterations"] = iterations
    return dataclasses.replace(a, **changes)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg):
    from .raster import SensorSpec, make_synthetic_scene, save_raster
    from .coregistration import shift_grid

    out = Path(args.out)
    seed = cfg.run.seed if args.seed is None else args.seed
    spec = cfg.sensor_spec(args.bands) if cfg.sensor.ms_mtf_gains or cfg.sensor.file else SensorSpec.default(
        args.bands, cfg.sensor.ratio)
    if args.shifts:
        shifts = [tuple(float(v) for v in item.split(",")) for item in args.shifts.split(";")]
    elif args.random_shifts:
        grid = shift_grid()
        rng = np.random.default_rng(seed + 1_000_003)
        shifts = [(0.0, 0.0)] + [(float(rng.choice(grid)), float(rng.choice(grid))) for _ in range(args.bands - 1)]
    else:
        shifts = None
    gt, pan, ms, rec = make_synthetic_scene(seed, args.size, args.bands, spec, shifts, args.layout)
    save_raster(out / "pan", pan)
    save_raster(out / "ms", ms)
    save_raster(out / "gt", gt)
    spec.save(out / "sensor.json")
    _write_json(out / "manifest.json", rec.to_dict())
    print(json.dumps({"out": str(out), "shifts": rec.to_dict()["band_shifts"]}))


def cmd_align(args, cfg):
    from .coregistration import estimate_band_shifts
    from .plotting import plot_alignment
    from .raster import MultispectralRaster, save_raster

    pan, ms = _load_pair(args)
    spec = _spec(args, cfg, ms.bands)
    _check_sizes(pan, ms, spec)
    prod = estimate_band_shifts(pan, ms, spec)
    out = Path(args.out)
    _write_json(out / "alignment.json", prod.to_dict())
    if args.save_rho_max:
        save_raster(out / "rho_max", MultispectralRaster(prod.rho_max.values, (-1.0, 1.0)))
    if not args.no_figures:
        plot_alignment(prod.scores, prod.grid, prod.alignment, out / "alignment.png")
    print(json.dumps({b["band"]: b["shift"] for b in prod.to_dict()["bands"]}))


def cmd_select_tiles(args, cfg):
    from .plotting import plot_tiles
    from .raster import upsample_poly23
    from .tiles import select_tiles

    pan, ms = _load_pair(args)
    spec = _spec(args, cfg, ms.bands)
    _check_sizes(pan, ms, spec)
    acfg = _adapt_cfg(cfg, args)
    tiles = select_tiles(pan.values.astype(np.float64), upsample_poly23(ms.values, spec.ratio), spec, acfg)
    out = Path(args.out)
    _write_json(out / "tiles.json", tiles.to_dict())
    if not args.no_figures:
        plot_tiles(pan.values, tiles, out / "tiles.png")
    print(json.dumps({"selected": len(tiles.anchors), "candidates": len(tiles.candidates)}))


def cmd_init(args, cfg):
    scale = cfg.model.scale or args.scale
    w = _init_weights(cfg, args.bands, scale)
    if args.zero_trunk:
        w = w.zero_trunk()
    path = w.save(args.out)
    print(json.dumps({"weights": str(path), "parameters": w.n_params}))


def _run_adaptation(args, cfg, pan, ms, spec, weights, iterations, out: Path):
    from .adaptation import target_adapt
    from .coregistration import estimate_band_shifts
    from .plotting import plot_trajectory
    from .raster import upsample_poly23
    from .tiles import select_tiles

    acfg = _adapt_cfg(cfg, args, iterations)
    up = upsample_poly23(ms.values, spec.ratio)
    pan_v = pan.values.astype(np.float64)
    prod = estimate_band_shifts(pan_v, ms.values, spec, ms_up=up, align=cfg.loss.align)
    tiles = None
    h, w = pan_v.shape
    if not args.full_ta and (h // acfg.tile_size) * (w // acfg.tile_size) > acfg.n_clusters:
        tiles = select_tiles(pan_v, up, spec, acfg)
        _write_json(out / "tiles.json", tiles.to_dict())
    res = target_adapt(weights, pan_v, ms.values, prod, spec, acfg, cfg.loss, tiles=tiles,
                       timing=not args.reproducible, ms_up=up)
    res.write_log(out / "log.jsonl")
    if res.trajectory and not args.no_figures:
        plot_trajectory(res.trajectory, out / "trajectory.png")
    return res, prod, up


def cmd_adapt(args, cfg):
    pan, ms = _load_pair(args)
    spec = _spec(args, cfg, ms.bands)
    _check_sizes(pan, ms, spec)
    weights = _load_weights(args.weights, ms.bands) if args.weights else _init_weights(cfg, ms.bands,
                                                                                       _model_scale(cfg, pan))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res, _, _ = _run_adaptation(args, cfg, pan, ms, spec, weights, args.iterations, out)
    res.weights.save(out / "weights")
    last = res.trajectory[-1] if res.trajectory else {}
    print(json.dumps({"iterations": len(res.trajectory), "final_total": last.get("total")}))


def cmd_pansharpen(args, cfg):
    from .coregistration import estimate_band_shifts
    from .model import forward
    from .pipeline import quality_report
    from .raster import MultispectralRaster, save_raster, upsample_poly23

    pan, ms = _load_pair(args)
    spec = _spec(args, cfg, ms.bands)
    _check_sizes(pan, ms, spec)
    weights = _load_weights(args.weights, ms.bands)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.adapt:
        res, prod, up = _run_adaptation(args, cfg, pan, ms, spec, weights, args.adapt, out)
        weights = res.weights
        weights.save(out / "weights")
    else:
        up = upsample_poly23(ms.values, spec.ratio)
        prod = estimate_band_shifts(pan.values, ms.values, spec, ms_up=up, align=cfg.loss.align)
    fused = forward(weights, pan.values, up)
    save_raster(out / "fused", MultispectralRaster(fused.astype(np.float32), ms.radiometric_range))
    report = quality_report(fused, pan.values, ms.values, spec, prod, cfg.metric_config(spec.ratio))
    _write_json(out / "report.json", report)
    print(json.dumps({k: v for k, v in report.items() if k != "per_band"}))


def cmd_metrics(args, cfg):
    from .coregistration import estimate_band_shifts
    from .pipeline import quality_report
    from .raster import load_raster

    pan, ms = _load_pair(args)
    fused = load_raster(args.fused)
    spec = _spec(args, cfg, ms.bands)
    _check_sizes(pan, ms, spec)
    if getattr(fused, "values", None) is None or fused.values.ndim != 3 or fused.values.shape[1:] != pan.shape:
        raise ContractViolation(f"fused image {np.shape(fused.values)} does not match the PAN size {pan.shape} "
                                f"(it must be {spec.ratio}x the MS size)")
    prod = estimate_band_shifts(pan.values, ms.values, spec, align=not args.no_align)
    report = quality_report(fused.values, pan.values, ms.values, spec, prod, cfg.metric_config(spec.ratio))
    text = json.dumps(report, indent=2)
    if args.out:
        _write_json(Path(args.out), report)
    print(text)


def cmd_gradcheck(args, cfg):
    from .checks import run_suite

    seed = cfg.run.seed if args.seed is None else args.seed
    rows = run_suite(seed)
    for name, ok, summary in rows:
        print(f"{name:28s} {summary}")
    failed = [name for name, ok, _ in rows if not ok]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [sensor] [metrics] [loss] [adaptation] [model] [run]")
    common.add_argument("--threads", type=int, default=None,
                        help="bound BLAS threads; 1 also makes outputs reproducible (no wall-clock fields)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    pair = _Parser(add_help=False)
    pair.add_argument("--pan", required=True, help="PAN raster header (.json) or 16-bit .pgm")
    pair.add_argument("--ms", required=True, help="MS raster header (.json)")
    pair.add_argument("--sensor", help="sensor JSON (ratio and MTF gains)")

    p = _Parser(prog="pansharp", description="Pansharpening with target adaptation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a seeded synthetic scene")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--bands", type=int, default=4)
    s.add_argument("--shifts", help="per-band 'dx,dy;dx,dy;...'")
    s.add_argument("--random-shifts", action="store_true", help="draw band shifts from the half-pixel grid")
    s.add_argument("--layout", choices=("mosaic", "quadrants"), default="mosaic")

    s = sub.add_parser("align", parents=[common, pair], help="estimate per-band shifts")
    s.add_argument("--out", required=True)
    s.add_argument("--save-rho-max", action="store_true")

    s = sub.add_parser("select-tiles", parents=[common, pair], help="pick representative tiles")
    s.add_argument("--out", required=True)

    s = sub.add_parser("init", parents=[common], help="write freshly initialised weights")
    s.add_argument("--bands", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=float, default=2047.0)
    s.add_argument("--zero-trunk", action="store_true", help="zero the output layer (network returns MS_up)")

    s = sub.add_parser("adapt", parents=[common, pair], help="target adaptation only")
    s.add_argument("--weights", help="starting weights (default: fresh initialisation from [model])")
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--full-ta", action="store_true", help="adapt on the whole image instead of selected tiles")
    s.add_argument("--out", required=True)

    s = sub.add_parser("pansharpen", parents=[common, pair], help="fuse, optionally after adaptation")
    s.add_argument("--weights", required=True)
    s.add_argument("--adapt", type=int, default=0, metavar="N", help="adaptation iterations before fusing")
    s.add_argument("--full-ta", action="store_true")
    s.add_argument("--out", required=True)

    s = sub.add_parser("metrics", parents=[common, pair], help="score an existing fused image")
    s.add_argument("--fused", required=True)
    s.add_argument("--no-align", action="store_true", help="evaluate with zero band shifts")
    s.add_argument("--out", help="also write the report here")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and the loss")
    return p


def _split_overrides(argv):
    rest, overrides = [], []
    for item in argv:
        head = item[2:].split("=", 1)[0] if item.startswith("--") else ""
        if "." in head and "=" in item:
            overrides.append(item[2:])
        else:
            rest.append(item)
    return rest, overrides


def _threads(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


COMMANDS = {
    "synth": cmd_synth, "align": cmd_align, "select-tiles": cmd_select_tiles, "init": cmd_init,
    "adapt": cmd_adapt, "pansharpen": cmd_pansharpen, "metrics": cmd_metrics, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    from .config import RunConfig

    argv = list(sys.argv[1:] if argv is None else argv)
    rest, overrides = _split_overrides(argv)
    try:
        args = build_parser().parse_args(rest)
        cfg = RunConfig.load(args.config, overrides)
        threads = args.threads if args.threads is not None else cfg.run.threads
        args.reproducible = threads == 1
        if args.command == "adapt" and args.iterations is None:
            args.iterations = cfg.adaptation.iterations
        out = getattr(args, "out", None)
        if out and args.command not in ("init", "metrics"):
            cfg.echo(out)
        with _threads(threads):
            code = COMMANDS[args.command](args, cfg)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"pansharp: usage error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericFailure, NumericDomainError) as exc:
        print(f"pansharp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RasterLoadError, ContractViolation, UnsupportedConfiguration, InsufficientSupport,
            DegenerateReference, FileNotFoundError) as exc:
        print(f"pansharp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PansharpError as exc:
        print(f"pansharp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
