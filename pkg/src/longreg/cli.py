"""Command-line surface: register a series, generate synthetic data, evaluate
fields against ground truth, and run the similarity-metric simulations.

Every command prints one JSON object to stdout and writes artifacts under
--out. Exit codes: 0 success, 2 malformed input, 3 optimization divergence.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, evalmetrics, io, similarity, synth
from .config import RegistrationConfig
from .grid import GridSpec, ImageSeries, Volume
from .optimize import DivergenceError, register_series

EXIT_BAD_INPUT = 2
EXIT_DIVERGED = 3


def _result_manifest(out: Path, cfg_dict: dict, seed, inputs: dict, outputs: list[str]):
    manifest = {
        "version": __version__,
        "config": cfg_dict,
        "seed": seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def cmd_register(args) -> dict:
    series = io.load_series(args.series)
    cfg = io.load_config(args.config) if args.config else RegistrationConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    trace_path = out / "loss_trace.jsonl"
    with open(trace_path, "w") as trace_fh:
        def stream(row):
            trace_fh.write(json.dumps(row, sort_keys=True) + "\n")

        result = register_series(series, cfg, trace_callback=stream)

    outputs = ["loss_trace.jsonl", "rigid.json", "manifest.json"]
    n = len(series)
    for g in range(n - 1):
        name = f"flow_gap_{g + 1:02d}.mvol"
        io.save_field(out / name, result.gap_flow(g), units="voxels")
        outputs.append(name)
    for k in range(1, n):
        disp = result.composed(0, k)
        name = f"deform_first_to_{k + 1:02d}.mvol"
        io.save_field(out / name, disp, units="voxels", time_index=k)
        outputs.append(name)
        jd = result.jacobian_det_map(0, k)
        name = f"jacdet_first_to_{k + 1:02d}.mvol"
        io.save_volume(out / name, jd, units="intensity", time_index=k)
        outputs.append(name)
    rigid_rows = [
        {"session": j + 1, "euler_angles_zyx": result.rigid[j, :3].tolist(), "translation_vox": result.rigid[j, 3:].tolist()}
        for j in range(n)
    ]
    (out / "rigid.json").write_text(json.dumps(rigid_rows, sort_keys=True, indent=1) + "\n")
    io.save_checkpoint(out / "checkpoint", result.flow_params, result.rigid, meta={"final": True})
    outputs.append("checkpoint")

    _result_manifest(out, cfg.to_dict(), cfg.seed, {"series": str(args.series), "config": str(args.config)}, outputs)
    final = result.trace[-1] if result.trace else {}
    return {
        "out": str(out),
        "n_sessions": n,
        "final_total": final.get("total"),
        "final_sim": final.get("sim_total"),
        "iters": len(result.trace),
    }


def _load_synth_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise io.MVolError(f"missing synth config: {path}") from err
    except json.JSONDecodeError as err:
        raise io.MVolError(f"invalid JSON in synth config {path}: {err}") from err
    dims = tuple(raw.pop("dims", (48, 48, 48)))
    spacing = tuple(raw.pop("spacing", (1.0, 1.0, 1.0)))
    seed = int(raw.pop("seed", 0))
    phantom = raw.pop("phantom", {})
    try:
        cfg = synth.SynthConfig(**{k: tuple(v) if isinstance(v, list) and k.endswith("_range") else v for k, v in raw.items()})
    except TypeError as err:
        raise io.MVolError(f"bad synth config {path}: {err}") from err
    return dims, spacing, seed, phantom, cfg


def cmd_synth(args) -> dict:
    dims, spacing, seed, phantom_kw, cfg = _load_synth_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    base = synth.ellipsoid_phantom(dims, spacing, **phantom_kw)
    truth = synth.make_series(base, cfg, seed)

    outputs = []
    image_names = []
    for k, img in enumerate(truth.images):
        name = f"session_{k + 1:02d}.mvol"
        io.save_volume(out / name, img, time_index=k, provenance={"seed": seed})
        outputs.append(name)
        image_names.append(name)
    for k in range(1, len(truth.images)):
        name = f"truth_first_to_{k + 1:02d}.mvol"
        io.save_field(out / name, truth.displacements[k], units="voxels", time_index=k)
        outputs.append(name)
    mask = evalmetrics.foreground_mask(base)
    io.save_mask(out / "mask.mvol", mask)
    outputs.append("mask.mvol")
    io.save_series_manifest(out / "series_manifest.json", image_names, truth.times)
    outputs.append("series_manifest.json")

    cfg_dict = {"dims": list(dims), "spacing": list(spacing), "phantom": phantom_kw, **cfg.to_dict()}
    _result_manifest(out, cfg_dict, seed, {"config": str(args.config)}, outputs)
    max_disp = max(float(np.sqrt((d.data**2).sum(axis=-1)).max()) for d in truth.displacements)
    return {"out": str(out), "n_sessions": len(truth.images), "max_truth_displacement_vox": max_disp}


def cmd_eval(args) -> dict:
    truth = io.load_field(args.truth)
    est = io.load_field(args.est)
    if args.mask:
        mask = io.load_mask(args.mask)
    else:
        from .grid import Mask

        mask = Mask(truth.grid, np.ones(truth.grid.dims, dtype=bool))
    eu = evalmetrics.eu_distance(truth, est, mask)
    pcc = evalmetrics.vector_pcc(truth, est, mask)
    slope, a, b = evalmetrics.bias_slope(truth, est, mask)
    return {
        "eu_mm": eu,
        "pcc": pcc,
        "slope_B": slope,
        "A": a.tolist(),
        "b": b.tolist(),
        "n_voxels": int(mask.data.sum()),
    }


def cmd_lncc_sim(args) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cnr_grid = [float(c) for c in args.cnr]
    if args.mode == "expectation":
        rows = similarity.mc_lncc_expectation(cnr_grid, args.a_r, args.region, args.samples, args.seed)
        csv_name = "lncc_expectation.csv"
        summary = {"max_abs_residual": max(abs(r["residual"]) for r in rows)}
    else:
        rows = []
        for metric in ("lncc", "silncc"):
            for row in similarity.mc_offset_landscape(metric, cnr_grid, [float(o) for o in args.offsets], args.samples, args.seed):
                rows.append({"metric": metric, **row})
        csv_name = "offset_landscape.csv"
        summary = {"n_cells": len(rows)}
    io.write_csv(out / csv_name, rows)
    meta = {
        "mode": args.mode,
        "cnr": cnr_grid,
        "offsets": [float(o) for o in args.offsets] if args.mode == "offset" else None,
        "region": args.region,
        "samples": args.samples,
        "seed": args.seed,
        "a_r": args.a_r,
    }
    _result_manifest(out, meta, args.seed, {}, [csv_name])
    return {"out": str(out), "csv": csv_name, **summary}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longreg", description=__doc__)
    parser.add_argument("--version", action="version", version=f"longreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register an image series")
    p.add_argument("--series", required=True, help="series manifest JSON")
    p.add_argument("--config", default=None, help="RegistrationConfig JSON (defaults used if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="generate a synthetic series with ground truth")
    p.add_argument("--config", required=True, help="synthesis settings JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="compare an estimated field against ground truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--mask", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lncc-sim", help="Monte-Carlo similarity-metric simulations")
    p.add_argument("--mode", choices=("expectation", "offset"), required=True)
    p.add_argument("--region", type=int, default=9, help="window voxel count for expectation mode")
    p.add_argument("--cnr", nargs="+", default=["0.5", "1", "2", "4"])
    p.add_argument("--offsets", nargs="+", default=["0", "1", "2", "3"])
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--a-r", dest="a_r", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lncc_sim)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except DivergenceError as err:
        print(json.dumps({"error": str(err), "term": err.term}), file=sys.stdout)
        return EXIT_DIVERGED
    except (io.MVolError, ValueError, OSError) as err:
        print(json.dumps({"error": str(err)}), file=sys.stdout)
        return EXIT_BAD_INPUT
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
