"""Command line entry point: ``ptgeo run | resume | diagnose | voxelise | subsample``.

Failures print one JSON object on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .config import build_posterior, build_world, load_config, parse_config
from .errors import InvalidInputError, PtgeoError
from .io import COLUMNS, subsample_csv, write_table
from .sampler import FORMAT_VERSION, ParallelTempering, read_store, read_timing
from .world import voxelise

RESOLVED_CONFIG = "config.json"


def _apply_overrides(cfg, args):
    data = cfg.model_dump(mode="json")
    for key in ("seed", "iterations", "n_stacks", "n_temps", "beta_min", "swap_interval",
                "thinning", "checkpoint_interval", "proposal"):
        val = getattr(args, key, None)
        if val is not None:
            data["sampler"][key] = val
    return parse_config(data)


def _run_dir(cfg, args):
    out = Path(args.out) if getattr(args, "out", None) else cfg.resolve(cfg.outputs.directory)
    return out


def _absolute_config(cfg):
    """Copy of the config with data paths made absolute, for storing next to a run."""
    data = cfg.model_dump(mode="json")
    for s in data["sensors"]:
        s["data"] = str(cfg.resolve(s["data"]).resolve())
    for lay in data["world"]["layers"]:
        if lay.get("mean_depth_csv"):
            lay["mean_depth_csv"] = str(cfg.resolve(lay["mean_depth_csv"]).resolve())
    return data


def cmd_run(args):
    cfg = _apply_overrides(load_config(args.config), args)
    out = _run_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / RESOLVED_CONFIG, "w") as fh:
        json.dump(_absolute_config(cfg), fh, indent=2)
    post = build_posterior(cfg)
    pt = ParallelTempering(post, cfg.settings(), out_dir=out, config_hash=cfg.hash(),
                           workers=args.workers)
    res = pt.run()
    return {"status": "ok", "run_dir": str(out), "iterations": res.metadata["iterations"],
            "config_hash": res.config_hash, "wall_time_s": res.wall_time}


def cmd_resume(args):
    run_dir = Path(args.run_dir)
    path = Path(args.config) if args.config else run_dir / RESOLVED_CONFIG
    cfg = _apply_overrides(load_config(path), args)
    post = build_posterior(cfg)
    res = ParallelTempering.resume(post, cfg.settings(), run_dir / ParallelTempering.CHECKPOINT_NAME,
                                   out_dir=run_dir, config_hash=cfg.hash(), workers=args.workers)
    return {"status": "ok", "run_dir": str(run_dir), "iterations": res.metadata["iterations"],
            "config_hash": res.config_hash}


def _load_run(args):
    run_dir = Path(args.run_dir)
    path = Path(args.config) if getattr(args, "config", None) else run_dir / RESOLVED_CONFIG
    cfg = load_config(path)
    return run_dir, cfg


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_diagnose(args):
    run_dir, cfg = _load_run(args)
    post = build_posterior(cfg)
    spec = post.spec
    meta = json.loads((run_dir / "run_metadata.json").read_text())
    chains = read_store(run_dir, "samples")
    n = min(len(c) for c in chains)
    burn = int(cfg.outputs.burn_in_fraction * n)
    if n - burn < 4:
        raise InvalidInputError("too few recorded samples after burn-in for diagnostics")
    kept = np.stack([c[burn:n] for c in chains])          # (M, N, P)
    names = post.param_names
    pooled = kept.reshape(-1, kept.shape[-1])

    gr = [dg.gelman_rubin(kept[:, :, j]) if kept.shape[0] > 1 else None
          for j in range(kept.shape[-1])]
    res = dg.residual_summary(pooled, post)
    sigma = {nm: s.tolist() for nm, s in zip(res.names, res.sigma)}
    target = cfg.outputs.target_layer
    emap = dg.voxel_posterior(pooled, spec, target_layer=target)
    depth = cfg.outputs.entropy_depth_m
    s_mean = emap.mean_entropy(depth, binary=target is not None)
    thin = cfg.sampler.thinning
    row = dg.table_row(kept, sigma, s_mean, read_timing(run_dir).get("cpu_time_s", 0.0), thinning=thin)
    acc = np.asarray(meta["acceptance"])

    diag_dir = run_dir / "diagnostics"
    diag_dir.mkdir(exist_ok=True)
    for d in cfg.outputs.slice_depths_m:
        dg.slice_export(emap, spec.grid, d, diag_dir / f"slice_{d:g}m.csv")
    for sensor, r, mp in zip(post.sensors, res.residuals, res.mean_prediction):
        ref = sensor.data.reference
        if sensor.kind == "mt":
            rows = np.column_stack([sensor.row_site, sensor.row_freq, ref, mp, r])
            header = ["site", "freq_index", "log10_app_res", "phase_deg", "pred_log10_app_res",
                      "pred_phase_deg", "res_log10_app_res", "res_phase_deg"]
        else:
            rows = np.column_stack([sensor.loc.points[:, :2], ref, mp, r])
            header = ["x_m", "y_m", "data", "prediction", "residual"]
        _write_csv(diag_dir / f"residuals_{sensor.name}.csv", header, rows.tolist())
    for k, c in enumerate(chains):
        _write_csv(diag_dir / f"trace_stack{k}.csv", ["iteration"] + names,
                   [[(i + 1) * thin] + list(v) for i, v in enumerate(c.tolist())])

    report = {
        "format_version": FORMAT_VERSION,
        "burn_in_records": burn,
        "records_per_stack": n - burn,
        "table": {k: row[k] for k in dg.TABLE_COLUMNS},
        "iact_window": f"sum truncated at first lag with rho < {dg.IACT_CUTOFF}",
        "parameters": [
            {"name": nm, "mean": float(pooled[:, j].mean()), "std": float(pooled[:, j].std(ddof=1)),
             "tau": row["taus"][j], "gelman_rubin": gr[j],
             "converged": None if gr[j] is None else bool(gr[j] < dg.GR_THRESHOLD)}
            for j, nm in enumerate(names)],
        "acceptance": acc.tolist(),
        "acceptance_flags": dg.acceptance_flags(acc).tolist(),
        "sigma": sigma,
        "entropy": {"mean_n_layer": emap.mean_entropy(depth),
                    "mean_target_binary": (emap.mean_entropy(depth, binary=True)
                                           if target is not None else None),
                    "depth_m": depth, "target_layer": target},
    }
    with open(diag_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    return {"status": "ok", "report": str(diag_dir / "report.json"), "table": report["table"]}


def cmd_voxelise(args):
    run_dir, cfg = _load_run(args)
    spec = build_world(cfg)
    samples = read_store(run_dir, "samples", args.stack)
    if not -len(samples) <= args.sample < len(samples):
        raise InvalidInputError(f"sample index {args.sample} out of range for {len(samples)} records")
    model = voxelise(spec, samples[args.sample])
    g = model.grid
    gx, gy, gz = np.meshgrid(g.centres(0), g.centres(1), g.centres(2), indexing="ij")
    roles = sorted(model.properties)
    cols = [gx.ravel(), gy.ravel(), gz.ravel(), model.occupancy.ravel()]
    cols += [model.properties[r].ravel() for r in roles]
    out = Path(args.output)
    _write_csv(out, ["x_m", "y_m", "z_m", "layer"] + roles,
               [[repr(float(v)) if i != 3 else int(v) for i, v in enumerate(r)]
                for r in zip(*cols)])
    return {"status": "ok", "output": str(out), "voxels": int(g.n_voxels)}


def cmd_subsample(args):
    rows = subsample_csv(args.input, args.output, args.kind, args.n, args.seed)
    return {"status": "ok", "output": args.output, "rows": len(rows)}


def build_parser():
    p = argparse.ArgumentParser(prog="ptgeo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def sampler_knobs(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--n-stacks", dest="n_stacks", type=int)
        sp.add_argument("--n-temps", dest="n_temps", type=int)
        sp.add_argument("--beta-min", dest="beta_min", type=float)
        sp.add_argument("--swap-interval", dest="swap_interval", type=int)
        sp.add_argument("--thinning", type=int)
        sp.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
        sp.add_argument("--proposal", choices=["igrw", "agrw", "pcn"])
        sp.add_argument("--workers", type=int, help="worker processes (default: PTGEO_WORKERS or CPU count)")

    sp = sub.add_parser("run", help="start a sampling run")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="run directory (default: outputs.directory)")
    sampler_knobs(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("resume", help="continue a run from its checkpoint")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--config", help="config (default: the copy stored in the run directory)")
    sampler_knobs(sp)
    sp.set_defaults(func=cmd_resume)

    sp = sub.add_parser("diagnose", help="convergence report, residuals and entropy maps")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("voxelise", help="write one recorded sample as a voxel CSV")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--config")
    sp.add_argument("--sample", type=int, required=True)
    sp.add_argument("--stack", type=int, default=0)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_voxelise)

    sp = sub.add_parser("subsample", help="random subset of a sensor CSV")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--kind", required=True, choices=["gravity", "magnetic", "mt"])
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_subsample)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        out = args.func(args)
    except PtgeoError as exc:
        err = {"error": exc.kind, "message": str(exc)}
        if getattr(exc, "errors", None):
            err["details"] = exc.errors
        print(json.dumps(err), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
