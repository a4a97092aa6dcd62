"""Command-line harness.

Verbs: run, train, gradcheck, stats, attn-profile, ablate, dump-depth,
dump-locals. Every verb is deterministic for a fixed seed, writes a
manifest next to its outputs, and exits nonzero with a JSON error record
on failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, build_manifest, default_config, paper_shape_config
from .errors import DepthBevError, StageError
from .fileio import atomic_write_json, atomic_write_text
from .geometry import save_boxes
from .gradcheck import audit_all
from .pipeline import FusionModel, build_cameras, build_corpus, decode_detections, run_pipeline
from .reports import (attention_profile, write_ablation_report, write_attention_profile,
                      write_depth_dump, write_depth_stats, write_loss_trace)
from .scenes import compute_depth_stats, default_density_model
from .training import train_toy


def _load_config(args) -> RunConfig:
    if getattr(args, "paper_shape", False):
        cfg = paper_shape_config()
    elif args.config:
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = default_config().with_env(os.environ)
    if args.seed is not None:
        cfg = cfg.with_overrides(run={"seed": int(args.seed)})
    if args.out is not None:
        cfg = cfg.with_overrides(run={"out_dir": args.out})
    return cfg


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "manifest.json", build_manifest(cfg, cfg.run.seed))
    atomic_write_text(out / "config.txt", cfg.to_text())
    return out


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    result, model, item = run_pipeline(cfg)
    arrays = result.stage_arrays()
    shapes = {name: list(a.shape) for name, a in arrays.items()}
    atomic_write_json(out / "shapes.json", {
        "stages": shapes,
        "proposals": len(result.proposals),
        "stage_seconds": {k: round(v, 6) for k, v in result.stage_seconds.items()},
    })
    atomic_write_json(out / "detections.json",
                      decode_detections(result, model.grid))
    for stage in args.dump or []:
        if stage not in arrays:
            raise DepthBevError(f"unknown stage {stage!r}; choices: {sorted(arrays)}")
        T.write_tensor(out / f"{stage}.bin", arrays[stage])
    print(f"run: wrote {out}/shapes.json and detections.json")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    result = train_toy(cfg, diagnostics_dir=out)
    write_loss_trace(out, result.losses)
    ckpt = out / "checkpoint"
    ckpt.mkdir(exist_ok=True)
    result.model.save_weights(ckpt)
    atomic_write_text(ckpt / "config.txt", cfg.to_text())
    print(f"train: {cfg.train.steps} steps, final loss {result.losses[-1]:.6f} -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    records = audit_all(seeds=args.seeds)
    rows = []
    all_passed = True
    for rec in records:
        status = "PASS" if rec.passed else "FAIL"
        all_passed &= rec.passed
        print(f"{status} {rec.name:24s} max_rel_err={rec.max_rel_err:.3e} "
              f"tol={rec.tolerance:.0e} ({rec.seconds:.2f}s)")
        rows.append({"name": rec.name, "max_rel_err": rec.max_rel_err,
                     "tolerance": rec.tolerance, "passed": rec.passed})
    atomic_write_json(out / "gradcheck.json", {"records": rows, "all_passed": all_passed})
    return 0 if all_passed else 1


def cmd_stats(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    corpus = build_corpus(cfg)
    cams = build_cameras(cfg)
    density = default_density_model()
    stats = compute_depth_stats([it.scene for it in corpus], cams, density.bin_edges)
    write_depth_stats(out, stats)
    print(f"stats: {int(stats.n_objects.sum())} objects over {len(corpus)} scenes -> {out}/stats.csv")
    return 0


def cmd_attn_profile(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    model = FusionModel(cfg, np.random.default_rng(np.random.PCG64(cfg.run.seed)))
    if args.checkpoint:
        model.load_weights(args.checkpoint)
    corpus = build_corpus(cfg)
    rows = attention_profile(model, corpus, cfg)
    write_attention_profile(out, rows)
    print(f"attn-profile: {len(rows)} rows -> {out}/attention_profile.csv")
    return 0


ABLATION_FACTORS = {
    "global": [("with_global", {"use_global": True}), ("no_global", {"use_global": False})],
    "local": [("with_local", {"use_local": True}), ("no_local", {"use_local": False})],
    "depth": [("with_depth", {"use_depth": True}), ("no_depth", {"use_depth": False})],
    "embed": [("multiply", {"embed_mode": "multiply"}), ("sum", {"embed_mode": "sum"}),
              ("concat", {"embed_mode": "concat"})],
}


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    variants = ABLATION_FACTORS[args.factor]
    results = []
    for name, overrides in variants:
        vcfg = cfg.with_overrides(model=overrides)
        res = train_toy(vcfg)
        results.append({"name": name, "losses": res.losses,
                        "initial_loss": res.losses[0], "final_loss": res.losses[-1]})
        print(f"ablate[{args.factor}] {name}: final loss {res.losses[-1]:.6f}")
    write_ablation_report(out, results)
    return 0


def cmd_dump_depth(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    model = FusionModel(cfg, np.random.default_rng(np.random.PCG64(cfg.run.seed)))
    write_depth_dump(out, model.depth_matrix)
    print(f"dump-depth: {model.grid.width}x{model.grid.height} cells -> {out}/depth.csv")
    return 0


def cmd_dump_locals(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    result, model, item = run_pipeline(cfg)
    if result.locals_ is None:
        raise DepthBevError("local stage disabled; nothing to dump (set model.use_local=true)")
    loc = result.locals_
    blob = bytearray()
    records = []
    for name, arr in (("fused_local", loc.fused_local.data),
                      ("voxel_local", loc.voxel_local.data),
                      ("image_local", loc.image_local.data),
                      ("depths", loc.depths)):
        records.append({"name": name, "shape": list(arr.shape), "offset": len(blob)})
        blob += T.tensor_to_bytes(np.asarray(arr, dtype=np.float64))
    from .fileio import atomic_write_bytes
    atomic_write_bytes(out / "locals.bin", bytes(blob))
    atomic_write_json(out / "locals.json", {"tensors": records})
    save_boxes(out / "locals_boxes.json", loc.boxes)
    print(f"dump-locals: {loc.count} instances -> {out}/locals.bin")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthbev",
        description="Depth-modulated LiDAR-camera BEV fusion harness")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, checkpoint=False, dump=False):
        p.add_argument("--config", help="config file (typed key=value sections)")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None, help="override [run] out_dir")
        p.add_argument("--paper-shape", action="store_true",
                       help="use the full-resolution shape preset")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, help="checkpoint directory")
        if dump:
            p.add_argument("--dump", action="append", metavar="STAGE",
                           help="also dump this stage as a tensor binary (repeatable)")

    p = sub.add_parser("run", help="single end-to-end forward pass")
    common(p, dump=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("train", help="toy training run with loss trace and checkpoint")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p)
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("stats", help="depth statistics of a generated corpus")
    common(p)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("attn-profile", help="attention mass vs depth report")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_attn_profile)

    p = sub.add_parser("ablate", help="train matched variants toggling one factor")
    common(p)
    p.add_argument("--factor", choices=sorted(ABLATION_FACTORS), required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("dump-depth", help="depth matrix as CSV plus heatmap")
    common(p)
    p.set_defaults(fn=cmd_dump_depth)

    p = sub.add_parser("dump-locals", help="per-instance local feature dump")
    common(p)
    p.set_defaults(fn=cmd_dump_locals)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # machine-readable failure record
        record = {"error": type(e).__name__, "message": str(e)}
        if isinstance(e, StageError):
            record["stage"] = e.stage
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
