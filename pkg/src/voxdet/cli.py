"""Command-line interface: forward pipeline runs, scaling benchmarks,
batch IoU evaluation, loss evaluation, and oracle verification."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from voxdet import backends, pipeline
from voxdet.geometry import OrientedBox
from voxdet.iou import iou3d_batch, iou3d_grad
from voxdet.losses import evaluate_assignment
from voxdet.verification import run_verify_suite


def _parse_synthetic(spec: str) -> dict:
    """Parse "synthetic:n=100000,boxes=8,seed=0" input specs."""
    out = {"n": 100_000, "boxes": 8, "seed": 0}
    body = spec.split(":", 1)[1] if ":" in spec else ""
    for part in filter(None, body.split(",")):
        key, _, value = part.partition("=")
        if key not in out:
            raise ValueError(f"unknown synthetic scene key {key!r}")
        out[key] = int(value)
    return out


def _load_cloud(args):
    if args.input.startswith("synthetic"):
        spec = _parse_synthetic(args.input)
        cloud, _ = pipeline.synth_scene(spec["n"], spec["boxes"], seed=spec["seed"])
        return cloud
    return pipeline.read_kitti_bin(args.input)


def _emit(payload: dict, out_path) -> None:
    text = json.dumps(payload, indent=2)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text + "\n")
    print(text)


def cmd_forward(args) -> int:
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.deterministic is not None:
        overrides["deterministic"] = args.deterministic
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    cloud = _load_cloud(args)
    if args.weights:
        weights = pipeline.load_pipeline_weights(args.weights, cfg)
    else:
        weights = pipeline.init_pipeline_weights(cfg, c_in=max(cloud.channels, 1), seed=cfg.seed)
    if args.save_weights:
        pipeline.save_pipeline_weights(args.save_weights, weights)
    result = pipeline.run_forward(cloud, cfg, weights)
    payload = {
        "backend": backends.active_backend_name(),
        "config": cfg.to_dict(),
        "key_point_counts": result.key_point_counts,
        "n_proposals": int(len(result.proposals)),
        "report": result.report.to_dict(),
    }
    if args.out:
        payload["proposals"] = result.proposals.tolist()
        payload["confidences"] = result.confidences.tolist()
        payload["flip_logits"] = result.flip_logits.tolist()
        payload["refined"] = result.refined.tolist()
        payload["refined_confidences"] = result.refined_confidences.tolist()
        payload["refined_flips"] = result.refined_flips.tolist()
    _emit(payload, args.out)
    return 0


def cmd_bench(args) -> int:
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig()
    if args.threads is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    sizes = [int(s) for s in args.sizes.split(",")]
    if args.backend == "both":
        names = backends.available_backends()
    elif args.backend == "auto":
        names = [backends.active_backend_name()]
    else:
        names = [args.backend]
    report = pipeline.bench(cfg, sizes, repeats=args.repeats, seed=args.seed, backend_names=names)
    _emit(report, args.out)
    return 0


def _read_pairs(path) -> np.ndarray:
    src = sys.stdin if path == "-" else open(path)
    rows = []
    try:
        for ln, line in enumerate(src, 1):
            line = line.strip().replace(",", " ")
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 14:
                raise ValueError(f"line {ln}: expected 14 values (two 7-parameter boxes), got {len(vals)}")
            rows.append(vals)
    finally:
        if src is not sys.stdin:
            src.close()
    return np.asarray(rows, dtype=np.float64).reshape(-1, 14)


def cmd_iou(args) -> int:
    pairs = _read_pairs(args.pairs)
    res = iou3d_batch(pairs[:, :7], pairs[:, 7:])
    lines = []
    if args.grad:
        header = "iou,loss," + ",".join(f"g{i}" for i in range(14)) + ",smooth"
        for row in pairs:
            gr = iou3d_grad(OrientedBox(*row[:7]), OrientedBox(*row[7:]))
            cells = [f"{gr.iou3d:.9g}", f"{gr.loss:.9g}"]
            cells += [f"{g:.9g}" for g in gr.gradient]
            cells.append("1" if gr.smooth else "0")
            lines.append(",".join(cells))
    else:
        header = "iou,loss"
        for i in range(len(pairs)):
            lines.append(f"{res['iou'][i]:.9g},{res['loss'][i]:.9g}")
    text = "\n".join([header, *lines])
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_eval_losses(args) -> int:
    with open(args.assignment) as f:
        data = json.load(f)
    _emit(evaluate_assignment(data), args.out)
    return 0


def cmd_verify(args) -> int:
    results = run_verify_suite(samples=args.samples, seed=args.seed, pairs=args.pairs)
    failed = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        failed += not ok
        print(f"[{status}] {name}: {detail}")
    print(f"{len(results) - failed}/{len(results)} oracle checks passed "
          f"(backend: {backends.active_backend_name()})")
    return 1 if failed else 0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(
        prog="voxdet",
        description="Point-cloud detection kernels: forward pipeline, benchmarks, "
        "box IoU, losses, and oracle verification.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forward", help="run the two-stage forward pipeline")
    f.add_argument("--input", required=True,
                   help="KITTI-style .bin path or synthetic:n=...,boxes=...,seed=...")
    f.add_argument("--config", help="JSON config file (PipelineConfig keys)")
    f.add_argument("--weights", help="weight blob to load")
    f.add_argument("--save-weights", help="write the (possibly fresh) weight blob here")
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--threads", type=int, default=None)
    f.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    f.add_argument("--out", help="write the full JSON result (incl. proposals) here")
    f.set_defaults(func=cmd_forward)

    b = sub.add_parser("bench", help="scaling benchmark over synthetic scenes")
    b.add_argument("--sizes", default="10000,100000,1000000",
                   help="comma-separated ascending point counts")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--threads", type=int, default=None)
    b.add_argument("--config", help="JSON config file")
    b.add_argument("--backend", choices=["auto", "python", "compiled", "both"], default="auto")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("iou", help="batch 3D IoU over box-pair rows")
    i.add_argument("--pairs", required=True,
                   help="file of 14-value rows (x y z w l h r for two boxes); - for stdin")
    i.add_argument("--grad", action="store_true", help="append the 14-parameter gradient per row")
    i.add_argument("--out")
    i.set_defaults(func=cmd_iou)

    e = sub.add_parser("eval-losses", help="evaluate loss terms on an assignment file")
    e.add_argument("--assignment", required=True, help="JSON assignment (see README)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval_losses)

    v = sub.add_parser("verify", help="run the oracle suite with a pass/fail summary")
    v.add_argument("--samples", type=int, default=200_000, help="Monte Carlo samples per pair")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--pairs", type=int, default=100, help="random box pairs per oracle sweep")
    v.set_defaults(func=cmd_verify)

    args = p.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
