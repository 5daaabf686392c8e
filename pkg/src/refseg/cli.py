"""Command line: ``refseg gen|train|infer|eval|bench``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as B
from . import io
from .config import RunConfig, apply_overrides, load_config
from .metrics import MaskPair, jf_scores, map_at_thresholds, mean_iou, overall_iou
from .scene import generate_scene, load_scene, save_scene

log = logging.getLogger("refseg")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_gen(args) -> int:
    cfg = RunConfig()
    scene = generate_scene(args.seed, frames=args.frames or cfg.data.frames, size=args.size or cfg.data.size,
                           objects=args.objects, expressions=args.expressions or args.objects)
    save_scene(scene, args.out)
    print(f"wrote scene {args.seed} with {len(scene.expressions)} expressions to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, _overrides(args.set))
    result = train(cfg, args.out)
    print(f"trained {len(result.losses)} steps in {result.seconds:.1f}s; "
          f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}; checkpoint {result.checkpoints[-1]}")
    return 0


def cmd_infer(args) -> int:
    from .train import load_model

    model = load_model(args.ckpt)
    scene = load_scene(args.scene)
    results = model.infer(scene.frames, scene.expressions, args.mode)
    out = Path(args.out)
    scores = {}
    for e, r in enumerate(results):
        d = out / f"e{e:02d}"
        d.mkdir(parents=True, exist_ok=True)
        for t, m in enumerate(r.masks()):
            io.write_pgm(d / f"f{t:02d}.pgm", m)
        if args.logits:
            io.write_sgt(d / "logits.sgt", r.mask_logits)
        scores[f"e{e:02d}"] = {"score": r.score, "query": r.query, "frame_scores": r.scores.tolist(),
                               "boxes": r.boxes.tolist(), "words": scene.expression_words(e)}
    (out / "scores.json").write_text(json.dumps(scores, indent=2))
    print(f"wrote {len(results)} mask tracks ({args.mode} mode) to {out}")
    return 0


def evaluate_dirs(pred_dir, gt_dir) -> dict[str, float]:
    """Pair every ``*.pgm`` below ``gt_dir`` with the same relative path below ``pred_dir``.

    The parent directory of a mask names the object, anything above it the
    video. A missing prediction counts as an empty mask; scores for mAP come
    from ``scores.json`` next to the object directories when present.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gt_files = sorted(gt_dir.rglob("*.pgm"))
    if not gt_files:
        raise SystemExit(f"no ground truth masks under {gt_dir}")
    pairs, preds, gts = [], [], []
    score_cache: dict[Path, dict] = {}
    for g in gt_files:
        rel = g.relative_to(gt_dir)
        gt = io.read_pgm(g)
        p = pred_dir / rel
        pred = io.read_pgm(p) if p.exists() else np.zeros_like(gt)
        video = "/".join(rel.parts[:-2]) or "0"
        obj = rel.parts[-2] if len(rel.parts) > 1 else "0"
        scores_path = (pred_dir / rel).parent.parent / "scores.json"
        if scores_path not in score_cache:
            score_cache[scores_path] = json.loads(scores_path.read_text()) if scores_path.exists() else {}
        score = float(score_cache[scores_path].get(obj, {}).get("score", 1.0))
        pairs.append(MaskPair(pred, gt, video=video, obj=obj))
        preds.append((pred, score))
        gts.append(gt)
    report = jf_scores(pairs)
    report["overall_iou"] = overall_iou(pairs)
    report["mean_iou"] = mean_iou(pairs)
    report["mAP"] = map_at_thresholds(preds, gts) if any(g.any() for g in gts) else 0.0
    return {k: float(report[k]) for k in ("J", "F", "JF", "overall_iou", "mean_iou", "mAP")}


def cmd_eval(args) -> int:
    report = evaluate_dirs(args.pred, args.gt)
    Path(args.report).write_text(json.dumps(report, indent=2))
    print(" ".join(f"{k}={v:.4f}" for k, v in report.items()))
    return 0


def cmd_bench(args) -> int:
    from .model import Model
    from .train import load_model

    model = load_model(args.ckpt) if args.ckpt else Model(RunConfig())
    scene = B.bench_scene(seed=args.seed, size=model.cfg.data.size, frames=model.cfg.data.frames)
    report = B.bench_throughput(model, scene, repeats=args.repeats)
    report["drift"] = B.drift_demo(model, scene)
    Path(args.report).write_text(json.dumps(report, indent=2))
    for row in report["table"]:
        print(f"n_expr={row['n_expr']:>2} single={row['single']['per_object_frame'] * 1e3:.2f}ms "
              f"multi={row['multi']['per_object_frame'] * 1e3:.2f}ms ratio={row['ratio']:.3f} "
              f"encoder_calls={row['multi']['encoder_calls']}")
    d = report["drift"]
    print(f"drift decoded={d['drift_decoded']:.3f} random_halves={d['drift_random_halves']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="refseg", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write one synthetic scene")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--objects", type=int, default=2)
    g.add_argument("--expressions", type=int, default=None, help="defaults to one per object")
    g.add_argument("--frames", type=int, default=None)
    g.add_argument("--size", type=int, default=None)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train on the synthetic corpus")
    t.add_argument("--config", default=None, help="key = value file; defaults are used when omitted")
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict masks for a saved scene")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--mode", choices=("single", "multi"), default="single")
    i.add_argument("--multi-object", dest="mode", action="store_const", const="multi",
                   help="shorthand for --mode multi")
    i.add_argument("--out", required=True)
    i.add_argument("--logits", action="store_true", help="also dump mask logits as SGT1")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted masks against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="single vs multi mode latency and feature drift")
    b.add_argument("--ckpt", default=None, help="untrained parameters when omitted")
    b.add_argument("--report", required=True)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=7)
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
