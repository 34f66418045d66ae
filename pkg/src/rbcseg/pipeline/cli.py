"""Command line entry point: ``rbcseg <command> ...``.

Exit codes: 0 success, 1 batch-level failure, 2 bad configuration or usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..imbalance import ClassDistribution, summary_json
from ..normalize import NoBackgroundError, fit_corpus
from .config import ConfigError, load_config
from .evaluate import eval_separation, read_predictions, read_truth_csv, write_truth_csv
from .render import export_crops, render_overlay, write_manifest
from .run import (CellAnnotation, foreground_mask, list_images, read_rgb, run_segment,
                  segment_image, timing_report, write_png)
from .synth import SceneSpec, gen_synthetic, truth_for_contours

log = logging.getLogger("rbcseg")


class BatchError(RuntimeError):
    pass


def _config(args):
    overrides = {
        "k": getattr(args, "k", None),
        "min_area": getattr(args, "min_area", None),
        "stats_path": getattr(args, "stats", None),
        "workers": getattr(args, "workers", None),
        "canvas": getattr(args, "canvas", None),
    }
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    return load_config(getattr(args, "config", None), **overrides)


def _images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise BatchError(f"input folder not found: {folder}")
    paths = list_images(folder)
    if not paths:
        raise BatchError(f"no PNG images in {folder}")
    return paths


def cmd_fit_stats(args) -> int:
    cfg = _config(args)
    corpus = []
    for p in _images(args.input):
        rgb = read_rgb(p)
        corpus.append((p.stem, rgb, foreground_mask(rgb, cfg)))
    try:
        stats = fit_corpus(corpus)
    except NoBackgroundError as exc:
        raise BatchError(str(exc)) from exc
    stats.save(args.out)
    print(f"{stats.image_count} images, global background mean "
          + ", ".join(f"{v:.3f}" for v in stats.global_mean))
    return 0


def cmd_segment(args) -> int:
    cfg = _config(args)
    paths = _images(args.input)
    if cfg.stats_path and not Path(cfg.stats_path).exists():
        raise BatchError(f"stats file not found: {cfg.stats_path}")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    results = run_segment(cfg, paths)
    all_crops = []
    manifest = {"images": [], "errors": []}
    for path, res in zip(paths, results):
        if res.error:
            manifest["errors"].append({"image": res.image, "error": res.error})
            continue
        if args.crops or args.overlay:
            rgb = read_rgb(path)
        if args.crops:
            all_crops += export_crops(rgb, res.annotations, cfg.canvas, out / "crops")
        if args.overlay:
            write_png(out / f"{res.image}_overlay.png", render_overlay(rgb, res.contours, res.separations))
        (out / f"{res.image}.json").write_text(res.to_json() + "\n")
        manifest["images"].append({"image": res.image, "annotations": f"{res.image}.json",
                                    "cells": len(res.annotations)})
    if args.crops:
        write_manifest(out / "crops" / "manifest.csv", all_crops)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    n_cells = sum(len(r.annotations) for r in results)
    print(f"{len(results) - len(manifest['errors'])}/{len(results)} images segmented, {n_cells} cells")
    return 0


def cmd_export(args) -> int:
    cfg = _config(args)
    ann_dir = Path(args.annotations)
    crops = []
    for p in _images(args.input):
        doc_path = ann_dir / f"{p.stem}.json"
        if not doc_path.exists():
            log.error("no annotations for %s", p.name)
            continue
        doc = json.loads(doc_path.read_text())
        anns = [CellAnnotation.from_dict(doc["image"], d) for d in doc["cells"]]
        crops += export_crops(read_rgb(p), anns, cfg.canvas, args.output)
    write_manifest(Path(args.output) / "manifest.csv", crops)
    print(f"{len(crops)} crops written to {args.output}")
    return 0


def _scene_spec(args) -> SceneSpec:
    return SceneSpec(
        count_range=(args.count_min, args.count_max),
        radius_range=(args.radius_min, args.radius_max),
        axis_ratio_range=(args.ratio_min, args.ratio_max),
        overlap_range=(args.overlap_min, args.overlap_max),
        clusters=args.clusters,
        noise=args.noise,
    )


def cmd_synth(args) -> int:
    cfg = _config(args)
    try:
        spec = _scene_spec(args)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = {}
    ellipses = {}
    for i in range(args.scenes):
        name = f"scene_{i:04d}"
        scene = gen_synthetic(spec, args.seed + i)
        write_png(out / f"{name}.png", scene.image)
        truth.update(truth_for_contours(scene, cfg, name))
        ellipses[name] = [[e.cx, e.cy, e.a, e.b, e.theta] for e in scene.ellipses]
    write_truth_csv(out / "truth.csv", truth)
    (out / "ellipses.json").write_text(json.dumps(ellipses, indent=1, sort_keys=True) + "\n")
    print(f"{args.scenes} scenes, {len(truth)} contours written to {out}")
    return 0


def cmd_eval(args) -> int:
    preds = read_predictions(args.pred)
    truth = read_truth_csv(args.truth)
    try:
        rep = eval_separation(preds, truth)
    except KeyError as exc:
        raise BatchError(str(exc)) from exc
    table = rep.to_table()
    print(table, end="")
    if args.report:
        doc = rep.to_dict()
        doc["table"] = table
        Path(args.report).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args).replace(workers=1)
    if args.input:
        images = [(p.stem, read_rgb(p)) for p in _images(args.input)]
    else:
        spec = SceneSpec(count_range=(1, 4), clusters=args.clusters)
        images = [(f"scene_{i:04d}", gen_synthetic(spec, args.seed + i).image) for i in range(args.images)]
    results = [segment_image(img, cfg, name) for name, img in images]
    rep = timing_report(results)
    for row in rep["rows"]:
        print(f"{row['image']}  segmentation {row['segmentation']:.4f} s  separation {row['separation']:.4f} s")
    if rep["mean"]:
        print(f"mean  segmentation {rep['mean']['segmentation']:.4f} s  separation {rep['mean']['separation']:.4f} s")
    if args.report:
        Path(args.report).write_text(json.dumps(rep, indent=1) + "\n")
    return 0


def cmd_imbalance(args) -> int:
    d = ClassDistribution.from_csv(Path(args.counts))
    text = summary_json(d, args.target)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbcseg", description="Red blood cell segmentation with overlap separation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return p

    p = common(sub.add_parser("fit-stats", help="background colour statistics over a corpus"))
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_stats)

    p = common(sub.add_parser("segment", help="segment images and write annotation JSON"))
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--stats")
    p.add_argument("--k", type=int)
    p.add_argument("--min-area", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--canvas", type=int)
    p.add_argument("--overlay", action="store_true", help="also write overlay PNGs")
    p.add_argument("--crops", action="store_true", help="also export per-cell crops")
    p.set_defaults(func=cmd_segment)

    p = common(sub.add_parser("export", help="per-cell crops from existing annotations"))
    p.add_argument("--input", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--canvas", type=int)
    p.set_defaults(func=cmd_export)

    p = common(sub.add_parser("synth", help="synthetic scenes with ground truth"))
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=1)
    p.add_argument("--count-min", type=int, default=2)
    p.add_argument("--count-max", type=int, default=4)
    p.add_argument("--radius-min", type=float, default=18.0)
    p.add_argument("--radius-max", type=float, default=30.0)
    p.add_argument("--ratio-min", type=float, default=0.8)
    p.add_argument("--ratio-max", type=float, default=1.0)
    p.add_argument("--overlap-min", type=float, default=0.1)
    p.add_argument("--overlap-max", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="separation accuracy report")
    p.add_argument("--pred", required=True, help="folder of annotation JSON")
    p.add_argument("--truth", required=True, help="CSV image,contour_id,true_count[,true_intersections]")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("bench", help="per-stage timing"))
    p.add_argument("--input", help="folder of PNGs (default: synthetic scenes)")
    p.add_argument("--images", type=int, default=20)
    p.add_argument("--clusters", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("imbalance", help="class weights, imbalance ratio and upsampling plan")
    p.add_argument("--counts", required=True, help="CSV with header class,count")
    p.add_argument("--target", help="class every other class is upsampled to")
    p.add_argument("--out")
    p.set_defaults(func=cmd_imbalance)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (BatchError, FileNotFoundError, OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
