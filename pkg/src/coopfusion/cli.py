"""Command-line experiment runner.

Subcommands cover the whole pipeline: ``gen`` (scene datasets), ``train``
(fit the detector), ``eval`` (test-set scoring), ``sweep`` (pose-noise and
staleness robustness), ``ablate`` (train/score named variants), ``report``
(aggregate tables, PR plot, byte-cost accounting). One YAML config drives
everything; command-line ``--set section.field=value`` overrides scalars.

Exit codes: 0 success, 2 configuration error, 3 data/path error, 4 numeric
failure, 5 embedded report assertion failure.
"""
from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
from dataclasses import replace

import numpy as np

from .align import AlignmentError
from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config
from .evaluation import (PRCurve, average_precision, comm_report, delay_sweep,
                         evaluate_model, input_signature, noise_sweep,
                         scene_detections, variant_config, write_csv,
                         write_pr_curves_csv, write_pr_svg)
from .message import WireFormatError
from .model import CollabDetector, build_scene_inputs
from .nn import load_checkpoint
from .scene import SceneDataError, generate_scene, load_scene, save_depth_blob, save_scene
from .tensor import DegenerateMaskError
from .training import TrainingDivergedError, train_run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_ASSERTION = 5

OUT_ROOT_ENV = "COOPFUSION_OUT"


class ReportCheckFailed(AssertionError):
    """An acceptance assertion embedded in a report did not hold."""


# -- shared plumbing ---------------------------------------------------------------


def resolve_out_dir(cfg: RunConfig) -> str:
    root = os.environ.get(OUT_ROOT_ENV, "")
    if root and not os.path.isabs(cfg.out_dir):
        return os.path.join(root, cfg.out_dir)
    return cfg.out_dir


def load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    return apply_overrides(cfg, args.set or [])


def refuse_existing(path: str, force: bool):
    if os.path.exists(path) and not force:
        raise SceneDataError(f"{path} already exists; pass --force to replace it")


def write_provenance(out_dir: str, cfg: RunConfig):
    with open(os.path.join(out_dir, "config.yaml"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def scene_paths(out_dir: str, split: str, count: int) -> list:
    base = os.path.join(out_dir, "scenes", split)
    return [os.path.join(base, f"scene_{i:05d}.json") for i in range(count)]


def load_split(out_dir: str, split: str, count: int) -> list:
    paths = scene_paths(out_dir, split, count)
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise SceneDataError(f"{len(missing)} {split} scene files missing under "
                             f"{os.path.dirname(paths[0])} (run gen first)")
    return [load_scene(p) for p in paths]


def build_inputs(scenes: list, model_cfg, quiet: bool) -> list:
    inputs = []
    for i, sc in enumerate(scenes):
        inputs.append(build_scene_inputs(sc, model_cfg))
        if not quiet and (i + 1) % 100 == 0:
            print(f"  packaged {i + 1}/{len(scenes)} scenes")
    return inputs


def load_model(cfg_model, ckpt_path: str) -> CollabDetector:
    if not os.path.exists(ckpt_path):
        raise SceneDataError(f"checkpoint not found: {ckpt_path} (run train first)")
    model = CollabDetector(cfg_model)
    arrays = load_checkpoint(ckpt_path)
    model.load_arrays({k: v for k, v in arrays.items()
                       if not k.startswith(("opt.", "meta."))})
    return model


def curve_to_json(curve: PRCurve) -> dict:
    return {"ap": curve.ap, "n_gt": curve.n_gt, "n_det": curve.n_det,
            "recalls": [float(r) for r in curve.recalls],
            "precisions": [float(p) for p in curve.precisions]}


def curve_from_json(doc: dict) -> PRCurve:
    return PRCurve(np.array(doc["recalls"], dtype=np.float64),
                   np.array(doc["precisions"], dtype=np.float64),
                   float(doc["ap"]), int(doc["n_gt"]), int(doc["n_det"]))


def write_json(path: str, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- gen ----------------------------------------------------------------------------


def _gen_one(job):
    scene_cfg, json_path, depth_path = job
    scene = generate_scene(scene_cfg)
    save_scene(scene, json_path)
    save_depth_blob(scene, depth_path)
    return json_path


def cmd_gen(args) -> int:
    cfg = load_run_config(args)
    out_dir = resolve_out_dir(cfg)
    scenes_dir = os.path.join(out_dir, "scenes")
    refuse_existing(scenes_dir, args.force)
    splits = [("train", cfg.data.train_scenes, cfg.data.train_seed_start),
              ("test", cfg.data.test_scenes, cfg.data.test_seed_start)]
    jobs = []
    for split, count, seed_start in splits:
        os.makedirs(os.path.join(scenes_dir, split), exist_ok=True)
        for i, path in enumerate(scene_paths(out_dir, split, count)):
            scene_cfg = replace(cfg.scene, seed=seed_start + i)
            jobs.append((scene_cfg, path, path[:-5] + ".depth"))
    workers = args.workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.Pool(workers) as pool:
            done = pool.map(_gen_one, jobs)
    else:
        done = [_gen_one(j) for j in jobs]
    manifest = {"splits": {split: {"count": count, "seed_start": seed_start}
                           for split, count, seed_start in splits},
                "files": len(done)}
    write_json(os.path.join(scenes_dir, "manifest.json"), manifest)
    write_provenance(out_dir, cfg)
    if not args.quiet:
        print(f"wrote {len(done)} scenes under {scenes_dir}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    out_dir = resolve_out_dir(cfg)
    train_dir = os.path.join(out_dir, "train")
    if not args.resume:
        refuse_existing(os.path.join(train_dir, "checkpoint.bin"), args.force)
    scenes = load_split(out_dir, "train", cfg.data.train_scenes)
    if not args.quiet:
        print(f"loaded {len(scenes)} training scenes; packaging model inputs")
    inputs = build_inputs(scenes, cfg.model, args.quiet)
    model = CollabDetector(cfg.model)
    os.makedirs(train_dir, exist_ok=True)
    write_provenance(train_dir, cfg)
    history = train_run(model, inputs, train_dir, cfg.train,
                        resume=args.resume, quiet=args.quiet)
    if not args.quiet and history:
        print(f"final epoch loss {history[-1]['loss']:.4f}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------


def eval_curves(model, inputs, eval_cfg) -> dict:
    dets = [scene_detections(model, si, eval_cfg.dedup_iou) for si in inputs]
    gts = [si.gt_boxes for si in inputs]
    return {"strict": average_precision(dets, gts, eval_cfg.iou_threshold),
            "loose": average_precision(dets, gts, 0.5)}


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    out_dir = resolve_out_dir(cfg)
    model = load_model(cfg.model, os.path.join(out_dir, "train", "checkpoint.bin"))
    scenes = load_split(out_dir, "test", cfg.data.test_scenes)
    inputs = build_inputs(scenes, cfg.model, args.quiet)
    curves = eval_curves(model, inputs, cfg.eval)
    eval_dir = os.path.join(out_dir, "eval")
    os.makedirs(eval_dir, exist_ok=True)
    doc = {"iou_threshold": cfg.eval.iou_threshold,
           "ap": curves["strict"].ap, "ap_50": curves["loose"].ap,
           "curve": curve_to_json(curves["strict"])}
    write_json(os.path.join(eval_dir, "eval.json"), doc)
    write_pr_curves_csv(os.path.join(eval_dir, "pr_full.csv"),
                        {"full": curves["strict"]})
    if not args.quiet:
        print(f"AP@{cfg.eval.iou_threshold:.2f} = {curves['strict'].ap:.4f} "
              f"(AP@0.50 = {curves['loose'].ap:.4f}) on {len(scenes)} scenes")
    if curves["loose"].ap + 1e-12 < curves["strict"].ap:
        raise ReportCheckFailed("AP at IoU 0.50 fell below AP at the strict "
                               "threshold; threshold monotonicity violated")
    return EXIT_OK


# -- sweep ---------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    cfg = load_run_config(args)
    out_dir = resolve_out_dir(cfg)
    model = load_model(cfg.model, os.path.join(out_dir, "train", "checkpoint.bin"))
    scenes = load_split(out_dir, "test", cfg.data.test_scenes)
    sweep_dir = os.path.join(out_dir, "sweeps")
    os.makedirs(sweep_dir, exist_ok=True)
    noise_rows = noise_sweep(model, scenes, cfg.model,
                             list(cfg.eval.noise_sigmas), cfg.eval.noise_seeds,
                             cfg.eval.iou_threshold)
    write_csv(os.path.join(sweep_dir, "noise.csv"),
              ["sigma", "ap_mean", "ap_per_seed"],
              [[r["sigma"], r["ap_mean"],
                " ".join(f"{a:.6f}" for a in r["ap_per_seed"])]
               for r in noise_rows])
    delay_rows = delay_sweep(model, scenes, cfg.model, list(cfg.eval.delays),
                             cfg.eval.iou_threshold)
    write_csv(os.path.join(sweep_dir, "delay.csv"),
              ["delay_s", "ap_compensated", "ap_stale"],
              [[r["delay"], r["ap_compensated"], r["ap_stale"]]
               for r in delay_rows])
    write_json(os.path.join(sweep_dir, "sweeps.json"),
               {"noise": noise_rows, "delay": delay_rows})
    if not args.quiet:
        print(f"wrote noise ({len(noise_rows)} rows) and delay "
              f"({len(delay_rows)} rows) sweeps under {sweep_dir}")
    eval_doc_path = os.path.join(out_dir, "eval", "eval.json")
    if (noise_rows and noise_rows[0]["sigma"] == 0.0
            and os.path.exists(eval_doc_path)):
        with open(eval_doc_path) as fh:
            stored = json.load(fh)
        if abs(noise_rows[0]["ap_mean"] - stored["ap"]) > 1e-12:
            raise ReportCheckFailed("zero-noise sweep point disagrees with "
                                    "the stored evaluation result")
    return EXIT_OK


# -- ablate --------------------------------------------------------------------------


def cmd_ablate(args) -> int:
    cfg = load_run_config(args)
    out_dir = resolve_out_dir(cfg)
    ablate_dir = os.path.join(out_dir, "ablate")
    train_scenes = load_split(out_dir, "train", cfg.data.train_scenes)
    test_scenes = load_split(out_dir, "test", cfg.data.test_scenes)
    # variants sharing an input signature reuse the packaged scene tensors
    input_cache = {}

    def inputs_for(model_cfg, scenes, tag):
        key = (input_signature(model_cfg), tag)
        if key not in input_cache:
            input_cache[key] = build_inputs(scenes, model_cfg, args.quiet)
        return input_cache[key]

    rows = []
    curves = {}
    for name in cfg.eval.variants:
        vcfg = variant_config(cfg.model, name)
        vdir = os.path.join(ablate_dir, name)
        ckpt = os.path.join(vdir, "train", "checkpoint.bin")
        if not (args.force or not os.path.exists(ckpt)):
            raise SceneDataError(f"{ckpt} already exists; pass --force to retrain")
        model = CollabDetector(vcfg)
        if not args.quiet:
            print(f"[{name}] training for {cfg.train.epochs} epochs")
        train_run(model, inputs_for(vcfg, train_scenes, "train"),
                  os.path.join(vdir, "train"), cfg.train, quiet=args.quiet)
        test_inputs = inputs_for(vcfg, test_scenes, "test")
        curve = evaluate_model(model, test_inputs, cfg.eval.iou_threshold,
                               cfg.eval.dedup_iou)
        curves[name] = curve
        write_json(os.path.join(vdir, "eval.json"),
                   {"variant": name, "ap": curve.ap,
                    "curve": curve_to_json(curve)})
        rows.append([name, curve.ap, curve.n_gt, curve.n_det])
        if not args.quiet:
            print(f"[{name}] AP@{cfg.eval.iou_threshold:.2f} = {curve.ap:.4f}")
    write_csv(os.path.join(ablate_dir, "ablation.csv"),
              ["variant", "ap", "n_gt", "n_det"], rows)
    write_pr_curves_csv(os.path.join(ablate_dir, "pr_curves.csv"), curves)
    write_json(os.path.join(ablate_dir, "ablation.json"),
               {name: curve_to_json(c) for name, c in curves.items()})
    return EXIT_OK


# -- report --------------------------------------------------------------------------


def cmd_report(args) -> int:
    cfg = load_run_config(args)
    out_dir = resolve_out_dir(cfg)
    report_dir = os.path.join(out_dir, "report")
    os.makedirs(report_dir, exist_ok=True)
    summary = {"out_dir": cfg.out_dir}

    comm = comm_report(cfg.model.channels, cfg.model.depth_bins,
                       cfg.model.cameras)
    write_csv(os.path.join(report_dir, "comm.csv"),
              ["instances", "header_bytes", "payload_bytes", "total_bytes"],
              [[r["instances"], r["header_bytes"], r["payload_bytes"],
                r["total_bytes"]] for r in comm["rows"]])
    write_json(os.path.join(report_dir, "comm.json"),
               {k: v for k, v in comm.items() if k != "rows"})
    summary["comm"] = {"bytes_per_instance": comm["bytes_per_instance"],
                       "header_bytes": comm["header_bytes"],
                       "payload_ratio_200_to_5": comm["payload_ratio_200_to_5"]}

    curves = {}
    eval_path = os.path.join(out_dir, "eval", "eval.json")
    if os.path.exists(eval_path):
        with open(eval_path) as fh:
            doc = json.load(fh)
        curves["full"] = curve_from_json(doc["curve"])
        summary["eval"] = {"ap": doc["ap"], "ap_50": doc["ap_50"]}
    ablation_path = os.path.join(out_dir, "ablate", "ablation.json")
    if os.path.exists(ablation_path):
        with open(ablation_path) as fh:
            abl = json.load(fh)
        for name, doc in abl.items():
            curves[name] = curve_from_json(doc)
        summary["ablation"] = {name: doc["ap"] for name, doc in abl.items()}
    sweeps_path = os.path.join(out_dir, "sweeps", "sweeps.json")
    if os.path.exists(sweeps_path):
        with open(sweeps_path) as fh:
            summary["sweeps"] = json.load(fh)
    if curves:
        write_pr_svg(os.path.join(report_dir, "pr_curves.svg"), curves)
    write_json(os.path.join(report_dir, "summary.json"), summary)
    if not args.quiet:
        print(f"report written under {report_dir}")

    if comm["max_residual"] > 1e-9:
        raise ReportCheckFailed("message size is not affine in instance count")
    ratio = comm["payload_ratio_200_to_5"]
    if abs(ratio - 40.0) > 40.0 * 0.005:
        raise ReportCheckFailed(f"200:5 payload ratio {ratio} is outside 0.5% of 40")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coopfusion",
        description="multi-agent camera fusion: data, training, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = [("gen", cmd_gen, "generate train/test scene datasets"),
             ("train", cmd_train, "train the fusion detector"),
             ("eval", cmd_eval, "score the checkpoint on the test split"),
             ("sweep", cmd_sweep, "pose-noise and staleness robustness sweeps"),
             ("ablate", cmd_ablate, "train and score ablation variants"),
             ("report", cmd_report, "aggregate tables, plots, byte accounting")]
    for name, fn, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", required=True, help="run config YAML")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scalar config field (repeatable)")
        p.add_argument("--force", action="store_true",
                       help="replace existing outputs")
        p.add_argument("-q", "--quiet", action="store_true")
        if name == "gen":
            p.add_argument("--workers", type=int, default=0,
                           help="parallel scene workers (default: CPU count)")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from the existing checkpoint")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateMaskError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SceneDataError, WireFormatError, AlignmentError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ReportCheckFailed as exc:
        print(f"report assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERTION


if __name__ == "__main__":
    sys.exit(main())
