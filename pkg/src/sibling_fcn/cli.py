"""Command-line entry point: ``sibling-fcn {synth,train,eval,infer}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, load
from .data import (
    GenerationError,
    assign_splits,
    generate,
    load_dataset,
    load_png,
    make_masks,
    write_dataset,
)
from .evaluation import detect, evaluate, predict_maps, score_points
from .inference import assign_categories, category_frequencies, nms
from .model import ModelConfig, build, forward
from .train import REGIMES, DivergenceError, format_log, make_regime, run_regime

log = logging.getLogger("sibling_fcn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _threads(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = int(args.seed)
    if args.threads is not None:
        cfg.threads = int(args.threads)
    return cfg


def _dataset(cfg: RunConfig):
    root = cfg.path("dataset_dir")
    if not (root / "manifest.json").is_file():
        raise UsageError(f"no dataset at {root} (run 'synth' first)")
    ds = load_dataset(root)
    shape = (ds.manifest["image_height"], ds.manifest["image_width"])
    if shape != (cfg.model.image_height, cfg.model.image_width):
        raise UsageError(f"dataset images are {shape[0]}x{shape[1]} but [model] expects "
                         f"{cfg.model.image_height}x{cfg.model.image_width}")
    return ds


def _write_report(report, stem: Path, names):
    stem.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{stem}_metrics.csv").write_text(report.to_csv())
    Path(f"{stem}_summary.txt").write_text(report.summary(names))


# ------------------------------------------------------------------ commands


def cmd_synth(cfg: RunConfig, out=None, n=None) -> int:
    n = cfg.synth.n_images if n is None else n
    if n < 1:
        raise UsageError("--n must be at least 1")
    out_dir = Path(out) if out else cfg.path("dataset_dir")
    scfg = cfg.synth_config()
    images = generate(scfg, n)
    splits = assign_splits(n, cfg.seed, cfg.synth.split_ratio)
    path = write_dataset(out_dir, images, splits, scfg, mask_radius=cfg.synth.mask_radius)
    counts = {s: splits.count(s) for s in ("train", "val", "test")}
    print(f"wrote {n} images to {out_dir} (train {counts['train']}, val {counts['val']}, test {counts['test']})")
    log.info("manifest %s", path)
    return EXIT_OK


def cmd_train(cfg: RunConfig, regime_name=None) -> int:
    regime_name = regime_name or cfg.regime
    if regime_name not in REGIMES:
        raise UsageError(f"unknown regime {regime_name!r}; expected one of {', '.join(REGIMES)}")
    ds = _dataset(cfg)
    tcfg = cfg.train_config()
    regime = make_regime(regime_name, tcfg)
    ckpt_dir = cfg.path("checkpoint_dir") / regime_name
    report_dir = cfg.path("report_dir")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    meta = {"regime": regime_name, "seed": cfg.seed}
    stage_index = {s.name: i for i, s in enumerate(regime.stages, start=1)}

    def on_stage_end(name, params, step):
        path = ckpt_dir / f"stage{stage_index[name]}_{name}.ckpt"
        checkpoint.save(path, params, {**meta, "stage": name, "step": step})
        log.info("stage %s done at step %d -> %s", name, step, path)

    def on_best(params, entry):
        checkpoint.save(ckpt_dir / "best.ckpt", params, {**meta, **entry})

    try:
        result = run_regime(regime, ds.split("train"), cfg.model, cfg.objective, tcfg,
                            val_images=ds.split("val"), on_stage_end=on_stage_end, on_best=on_best)
    except DivergenceError as exc:
        print(f"error: training diverged at step {exc.step} (stage {exc.stage})", file=sys.stderr)
        return EXIT_RUNTIME
    checkpoint.save(ckpt_dir / "final.ckpt", result.params, meta)
    (ckpt_dir / "train_log.csv").write_text(format_log(result.log))
    names = ds.manifest.get("category_names")
    val = evaluate(result.params, ds.split("val"), match_radius=cfg.eval.match_radius,
                   threshold=cfg.eval.nms_threshold, nms_radius=cfg.eval.nms_radius)
    _write_report(val, report_dir / f"{regime_name}_final_val", names)
    print(val.summary(names), end="")
    return EXIT_OK


def _load_checkpoint(cfg: RunConfig, path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        params, meta = checkpoint.load(path)
    except checkpoint.CheckpointError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    expected_cfg = ModelConfig(**{**cfg.model.to_dict(), "heads": params.config.heads})
    try:
        checkpoint.check_compatible(params, build(expected_cfg, 0))
    except checkpoint.CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    params.config = expected_cfg
    return params, meta


def _oracle_maps(images, k, radius):
    p_obj, p_cond = [], []
    for im in images:
        h, w = im.pixels.shape[1:]
        m = make_masks(im.nuclei, h, w, radius)
        p_obj.append(m.det_mask.astype(float))
        p_cond.append(np.eye(k + 1)[m.cls_mask].transpose(2, 0, 1))
    return p_obj, p_cond


def cmd_eval(cfg: RunConfig, checkpoint_path=None, split="test", oracle_masks=False, dump_matches=None) -> int:
    ds = _dataset(cfg)
    images = ds.split(split)
    k = ds.num_categories
    ev = cfg.eval
    if oracle_masks:
        stem_name = f"oracle_{split}"
        p_obj, p_cond = _oracle_maps(images, k, ds.mask_radius)
    else:
        if checkpoint_path is None:
            raise UsageError("--checkpoint is required unless --oracle-masks is given")
        params, _ = _load_checkpoint(cfg, checkpoint_path)
        cp = Path(checkpoint_path)
        stem_name = f"{cp.parent.name}_{cp.stem}_{split}"
        if images:
            p_obj, p_cond = predict_maps(params, np.stack([im.pixels for im in images]))
        else:
            p_obj, p_cond = [], []
    points = [detect(p_obj[i], p_cond[i], ev.nms_threshold, ev.nms_radius) for i in range(len(images))]
    weights = category_frequencies([im.nuclei for im in images], k)
    report, results = score_points(points, [im.nuclei for im in images], k, weights, ev.match_radius)
    if not images:
        report.warning = f"split {split!r} is empty"
    names = ds.manifest.get("category_names")
    _write_report(report, cfg.path("report_dir") / stem_name, names)
    if dump_matches:
        with open(dump_matches, "w") as fh:
            for im, pts, res in zip(images, points, results):
                fh.write(json.dumps({
                    "image": im.image_id, "tp": res.tp, "fp": res.fp, "fn": res.fn,
                    "pairs": [[i, j] for i, j in res.pairs],
                    "detections": [[p.row, p.col, round(p.objectness, 6), p.category] for p in pts],
                }) + "\n")
    if report.warning:
        print(f"warning: {report.warning}", file=sys.stderr)
    print(report.summary(names), end="")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, checkpoint_path, image_path, out=None, dump_maps=None) -> int:
    params, _ = _load_checkpoint(cfg, checkpoint_path)
    image_path = Path(image_path)
    if not image_path.is_file():
        raise UsageError(f"image not found: {image_path}")
    pixels = load_png(image_path)
    expected = (params.config.image_height, params.config.image_width)
    if pixels.shape[1:] != expected:
        raise UsageError(f"image is {pixels.shape[1]}x{pixels.shape[2]}, model expects {expected[0]}x{expected[1]}")
    out_maps = forward(params, pixels[None], mode="eval")
    p_obj, p_cond = out_maps.objectness()[0], out_maps.cls_cond_probs.data[0]
    ev = cfg.eval
    points = assign_categories(nms(p_obj, ev.nms_threshold, ev.nms_radius), p_obj, p_cond)
    text = "".join(json.dumps({
        "row": p.row, "col": p.col, "objectness": p.objectness, "category": p.category,
        "class_probs": [float(v) for v in p.class_probs],
    }) + "\n" for p in points)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    if dump_maps:
        d = Path(dump_maps)
        d.mkdir(parents=True, exist_ok=True)
        if out_maps.det_probs is not None:
            np.save(d / "det_probs.npy", out_maps.det_probs.data[0])
        np.save(d / "cls_probs.npy", p_cond)
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sibling-fcn", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--threads", type=int, help="cap BLAS threads (1 for bitwise reproducibility)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", help="output directory (default: paths.dataset_dir)")
    p.add_argument("--n", type=int, help="number of images (default: synth.n_images)")

    p = sub.add_parser("train", help="train under a regime")
    p.add_argument("--regime", choices=REGIMES)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default=None, choices=("train", "val", "test"))
    p.add_argument("--oracle-masks", action="store_true", help="score ground-truth masks instead of a model")
    p.add_argument("--dump-matches", help="write per-image match records (JSON lines)")

    p = sub.add_parser("infer", help="detect and classify nuclei in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="write records here instead of stdout")
    p.add_argument("--dump-maps", help="directory for probability-map .npy files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        with _threads(cfg.threads):
            if args.command == "synth":
                return cmd_synth(cfg, args.out, args.n)
            if args.command == "train":
                return cmd_train(cfg, args.regime)
            if args.command == "eval":
                return cmd_eval(cfg, args.checkpoint, args.split or cfg.eval.split, args.oracle_masks,
                                args.dump_matches)
            return cmd_infer(cfg, args.checkpoint, args.image, args.out, args.dump_maps)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
