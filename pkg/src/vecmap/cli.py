"""Command line front-end: generate, train, eval, gradcheck, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
Relative --out paths resolve against $VECMAP_OUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import RunConfig, overfit_config
from .geometry import Scene, rasterize_scene, read_scenes, write_scenes
from .metrics import EvalConfig, evaluate, read_detections, write_detections
from .synth import generate_scenes, scene_seed

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
OUT_ROOT_ENV = "VECMAP_OUT_ROOT"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def load_config(path: str | None, seed: int | None = None) -> RunConfig:
    if path is None:
        cfg = overfit_config()
    else:
        try:
            cfg = RunConfig.load(path)
        except FileNotFoundError as exc:
            raise DataError(f"config {path} not found") from exc
        except (ValueError, TypeError) as exc:
            raise UsageError(f"config {path}: {exc}") from exc
    if seed is not None:
        raw = cfg.to_dict()
        raw["seed"] = seed
        raw["synth"]["seed"] = seed
        cfg = RunConfig.from_dict(raw)
    return cfg


def _prepare_out(out: Path, force: bool, outputs: list[str]) -> None:
    clash = [name for name in outputs if (out / name).exists()]
    if clash and not force:
        raise UsageError(f"{out} already holds {', '.join(clash)}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def load_dataset(data: str) -> tuple[list[Scene], dict]:
    root = Path(data)
    manifest_path = root / "manifest.json" if root.is_dir() else root
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        scenes = read_scenes(manifest_path.parent / manifest["scenes_file"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read dataset at {data}: {exc}") from exc
    if len(scenes) != manifest.get("count", len(scenes)):
        raise DataError(f"{data}: manifest lists {manifest['count']} scenes but the file holds {len(scenes)}")
    return scenes, manifest


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.seed)
    n = cfg.num_scenes if args.num_scenes is None else args.num_scenes
    if n < 0:
        raise UsageError("--num-scenes must be >= 0")
    out = resolve_out(args.out)
    _prepare_out(out, args.force, ["scenes.jsonl", "manifest.json"])
    scenes = generate_scenes(cfg.synth, n)
    write_scenes(out / "scenes.jsonl", scenes)
    manifest = {
        "scenes_file": "scenes.jsonl",
        "count": n,
        "seed": cfg.synth.seed,
        "synth": cfg.to_dict()["synth"],
        "scenes": [{"id": s.id, "seed": scene_seed(cfg.synth.seed, i)} for i, s in enumerate(scenes)],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {n} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = load_config(args.config, args.seed)
    scenes, manifest = load_dataset(args.data)
    raw = cfg.to_dict()
    if manifest.get("synth") and manifest["synth"] != raw["synth"]:
        # the data defines the grid and range; keep the run config consistent with it
        raw["synth"] = {**raw["synth"], **manifest["synth"], "seed": raw["synth"]["seed"]}
    if args.steps is not None:
        raw["optim"]["total_steps"] = args.steps
    out = resolve_out(args.out)
    raw["num_scenes"] = len(scenes)
    raw["out_dir"] = str(out)
    try:
        cfg = RunConfig.from_dict(raw)
    except ValueError as exc:
        raise DataError(f"dataset {args.data} does not fit the run config: {exc}") from exc
    _prepare_out(out, args.force, ["metrics.jsonl", "final.params"])

    def log(rec):
        if rec["kind"] == "eval":
            print(json.dumps({"step": rec["step"], "class_ap": rec["class_ap"], "mAP": rec["mAP"]}))
        elif args.verbose or rec["step"] % 100 == 0:
            print(json.dumps({"step": rec["step"], "lr": rec["lr"], "loss": rec["loss"]["total"]}))

    res = train(cfg, scenes, out, log)
    print(f"finished {cfg.optim.total_steps} steps in {res.seconds:.1f}s; final mAP {res.final.mAP}")
    return EXIT_OK


def _run_config_for(checkpoint: Path, config: str | None) -> RunConfig:
    if config is not None:
        return load_config(config)
    beside = checkpoint.parent / "config.json"
    if not beside.exists():
        raise UsageError(f"no config.json next to {checkpoint}; pass --config")
    return load_config(str(beside))


def cmd_eval(args) -> int:
    from .train import load_store, predict, prepare

    if (args.checkpoint is None) == (args.predictions is None):
        raise UsageError("pass exactly one of --checkpoint or --predictions")
    scenes, _ = load_dataset(args.data)
    eval_cfg = EvalConfig.for_setting(args.setting)
    if args.predictions is not None:
        try:
            dets = read_detections(args.predictions)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read predictions {args.predictions}: {exc}") from exc
    else:
        ckpt = Path(args.checkpoint)
        cfg = _run_config_for(ckpt, args.config)
        with nm.precision(np.dtype(cfg.dtype)):
            try:
                store = load_store(cfg, ckpt)
            except (OSError, KeyError, ValueError) as exc:
                raise DataError(f"cannot load checkpoint {ckpt}: {exc}") from exc
            dets = predict(store, cfg, prepare(scenes, cfg))
        if args.out is not None:
            out = resolve_out(args.out)
            _prepare_out(out, args.force, ["predictions.jsonl"])
            write_detections(out / "predictions.jsonl", dets)
    try:
        report = evaluate(dets, scenes, eval_cfg, workers=args.workers)
    except KeyError as exc:
        raise DataError(str(exc)) from exc
    print(report.to_text())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import OP_CASES, corrupted_backward, run_suite

    ops = args.ops.split(",") if args.ops else None
    unknown = set(ops or []) - set(OP_CASES)
    if unknown:
        raise UsageError(f"unknown ops: {sorted(unknown)}")
    seeds = range(args.seed or 0, (args.seed or 0) + args.seeds)
    if args.corrupt:
        if not hasattr(nm, args.corrupt):
            raise UsageError(f"no op named {args.corrupt}")
        with corrupted_backward(args.corrupt):
            results = run_suite(seeds, ops, end_to_end=not args.no_end_to_end)
    else:
        results = run_suite(seeds, ops, end_to_end=not args.no_end_to_end)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def _pgm(path: Path, img: np.ndarray) -> None:
    """Binary P5 graymap; row 0 (lowest y) is written last so the image reads north-up."""
    img = np.asarray(img, dtype=np.uint8)[::-1]
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def overlay(mask: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Gray levels: 0 empty, 85 GT only, 170 mask only, 255 both."""
    return (85 * (gt > 0) + 170 * (mask > 0)).astype(np.uint8)


def cmd_inspect(args) -> int:
    from .model import forward
    from .train import load_store, prepare

    ckpt = Path(args.checkpoint)
    cfg = _run_config_for(ckpt, args.config)
    scenes, _ = load_dataset(args.data)
    by_id = {s.id: s for s in scenes}
    if args.scene in by_id:
        scene = by_id[args.scene]
    elif args.scene.isdigit() and int(args.scene) < len(scenes):
        scene = scenes[int(args.scene)]
    else:
        raise UsageError(f"unknown scene {args.scene!r}")
    d = cfg.decoder
    if not 0 <= args.element < d.num_elements:
        raise UsageError(f"element index must be in [0, {d.num_elements})")
    out = resolve_out(args.out)
    _prepare_out(out, args.force, ["layer1_anchors.txt"])
    with nm.precision(np.dtype(cfg.dtype)):
        store = load_store(cfg, ckpt)
        batch = prepare([scene], cfg)[0]
        from .train import EVAL_NOISE_SEED
        _, preds = forward(store, d, batch.occ, cfg.synth.noise_sigma, EVAL_NOISE_SEED)
    gt = rasterize_scene(scene, d.grid_h, d.grid_w, cfg.synth.perception_range, cfg.synth.raster_thickness).max(axis=0)
    e = args.element
    for layer, pr in enumerate(preds, start=1):
        anchors = pr.anchors.reshape((-1,) + pr.anchors.shape[-3:])[0, e]
        points = pr.points.data.reshape((-1,) + pr.points.shape[-3:])[0, e]
        lines = ["# point x_norm y_norm out_x_norm out_y_norm"]
        lines += [f"{i} {a[0]:.6f} {a[1]:.6f} {p[0]:.6f} {p[1]:.6f}" for i, (a, p) in enumerate(zip(anchors, points))]
        (out / f"layer{layer}_anchors.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        mask = pr.anchor_masks.reshape((-1,) + pr.anchor_masks.shape[-2:])[0, e].reshape(d.grid_h, d.grid_w)
        _pgm(out / f"layer{layer}_mask.pgm", overlay(mask, gt))
        att = pr.element_attention.reshape((-1,) + pr.element_attention.shape[-2:])[0, e].reshape(d.grid_h, d.grid_w)
        _pgm(out / f"layer{layer}_attention.pgm", np.round(255 * att / max(att.max(), 1e-12)))
    print(f"wrote {len(preds)} layer dumps for {scene.id} element {e} to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vecmap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="run config JSON (defaults to the desk-scale overfit recipe)")
        sp.add_argument("--seed", type=int, help="override the run and data seed")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    g = sub.add_parser("generate", help="write synthetic scenes and a manifest")
    common(g)
    g.add_argument("-n", "--num-scenes", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a generated dataset")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--steps", type=int, help="override total steps")
    t.add_argument("--verbose", action="store_true", help="print every step")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AP report for a checkpoint or a predictions file")
    common(e, out_required=False)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--predictions")
    e.add_argument("--setting", choices=("easy", "hard"), default="easy")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op (64-bit)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=10, help="number of seeds per op")
    c.add_argument("--ops", help="comma-separated subset of ops")
    c.add_argument("--no-end-to-end", action="store_true")
    c.add_argument("--corrupt", help="negative control: scale the backward rule of this op")
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="per-layer anchor tables and anchor-mask graymaps")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--scene", default="0", help="scene id or index")
    i.add_argument("--element", type=int, default=0)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, nm.ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
