"""Training loop, evaluation and checkpointing for desk-scale runs."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import RunConfig
from .geometry import Scene
from .matching import SceneTargets, build_targets
from .metrics import EvalConfig, EvalReport, evaluate
from .model import build_params, compute_loss, forward, to_detections
from .numerics import ParamStore
from .synth import occupancy

EVAL_NOISE_SEED = 1_000_003


@dataclass
class Batch:
    scenes: list[Scene]
    occ: np.ndarray  # (B, H, W, 3)
    targets: list[SceneTargets]


def prepare(scenes: list[Scene], cfg: RunConfig) -> list[Batch]:
    """One single-scene Batch per scene with occupancy and matching targets precomputed."""
    s, d = cfg.synth, cfg.decoder
    out = []
    for scene in scenes:
        tg = build_targets(scene, d.num_points, s.grid_h, s.grid_w, s.perception_range, s.raster_thickness)
        out.append(Batch([scene], occupancy(scene, s)[None], [tg]))
    return out


def collate(items: list[Batch]) -> Batch:
    return Batch([sc for b in items for sc in b.scenes], np.concatenate([b.occ for b in items]),
                 [t for b in items for t in b.targets])


def batch_schedule(n: int, batch_size: int, seed: int, steps: int) -> list[np.ndarray]:
    """Scene indices per step: a fresh seeded permutation each epoch, short tail batches dropped."""
    if n == 0:
        raise ValueError("no training scenes")
    bs = min(batch_size, n)
    out = []
    epoch = 0
    while len(out) < steps:
        perm = nm.make_rng(seed, 13, epoch).permutation(n)
        out += [perm[i:i + bs] for i in range(0, n - bs + 1, bs)]
        epoch += 1
    return out[:steps]


def predict(store: ParamStore, cfg: RunConfig, batches: list[Batch], noise_seed: int = EVAL_NOISE_SEED,
            chunk: int = 8):
    """Final-layer detections for every scene (noise drawn with a fixed seed)."""
    dets = []
    for i in range(0, len(batches), chunk):
        b = collate(batches[i:i + chunk])
        _, preds = forward(store, cfg.decoder, b.occ, cfg.synth.noise_sigma, noise_seed + i)
        dets += to_detections(preds[-1], [s.id for s in b.scenes], cfg.synth.perception_range)
    return dets


def evaluate_store(store: ParamStore, cfg: RunConfig, batches: list[Batch], eval_cfg: EvalConfig | None = None,
                   workers: int = 1) -> EvalReport:
    dets = predict(store, cfg, batches)
    return evaluate(dets, [s for b in batches for s in b.scenes], eval_cfg or cfg.eval, workers)


def _eval_record(step: int, report: EvalReport) -> dict:
    return {"kind": "eval", "step": step, "thresholds": list(report.thresholds),
            "table": {c: {str(t): ap for t, ap in row.items()} for c, row in report.table.items()},
            "class_ap": report.class_ap, "mAP": report.mAP}


@dataclass
class TrainResult:
    store: ParamStore
    records: list[dict]
    final: EvalReport
    seconds: float


def train(cfg: RunConfig, scenes: list[Scene], out_dir: str | Path | None = None, log=None) -> TrainResult:
    """Run AdamW with a cosine schedule on ``scenes``.

    Writes metrics.jsonl, config.json and checkpoints under ``out_dir`` when
    given. Records are also returned in memory.
    """
    dtype = np.dtype(cfg.dtype)
    oc = cfg.optim
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        (out / "metrics.jsonl").write_text("", encoding="utf-8")

    records: list[dict] = []

    def emit(rec):
        records.append(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        if log is not None:
            log(rec)

    t0 = time.perf_counter()
    with nm.precision(dtype):
        store = build_params(cfg.decoder, cfg.seed)
        store.astype(dtype)
        batches = prepare(scenes, cfg)
        schedule = batch_schedule(len(batches), oc.batch_size, cfg.seed, oc.total_steps)
        for step, idx in enumerate(schedule):
            b = collate([batches[i] for i in idx])
            lr = nm.cosine_lr(step, oc.total_steps, oc.base_lr, oc.min_lr)
            loss, bd, _, _ = compute_loss(store, cfg.decoder, cfg.losses, b.occ, b.targets,
                                          cfg.synth.noise_sigma, int(nm.make_rng(cfg.seed, 17, step).integers(2**31)))
            if not np.isfinite(bd.total):
                raise FloatingPointError(f"non-finite loss at step {step}")
            loss.backward()
            gnorm = store.grad_norm()
            scale = min(1.0, oc.grad_clip / gnorm) if oc.grad_clip > 0 and gnorm > 0 else 1.0
            nm.adamw_step(store, lr, oc.weight_decay, grad_scale=scale)
            store.zero_grad()
            emit({"kind": "step", "step": step, "lr": lr, "grad_norm": gnorm, "loss": bd.to_record()})
            done = step + 1
            if oc.eval_every > 0 and done % oc.eval_every == 0 and done < oc.total_steps:
                emit(_eval_record(done, evaluate_store(store, cfg, batches)))
            if out is not None and oc.checkpoint_every > 0 and done % oc.checkpoint_every == 0:
                nm.save_params(store, out / f"checkpoint-{done:06d}.params")
        final = evaluate_store(store, cfg, batches)
        emit(_eval_record(oc.total_steps, final))
        if out is not None:
            nm.save_params(store, out / "final.params")
    return TrainResult(store, records, final, time.perf_counter() - t0)


def load_store(cfg: RunConfig, path: str | Path) -> ParamStore:
    store = build_params(cfg.decoder, cfg.seed)
    store.astype(np.dtype(cfg.dtype))
    nm.load_into(store, path)
    return store
