"""Chamfer-distance AP / mAP under the easy and hard threshold sets."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import MapClass, MapElement, Scene, chamfer_matrix, resample

HARD = (0.2, 0.5, 1.0)
EASY = (0.5, 1.0, 1.5)
SETTINGS = {"hard": HARD, "easy": EASY}


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = EASY
    resample_n: int = 100
    interpolation: str = "all"  # or "101"

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {self.thresholds}")
        if self.interpolation not in ("all", "101"):
            raise ValueError("interpolation must be 'all' or '101'")

    @classmethod
    def for_setting(cls, setting: str, **kw) -> "EvalConfig":
        return cls(SETTINGS[setting], **kw)


@dataclass
class DetectionRecord:
    scene_id: str
    cls: MapClass
    confidence: float
    element: MapElement

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def _resample_or_point(e: MapElement, n: int) -> np.ndarray:
    # degenerate predictions collapse to a single repeated point
    try:
        return resample(e, n)
    except ValueError:
        return np.repeat(e.points[:1], n, axis=0)


def classify_tp(dist: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy TP flags for predictions already sorted by descending confidence.

    ``dist`` is (num_pred, num_gt) chamfer distances. Each prediction takes
    the nearest GT not yet claimed; it is a TP if that distance is below the
    threshold.
    """
    n_pred, n_gt = dist.shape
    flags = np.zeros(n_pred, dtype=bool)
    claimed = np.zeros(n_gt, dtype=bool)
    for i in range(n_pred):
        if claimed.all():
            break
        d = np.where(claimed, np.inf, dist[i])
        j = int(np.argmin(d))
        if d[j] < threshold:
            flags[i] = True
            claimed[j] = True
    return flags


def average_precision(flags, confidences, num_gt: int, interpolation: str = "all") -> float | None:
    """Area under the precision envelope of confidence-ranked detections.

    Returns None when there is neither ground truth nor a detection.
    """
    flags = np.asarray(flags, dtype=bool)
    conf = np.asarray(confidences, dtype=np.float64)
    if num_gt == 0:
        return None if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    if interpolation == "101":
        ap = 0.0
        for r in np.linspace(0, 1, 101):
            above = precision[recall >= r]
            ap += above.max() if len(above) else 0.0
        return float(ap / 101)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def map_score(table: dict) -> tuple[dict, float | None]:
    """table[class][threshold] -> AP (None = undefined). Returns per-class AP and their mean."""
    class_ap = {}
    for cls, row in table.items():
        vals = [v for v in row.values() if v is not None]
        class_ap[cls] = float(np.mean(vals)) if vals else None
    defined = [v for v in class_ap.values() if v is not None]
    return class_ap, (float(np.mean(defined)) if defined else None)


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    table: dict = field(default_factory=dict)  # class short name -> {threshold: AP}
    class_ap: dict = field(default_factory=dict)
    mAP: float | None = None

    def records(self) -> list[dict]:
        out = [{"kind": "ap", "class": c, "threshold": t, "ap": ap} for c, row in self.table.items() for t, ap in row.items()]
        out += [{"kind": "class_ap", "class": c, "ap": ap} for c, ap in self.class_ap.items()]
        out.append({"kind": "mAP", "thresholds": list(self.thresholds), "mAP": self.mAP})
        return out

    def to_text(self) -> str:
        return "\n".join(json.dumps(r) for r in self.records())


def evaluate(detections: list[DetectionRecord], scenes: list[Scene], cfg: EvalConfig, workers: int = 1) -> EvalReport:
    """Per-class, per-threshold AP over a scene set, then class AP and mAP."""
    by_scene = {s.id: s for s in scenes}
    unknown = {d.scene_id for d in detections} - set(by_scene)
    if unknown:
        raise KeyError(f"detections reference unknown scenes: {sorted(unknown)}")
    n = cfg.resample_n

    def scene_class(args):
        scene, cls = args
        gts = [e for e in scene.elements if e.cls == cls]
        dets = sorted((d for d in detections if d.scene_id == scene.id and d.cls == cls), key=lambda d: -d.confidence)
        a = np.array([_resample_or_point(d.element, n) for d in dets]).reshape(len(dets), n, 2)
        b = np.array([resample(g, n) for g in gts]).reshape(len(gts), n, 2)
        dist = chamfer_matrix(a, b)
        conf = np.array([d.confidence for d in dets])
        return cls, len(gts), conf, {t: classify_tp(dist, t) for t in cfg.thresholds}

    jobs = [(s, c) for s in scenes for c in MapClass]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(scene_class, jobs))
    else:
        results = [scene_class(j) for j in jobs]

    report = EvalReport(cfg.thresholds)
    for cls in MapClass:
        rows = [r for r in results if r[0] == cls]
        num_gt = sum(r[1] for r in rows)
        conf = np.concatenate([r[2] for r in rows]) if rows else np.zeros(0)
        report.table[cls.short] = {
            t: average_precision(np.concatenate([r[3][t] for r in rows]) if rows else np.zeros(0, bool), conf, num_gt, cfg.interpolation)
            for t in cfg.thresholds
        }
    report.class_ap, report.mAP = map_score(report.table)
    return report


def detection_to_record(d: DetectionRecord) -> dict:
    return {"scene_id": d.scene_id, "confidence": d.confidence, **d.element.to_record()}


def write_detections(path, detections: list[DetectionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps(detection_to_record(d)) + "\n")


def read_detections(path) -> list[DetectionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                el = MapElement.from_record(rec)
                out.append(DetectionRecord(str(rec["scene_id"]), el.cls, float(rec["confidence"]), el))
    return out
