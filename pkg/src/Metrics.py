import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.Errors import EmptyTestSet, ShapeMismatch, ZeroVector

logger = logging.getLogger(__name__)

# Table row order.
METRIC_NAMES = ("lcfv", "cfv", "emv", "epv", "mae", "kl")
# Metrics where a larger value is better; all others are minimized.
HIGHER_IS_BETTER = ("cfv",)

LCFV_EPS = 1e-12
KL_SMOOTHING = 1e-9


def _pair(bold, pred) -> Tuple[np.ndarray, np.ndarray]:
    bold = np.asarray(bold, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if bold.shape != pred.shape:
        raise ShapeMismatch(f"metric inputs differ: {bold.shape} vs {pred.shape}")
    if bold.size == 0:
        raise ShapeMismatch("metric inputs are empty")
    return bold, pred


def _volumes(fmri: np.ndarray) -> np.ndarray:
    # [volumes, voxels]; a [T, X, Y, Z] window flattens each volume.
    return fmri.reshape(fmri.shape[0], -1) if fmri.ndim > 1 else fmri.reshape(1, -1)


def cfv(bold, pred) -> float:
    # Cosine similarity of the flattened series.
    bold, pred = _pair(bold, pred)
    a, b = bold.ravel(), pred.ravel()
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise ZeroVector("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / (norm_a * norm_b))


def lcfv(bold, pred, eps: float = LCFV_EPS) -> float:
    return float(np.log(max(eps, 1.0 - cfv(bold, pred))))


def emv(bold, pred) -> float:
    # Mean over voxels of the Euclidean distance between voxel time series.
    # Input is [voxels, time]; use voxel_major() on [T, X, Y, Z] windows first.
    bold, pred = _pair(bold, pred)
    diff = (pred - bold).reshape(bold.shape[0], -1)
    return float(np.linalg.norm(diff, axis=1).mean())


def voxel_major(window: np.ndarray) -> np.ndarray:
    # [T, X, Y, Z] -> [voxels, T]
    window = np.asarray(window, dtype=np.float64)
    return window.reshape(window.shape[0], -1).T


def epv_metric(fmri, pred) -> float:
    fmri, pred = _pair(fmri, pred)
    diff = _volumes(pred - fmri)
    return float((np.linalg.norm(diff, axis=1) / diff.shape[1]).mean())


def mae(fmri, pred) -> float:
    fmri, pred = _pair(fmri, pred)
    return float(np.abs(_volumes(pred - fmri)).mean(axis=1).mean())


def _distribution(volume: np.ndarray) -> np.ndarray:
    shifted = volume - volume.min() + KL_SMOOTHING
    return shifted / shifted.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(p * np.log(p / q)))


def kl(fmri, pred) -> float:
    # Per volume KL(real || predicted) after shifting each to non-negative and normalizing.
    fmri, pred = _pair(fmri, pred)
    real_volumes, pred_volumes = _volumes(fmri), _volumes(pred)
    total = sum(kl_divergence(_distribution(real), _distribution(synth))
                for real, synth in zip(real_volumes, pred_volumes))
    return max(0.0, total / len(real_volumes))


def instance_metrics(truth: np.ndarray, pred: np.ndarray) -> Dict[str, float]:
    cosine = cfv(truth, pred)
    return {"lcfv": float(np.log(max(LCFV_EPS, 1.0 - cosine))),
            "cfv": cosine,
            "emv": emv(voxel_major(truth), voxel_major(pred)),
            "epv": epv_metric(truth, pred),
            "mae": mae(truth, pred),
            "kl": kl(truth, pred)}


@dataclass
class MetricsReport:
    values: Dict[str, List[float]] = field(default_factory=lambda: {name: [] for name in METRIC_NAMES})

    @property
    def count(self) -> int:
        return len(self.values["cfv"])

    def mean(self, name: str) -> float:
        return float(np.mean(self.values[name]))

    def std(self, name: str) -> float:
        return float(np.std(self.values[name]))

    def summary(self) -> Dict[str, Tuple[float, float]]:
        return {name: (self.mean(name), self.std(name)) for name in METRIC_NAMES}

    def cell(self, name: str) -> str:
        return f"{self.mean(name):.6f}±{self.std(name):.6f}"


def evaluate_predictions(truths: Sequence[np.ndarray], preds: Sequence[np.ndarray],
                         workers: int = 1) -> MetricsReport:
    if len(truths) == 0:
        raise EmptyTestSet("no test windows to evaluate")
    if len(truths) != len(preds):
        raise ShapeMismatch(f"{len(truths)} truths vs {len(preds)} predictions")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(instance_metrics, truths, preds))
    else:
        rows = [instance_metrics(t, p) for t, p in zip(truths, preds)]
    report = MetricsReport()
    for row in rows:
        for name in METRIC_NAMES:
            report.values[name].append(row[name])
    return report


def evaluate_all(model, test_sessions, workers: int = 1) -> MetricsReport:
    # Synthesizes every test window from its EEG and scores it against the real fMRI.
    windows = [w for session in test_sessions for w in session.windows]
    if not windows:
        raise EmptyTestSet("test sessions hold no windows")
    preds = model.synthesize(np.stack([w.eeg.values for w in windows]))
    report = evaluate_predictions([w.fmri.volumes for w in windows], list(preds), workers)
    logger.info("evaluated %d test windows: cfv=%s", report.count, report.cell("cfv"))
    return report


def best_variant(reports: Mapping[str, MetricsReport], name: str) -> str:
    means = {variant: report.mean(name) for variant, report in reports.items()}
    pick = max if name in HIGHER_IS_BETTER else min
    return pick(means, key=means.get)


def write_metrics_table(reports: Mapping[str, MetricsReport], path: str, mark_best: Optional[bool] = None):
    # One row per metric, one column per variant, cells "mean±std".
    variants = list(reports)
    mark_best = len(variants) > 1 if mark_best is None else mark_best
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["metric"] + variants + (["best"] if mark_best else []))
        for name in METRIC_NAMES:
            row = [name] + [reports[v].cell(name) for v in variants]
            if mark_best:
                row.append(best_variant(reports, name))
            writer.writerow(row)
    logger.info("wrote metrics table %s", path)


def read_metrics_table(path: str) -> Dict[str, Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    header = rows[0]
    return {row[0]: dict(zip(header[1:], row[1:])) for row in rows[1:]}
