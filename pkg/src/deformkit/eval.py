"""Interpolated average precision and per-class / per-distance-bin reports.

AP follows the two recall-position conventions used for KITTI-style
tables: R11 averages interpolated precision over recall levels
{0.0, 0.1, ..., 1.0} (including 0), R40 over {1/40, ..., 40/40}
(excluding 0).  Interpolated precision at recall r is the maximum
precision at any recall >= r.  Ranking is by descending score with ties
broken by lowest index, so results are exactly reproducible and an exact
rational-arithmetic path is available for oracle comparisons.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .core import ObjectClass, Scene
from .deformnet import (
    AblationFlags,
    ModelConfig,
    build_params,
    derive_seed,
    forward_prepared,
    prepare_scene,
    sample_keypoints,
)
from .diffkit import ParamStore, load_checkpoint


class NoPositivesError(ValueError):
    """AP is undefined for a ranking without any positive."""


class MissingCheckpointError(FileNotFoundError):
    pass


CLASS_NAMES = {
    ObjectClass.CAR_LIKE: "car",
    ObjectClass.PEDESTRIAN_LIKE: "pedestrian",
    ObjectClass.CYCLIST_LIKE: "cyclist",
}
# distance bins in meters: [lo, hi) from the sensor origin
BINS = (("all", 0.0, np.inf), ("0-30", 0.0, 30.0), ("30-50", 30.0, 50.0))
CONVENTIONS = ("R11", "R40")


def recall_levels(convention: str) -> list[Fraction]:
    if convention == "R11":
        return [Fraction(i, 10) for i in range(11)]
    if convention == "R40":
        return [Fraction(i, 40) for i in range(1, 41)]
    raise ValueError(f"unknown convention {convention!r}")


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score; equal scores keep lowest first."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def average_precision_exact(scores, relevance, convention: str = "R40") -> Fraction:
    """Exact rational AP; the reference path for oracle equality tests."""
    relevance = np.asarray(relevance)
    order = rank_order(scores)
    rel = relevance[order].astype(int)
    n_pos = int(rel.sum())
    if n_pos == 0:
        raise NoPositivesError("no positive example in ranking")
    tp = 0
    precisions: list[Fraction] = []
    recalls: list[Fraction] = []
    for rank, r in enumerate(rel, start=1):
        tp += int(r)
        precisions.append(Fraction(tp, rank))
        recalls.append(Fraction(tp, n_pos))
    # suffix max of precision, so p_interp(r) = max precision at recall >= r
    suffix = precisions[:]
    for i in range(len(suffix) - 2, -1, -1):
        suffix[i] = max(suffix[i], suffix[i + 1])
    total = Fraction(0)
    for level in recall_levels(convention):
        # first rank whose recall reaches the level (recalls nondecreasing)
        lo, hi = 0, len(recalls)
        while lo < hi:
            mid = (lo + hi) // 2
            if recalls[mid] >= level:
                hi = mid
            else:
                lo = mid + 1
        total += suffix[lo]
    return total / len(recall_levels(convention))


def average_precision(scores, relevance, convention: str = "R40") -> float:
    """Float AP under the requested recall-position convention."""
    relevance = np.asarray(relevance)
    order = rank_order(scores)
    rel = relevance[order].astype(np.float64)
    n_pos = rel.sum()
    if n_pos == 0:
        raise NoPositivesError("no positive example in ranking")
    tp = np.cumsum(rel)
    precision = tp / np.arange(1, len(rel) + 1)
    recall = tp / n_pos
    suffix = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.array([float(l) for l in recall_levels(convention)])
    idx = np.searchsorted(recall, levels, side="left")
    return float(np.mean(suffix[idx]))


# ---------------------------------------------------------------------------
# Model evaluation


@dataclass
class PredictionPool:
    """Pooled per-keypoint predictions across scenes."""

    scores: np.ndarray  # (m, 4)
    true_classes: np.ndarray  # (m,)
    ranges: np.ndarray  # (m,) meters from the sensor origin


@dataclass
class ApCell:
    class_name: str
    bin_name: str
    convention: str
    n_pos: int
    ap: Optional[float]  # None mirrors the "-" of an unpopulated bin


@dataclass
class EvalReport:
    variant: str
    keypoint_count: int
    cells: list[ApCell]

    def get(self, class_name: str, bin_name: str = "all", convention: str = "R40"):
        for cell in self.cells:
            if (cell.class_name, cell.bin_name, cell.convention) == (
                class_name, bin_name, convention,
            ):
                return cell
        raise KeyError((class_name, bin_name, convention))


def collect_predictions(
    scenes: Sequence[Scene],
    params: ParamStore,
    cfg: ModelConfig,
    flags: AblationFlags,
    keypoint_count: int,
    sampler: str = "fps",
    seed: int = 0,
) -> PredictionPool:
    """Forward every scene with a frozen model and pool the keypoints."""
    all_scores, all_classes, all_ranges = [], [], []
    for scene in scenes:
        kp = sample_keypoints(
            scene, keypoint_count, sampler, seed=derive_seed(seed, scene.scene_id, 0)
        )
        prep = prepare_scene(scene, kp, cfg, seed=derive_seed(seed, scene.scene_id, 1))
        scores, _ = forward_prepared(prep, params, cfg, flags)
        all_scores.append(scores)
        all_classes.append(prep.kp_classes)
        all_ranges.append(np.linalg.norm(prep.kp_positions, axis=1))
    return PredictionPool(
        scores=np.concatenate(all_scores),
        true_classes=np.concatenate(all_classes),
        ranges=np.concatenate(all_ranges),
    )


def report_from_pool(pool: PredictionPool, variant: str, keypoint_count: int) -> EvalReport:
    cells = []
    for class_id, class_name in CLASS_NAMES.items():
        for bin_name, lo, hi in BINS:
            mask = (pool.ranges >= lo) & (pool.ranges < hi)
            relevance = pool.true_classes[mask] == int(class_id)
            n_pos = int(relevance.sum())
            for convention in CONVENTIONS:
                if n_pos == 0:
                    cells.append(ApCell(class_name, bin_name, convention, 0, None))
                    continue
                ap = average_precision(pool.scores[mask, int(class_id)], relevance, convention)
                cells.append(ApCell(class_name, bin_name, convention, n_pos, ap))
    return EvalReport(variant=variant, keypoint_count=keypoint_count, cells=cells)


def evaluate_model(
    params: ParamStore,
    scenes: Sequence[Scene],
    cfg: ModelConfig,
    flags: AblationFlags,
    keypoint_count: int,
    sampler: str = "fps",
    seed: int = 0,
) -> EvalReport:
    """Per-class, per-bin AP of a frozen model over a scene set."""
    pool = collect_predictions(scenes, params, cfg, flags, keypoint_count, sampler, seed)
    return report_from_pool(pool, flags.variant, keypoint_count)


def report_csv_bytes(report: EvalReport) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "class", "bin", "convention", "n_pos", "ap"])
    for cell in report.cells:
        ap = "-" if cell.ap is None else f"{cell.ap:.6f}"
        writer.writerow(
            [report.variant, cell.class_name, cell.bin_name, cell.convention, cell.n_pos, ap]
        )
    return buf.getvalue().encode("utf-8")


def write_report_csv(report: EvalReport, path) -> None:
    _atomic_write(path, report_csv_bytes(report))


# ---------------------------------------------------------------------------
# Keypoint-count sweep


def keypoint_count_sweep(
    checkpoints: dict[tuple[str, int], str],
    variants: Sequence[tuple[str, AblationFlags]],
    counts: Sequence[int],
    scenes: Sequence[Scene],
    cfg: ModelConfig,
    param_seed: int = 0,
    sampler: str = "fps",
    seed: int = 0,
) -> list[dict]:
    """R40 AP rows per (variant, keypoint count, class) from fixed checkpoints."""
    rows = []
    for variant, flags in variants:
        for count in counts:
            path = checkpoints.get((variant, count))
            if path is None or not os.path.exists(path):
                raise MissingCheckpointError(f"no checkpoint for ({variant}, {count})")
            params = build_params(param_seed, cfg)
            load_checkpoint(params, path)
            report = evaluate_model(params, scenes, cfg, flags, count, sampler, seed)
            for class_name in CLASS_NAMES.values():
                cell = report.get(class_name, "all", "R40")
                rows.append(
                    {
                        "variant": variant,
                        "keypoints": count,
                        "class": class_name,
                        "ap": cell.ap,
                    }
                )
    return rows


def sweep_csv_bytes(rows: list[dict]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "keypoints", "class", "ap"])
    for row in rows:
        ap = "-" if row["ap"] is None else f"{row['ap']:.6f}"
        writer.writerow([row["variant"], row["keypoints"], row["class"], ap])
    return buf.getvalue().encode("utf-8")


def write_sweep_csv(rows: list[dict], path) -> None:
    _atomic_write(path, sweep_csv_bytes(rows))


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
