"""Displacement and deviation metrics plus the CA / ASR counting protocol."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .scene import Trajectory

CA_THRESHOLD = 0.5
ASR_THRESHOLD = 1.0


def _points(t) -> np.ndarray:
    return t.points if isinstance(t, Trajectory) else np.asarray(t, dtype=np.float64)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _points(pred), _points(gt)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    return p, g


def fde(pred, gt) -> float:
    """Euclidean distance between the final waypoints."""
    p, g = _pair(pred, gt)
    return float(np.linalg.norm(p[-1] - g[-1]))


def ade(pred, gt) -> float:
    """Mean Euclidean distance over all waypoints."""
    p, g = _pair(pred, gt)
    return float(np.mean(np.linalg.norm(p - g, axis=1)))


def reference_heading(obs) -> float:
    """Heading of the final observed segment.

    A zero-length final segment falls back to the earliest non-degenerate segment.
    """
    pts = _points(obs)
    seg = np.diff(pts, axis=0)
    norms = np.linalg.norm(seg, axis=1)
    if norms[-1] > 1e-12:
        return float(np.arctan2(seg[-1, 1], seg[-1, 0]))
    moving = np.flatnonzero(norms > 1e-12)
    if len(moving) == 0:
        raise ValueError("all observed segments are degenerate; heading undefined")
    k = moving[0]
    return float(np.arctan2(seg[k, 1], seg[k, 0]))


def lateral_longitudinal_deviation(pred, gt, heading_ref: float) -> tuple[float, float]:
    """Signed mean error along the left normal (LRD) and the heading (FRD) of ``heading_ref``."""
    p, g = _pair(pred, gt)
    err = (p - g).mean(axis=0)
    fwd = np.array([np.cos(heading_ref), np.sin(heading_ref)])
    left = np.array([-fwd[1], fwd[0]])
    return float(err @ left), float(err @ fwd)


@dataclass(frozen=True)
class MetricRecord:
    fde: float
    ade: float
    lrd: float
    frd: float


def compute_metrics(pred, gt, heading_ref: float) -> MetricRecord:
    lrd, frd = lateral_longitudinal_deviation(pred, gt, heading_ref)
    return MetricRecord(fde(pred, gt), ade(pred, gt), lrd, frd)


def _combine(d_fde: float, d_ade: float, thr: float, combine: str, above: bool) -> bool:
    f = d_fde > thr if above else d_fde < thr
    a = d_ade > thr if above else d_ade < thr
    if combine == "both":
        return f and a
    if combine == "either":
        return f or a
    if combine == "fde":
        return f
    if combine == "ade":
        return a
    raise ValueError(f"unknown combine rule {combine!r}")


def clean_accuracy(clean: Sequence[MetricRecord], victim: Sequence[MetricRecord],
                   threshold: float = CA_THRESHOLD, combine: str = "both") -> float:
    """Fraction of clean scenes whose victim FDE/ADE degrades by less than ``threshold``
    relative to the clean model. ``combine="both"`` requires both metrics to stay under.
    """
    if len(clean) == 0:
        raise ValueError("no scenes to score")
    if len(clean) != len(victim):
        raise ValueError("clean and victim metric lists differ in length")
    ok = [
        _combine(v.fde - c.fde, v.ade - c.ade, threshold, combine, above=False)
        for c, v in zip(clean, victim)
    ]
    return sum(ok) / len(ok)


def attack_success_rate(triggered: Sequence[MetricRecord], baseline: Sequence[MetricRecord],
                        threshold: float = ASR_THRESHOLD, combine: str = "either") -> float:
    """Fraction of triggered scenes whose FDE/ADE degrades by more than ``threshold``
    relative to ``baseline`` (by default the same model on the untriggered scene).
    """
    if len(triggered) == 0:
        raise ValueError("no scenes to score")
    if len(triggered) != len(baseline):
        raise ValueError("triggered and baseline metric lists differ in length")
    hits = [
        _combine(t.fde - b.fde, t.ade - b.ade, threshold, combine, above=True)
        for t, b in zip(triggered, baseline)
    ]
    return sum(hits) / len(hits)


@dataclass(frozen=True)
class MetricRow:
    scene_id: str
    fde_clean: float
    fde_victim: float
    ade_clean: float
    ade_victim: float
    lrd: float
    frd: float
    triggered: bool


METRIC_ROW_FIELDS = ("scene_id", "fde_clean", "fde_victim", "ade_clean", "ade_victim", "lrd", "frd", "triggered")


def write_metric_rows(path, rows: Iterable[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_ROW_FIELDS)
        for r in rows:
            w.writerow([r.scene_id, repr(r.fde_clean), repr(r.fde_victim), repr(r.ade_clean),
                        repr(r.ade_victim), repr(r.lrd), repr(r.frd), str(r.triggered).lower()])


def read_metric_rows(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            rows.append(MetricRow(
                rec["scene_id"],
                *(float(rec[k]) for k in METRIC_ROW_FIELDS[1:7]),
                rec["triggered"] == "true",
            ))
    return rows
