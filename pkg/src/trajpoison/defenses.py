"""Latent-space activation clustering and clipped, noised training."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .predictor import (ModelParams, PredictorConfig, TrainHyper, TrainResult, batch_grad, encode_scene,
                        per_example_grads, predict_vectors, train)
from .scene import DrivingScene

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


@dataclass(frozen=True)
class DetectionReport:
    assignments: tuple[int, ...]
    silhouette: float
    smaller_fraction: float
    precision: float
    recall: float
    false_positive_rate: float
    inertia: float
    degenerate: bool = False

    @property
    def flagged(self) -> np.ndarray:
        """Boolean mask of samples in the smaller cluster."""
        a = np.asarray(self.assignments)
        counts = np.bincount(a, minlength=2)
        return a == int(np.argmin(counts))

    def detects(self, min_recall: float = 0.5, max_fpr: float = 0.2) -> bool:
        return self.recall > min_recall and self.false_positive_rate <= max_fpr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["assignments"] = list(self.assignments)
        return d

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _lloyd(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    prev = np.inf
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(len(x)), labels].sum())
        for j in range(len(centers)):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
        if np.isfinite(prev) and prev - inertia <= KMEANS_TOL * prev:
            break
        prev = inertia
    d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)
    return labels, centers, float(d2[np.arange(len(x)), labels].sum())


def _hartigan(x: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, float]:
    """Single-point transfers that strictly lower inertia; escapes many Lloyd fixed points."""
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    centers = np.array([x[labels == j].mean(0) if counts[j] else np.zeros(x.shape[1]) for j in range(k)])
    for _ in range(KMEANS_MAX_ITER):
        moved = False
        for i in range(len(x)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d2 = ((centers - x[i]) ** 2).sum(1)
            cost = counts / (counts + 1) * d2
            cost[a] = counts[a] / (counts[a] - 1) * d2[a]
            b = int(np.argmin(cost))
            if b == a or cost[b] >= cost[a] * (1 - 1e-12):
                continue
            centers[a] = (centers[a] * counts[a] - x[i]) / (counts[a] - 1)
            centers[b] = (centers[b] * counts[b] + x[i]) / (counts[b] + 1)
            counts[a] -= 1
            counts[b] += 1
            labels[i] = b
            moved = True
        if not moved:
            break
    inertia = sum(float(((x[labels == j] - x[labels == j].mean(0)) ** 2).sum()) for j in range(k) if counts[j])
    return labels, inertia


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min([((x - c) ** 2).sum(-1) for c in centers], axis=0)
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
    return np.array(centers, dtype=np.float64)


def kmeans(x: np.ndarray, k: int = 2, seed: int = 0, n_init: int = 10) -> tuple[np.ndarray, float]:
    """Seeded k-means++ / Lloyd plus Hartigan transfers, ``n_init`` restarts; returns labels and inertia.

    Points are processed in a canonical (lexicographic) order, so the partition does
    not depend on the input order. Cluster ids are relabelled by first appearance in
    that order.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < k:
        raise ValueError(f"need at least k={k} points, got {len(x)}")
    order = np.lexsort(x.T[::-1])
    xs = x[order]
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, _, _ = _lloyd(xs, _plusplus(xs, k, rng))
        labels, inertia = _hartigan(xs, labels, k)
        if best is None or inertia < best[1] - 1e-12:
            best = (labels, inertia)
    labels, inertia = best
    remap, canon = {}, np.empty_like(labels)
    for i, lab in enumerate(labels):
        canon[i] = remap.setdefault(int(lab), len(remap))
    out = np.empty_like(canon)
    out[order] = canon
    return out, inertia


def silhouette(x: np.ndarray, labels: np.ndarray, chunk: int = 64) -> float:
    """Mean silhouette coefficient; 0 when fewer than two clusters are populated."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < 2:
        return 0.0
    counts = np.array([np.sum(labels == c) for c in ids])
    sums = np.zeros((len(x), len(ids)))
    for s in range(0, len(x), chunk):
        d = np.linalg.norm(x[s : s + chunk, None, :] - x[None], axis=-1)
        for j, c in enumerate(ids):
            sums[s : s + chunk, j] = d[:, labels == c].sum(1)
    own = np.searchsorted(ids, labels)
    n_own = counts[own]
    a = np.where(n_own > 1, sums[np.arange(len(x)), own] / np.maximum(n_own - 1, 1), 0.0)
    other = sums / counts[None]
    other[np.arange(len(x)), own] = np.inf
    b = other.min(1)
    s_i = np.where(n_own > 1, (b - a) / np.maximum(np.maximum(a, b), 1e-300), 0.0)
    return float(s_i.mean())


def activation_clustering(latents, is_poison: Sequence[bool] | None = None, k: int = 2,
                          seed: int = 0) -> DetectionReport:
    """2-means on latent vectors; the smaller cluster is flagged as poison."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or len(x) < k:
        raise ValueError(f"need at least k={k} latent vectors")
    truth = np.zeros(len(x), bool) if is_poison is None else np.asarray(is_poison, bool)
    if len(truth) != len(x):
        raise ValueError("is_poison length differs from latent count")
    if np.allclose(x, x[0], atol=0.0, rtol=0.0):
        labels = np.zeros(len(x), int)
        return DetectionReport(tuple(labels.tolist()), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, True)
    labels, inertia = kmeans(x, k, seed)
    counts = np.bincount(labels, minlength=k)
    flagged = labels == int(np.argmin(counts))
    tp = int(np.sum(flagged & truth))
    precision = tp / int(flagged.sum()) if flagged.any() else 0.0
    recall = tp / int(truth.sum()) if truth.any() else 0.0
    fpr = int(np.sum(flagged & ~truth)) / int((~truth).sum()) if (~truth).any() else 0.0
    return DetectionReport(tuple(labels.tolist()), silhouette(x, labels), float(counts.min() / len(x)),
                           precision, recall, fpr, inertia, bool(np.sum(counts > 0) < 2))


def cluster_margin(latents, assignments) -> np.ndarray:
    """Distance to the larger cluster's centroid minus distance to the smaller one's.

    Larger values look more like the flagged (smaller) cluster; a graded score for
    sweeping the detector's operating point.
    """
    x = np.asarray(latents, dtype=np.float64)
    a = np.asarray(assignments)
    counts = np.bincount(a, minlength=2)
    if np.sum(counts > 0) < 2:
        return np.zeros(len(x))
    small = int(np.argmin(counts))
    big = int(np.argmax(counts)) if small != int(np.argmax(counts)) else 1 - small
    c_small, c_big = x[a == small].mean(0), x[a == big].mean(0)
    return np.linalg.norm(x - c_big, axis=1) - np.linalg.norm(x - c_small, axis=1)


def recall_at_fpr(scores, is_poison, max_fpr: float = 0.2) -> float:
    """Best recall over thresholds ``score >= t`` whose false-positive rate stays within ``max_fpr``."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(is_poison, bool)
    if not truth.any() or truth.all():
        raise ValueError("need both poison and clean samples")
    best = 0.0
    for t in np.unique(scores):
        flagged = scores >= t
        if np.sum(flagged & ~truth) / np.sum(~truth) <= max_fpr:
            best = max(best, float(np.sum(flagged & truth) / np.sum(truth)))
    return best


def scene_latents(model: ModelParams, scenes: Sequence[DrivingScene]) -> np.ndarray:
    """(N, H) last-hidden-layer activations, the same ones ``predict`` returns."""
    z = np.stack([model.features(encode_scene(s, model.config)) for s in scenes])
    return predict_vectors(model, z)[1]


def export_latents(model: ModelParams, scenes: Sequence[DrivingScene], poison_flags: Sequence[bool], path) -> None:
    if len(scenes) != len(poison_flags):
        raise ValueError("one poison flag per scene required")
    lat = scene_latents(model, scenes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "is_poison"] + [f"l{i}" for i in range(lat.shape[1])])
        for s, flag, row in zip(scenes, poison_flags, lat):
            w.writerow([s.scene_id, int(bool(flag))] + [repr(float(v)) for v in row])


def read_latents(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = [r[0] for r in rows]
    flags = np.array([r[1] == "1" for r in rows])
    return ids, flags, np.array([[float(v) for v in r[2:]] for r in rows])


# ---------------------------------------------------------------------------
# Robust training


@dataclass(frozen=True)
class RobustTrainConfig:
    clip_norm: float = math.inf
    noise_std: float = 0.0
    per_example: bool = True
    noise_seed: int = 0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def disabled(self) -> bool:
        return math.isinf(self.clip_norm) and self.noise_std == 0

    def to_dict(self) -> dict:
        return {"clip_norm": None if math.isinf(self.clip_norm) else self.clip_norm,
                "noise_std": self.noise_std, "per_example": self.per_example, "noise_seed": self.noise_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "RobustTrainConfig":
        d = dict(d)
        if d.get("clip_norm") is None:
            d["clip_norm"] = math.inf
        return cls(**d)


def clip_rows(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale each row of ``g`` to L2 norm at most ``clip_norm``."""
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g * np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))


def clipped_noisy_grad_fn(rt: RobustTrainConfig):
    """Batch-gradient replacement: clip, average, add N(0, (noise_std / batch)^2)."""
    rng = np.random.default_rng(rt.noise_seed)

    def grad_fn(params: ModelParams, z: np.ndarray, y: np.ndarray):
        if rt.per_example:
            losses, g = per_example_grads(params, z, y)
            l = float(losses.mean())
            g = clip_rows(g, rt.clip_norm).mean(axis=0)
        else:
            l, g = batch_grad(params, z, y)
            g = clip_rows(g, rt.clip_norm)
        if rt.noise_std > 0:
            g = g + rng.normal(0.0, rt.noise_std / len(z), size=g.shape)
        return l, g

    return grad_fn


def robust_train(config: PredictorConfig, dataset, rt: RobustTrainConfig, hyper: TrainHyper,
                 init: ModelParams | None = None) -> TrainResult:
    """``train`` with the defended gradient; identical to ``train`` when disabled."""
    if rt.disabled:
        return train(config, dataset, hyper, init)
    return train(config, dataset, hyper, init, grad_fn=clipped_noisy_grad_fn(rt))
