"""Score fusion and frame-level AUROC evaluation."""

from __future__ import annotations

import itertools
import logging
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .numkit import DimensionError, UsageError

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


class UndefinedMetricError(ValueError):
    """AUROC is undefined when only one class is present."""


@dataclass(frozen=True)
class TrainStats:
    mu_pr: float
    sigma_pr: float
    mu_pp: float
    sigma_pp: float

    def to_dict(self) -> dict:
        return {"mu_pr": self.mu_pr, "sigma_pr": self.sigma_pr,
                "mu_pp": self.mu_pp, "sigma_pp": self.sigma_pp}


@dataclass(frozen=True)
class FusionWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if min(w) < 0 or max(w) <= 0:
            raise ValueError(f"fusion weights must be nonnegative with one > 0, got {w}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


def _mean_std(x: np.ndarray, name: str) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise UsageError(f"no {name} training scores")
    mu = float(x.mean())
    sigma = float(np.sqrt(np.mean((x - mu) ** 2)))
    if sigma < SIGMA_FLOOR:
        warnings.warn(f"{name} training score std {sigma:.3g} below floor; using {SIGMA_FLOOR}")
        sigma = SIGMA_FLOOR
    return mu, sigma


def fit_train_stats(pr_scores, pp_scores) -> TrainStats:
    """Population mean and standard deviation of each stream's training scores."""
    return TrainStats(*_mean_std(pr_scores, "PR"), *_mean_std(pp_scores, "PP"))


def fuse(pr, pp, rd, w: FusionWeights, stats: TrainStats) -> np.ndarray:
    """``alpha*z(pr) + beta*z(pp) + gamma*rd`` frame by frame.

    A stream whose weight is zero is not read at all.
    """
    arrays = {"pr": pr, "pp": pp, "rd": rd}
    n = {len(np.asarray(a)) for a in arrays.values() if a is not None}
    if len(n) > 1:
        raise DimensionError(f"score arrays differ in length: {sorted(n)}")
    S = np.zeros(n.pop() if n else 0)
    if w.alpha:
        S = S + w.alpha * ((np.asarray(pr, dtype=np.float64) - stats.mu_pr) / stats.sigma_pr)
    if w.beta:
        S = S + w.beta * ((np.asarray(pp, dtype=np.float64) - stats.mu_pp) / stats.sigma_pp)
    if w.gamma:
        S = S + w.gamma * np.asarray(rd, dtype=np.float64)
    return S


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores get half credit."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DimensionError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ValueError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative frames")
    ranks = rankdata(s)  # average ranks resolve ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_micro(scores: Sequence, labels: Sequence) -> float:
    """AUROC of all frames of all videos pooled together."""
    if len(scores) == 0:
        raise UsageError("no videos")
    return auroc(np.concatenate([np.ravel(s) for s in scores]),
                 np.concatenate([np.ravel(y) for y in labels]))


def auroc_macro(scores: Sequence, labels: Sequence, video_ids: Sequence[str] | None = None):
    """Mean of per-video AUROC over videos that contain both classes.

    Returns ``(macro, per_video, skipped)``.
    """
    if video_ids is None:
        video_ids = [str(i) for i in range(len(scores))]
    per_video, skipped = {}, []
    for vid, s, y in zip(video_ids, scores, labels):
        try:
            per_video[vid] = auroc(s, y)
        except UndefinedMetricError:
            skipped.append(vid)
    if not per_video:
        raise UndefinedMetricError("every video has a single class")
    return float(np.mean(list(per_video.values()))), per_video, skipped


@dataclass
class EvalReport:
    micro: float
    macro: float
    per_video: dict[str, float]
    skipped: list[str]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"micro_auroc": self.micro, "macro_auroc": self.macro,
                "per_video_auroc": self.per_video, "skipped_single_class": self.skipped,
                "config": self.config}

    def to_text(self) -> str:
        lines = ["# posevad evaluation report",
                 f"micro_auroc: {self.micro:.6f}",
                 f"macro_auroc: {self.macro:.6f}",
                 "per_video_auroc:"]
        lines += [f"  {vid}: {v:.6f}" for vid, v in self.per_video.items()]
        lines.append("skipped_single_class: [" + ", ".join(self.skipped) + "]")
        lines.append("config:")
        lines += [f"  {k}: {v}" for k, v in self.config.items()]
        return "\n".join(lines) + "\n"


def evaluate(scores: Sequence, labels: Sequence, video_ids: Sequence[str], config: dict | None = None) -> EvalReport:
    micro = auroc_micro(scores, labels)
    macro, per_video, skipped = auroc_macro(scores, labels, video_ids)
    return EvalReport(micro, macro, per_video, skipped, dict(config or {}))


@dataclass
class StreamScores:
    """Per-video raw scores of every stream plus labels."""

    video_ids: list[str]
    pr: list[np.ndarray] | None
    pp: list[np.ndarray] | None
    rd: list[np.ndarray] | None
    labels: list[np.ndarray] | None = None

    def fused(self, w: FusionWeights, stats: TrainStats) -> list[np.ndarray]:
        out = []
        for i in range(len(self.video_ids)):
            pick = lambda arr, i=i: None if arr is None else arr[i]
            out.append(fuse(pick(self.pr), pick(self.pp), pick(self.rd), w, stats))
        return out


def weight_grid(lo: float = 0.0, hi: float = 3.0, step: float = 0.1) -> np.ndarray:
    if step <= 0:
        raise ValueError("grid step must be positive")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(n), 10)


def grid_search_weights(scores: StreamScores, stats: TrainStats, lo: float = 0.0,
                        hi: float = 3.0, step: float = 0.1):
    """Exhaustive search over (alpha, beta, gamma) maximizing micro AUROC.

    The all-zero point is skipped. Ties keep the lexicographically smallest
    triple. Returns ``(best_weights, best_micro, table)`` where ``table`` lists
    ``(alpha, beta, gamma, micro)`` for every candidate.
    """
    if scores.labels is None:
        raise UsageError("grid search needs labeled validation scores")
    grid = weight_grid(lo, hi, step)
    labels = np.concatenate(scores.labels)
    if labels.min() == labels.max():
        raise UndefinedMetricError("validation labels contain a single class")
    cat = lambda arr: None if arr is None else np.concatenate(arr)
    pr, pp, rd = cat(scores.pr), cat(scores.pp), cat(scores.rd)
    zpr = None if pr is None else (pr - stats.mu_pr) / stats.sigma_pr
    zpp = None if pp is None else (pp - stats.mu_pp) / stats.sigma_pp
    best, best_val, table = None, -np.inf, []
    for a, b, g in itertools.product(grid, grid, grid):
        if a == 0 and b == 0 and g == 0:
            continue
        if (a and zpr is None) or (b and zpp is None) or (g and rd is None):
            continue
        S = np.zeros(len(labels))
        if a:
            S = S + a * zpr
        if b:
            S = S + b * zpp
        if g:
            S = S + g * rd
        val = auroc(S, labels)
        table.append((float(a), float(b), float(g), val))
        if val > best_val:
            best, best_val = (float(a), float(b), float(g)), val
    return FusionWeights(*best), best_val, table


def subset_weights(subset: Sequence[str], base: FusionWeights | None = None) -> FusionWeights:
    """Weights that keep only the named streams (``pr``, ``pp``, ``rd``)."""
    base = base or FusionWeights()
    unknown = set(subset) - {"pr", "pp", "rd"}
    if unknown or not subset:
        raise ValueError(f"stream subset must be a non-empty subset of pr/pp/rd, got {subset}")
    return FusionWeights(base.alpha if "pr" in subset else 0.0,
                         base.beta if "pp" in subset else 0.0,
                         base.gamma if "rd" in subset else 0.0)


STREAM_SUBSETS: tuple[tuple[str, ...], ...] = tuple(
    c for r in (1, 2, 3) for c in itertools.combinations(("pr", "pp", "rd"), r))


def per_frame_rows(scores: StreamScores, fused: Sequence[np.ndarray],
                   start_indices: Mapping[str, int] | None = None):
    """Rows ``(video_id, frame_index, s_pr, s_pp, s_rd, S, label)`` for the score CSV."""
    rows = []
    for i, vid in enumerate(scores.video_ids):
        off = (start_indices or {}).get(vid, 0)
        for t in range(len(fused[i])):
            get = lambda arr, i=i, t=t: float("nan") if arr is None else float(arr[i][t])
            lab = "" if scores.labels is None else int(scores.labels[i][t])
            rows.append((vid, off + t, get(scores.pr), get(scores.pp), get(scores.rd),
                         float(fused[i][t]), lab))
    return rows
