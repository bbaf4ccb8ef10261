"""Report figures. Rendered off-screen with fixed metadata so reruns give identical PNGs."""

from __future__ import annotations

import io
from collections.abc import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import atomic_write_bytes

_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def _label_spans(labels: np.ndarray):
    """``(start, stop)`` runs of label 1."""
    y = np.concatenate([[0], np.asarray(labels, dtype=int), [0]])
    edges = np.flatnonzero(np.diff(y))
    return list(zip(edges[::2], edges[1::2]))


def plot_scores(path, video_ids: Sequence[str], fused: Sequence[np.ndarray],
                labels: Sequence[np.ndarray] | None, max_videos: int = 10) -> None:
    """One panel per video: fused score trace with labeled frames shaded."""
    n = min(len(video_ids), max_videos)
    fig, axes = plt.subplots(max(n, 1), 1, figsize=(9, 1.6 * max(n, 1) + 0.4), squeeze=False)
    for i in range(n):
        ax = axes[i, 0]
        s = np.asarray(fused[i])
        ax.plot(np.arange(len(s)), s, lw=0.8, color="tab:blue")
        if labels is not None:
            for a, b in _label_spans(labels[i]):
                ax.axvspan(a, b, color="tab:red", alpha=0.15, lw=0)
        ax.set_ylabel(video_ids[i], fontsize=7)
        ax.tick_params(labelsize=6)
    axes[-1, 0].set_xlabel("frame")
    fig.suptitle("fused anomaly score (shaded: labeled anomalous)", fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def plot_loss_curves(path, curves: dict[str, Sequence[float]]) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, curve in sorted(curves.items()):
        ax.plot(np.arange(1, len(curve) + 1), curve, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss per sample")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_ablation(path, rows: Sequence[dict]) -> None:
    """Micro AUROC against window length, one line per stream subset, one panel per d."""
    ds = sorted({r["d"] for r in rows})
    fig, axes = plt.subplots(1, len(ds), figsize=(5 * len(ds), 3.8), squeeze=False, sharey=True)
    for ax, d in zip(axes[0], ds):
        subsets = sorted({r["streams"] for r in rows if r["d"] == d}, key=lambda s: (s.count("+"), s))
        for sub in subsets:
            pts = sorted((r["T"], r["micro_auroc"]) for r in rows if r["d"] == d and r["streams"] == sub)
            Ts, vals = zip(*pts)
            ax.plot(Ts, vals, marker="o", label=sub)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("window length T")
        ax.set_title(f"d = {d}")
    axes[0, 0].set_ylabel("micro AUROC")
    axes[0, -1].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_grid(path, table: Sequence[tuple[float, float, float, float]], best) -> None:
    """Micro AUROC over (alpha, beta) at the best gamma."""
    g = best.gamma
    pts = [(a, b, v) for a, b, gg, v in table if gg == g]
    alphas = sorted({p[0] for p in pts})
    betas = sorted({p[1] for p in pts})
    img = np.full((len(betas), len(alphas)), np.nan)
    ai = {a: i for i, a in enumerate(alphas)}
    bi = {b: i for i, b in enumerate(betas)}
    for a, b, v in pts:
        img[bi[b], ai[a]] = v
    fig, ax = plt.subplots(figsize=(5, 4))
    extent = None
    if len(alphas) > 1 and len(betas) > 1:
        extent = (alphas[0], alphas[-1], betas[0], betas[-1])
    im = ax.imshow(img, origin="lower", aspect="auto", extent=extent)
    ax.plot([best.alpha], [best.beta], "r+", ms=12)
    ax.set_xlabel("alpha (PR)")
    ax.set_ylabel("beta (PP)")
    ax.set_title(f"micro AUROC at gamma = {g:g}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, path)
