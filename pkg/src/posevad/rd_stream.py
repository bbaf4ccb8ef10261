"""Repetition detection stream.

Per-frame pose features (positions, optionally one-frame velocities) are
embedded by a one-hidden-layer MLP. Pairwise negative squared distances between
the embeddings of a window, softmaxed row by row, form the temporal
self-similarity matrix. Row ``i`` is rotated so that the diagonal comes first
(entry ``k`` is the similarity to frame ``(i + k) mod T``) and a second MLP maps
it to the logit of "frame ``i`` is part of a repetition".
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .data import PoseSequence, Window, normalize_pose
from .numkit import (
    DimensionError,
    UsageError,
    sigmoid,
    softmax_rows,
    softmax_rows_backward,
    xavier_uniform,
)
from .training import TrainHyper, fit


@dataclass(frozen=True)
class RDHyper(TrainHyper):
    embed_dim: int = 32
    classifier_hidden: int = 32
    use_velocity: bool = True


@dataclass
class RDModel:
    params: dict[str, np.ndarray]
    K: int
    d: int
    T: int
    embed_dim: int
    use_velocity: bool = True
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        meta = {"K": self.K, "d": self.d, "T": self.T, "embed_dim": self.embed_dim,
                "use_velocity": self.use_velocity, **self.meta}
        checkpoint.save(path, "rd", self.params, meta)

    @classmethod
    def load(cls, path) -> RDModel:
        arrays, meta = checkpoint.load(path, "rd")
        meta.pop("kind")
        K, d, T, e, vel = (meta.pop(k) for k in ("K", "d", "T", "embed_dim", "use_velocity"))
        return cls(arrays, K, d, T, e, vel, meta)


@dataclass
class LabeledWindow:
    window: Window
    labels: np.ndarray  # (T,) of 0/1
    loop_len: int = 0


def init_rd_params(rng, K: int, d: int, T: int, embed_dim: int, hidden: int,
                   use_velocity: bool = True) -> dict[str, np.ndarray]:
    F = K * d * (2 if use_velocity else 1)
    return {
        "emb1.W": xavier_uniform(rng, F, hidden),
        "emb1.b": np.zeros(hidden),
        "emb2.W": xavier_uniform(rng, hidden, embed_dim),
        "emb2.b": np.zeros(embed_dim),
        "cls1.W": xavier_uniform(rng, T, hidden),
        "cls1.b": np.zeros(hidden),
        "cls2.W": xavier_uniform(rng, hidden, 1),
        "cls2.b": np.zeros(1),
    }


def frame_features(frames: np.ndarray, use_velocity: bool = True) -> np.ndarray:
    """``(..., T, K, d)`` -> ``(..., T, F)``; the first frame's velocity is zero."""
    flat = frames.reshape(frames.shape[:-2] + (-1,))
    if not use_velocity:
        return flat
    vel = np.zeros_like(flat)
    vel[..., 1:, :] = flat[..., 1:, :] - flat[..., :-1, :]
    return np.concatenate([flat, vel], axis=-1)


def _embed(params, feats):
    a = np.tanh(feats @ params["emb1.W"] + params["emb1.b"])
    return a @ params["emb2.W"] + params["emb2.b"], a


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """``(..., T, e)`` -> ``(..., T, T)``, exactly symmetric with a zero diagonal."""
    diff = x[..., :, None, :] - x[..., None, :, :]
    return np.einsum("...ije,...ije->...ij", diff, diff)


def self_similarity(embeddings: np.ndarray) -> np.ndarray:
    """Row-softmax of negative squared distances between frame embeddings."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 2:
        raise UsageError("self_similarity needs at least two embeddings")
    return softmax_rows(-pairwise_sq_dists(x))


def _aligned_index(T: int) -> np.ndarray:
    return (np.arange(T)[:, None] + np.arange(T)[None, :]) % T


def align_rows(M: np.ndarray) -> np.ndarray:
    """Rotate each row so entry ``[i, k]`` is ``M[i, (i + k) mod T]``."""
    T = M.shape[-1]
    return np.take_along_axis(M, np.broadcast_to(_aligned_index(T), M.shape), axis=-1)


def _unalign_rows(dR: np.ndarray) -> np.ndarray:
    T = dR.shape[-1]
    dM = np.empty_like(dR)
    np.put_along_axis(dM, np.broadcast_to(_aligned_index(T), dR.shape), dR, axis=-1)
    return dM


def _forward(params, frames, use_velocity):
    feats = frame_features(frames, use_velocity)
    x, a = _embed(params, feats)
    M = softmax_rows(-pairwise_sq_dists(x))
    R = align_rows(M)
    q = np.tanh(R @ params["cls1.W"] + params["cls1.b"])
    logit = (q @ params["cls2.W"])[..., 0] + params["cls2.b"][0]
    return logit, (feats, a, x, M, R, q)


def _backward(params, cache, dlogit):
    feats, a, x, M, R, q = cache
    grads = {
        "cls2.W": np.einsum("btc,bt->c", q, dlogit)[:, None],
        "cls2.b": np.array([dlogit.sum()]),
    }
    dq = dlogit[..., None] * params["cls2.W"][:, 0]
    dpre = dq * (1.0 - q * q)
    grads["cls1.W"] = np.einsum("btk,btc->kc", R, dpre)
    grads["cls1.b"] = dpre.sum(axis=(0, 1))
    dM = _unalign_rows(dpre @ params["cls1.W"].T)
    dD = -softmax_rows_backward(M, dM)
    A = dD + np.swapaxes(dD, -1, -2)
    dx = 2.0 * (A.sum(axis=-1)[..., None] * x - A @ x)
    grads["emb2.W"] = np.einsum("bth,bte->he", a, dx)
    grads["emb2.b"] = dx.sum(axis=(0, 1))
    dpre1 = (dx @ params["emb2.W"].T) * (1.0 - a * a)
    grads["emb1.W"] = np.einsum("btf,bth->fh", feats, dpre1)
    grads["emb1.b"] = dpre1.sum(axis=(0, 1))
    return grads


def rd_loss_and_grads(params, frames: np.ndarray, labels: np.ndarray, use_velocity: bool = True):
    """Binary cross-entropy summed over frames of a ``(B, T, K, d)`` batch."""
    logit, cache = _forward(params, frames, use_velocity)
    # log(1 + e^z) - y z, computed without overflow
    loss = np.sum(np.logaddexp(0.0, logit) - labels * logit)
    return float(loss), _backward(params, cache, sigmoid(logit) - labels)


def _check(model: RDModel, frames: np.ndarray) -> None:
    if frames.shape[-3:] != (model.T, model.K, model.d):
        raise DimensionError(f"window shape {frames.shape[-3:]} does not match model "
                             f"({model.T}, {model.K}, {model.d})")


def embed_frames(model: RDModel, window: Window) -> np.ndarray:
    """Embeddings ``(T, e)`` of one window."""
    _check(model, window.frames)
    x, _ = _embed(model.params, frame_features(window.frames, model.use_velocity))
    return x


def similarity_matrix(model: RDModel, window: Window) -> np.ndarray:
    return self_similarity(embed_frames(model, window))


def score_rd(model: RDModel, window: Window) -> np.ndarray:
    """Per-frame repetition probabilities in [0, 1] (length T)."""
    return score_rd_batch(model, [window])[0]


def score_rd_batch(model: RDModel, windows: Sequence[Window], chunk: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, len(windows), chunk):
        frames = np.stack([w.frames for w in windows[lo:lo + chunk]])
        _check(model, frames)
        logit, _ = _forward(model.params, frames, model.use_velocity)
        out.append(sigmoid(logit))
    return np.concatenate(out) if out else np.zeros((0, model.T))


def train_rd(corpus: Sequence[LabeledWindow], hyper: RDHyper) -> RDModel:
    if not corpus:
        raise UsageError("train_rd needs a non-empty corpus")
    labels = np.stack([lw.labels for lw in corpus]).astype(np.float64)
    if labels.min() == labels.max():
        raise UsageError("train_rd needs both repetitive and non-repetitive frames")
    frames = np.stack([lw.window.frames for lw in corpus])
    _, T, K, d = frames.shape
    rng = np.random.default_rng(hyper.seed)
    params = init_rd_params(rng, K, d, T, hyper.embed_dim, hyper.classifier_hidden, hyper.use_velocity)

    def batch_loss(p, idx, _rng):
        return rd_loss_and_grads(p, frames[idx], labels[idx], hyper.use_velocity)

    params, curve = fit(params, batch_loss, len(corpus), hyper, rng, "rd")
    meta = {"hyper": hyper.to_dict(), "epochs_run": len(curve),
            "final_loss": curve[-1], "loss_curve": curve}
    return RDModel(params, K, d, T, hyper.embed_dim, hyper.use_velocity, meta)


def make_repetition_corpus(train: Sequence[PoseSequence], T: int, n_windows: int = 400,
                           positive_fraction: float = 0.5,
                           loop_range: tuple[int, int] = (4, 32),
                           noise: float = 0.05, seed: int = 0) -> list[LabeledWindow]:
    """Build labeled windows from normal videos.

    Positives tile a random sub-segment of length ``L`` (drawn from
    ``loop_range``, both ends capped at ``T - 1``) end to end and add uniform
    noise of amplitude ``noise`` in normalized units (a pose's bounding-box
    diagonal is 1); every frame is labeled 1. Negatives are untouched normal windows
    labeled 0.
    """
    seqs = [s for s in train if len(s) >= T]
    lo, hi = loop_range
    if not seqs or lo < 2 or lo > hi or T < 3:
        raise UsageError(f"need normal videos of at least T={T} >= 3 frames and a loop range "
                         f"2 <= lo <= hi, got {loop_range}")
    # loops must repeat at least once inside the window
    hi = min(hi, T - 1)
    lo = min(lo, hi)
    rng = np.random.default_rng(seed)
    normed = [normalize_pose(s.keypoints) for s in seqs]
    n_pos = round(positive_fraction * n_windows)
    is_pos = np.zeros(n_windows, dtype=bool)
    is_pos[rng.choice(n_windows, n_pos, replace=False)] = True
    corpus = []
    for k in range(n_windows):
        v = int(rng.integers(len(normed)))
        kp = normed[v]
        start = int(rng.integers(0, len(kp) - T + 1))
        src = kp[start:start + T]
        if is_pos[k]:
            L = int(rng.integers(lo, hi + 1))
            seg = src[:L]
            frames = seg[np.arange(T) % L]
            frames = frames + noise * rng.uniform(-1.0, 1.0, size=frames.shape)
            corpus.append(LabeledWindow(Window(seqs[v].video_id, start, frames),
                                        np.ones(T, dtype=np.int8), L))
        else:
            corpus.append(LabeledWindow(Window(seqs[v].video_id, start, src.copy()),
                                        np.zeros(T, dtype=np.int8), 0))
    return corpus


def format_matrix(M: np.ndarray) -> str:
    """Plain-text T x T grid, one row per line."""
    return "\n".join(" ".join(f"{v:.6e}" for v in row) for row in M) + "\n"
