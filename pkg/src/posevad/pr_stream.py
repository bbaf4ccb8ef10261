"""Pose reconstruction stream: an LSTM sequence autoencoder over pose windows.

The encoder reads the flattened ``K*d`` pose of each frame through a linear
input projection. Its final state seeds the decoder, which receives the final
encoder hidden state at every step and emits the window in reverse time order.
The per-frame anomaly score is the summed squared reconstruction error over
the frame's keypoints.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .data import Window
from .numkit import (
    DimensionError,
    LstmParams,
    UsageError,
    lstm_sequence_backward,
    lstm_sequence_forward,
    xavier_uniform,
)
from .training import TrainHyper, fit


@dataclass
class PRModel:
    params: dict[str, np.ndarray]
    K: int
    d: int
    T: int
    hidden_dim: int
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.K * self.d

    def save(self, path) -> None:
        meta = {"K": self.K, "d": self.d, "T": self.T, "hidden_dim": self.hidden_dim, **self.meta}
        checkpoint.save(path, "pr", self.params, meta)

    @classmethod
    def load(cls, path) -> PRModel:
        arrays, meta = checkpoint.load(path, "pr")
        meta.pop("kind")
        K, d, T, H = (meta.pop(k) for k in ("K", "d", "T", "hidden_dim"))
        return cls(arrays, K, d, T, H, meta)


def init_pr_params(rng: np.random.Generator, input_dim: int, hidden_dim: int) -> dict[str, np.ndarray]:
    params = {
        "in.W": xavier_uniform(rng, input_dim, hidden_dim),
        "in.b": np.zeros(hidden_dim),
        "out.W": xavier_uniform(rng, hidden_dim, input_dim),
        "out.b": np.zeros(input_dim),
    }
    params.update(LstmParams.init(rng, hidden_dim, hidden_dim).as_dict("enc"))
    params.update(LstmParams.init(rng, hidden_dim, hidden_dim).as_dict("dec"))
    return params


def _forward(params, X):
    """``X`` is ``(T, B, D)``; returns the reconstruction and a backward cache."""
    T = X.shape[0]
    u = X @ params["in.W"] + params["in.b"]
    enc = LstmParams.from_dict(params, "enc")
    dec = LstmParams.from_dict(params, "dec")
    enc_hs, enc_c, enc_caches = lstm_sequence_forward(u, enc)
    h_last = enc_hs[-1]
    dec_in = np.broadcast_to(h_last, (T,) + h_last.shape)
    dec_hs, _, dec_caches = lstm_sequence_forward(np.ascontiguousarray(dec_in), dec, h_last, enc_c)
    y = dec_hs @ params["out.W"] + params["out.b"]
    recon = y[::-1]
    return recon, (X, enc_caches, dec_hs, dec_caches, h_last.shape)


def _backward(params, cache, d_recon):
    X, enc_caches, dec_hs, dec_caches, hshape = cache
    T = X.shape[0]
    dy = d_recon[::-1]
    grads = {
        "out.W": np.einsum("tbh,tbd->hd", dec_hs, dy),
        "out.b": dy.sum(axis=(0, 1)),
    }
    d_dec_hs = dy @ params["out.W"].T
    g_dec, d_dec_in, dh0, dc0 = lstm_sequence_backward(dec_caches, d_dec_hs)
    dh_last = d_dec_in.sum(axis=0) + dh0
    g_enc, du, _, _ = lstm_sequence_backward(enc_caches, np.zeros((T,) + hshape), dh_last, dc0)
    grads["in.W"] = np.einsum("tbd,tbh->dh", X, du)
    grads["in.b"] = du.sum(axis=(0, 1))
    for k, v in g_enc.items():
        grads[f"enc.{k}"] = v
    for k, v in g_dec.items():
        grads[f"dec.{k}"] = v
    return grads


def _stack(windows: Sequence[Window]) -> np.ndarray:
    """Windows as a time-major ``(T, B, K*d)`` array."""
    arr = np.stack([w.frames for w in windows])
    B, T = arr.shape[:2]
    return np.ascontiguousarray(arr.reshape(B, T, -1).transpose(1, 0, 2))


def pr_loss_and_grads(params, X):
    """Reconstruction loss summed over frames, keypoints and windows, with gradients."""
    recon, cache = _forward(params, X)
    resid = recon - X
    return float(np.sum(resid * resid)), _backward(params, cache, 2.0 * resid)


def reconstruct(model: PRModel, windows: Sequence[Window]) -> np.ndarray:
    """Reconstructions shaped like the stacked windows, ``(B, T, K, d)``."""
    X = _stack(windows)
    recon, _ = _forward(model.params, X)
    return recon.transpose(1, 0, 2).reshape(len(windows), X.shape[0], model.K, model.d)


def frame_scores(frames: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """Sum over keypoints of the squared per-keypoint error; works on ``(..., K, d)``."""
    r = recon - frames
    return np.sum(r * r, axis=(-2, -1))


def _check(model: PRModel, windows: Sequence[Window]) -> None:
    for w in windows:
        if w.frames.shape[1:] != (model.K, model.d):
            raise DimensionError(f"window pose shape {w.frames.shape[1:]} does not match model "
                                 f"({model.K}, {model.d})")


def score_pr(model: PRModel, window: Window) -> np.ndarray:
    """Per-frame reconstruction scores for one window (length T)."""
    return score_pr_batch(model, [window])[0]


def score_pr_batch(model: PRModel, windows: Sequence[Window], chunk: int = 64) -> np.ndarray:
    _check(model, windows)
    out = []
    for lo in range(0, len(windows), chunk):
        part = windows[lo:lo + chunk]
        frames = np.stack([w.frames for w in part])
        out.append(frame_scores(frames, reconstruct(model, part)))
    return np.concatenate(out) if out else np.zeros((0, model.T))


def train_pr(windows: Sequence[Window], hyper: TrainHyper) -> PRModel:
    if not windows:
        raise UsageError("train_pr needs at least one training window")
    shape = windows[0].frames.shape
    if any(w.frames.shape != shape for w in windows):
        raise DimensionError("training windows must share T, K and d")
    T, K, d = shape
    rng = np.random.default_rng(hyper.seed)
    params = init_pr_params(rng, K * d, hyper.hidden_dim)
    data = _stack(windows)

    def batch_loss(p, idx, _rng):
        return pr_loss_and_grads(p, data[:, idx])

    params, curve = fit(params, batch_loss, len(windows), hyper, rng, "pr")
    meta = {"hyper": hyper.to_dict(), "epochs_run": len(curve),
            "final_loss": curve[-1], "loss_curve": curve}
    return PRModel(params, K, d, T, hyper.hidden_dim, meta)
