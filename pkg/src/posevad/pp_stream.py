"""Pose prediction stream: forecast frame T+1 from frames 1..T.

Two branches:

* local - an LSTM encoder over the flattened keypoints feeds a Gaussian latent
  (mean / log-variance heads, reparameterized sample while training); one
  decoder LSTM step from the encoder state maps the latent to the next pose.
* global - two stacked LSTM cells over the per-frame keypoint centroid predict
  the next centroid.

Frame score = squared centroid error + summed squared keypoint error.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .data import PoseSequence, normalize_pose
from .numkit import (
    DimensionError,
    LstmParams,
    UsageError,
    lstm_cell_backward,
    lstm_cell_forward,
    lstm_sequence_backward,
    lstm_sequence_forward,
    xavier_uniform,
)
from .training import TrainHyper, fit


def center_of(keypoints: np.ndarray) -> np.ndarray:
    """Mean over the keypoint axis of a ``(..., K, d)`` array."""
    return np.mean(keypoints, axis=-2)


@dataclass(frozen=True)
class PPHyper(TrainHyper):
    latent_dim: int = 16
    kl_weight: float = 0.0
    stride: int = 16


@dataclass
class PPModel:
    params: dict[str, np.ndarray]
    K: int
    d: int
    T: int
    hidden_dim: int
    latent_dim: int
    deterministic: bool = True
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        meta = {"K": self.K, "d": self.d, "T": self.T, "hidden_dim": self.hidden_dim,
                "latent_dim": self.latent_dim, **self.meta}
        checkpoint.save(path, "pp", self.params, meta)

    @classmethod
    def load(cls, path) -> PPModel:
        arrays, meta = checkpoint.load(path, "pp")
        meta.pop("kind")
        K, d, T, H, L = (meta.pop(k) for k in ("K", "d", "T", "hidden_dim", "latent_dim"))
        return cls(arrays, K, d, T, H, L, True, meta)


def init_pp_params(rng, K: int, d: int, hidden_dim: int, latent_dim: int) -> dict[str, np.ndarray]:
    D = K * d
    p = {}
    p.update(LstmParams.init(rng, D, hidden_dim).as_dict("enc"))
    p["mu.W"] = xavier_uniform(rng, hidden_dim, latent_dim)
    p["mu.b"] = np.zeros(latent_dim)
    p["lv.W"] = xavier_uniform(rng, hidden_dim, latent_dim)
    p["lv.b"] = np.zeros(latent_dim)
    p.update(LstmParams.init(rng, latent_dim, hidden_dim).as_dict("dec"))
    p["out.W"] = xavier_uniform(rng, hidden_dim, D)
    p["out.b"] = np.zeros(D)
    p.update(LstmParams.init(rng, d, hidden_dim).as_dict("g1"))
    p.update(LstmParams.init(rng, hidden_dim, hidden_dim).as_dict("g2"))
    p["gout.W"] = xavier_uniform(rng, hidden_dim, d)
    p["gout.b"] = np.zeros(d)
    return p


def _forward(params, X, C, eps=None):
    """``X`` ``(T, B, K*d)`` poses, ``C`` ``(T, B, d)`` centroids.

    ``eps`` is the standard-normal latent noise; ``None`` uses the latent mean.
    """
    enc = LstmParams.from_dict(params, "enc")
    dec = LstmParams.from_dict(params, "dec")
    enc_hs, enc_c, enc_caches = lstm_sequence_forward(X, enc)
    h_T = enc_hs[-1]
    mu = h_T @ params["mu.W"] + params["mu.b"]
    lv = h_T @ params["lv.W"] + params["lv.b"]
    std = np.exp(0.5 * lv)
    z = mu if eps is None else mu + std * eps
    h1, _, dec_cache = lstm_cell_forward(z, h_T, enc_c, dec)
    pose = h1 @ params["out.W"] + params["out.b"]

    g1 = LstmParams.from_dict(params, "g1")
    g2 = LstmParams.from_dict(params, "g2")
    hs1, _, g1_caches = lstm_sequence_forward(C, g1)
    hs2, _, g2_caches = lstm_sequence_forward(hs1, g2)
    center = hs2[-1] @ params["gout.W"] + params["gout.b"]
    cache = (X, enc_caches, h_T, mu, lv, std, eps, h1, dec_cache, hs2, g1_caches, g2_caches)
    return pose, center, cache


def _backward(params, cache, d_pose, d_center, kl_weight):
    X, enc_caches, h_T, mu, lv, std, eps, h1, dec_cache, hs2, g1_caches, g2_caches = cache
    grads = {"out.W": h1.T @ d_pose, "out.b": d_pose.sum(axis=0)}
    dh1 = d_pose @ params["out.W"].T
    g_dec, dz, dh_dec, dc_dec = lstm_cell_backward(dec_cache, dh1, np.zeros_like(dh1))
    dmu = dz + kl_weight * mu
    dlv = 0.5 * kl_weight * (np.exp(lv) - 1.0)
    if eps is not None:
        dlv = dlv + dz * eps * 0.5 * std
    grads["mu.W"] = h_T.T @ dmu
    grads["mu.b"] = dmu.sum(axis=0)
    grads["lv.W"] = h_T.T @ dlv
    grads["lv.b"] = dlv.sum(axis=0)
    dh_T = dh_dec + dmu @ params["mu.W"].T + dlv @ params["lv.W"].T
    g_enc, _, _, _ = lstm_sequence_backward(enc_caches, np.zeros((X.shape[0],) + dh_T.shape),
                                            dh_T, dc_dec)
    grads["gout.W"] = hs2[-1].T @ d_center
    grads["gout.b"] = d_center.sum(axis=0)
    dh2 = d_center @ params["gout.W"].T
    g_g2, d_hs1, _, _ = lstm_sequence_backward(g2_caches, np.zeros_like(hs2), dh2)
    g_g1, _, _, _ = lstm_sequence_backward(g1_caches, d_hs1)
    for prefix, g in (("enc", g_enc), ("dec", g_dec), ("g1", g_g1), ("g2", g_g2)):
        for k, v in g.items():
            grads[f"{prefix}.{k}"] = v
    return grads


def kl_divergence(mu: np.ndarray, lv: np.ndarray) -> float:
    return float(-0.5 * np.sum(1.0 + lv - mu * mu - np.exp(lv)))


def pp_loss_terms(params, history: np.ndarray, target: np.ndarray, eps=None):
    """Loss pieces for a batch. ``history`` ``(B, T, K, d)``, ``target`` ``(B, K, d)``.

    Returns ``(center_se, pose_se, kl, cache)`` with squared errors summed over
    the batch.
    """
    X, C = _inputs(history)
    pose, center, cache = _forward(params, X, C, eps)
    B = len(target)
    dp = pose - target.reshape(B, -1)
    dc = center - center_of(target)
    mu, lv = cache[3], cache[4]
    return float(np.sum(dc * dc)), float(np.sum(dp * dp)), kl_divergence(mu, lv), (pose, center, cache, dp, dc)


def pp_loss_and_grads(params, history, target, eps=None, kl_weight: float = 0.0):
    c_se, p_se, kl, (_, _, cache, dp, dc) = pp_loss_terms(params, history, target, eps)
    loss = c_se + p_se + kl_weight * kl
    return loss, _backward(params, cache, 2.0 * dp, 2.0 * dc, kl_weight)


def _inputs(history: np.ndarray):
    B, T = history.shape[:2]
    X = np.ascontiguousarray(history.reshape(B, T, -1).transpose(1, 0, 2))
    C = np.ascontiguousarray(center_of(history).transpose(1, 0, 2))
    return X, C


def predict_pose(model: PPModel, history: np.ndarray, eps=None):
    """Forecast the next frame from ``(T, K, d)`` (or a ``(B, T, K, d)`` batch).

    Returns ``(pose, center)``. With ``model.deterministic`` (the default) the
    latent mean is used and ``eps`` is ignored.
    """
    h = np.asarray(history, dtype=np.float64)
    single = h.ndim == 3
    if single:
        h = h[None]
    if h.shape[1] != model.T:
        raise UsageError(f"history has {h.shape[1]} frames, model expects T={model.T}")
    if h.shape[2:] != (model.K, model.d):
        raise DimensionError(f"history pose shape {h.shape[2:]} does not match ({model.K}, {model.d})")
    X, C = _inputs(h)
    pose, center, _ = _forward(model.params, X, C, None if model.deterministic else eps)
    pose = pose.reshape(len(h), model.K, model.d)
    return (pose[0], center[0]) if single else (pose, center)


def prediction_score(pred_pose, pred_center, target) -> np.ndarray:
    """Squared centroid error plus summed squared keypoint error."""
    rc = pred_center - center_of(target)
    rp = pred_pose - target
    return np.sum(rc * rc, axis=-1) + np.sum(rp * rp, axis=(-2, -1))


def score_pp(model: PPModel, history: np.ndarray, target: np.ndarray) -> float:
    if not model.deterministic:
        raise UsageError("score_pp requires deterministic inference")
    if np.shape(target) != (model.K, model.d):
        raise DimensionError(f"target shape {np.shape(target)} does not match ({model.K}, {model.d})")
    pose, center = predict_pose(model, history)
    return float(prediction_score(pose, center, target))


def score_sequence(model: PPModel, seq: PoseSequence, chunk: int = 64) -> np.ndarray:
    """One score per frame of ``seq``.

    Frame ``i >= T`` is forecast from frames ``i-T..i-1``. The first ``T`` frames
    take the first computable score. A video of at most ``T`` frames is
    left-padded with copies of its first frame so its last frame can be scored.
    """
    if (seq.K, seq.d) != (model.K, model.d):
        raise DimensionError(f"sequence pose shape ({seq.K}, {seq.d}) does not match "
                             f"({model.K}, {model.d})")
    kp = normalize_pose(seq.keypoints)
    N, T = len(kp), model.T
    if N == 0:
        return np.zeros(0)
    if N <= T:
        padded = np.concatenate([np.repeat(kp[:1], T + 1 - N, axis=0), kp], axis=0)
        hist = padded[None, :T]
        pose, center = predict_pose(model, hist)
        return np.full(N, float(prediction_score(pose[0], center[0], kp[-1])))
    targets = np.arange(T, N)
    scores = np.empty(len(targets))
    windows = np.lib.stride_tricks.sliding_window_view(kp, T, axis=0)  # (N-T+1, K, d, T)
    for lo in range(0, len(targets), chunk):
        t = targets[lo:lo + chunk]
        hist = np.moveaxis(windows[t - T], -1, 1)
        pose, center = predict_pose(model, hist)
        scores[lo:lo + len(t)] = prediction_score(pose, center, kp[t])
    return np.concatenate([np.full(T, scores[0]), scores])


def prediction_samples(seqs: Sequence[PoseSequence], T: int, stride: int):
    """Cut ``(history, target)`` pairs of ``T + 1`` normalized frames."""
    hist, targ = [], []
    for s in seqs:
        kp = normalize_pose(s.keypoints)
        for start in range(0, len(kp) - T, stride):
            hist.append(kp[start:start + T])
            targ.append(kp[start + T])
    if not hist:
        return np.zeros((0, T, 0, 0)), np.zeros((0, 0, 0))
    return np.stack(hist), np.stack(targ)


def train_pp(history: np.ndarray, target: np.ndarray, hyper: PPHyper) -> PPModel:
    """Fit on ``history`` ``(S, T, K, d)`` and ``target`` ``(S, K, d)``."""
    if len(history) == 0:
        raise UsageError("train_pp needs at least one training sample")
    if len(history) != len(target) or history.shape[2:] != target.shape[1:]:
        raise DimensionError("history and target disagree in count or pose shape")
    _, T, K, d = history.shape
    rng = np.random.default_rng(hyper.seed)
    params = init_pp_params(rng, K, d, hyper.hidden_dim, hyper.latent_dim)
    noise_rng = np.random.default_rng([hyper.seed, 1])

    def batch_loss(p, idx, _rng):
        eps = noise_rng.standard_normal((len(idx), hyper.latent_dim))
        return pp_loss_and_grads(p, history[idx], target[idx], eps, hyper.kl_weight)

    params, curve = fit(params, batch_loss, len(history), hyper, rng, "pp")
    meta = {"hyper": hyper.to_dict(), "epochs_run": len(curve),
            "final_loss": curve[-1], "loss_curve": curve}
    return PPModel(params, K, d, T, hyper.hidden_dim, hyper.latent_dim, True, meta)
