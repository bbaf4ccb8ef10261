"""End-to-end orchestration: train streams, score videos, fuse, evaluate, ablate."""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import pp_stream, pr_stream, rd_stream
from .data import PoseSequence, SynthConfig, reassemble, synth_dataset, window_sequence
from .fusion import (
    STREAM_SUBSETS,
    FusionWeights,
    StreamScores,
    TrainStats,
    evaluate,
    fit_train_stats,
    subset_weights,
)
from .numkit import DimensionError, UsageError
from .pp_stream import PPHyper, PPModel
from .pr_stream import PRModel
from .rd_stream import RDHyper, RDModel
from .training import TrainHyper

log = logging.getLogger(__name__)

STREAM_IDS = {"pr": 1, "pp": 2, "rd": 3}


@dataclass(frozen=True)
class ModelConfig:
    T: int = 64
    hidden_dim: int = 64
    latent_dim: int = 16
    embed_dim: int = 32
    classifier_hidden: int = 32
    kl_weight: float = 0.0
    pp_stride: int = 16
    use_velocity: bool = True


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.004
    batch_size: int = 60
    epochs_pr: int = 60
    epochs_pp: int = 40
    epochs_rd: int = 60
    clip_norm: float = 5.0


@dataclass(frozen=True)
class CorpusConfig:
    n_windows: int = 600
    positive_fraction: float = 0.5
    loop_range: tuple[int, int] = (4, 32)
    noise: float = 0.05


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    weights: FusionWeights = field(default_factory=FusionWeights)
    seed: int = 0


def stream_seed(seed: int, stream: str) -> int:
    """Independent per-stream seed, so a stream trains identically alone or with others."""
    return int(np.random.SeedSequence([seed, STREAM_IDS[stream]]).generate_state(1)[0])


@dataclass
class TrainedStreams:
    pr: PRModel | None = None
    pp: PPModel | None = None
    rd: RDModel | None = None
    stats: TrainStats | None = None
    timings: dict = field(default_factory=dict)


def _require_unlabeled(train: Sequence[PoseSequence]) -> None:
    for s in train:
        if s.labels is not None:
            raise UsageError(f"training video {s.video_id} carries labels")


def _check_shapes(seqs: Sequence[PoseSequence]) -> tuple[int, int]:
    shapes = {(s.K, s.d) for s in seqs}
    if len(shapes) != 1:
        raise DimensionError(f"videos disagree on (K, d): {sorted(shapes)}")
    return shapes.pop()


def train_pr_stream(train: Sequence[PoseSequence], cfg: PipelineConfig) -> PRModel:
    m, o = cfg.model, cfg.optim
    windows = [w for s in train for w in window_sequence(s, m.T, "train")]
    hyper = TrainHyper(o.lr, o.batch_size, o.epochs_pr, m.hidden_dim, stream_seed(cfg.seed, "pr"), o.clip_norm)
    return pr_stream.train_pr(windows, hyper)


def train_pp_stream(train: Sequence[PoseSequence], cfg: PipelineConfig) -> PPModel:
    m, o = cfg.model, cfg.optim
    hist, targ = pp_stream.prediction_samples(train, m.T, m.pp_stride)
    hyper = PPHyper(o.lr, o.batch_size, o.epochs_pp, m.hidden_dim, stream_seed(cfg.seed, "pp"),
                    o.clip_norm, m.latent_dim, m.kl_weight, m.pp_stride)
    return pp_stream.train_pp(hist, targ, hyper)


def train_rd_stream(train: Sequence[PoseSequence], cfg: PipelineConfig) -> RDModel:
    m, o, c = cfg.model, cfg.optim, cfg.corpus
    seed = stream_seed(cfg.seed, "rd")
    corpus = rd_stream.make_repetition_corpus(train, m.T, c.n_windows, c.positive_fraction,
                                              tuple(c.loop_range), c.noise, seed)
    hyper = RDHyper(o.lr, o.batch_size, o.epochs_rd, m.hidden_dim, seed, o.clip_norm,
                    m.embed_dim, m.classifier_hidden, m.use_velocity)
    return rd_stream.train_rd(corpus, hyper)


def score_pr_video(model: PRModel, seq: PoseSequence) -> np.ndarray:
    windows = window_sequence(seq, model.T, "score")
    return reassemble(windows, pr_stream.score_pr_batch(model, windows), len(seq))


def score_rd_video(model: RDModel, seq: PoseSequence) -> np.ndarray:
    windows = window_sequence(seq, model.T, "score")
    return reassemble(windows, rd_stream.score_rd_batch(model, windows), len(seq))


def training_score_stats(pr: PRModel | None, pp: PPModel | None,
                         train: Sequence[PoseSequence]) -> TrainStats:
    """Fit normalizers on training-frame scores.

    PR uses every frame of the training windows; PP uses every frame that has a
    full history (warm-up copies excluded). A missing stream gets (0, 1).
    """
    if pr is not None:
        windows = [w for s in train for w in window_sequence(s, pr.T, "train")]
        pr_scores = pr_stream.score_pr_batch(pr, windows).ravel()
    else:
        pr_scores = np.array([-1.0, 1.0])
    if pp is not None:
        pp_scores = np.concatenate([pp_stream.score_sequence(pp, s)[pp.T:] for s in train if len(s) > pp.T])
    else:
        pp_scores = np.array([-1.0, 1.0])
    return fit_train_stats(pr_scores, pp_scores)


def train_streams(train: Sequence[PoseSequence], cfg: PipelineConfig,
                  streams: Sequence[str] = ("pr", "pp", "rd")) -> TrainedStreams:
    _require_unlabeled(train)
    _check_shapes(train)
    out = TrainedStreams()
    for name, fn in (("pr", train_pr_stream), ("pp", train_pp_stream), ("rd", train_rd_stream)):
        if name in streams:
            t0 = time.perf_counter()
            setattr(out, name, fn(train, cfg))
            out.timings[name] = time.perf_counter() - t0
            log.info("trained %s in %.1fs (final loss %.4g)", name, out.timings[name],
                     getattr(out, name).meta["final_loss"])
    out.stats = training_score_stats(out.pr, out.pp, train)
    return out


def score_videos(models: TrainedStreams, seqs: Sequence[PoseSequence]) -> StreamScores:
    """Raw per-frame scores of every trained stream for every video."""
    pr = [score_pr_video(models.pr, s) for s in seqs] if models.pr else None
    pp = [pp_stream.score_sequence(models.pp, s) for s in seqs] if models.pp else None
    rd = [score_rd_video(models.rd, s) for s in seqs] if models.rd else None
    labels = [s.labels for s in seqs] if all(s.labels is not None for s in seqs) else None
    return StreamScores([s.video_id for s in seqs], pr, pp, rd, labels)


def evaluate_subset(scores: StreamScores, stats: TrainStats, subset: Sequence[str],
                    weights: FusionWeights, config: dict | None = None):
    w = subset_weights(subset, weights)
    fused = scores.fused(w, stats)
    return evaluate(fused, scores.labels, scores.video_ids, config)


# --------------------------------------------------------------------------- ablation


ABLATION_T = (4, 8, 16, 64)
ABLATION_D = (2, 3)


@dataclass
class AblationCell:
    T: int
    d: int
    subset: tuple[str, ...]
    micro: float
    macro: float
    error: str = ""

    def row(self) -> dict:
        return {"T": self.T, "d": self.d, "streams": "+".join(self.subset),
                "micro_auroc": self.micro, "macro_auroc": self.macro, "error": self.error}


def ablation_dataset(synth: SynthConfig, d: int):
    return synth_dataset(replace(synth, d=d))


def run_cell(synth: SynthConfig, cfg: PipelineConfig, T: int, d: int,
             subset: Sequence[str]) -> AblationCell:
    """One ablation configuration, trained from scratch with only the streams it uses."""
    ds = ablation_dataset(synth, d)
    cell_cfg = replace(cfg, model=replace(cfg.model, T=T))
    models = train_streams(ds.train, cell_cfg, subset)
    scores = score_videos(models, ds.test)
    rep = evaluate_subset(scores, models.stats, subset, cfg.weights)
    return AblationCell(T, d, tuple(subset), rep.micro, rep.macro)


def ablation_suite(synth: SynthConfig, cfg: PipelineConfig,
                   T_values: Sequence[int] = ABLATION_T, d_values: Sequence[int] = ABLATION_D,
                   subsets: Sequence[Sequence[str]] = STREAM_SUBSETS) -> list[AblationCell]:
    """Micro/macro AUROC for every (T, d, stream subset).

    Streams are trained once per (T, d) and shared by the subsets; since each
    stream has its own seed this equals training every cell separately. A
    failing (T, d) block is reported per cell and the suite continues.
    """
    cells = []
    for d in d_values:
        ds = ablation_dataset(synth, d)
        for T in T_values:
            cell_cfg = replace(cfg, model=replace(cfg.model, T=T))
            try:
                models = train_streams(ds.train, cell_cfg)
                scores = score_videos(models, ds.test)
            except Exception as exc:  # noqa: BLE001 - reported per cell
                log.warning("ablation T=%d d=%d failed: %s", T, d, exc)
                cells += [AblationCell(T, d, tuple(s), float("nan"), float("nan"), str(exc))
                          for s in subsets]
                continue
            for s in subsets:
                try:
                    rep = evaluate_subset(scores, models.stats, s, cfg.weights)
                    cells.append(AblationCell(T, d, tuple(s), rep.micro, rep.macro))
                except Exception as exc:  # noqa: BLE001
                    cells.append(AblationCell(T, d, tuple(s), float("nan"), float("nan"), str(exc)))
            log.info("ablation T=%d d=%d done", T, d)
    return cells


def config_to_dict(cfg) -> dict:
    """Nested plain-dict view of a (frozen) dataclass config."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if hasattr(v, "__dataclass_fields__"):
            v = config_to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out
