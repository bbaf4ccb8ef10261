"""Command-line front end.

Every verb works inside one run directory (``--out``)::

    config.json          resolved configuration of the last command
    data/train, data/test
    checkpoints/         pr.ckpt, pp.ckpt, rd.ckpt, train_stats.json
    scores/              scores.csv (+ optional similarity matrices)
    reports/             loss curves, evaluation, ablation and grid-search outputs

Exit codes: 0 ok, 1 usage, 2 I/O, 3 contract (labels in training data),
4 training divergence, 5 checkpoint/data mismatch, 6 missing labels.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from . import plotting, rd_stream
from .checkpoint import CheckpointError
from .config import RunConfig, load_config
from .data import (
    ConfigError,
    DegeneratePoseError,
    PoseFormatError,
    PoseSequence,
    atomic_write_text,
    load_directory,
    synth_dataset,
    window_sequence,
    write_pose_sequence,
)
from .fusion import (
    FusionWeights,
    StreamScores,
    TrainStats,
    UndefinedMetricError,
    auroc,
    evaluate,
    grid_search_weights,
    per_frame_rows,
)
from .numkit import DimensionError, UsageError
from .pipeline import TrainedStreams, ablation_suite, score_videos, train_streams
from .pp_stream import PPModel
from .pr_stream import PRModel
from .rd_stream import RDModel
from .training import TrainingError

log = logging.getLogger("posevad")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONTRACT, EXIT_TRAINING, EXIT_COMPAT, EXIT_MISSING = range(7)
STREAMS = ("pr", "pp", "rd")
MODEL_CLASSES = {"pr": PRModel, "pp": PPModel, "rd": RDModel}
SCORE_COLUMNS = ("video_id", "frame_index", "s_pr", "s_pp", "s_rd", "S", "label")


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, f"{self.prog}: {message}")


# --------------------------------------------------------------------------- run directory


class RunDir:
    def __init__(self, root: str | Path, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg

    @property
    def train_dir(self) -> Path:
        return Path(self.cfg.data.train_dir) if self.cfg.data.train_dir else self.root / "data" / "train"

    @property
    def test_dir(self) -> Path:
        return Path(self.cfg.data.test_dir) if self.cfg.data.test_dir else self.root / "data" / "test"

    def sub(self, name: str) -> Path:
        p = self.root / name
        p.mkdir(parents=True, exist_ok=True)
        return p

    def snapshot(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.root / "config.json", self.cfg.to_json())


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    atomic_write_text(path, buf.getvalue())


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_seqs(directory: Path, what: str) -> list[PoseSequence]:
    if not directory.is_dir():
        raise CliError(EXIT_IO, f"{what} directory {directory} does not exist (run `synth` first?)")
    seqs = load_directory(directory)
    if not seqs:
        raise CliError(EXIT_IO, f"no .pose files in {directory}")
    return seqs


# --------------------------------------------------------------------------- verbs


def cmd_synth(run: RunDir, args) -> int:
    ds = synth_dataset(run.cfg.synth)
    for sub, seqs in (("train", ds.train), ("test", ds.test)):
        out = run.root / "data" / sub
        out.mkdir(parents=True, exist_ok=True)
        for s in seqs:
            write_pose_sequence(s, out / f"{s.video_id}.pose")
    seg_rows = [(vid, start, length, repr(float(period)), kind)
                for vid, segs in sorted(ds.segments.items()) for start, length, period, kind in segs]
    _write_csv(run.sub("data") / "segments.csv", ("video_id", "start", "length", "period", "kind"), seg_rows)
    n_anom = sum(int(s.labels.sum()) for s in ds.test)
    n_test = sum(len(s) for s in ds.test)
    print(f"synth: {len(ds.train)} train / {len(ds.test)} test videos, "
          f"{run.cfg.synth.n_frames} frames, K={run.cfg.synth.K}, d={run.cfg.synth.d}; "
          f"anomalous test frames {n_anom}/{n_test} ({n_anom / max(n_test, 1):.3f})")
    return EXIT_OK


def _parse_streams(text: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    if not names or set(names) - set(STREAMS):
        raise CliError(EXIT_USAGE, f"--streams must be a comma list drawn from pr,pp,rd, got {text!r}")
    return tuple(s for s in STREAMS if s in names)


def cmd_train(run: RunDir, args) -> int:
    streams = _parse_streams(args.streams)
    train = _load_seqs(run.train_dir, "training")
    labeled = [s.video_id for s in train if s.labels is not None]
    if labeled:
        raise CliError(EXIT_CONTRACT, "unsupervised contract violated: training video(s) carry "
                                      f"labels: {', '.join(labeled[:5])}")
    models = train_streams(train, run.cfg.pipeline, streams)
    ck = run.sub("checkpoints")
    rep = run.sub("reports")
    curves = {}
    for name in streams:
        model = getattr(models, name)
        model.save(ck / f"{name}.ckpt")
        curve = model.meta["loss_curve"]
        curves[name] = curve
        _write_csv(rep / f"loss_{name}.csv", ("epoch", "loss"),
                   [(i + 1, float(v)) for i, v in enumerate(curve)])
        print(f"train: {name} {len(curve)} epochs, loss {curve[0]:.6g} -> {curve[-1]:.6g}")
    stats = {"streams": list(streams), **models.stats.to_dict()}
    _write_json(ck / "train_stats.json", stats)
    plotting.plot_loss_curves(rep / "loss_curves.png", curves)
    return EXIT_OK


def _load_stats(path: Path) -> tuple[TrainStats, list[str]]:
    """Normalizers and the list of streams trained alongside them."""
    try:
        raw = json.loads(path.read_text())
        stats = TrainStats(*(float(raw[k]) for k in ("mu_pr", "sigma_pr", "mu_pp", "sigma_pp")))
        streams = [s for s in raw["streams"] if s in STREAMS]
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"{path} not found (run `train` first?)") from exc
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(EXIT_COMPAT, f"{path}: malformed training statistics ({exc})") from exc
    return stats, streams


def _load_models(run: RunDir) -> TrainedStreams:
    ck = run.root / "checkpoints"
    stats, streams = _load_stats(ck / "train_stats.json")
    models = TrainedStreams(stats=stats)
    for name in streams:
        path = ck / f"{name}.ckpt"
        if not path.exists():
            raise CliError(EXIT_IO, f"{path} listed in train_stats.json but missing")
        setattr(models, name, MODEL_CLASSES[name].load(path))
    if not streams:
        raise CliError(EXIT_IO, f"no trained streams recorded in {ck}")
    return models


def _check_compat(models: TrainedStreams, seqs: Sequence[PoseSequence]) -> None:
    for name in STREAMS:
        m = getattr(models, name)
        if m is None:
            continue
        for s in seqs:
            for fld in ("K", "d"):
                if getattr(m, fld) != getattr(s, fld):
                    raise CliError(EXIT_COMPAT, f"{name} checkpoint has {fld}={getattr(m, fld)} but "
                                                f"video {s.video_id} has {fld}={getattr(s, fld)}")
    Ts = {getattr(models, n).T for n in STREAMS if getattr(models, n) is not None}
    if len(Ts) > 1:
        raise CliError(EXIT_COMPAT, f"checkpoints disagree on T: {sorted(Ts)}")


def _available_weights(models_or_scores, w: FusionWeights) -> FusionWeights:
    """Zero the weight of any stream that has no checkpoint."""
    a = w.alpha if models_or_scores.pr is not None else 0.0
    b = w.beta if models_or_scores.pp is not None else 0.0
    g = w.gamma if models_or_scores.rd is not None else 0.0
    try:
        return FusionWeights(a, b, g)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "every stream with a nonzero weight is missing") from exc


def cmd_score(run: RunDir, args) -> int:
    models = _load_models(run)
    test = _load_seqs(run.test_dir, "test")
    _check_compat(models, test)
    scores = score_videos(models, test)
    w = _available_weights(models, run.cfg.weights)
    fused = scores.fused(w, models.stats)
    rows = per_frame_rows(scores, fused, {s.video_id: s.start_index for s in test})
    out = run.sub("scores")
    _write_csv(out / "scores.csv", SCORE_COLUMNS, rows)
    if args.sim_matrix and models.rd is not None:
        for s in test:
            win = window_sequence(s, models.rd.T, "score")[0]
            M = rd_stream.similarity_matrix(models.rd, win)
            atomic_write_text(out / f"simmatrix_{s.video_id}.txt", rd_stream.format_matrix(M))
    print(f"score: {len(rows)} frames from {len(test)} videos -> {out / 'scores.csv'}")
    return EXIT_OK


def read_scores_csv(path: Path) -> tuple[StreamScores, list[np.ndarray], list[int]]:
    """Parse a score CSV back into per-video arrays, keeping file order."""
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"{path} not found (run `score` first?)") from exc
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != SCORE_COLUMNS:
        raise CliError(EXIT_IO, f"{path}: expected header {','.join(SCORE_COLUMNS)}")
    order: list[str] = []
    cols: dict[str, list[list]] = {}
    for line_no, row in enumerate(reader, start=2):
        if len(row) != len(SCORE_COLUMNS):
            raise CliError(EXIT_IO, f"{path}:{line_no}: expected {len(SCORE_COLUMNS)} fields")
        vid = row[0]
        if vid not in cols:
            order.append(vid)
            cols[vid] = [[] for _ in range(6)]
        try:
            vals = [int(row[1])] + [float(v) for v in row[2:6]]
        except ValueError as exc:
            raise CliError(EXIT_IO, f"{path}:{line_no}: {exc}") from exc
        for c, v in zip(cols[vid], vals + [row[6]]):
            c.append(v)
    if not order:
        raise CliError(EXIT_IO, f"{path}: no score rows")
    arr = lambda i: [np.asarray(cols[v][i], dtype=np.float64) for v in order]
    streams = []
    for i in (1, 2, 3):
        a = arr(i)
        streams.append(None if all(np.all(np.isnan(x)) for x in a) else a)
    raw_labels = [cols[v][5] for v in order]
    if all(lab == "" for labs in raw_labels for lab in labs):
        labels = None
    elif any(lab not in ("0", "1") for labs in raw_labels for lab in labs):
        raise CliError(EXIT_MISSING, f"{path}: label column must be 0/1 on every row")
    else:
        labels = [np.asarray([int(x) for x in labs], dtype=np.int8) for labs in raw_labels]
    first = [int(cols[v][0][0]) for v in order]
    return StreamScores(order, *streams, labels), arr(4), first


def _shown_path(path: Path, root: Path) -> str:
    """Path as recorded in reports: relative to the run directory when inside it."""
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(path)


def cmd_eval(run: RunDir, args) -> int:
    path = Path(args.scores) if args.scores else run.root / "scores" / "scores.csv"
    scores, fused, _ = read_scores_csv(path)
    if scores.labels is None:
        raise CliError(EXIT_MISSING, f"{path} has no labels; evaluation needs labeled test frames")
    labels = np.concatenate(scores.labels)
    stream_micro = {}
    for name in STREAMS:
        arrs = getattr(scores, name)
        if arrs is not None:
            # z-normalization is monotone, so a single stream's AUROC needs no stats
            stream_micro[name] = auroc(np.concatenate(arrs), labels)
    cfg = {"scores": _shown_path(path, run.root), "weights": run.cfg.to_dict()["weights"],
           **{f"stream_micro_auroc.{k}": round(v, 6) for k, v in stream_micro.items()}}
    report = evaluate(fused, scores.labels, scores.video_ids, cfg)
    rep = run.sub("reports")
    atomic_write_text(rep / "eval.txt", report.to_text())
    _write_json(rep / "eval.json", {**report.to_dict(), "stream_micro_auroc": stream_micro})
    plotting.plot_scores(rep / "eval.png", scores.video_ids, fused, scores.labels)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_gridsearch(run: RunDir, args) -> int:
    path = Path(args.scores) if args.scores else run.root / "scores" / "scores.csv"
    scores, _, _ = read_scores_csv(path)
    if scores.labels is None:
        raise CliError(EXIT_MISSING, f"{path} has no labels; grid search needs labeled frames")
    stats, _ = _load_stats(run.root / "checkpoints" / "train_stats.json")
    g = run.cfg.grid
    best, best_val, table = grid_search_weights(scores, stats, g.lo, g.hi, g.step)
    default_w = _available_weights(scores, run.cfg.weights)
    default_val = auroc(np.concatenate(scores.fused(default_w, stats)), np.concatenate(scores.labels))
    rep = run.sub("reports")
    _write_csv(rep / "gridsearch.csv", ("alpha", "beta", "gamma", "micro_auroc"), table)
    _write_json(rep / "best_weights.json",
                {"alpha": best.alpha, "beta": best.beta, "gamma": best.gamma, "micro_auroc": best_val,
                 "default_weights": list(default_w.as_tuple()), "default_micro_auroc": default_val,
                 "grid": run.cfg.to_dict()["grid"]})
    plotting.plot_grid(rep / "gridsearch.png", table, best)
    print(f"gridsearch: best (alpha, beta, gamma) = ({best.alpha:g}, {best.beta:g}, {best.gamma:g}) "
          f"micro AUROC {best_val:.6f} (default weights {default_val:.6f})")
    return EXIT_OK


ABLATION_COLUMNS = ("T", "d", "streams", "micro_auroc", "macro_auroc", "error")


def cmd_ablate(run: RunDir, args) -> int:
    cfg = run.cfg
    cells = ablation_suite(cfg.synth, cfg.pipeline, cfg.ablation.T_values, cfg.ablation.d_values)
    rows = [c.row() for c in cells]
    rep = run.sub("reports")
    _write_csv(rep / "ablation.csv", ABLATION_COLUMNS, [[r[k] for k in ABLATION_COLUMNS] for r in rows])
    ok = [r for r in rows if not r["error"]]
    if ok:
        plotting.plot_ablation(rep / "ablation.png", ok)
    for r in rows:
        print(f"ablate: T={r['T']:<3d} d={r['d']} {r['streams']:<9s} micro {r['micro_auroc']:.4f} "
              f"macro {r['macro_auroc']:.4f} {r['error']}")
    return EXIT_OK


VERBS = {"synth": cmd_synth, "train": cmd_train, "score": cmd_score, "eval": cmd_eval,
         "ablate": cmd_ablate, "gridsearch": cmd_gridsearch}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="posevad", description="Pose-based repetitive-behaviour anomaly detection.")
    p.add_argument("--config", help="JSON config file with per-component sections")
    p.add_argument("--seed", type=int, help="run seed (overrides the config file)")
    p.add_argument("--out", default="run", help="run directory (default: ./run)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable; wins over the config file")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sub.add_parser("synth", help="generate the synthetic train/test corpus")
    t = sub.add_parser("train", help="train the streams on label-free videos")
    t.add_argument("--streams", default="pr,pp,rd", help="comma list of streams (default: all)")
    s = sub.add_parser("score", help="per-frame scores for the test videos")
    s.add_argument("--sim-matrix", action="store_true",
                   help="also export the first-window self-similarity matrix of each video")
    for name, text in (("eval", "micro/macro AUROC report"), ("gridsearch", "search fusion weights")):
        e = sub.add_parser(name, help=text)
        e.add_argument("--scores", help="score CSV (default: <out>/scores/scores.csv)")
    sub.add_parser("ablate", help="window-length x pose-dimension x stream-subset grid")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.seed is not None and args.seed < 0:
            raise CliError(EXIT_USAGE, "--seed must be nonnegative")
        cfg = load_config(args.config, args.set, args.seed)
        run = RunDir(args.out, cfg)
        run.snapshot()
        return VERBS[args.verb](run, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (CheckpointError, DimensionError) as exc:
        print(f"error: incompatible checkpoint or data: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (PoseFormatError, DegeneratePoseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
