"""Pose sequences: file I/O, per-frame normalization, windowing, synthetic data.

Pose file layout (plain text, one frame per line)::

    # posevad-pose v1 video_id=<id> K=<int> d=<int> labels=<0|1>
    <frame_index>,<x1>,<y1>[,<z1>],<x2>,...[,<label>]

Coordinates are keypoint-major. The trailing label column is present exactly
when the header says ``labels=1``.
"""

from __future__ import annotations

import os
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

HEADER_TAG = "posevad-pose"
FORMAT_VERSION = "v1"


class PoseFormatError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class DegeneratePoseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PoseFrame:
    frame_index: int
    keypoints: np.ndarray  # (K, d)


@dataclass
class PoseSequence:
    """One video's poses as a ``(N, K, d)`` array with optional 0/1 labels."""

    video_id: str
    keypoints: np.ndarray
    labels: np.ndarray | None = None
    start_index: int = 0

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.keypoints.ndim != 3:
            raise ValueError(f"keypoints must be (N, K, d), got {self.keypoints.shape}")
        _, K, d = self.keypoints.shape
        if K < 2 or d not in (2, 3):
            raise ValueError(f"need K >= 2 and d in (2, 3), got K={K} d={d}")
        if not np.all(np.isfinite(self.keypoints)):
            raise ValueError(f"non-finite coordinates in {self.video_id}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int8)
            if self.labels.shape != (len(self.keypoints),):
                raise ValueError("labels length must equal frame count")
            if np.any((self.labels != 0) & (self.labels != 1)):
                raise ValueError("labels must be 0/1")

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def K(self) -> int:
        return self.keypoints.shape[1]

    @property
    def d(self) -> int:
        return self.keypoints.shape[2]

    @property
    def frames(self) -> list[PoseFrame]:
        return [PoseFrame(self.start_index + i, kp) for i, kp in enumerate(self.keypoints)]

    def trajectory(self, j: int) -> np.ndarray:
        """Coordinates of keypoint ``j`` over time, ``(N, d)``."""
        return self.keypoints[:, j, :]


@dataclass
class Window:
    """``T`` consecutive normalized frames; ``n_valid`` < T marks tail padding."""

    video_id: str
    start: int
    frames: np.ndarray  # (T, K, d)
    n_valid: int = -1

    def __post_init__(self):
        if self.n_valid < 0:
            self.n_valid = len(self.frames)

    @property
    def T(self) -> int:
        return len(self.frames)


# --------------------------------------------------------------------------- file I/O


def write_pose_sequence(seq: PoseSequence, path: str | os.PathLike) -> None:
    """Write atomically; floats use ``repr`` so a reload is exact."""
    if any(ch.isspace() for ch in seq.video_id) or "=" in seq.video_id:
        raise ValueError(f"video_id must not contain whitespace or '=': {seq.video_id!r}")
    has_labels = seq.labels is not None
    lines = [(f"# {HEADER_TAG} {FORMAT_VERSION} video_id={seq.video_id} "
              f"K={seq.K} d={seq.d} labels={int(has_labels)}")]
    flat = seq.keypoints.reshape(len(seq), -1)
    for n, row in enumerate(flat):
        cells = [str(seq.start_index + n)] + [repr(float(v)) for v in row]
        if has_labels:
            cells.append(str(int(seq.labels[n])))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _parse_header(path, line: str) -> tuple[str, int, int, bool]:
    parts = line.lstrip("#").split()
    if len(parts) < 2 or parts[0] != HEADER_TAG:
        raise PoseFormatError(path, 1, f"expected '# {HEADER_TAG} ...' header")
    if parts[1] != FORMAT_VERSION:
        raise PoseFormatError(path, 1, f"unsupported format version {parts[1]!r}")
    fields = {}
    for tok in parts[2:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise PoseFormatError(path, 1, f"bad header token {tok!r}")
        fields[key] = val
    try:
        video_id = fields["video_id"]
        K, d = int(fields["K"]), int(fields["d"])
        labels = fields["labels"]
    except (KeyError, ValueError) as exc:
        raise PoseFormatError(path, 1, f"header must declare video_id, K, d, labels ({exc})")
    if labels not in ("0", "1"):
        raise PoseFormatError(path, 1, "labels must be 0 or 1")
    if K < 2 or d not in (2, 3):
        raise PoseFormatError(path, 1, f"need K >= 2 and d in (2, 3), got K={K} d={d}")
    return video_id, K, d, labels == "1"


def load_pose_sequence(path: str | os.PathLike) -> PoseSequence:
    """Parse a pose file. Line numbers in errors count the header as line 1."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read().splitlines()
    if not text:
        raise PoseFormatError(path, 1, "empty file")
    video_id, K, d, has_labels = _parse_header(path, text[0])
    width = 1 + K * d + int(has_labels)
    coords, labels, indices = [], [], []
    for line_no, line in enumerate(text[1:], start=2):
        if not line.strip():
            raise PoseFormatError(path, line_no, "blank line")
        cells = line.split(",")
        if len(cells) != width:
            n_coords = len(cells) - 1 - int(has_labels)
            if n_coords > 0 and n_coords % d == 0:
                msg = f"frame has {n_coords // d} keypoints, header declares K={K}"
            else:
                msg = f"expected {width} columns, got {len(cells)}"
            raise PoseFormatError(path, line_no, msg)
        try:
            idx = int(cells[0])
            vals = [float(c) for c in cells[1:1 + K * d]]
        except ValueError as exc:
            raise PoseFormatError(path, line_no, str(exc))
        if not all(np.isfinite(vals)):
            raise PoseFormatError(path, line_no, "non-finite coordinate")
        if indices and idx != indices[-1] + 1:
            kind = "duplicate" if idx <= indices[-1] else "missing"
            raise PoseFormatError(path, line_no,
                                  f"{kind} frame index: got {idx} after {indices[-1]}")
        if has_labels:
            lab = cells[-1].strip()
            if lab not in ("0", "1"):
                raise PoseFormatError(path, line_no, f"label must be 0 or 1, got {lab!r}")
            labels.append(int(lab))
        indices.append(idx)
        coords.append(vals)
    if not coords:
        raise PoseFormatError(path, 2, "no frames")
    kp = np.asarray(coords, dtype=np.float64).reshape(len(coords), K, d)
    return PoseSequence(video_id, kp, np.asarray(labels, dtype=np.int8) if has_labels else None,
                        start_index=indices[0])


def load_directory(directory: str | os.PathLike) -> list[PoseSequence]:
    """Load every ``*.pose`` file of a directory, sorted by file name."""
    paths = sorted(Path(directory).glob("*.pose"))
    return [load_pose_sequence(p) for p in paths]


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# --------------------------------------------------------------------------- normalization


def normalize_pose(keypoints: np.ndarray) -> np.ndarray:
    """Center the bounding box at the origin and scale its diagonal to 1.

    Accepts a single ``(K, d)`` frame or any stack ``(..., K, d)``.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    lo = kp.min(axis=-2, keepdims=True)
    hi = kp.max(axis=-2, keepdims=True)
    diag = np.linalg.norm(hi - lo, axis=-1, keepdims=True)
    if np.any(diag <= 1e-12):
        raise DegeneratePoseError("all keypoints of a frame coincide")
    return (kp - 0.5 * (lo + hi)) / diag


def normalize_sequence(seq: PoseSequence) -> PoseSequence:
    return PoseSequence(seq.video_id, normalize_pose(seq.keypoints), seq.labels, seq.start_index)


# --------------------------------------------------------------------------- windowing


def window_sequence(seq: PoseSequence, T: int, purpose: str = "train",
                    normalize: bool = True) -> list[Window]:
    """Cut non-overlapping windows of ``T`` frames.

    ``train`` drops the incomplete tail; ``score`` pads the tail by repeating
    the last frame so every frame lands in exactly one window.
    """
    if T < 2:
        raise ValueError("window length T must be >= 2")
    if purpose not in ("train", "score"):
        raise ValueError(f"purpose must be 'train' or 'score', got {purpose!r}")
    N = len(seq)
    if N == 0:
        return []
    kp = normalize_pose(seq.keypoints) if normalize else seq.keypoints
    out = []
    for start in range(0, N, T):
        chunk = kp[start:start + T]
        n_valid = len(chunk)
        if n_valid < T:
            if purpose == "train":
                break
            pad = np.repeat(chunk[-1:], T - n_valid, axis=0)
            chunk = np.concatenate([chunk, pad], axis=0)
        out.append(Window(seq.video_id, start, chunk, n_valid))
    return out


def reassemble(windows: Sequence[Window], window_scores: Sequence[np.ndarray], n_frames: int) -> np.ndarray:
    """Stitch per-window score arrays back into one per-frame array."""
    out = np.full(n_frames, np.nan)
    for w, s in zip(windows, window_scores):
        out[w.start:w.start + w.n_valid] = np.asarray(s)[:w.n_valid]
    if np.isnan(out).any():
        raise ValueError("windows do not cover every frame")
    return out


# --------------------------------------------------------------------------- synthetic data

# COCO-17 layout, unit body height, y pointing up.
_COCO17 = np.array([
    [0.00, 0.92], [-0.03, 0.95], [0.03, 0.95], [-0.07, 0.93], [0.07, 0.93],
    [-0.18, 0.78], [0.18, 0.78], [-0.24, 0.55], [0.24, 0.55], [-0.27, 0.35],
    [0.27, 0.35], [-0.11, 0.45], [0.11, 0.45], [-0.12, 0.23], [0.12, 0.23],
    [-0.13, 0.00], [0.13, 0.00],
])
_ARM = (7, 8, 9, 10)       # elbows, wrists
_WRISTS = (9, 10)
_HEAD = (0, 1, 2, 3, 4)
ANOMALY_KINDS = ("flap", "bang", "spin")


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 40
    n_test: int = 10
    n_frames: int = 512
    K: int = 17
    d: int = 2
    period_range: tuple[int, int] = (6, 20)
    anomaly_fraction: float = 0.3
    segment_len: int = 80
    noise: float = 0.004
    anomaly_amplitude: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_train", "n_test", "n_frames", "K", "segment_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.K < 2 or self.d not in (2, 3):
            raise ConfigError("need K >= 2 and d in (2, 3)")
        lo, hi = self.period_range
        if not (4 <= lo <= hi <= self.n_frames):
            raise ConfigError(f"period_range {self.period_range} must satisfy 4 <= lo <= hi <= n_frames")
        if not (0.0 <= self.anomaly_fraction < 1.0):
            raise ConfigError("anomaly_fraction must lie in [0, 1)")
        if self.segment_len > self.n_frames:
            raise ConfigError("segment_len exceeds n_frames")
        if self.n_segments() * self.segment_len > self.n_frames - self.segment_len:
            raise ConfigError(
                f"anomaly_fraction {self.anomaly_fraction} leaves less than one segment "
                f"({self.segment_len} frames) of normal motion per test video")
        if self.noise < 0 or self.anomaly_amplitude <= 0:
            raise ConfigError("noise must be >= 0 and anomaly_amplitude > 0")

    def n_segments(self) -> int:
        if self.anomaly_fraction == 0:
            return 0
        return max(1, round(self.anomaly_fraction * self.n_frames / self.segment_len))


def skeleton_template(K: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Rest pose with ``K`` keypoints in ``d`` dims (COCO-17 when K == 17)."""
    if K <= 17:
        base = _COCO17[:K].copy()
    else:
        extra = []
        for _ in range(K - 17):
            a, b = rng.choice(17, size=2, replace=False)
            w = rng.uniform(0.2, 0.8)
            extra.append(w * _COCO17[a] + (1 - w) * _COCO17[b])
        base = np.vstack([_COCO17, np.asarray(extra)])
    if d == 3:
        depth = 0.05 * np.sin(np.arange(K) * 1.3)
        base = np.column_stack([base, depth])
    return base


def _smooth_process(rng, n: int, dims: tuple[int, ...], sigma: float, scale: float) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to a target standard deviation."""
    raw = gaussian_filter1d(rng.standard_normal((n + 6 * int(sigma),) + dims), sigma, axis=0, mode="wrap")
    raw = raw[3 * int(sigma):3 * int(sigma) + n]
    raw /= raw.std() + 1e-12
    return scale * raw


def _normal_motion(rng, cfg: SynthConfig, template: np.ndarray) -> np.ndarray:
    """Aperiodic motion: smooth drifts of body position, sway and limbs."""
    N, K, d = cfg.n_frames, cfg.K, cfg.d
    kp = np.broadcast_to(template, (N, K, d)).copy()
    kp += _smooth_process(rng, N, (1, d), sigma=40.0, scale=0.3)       # wandering in frame
    kp *= 1.0 + _smooth_process(rng, N, (1, 1), sigma=60.0, scale=0.05)  # zoom drift
    sway = _smooth_process(rng, N, (1,), sigma=25.0, scale=0.04)
    kp[:, :, 0] += sway * template[None, :, 1]                          # upper body leans more
    kp += _smooth_process(rng, N, (K, d), sigma=12.0, scale=0.02)       # joint wander
    arms = [j for j in _ARM if j < K]
    if arms:
        kp[:, arms, :] += _smooth_process(rng, N, (len(arms), d), sigma=18.0, scale=0.05)
    return kp


def _plant_anomaly(kp: np.ndarray, start: int, length: int, period: float, kind: str,
                   amp: float, rng: np.random.Generator) -> None:
    """Superimpose a periodic movement on ``kp[start:start+length]`` in place."""
    t = np.arange(length)
    phase = 2.0 * np.pi * t / period
    seg = kp[start:start + length]
    K, d = seg.shape[1:]
    if kind == "flap":
        joints = [j for j in _ARM if j < K] or [K - 1]
        wave = 0.18 * amp * np.sin(phase)
        for j in joints:
            weight = 1.0 if j in _WRISTS else 0.5
            seg[:, j, 1] += weight * wave
    elif kind == "bang":
        joints = [j for j in _HEAD if j < K] or [0]
        wave = 0.08 * amp * np.sin(phase)
        for j in joints:
            seg[:, j, 1] += wave
            seg[:, j, 0] += 0.3 * wave
    elif kind == "spin":
        center = seg.mean(axis=1, keepdims=True)
        rel = seg - center
        if d == 3:
            c, s = np.cos(phase)[:, None], np.sin(phase)[:, None]
            x, z = rel[:, :, 0].copy(), rel[:, :, 2].copy()
            rel[:, :, 0] = c * x - s * z
            rel[:, :, 2] = s * x + c * z
        else:
            # orthographic view of a rotation about the vertical axis
            rel[:, :, 0] *= np.cos(phase)[:, None]
        seg[:] = center + rel
    else:
        raise ValueError(f"unknown anomaly kind {kind!r}")


def _whole_period(length: int, period: float, lo: float, hi: float) -> float:
    """Nearest period in ``[lo, hi]`` that fits a whole number of cycles into ``length``.

    The planted motion then returns to its starting offset, so the segment
    joins the surrounding normal motion without a jump.
    """
    cands = [length / n for n in {max(1, int(np.floor(length / period))), int(np.ceil(length / period))}]
    cands = [c for c in cands if lo <= c <= hi]
    return min(cands, key=lambda c: (abs(c - period), c)) if cands else period


def _segment_starts(rng, n_frames: int, n_seg: int, seg_len: int) -> list[int]:
    """Random non-overlapping segment starts after a normal lead-in of ``seg_len`` frames."""
    slack = n_frames - (n_seg + 1) * seg_len
    cuts = np.sort(rng.integers(0, slack + 1, size=n_seg))
    return [int(c) + (i + 1) * seg_len for i, c in enumerate(cuts)]


@dataclass
class SyntheticDataset:
    train: list[PoseSequence]
    test: list[PoseSequence]
    config: SynthConfig
    segments: dict[str, list[tuple[int, int, float, str]]] = field(default_factory=dict)


def synth_dataset(cfg: SynthConfig) -> SyntheticDataset:
    """Generate label-free normal training videos and labeled test videos.

    Test videos carry ``cfg.n_segments()`` planted periodic segments; the
    ``segments`` map records ``(start, length, period, kind)`` per video.
    """
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    template_ss, train_ss, test_ss = root.spawn(3)
    template = skeleton_template(cfg.K, cfg.d, np.random.default_rng(template_ss))
    train, test, segments = [], [], {}
    for i, ss in enumerate(train_ss.spawn(cfg.n_train)):
        rng = np.random.default_rng(ss)
        kp = _normal_motion(rng, cfg, template)
        kp += rng.uniform(-cfg.noise, cfg.noise, size=kp.shape)
        train.append(PoseSequence(f"train_{i:03d}", kp))
    lo, hi = cfg.period_range
    for i, ss in enumerate(test_ss.spawn(cfg.n_test)):
        rng = np.random.default_rng(ss)
        kp = _normal_motion(rng, cfg, template)
        labels = np.zeros(cfg.n_frames, dtype=np.int8)
        vid = f"test_{i:03d}"
        segments[vid] = []
        for start in _segment_starts(rng, cfg.n_frames, cfg.n_segments(), cfg.segment_len):
            period = _whole_period(cfg.segment_len, float(rng.uniform(lo, hi)), lo, hi)
            kind = ANOMALY_KINDS[int(rng.integers(len(ANOMALY_KINDS)))]
            _plant_anomaly(kp, start, cfg.segment_len, period, kind, cfg.anomaly_amplitude, rng)
            labels[start:start + cfg.segment_len] = 1
            segments[vid].append((start, cfg.segment_len, period, kind))
        kp += rng.uniform(-cfg.noise, cfg.noise, size=kp.shape)
        test.append(PoseSequence(vid, kp, labels))
    return SyntheticDataset(train, test, cfg, segments)


def iter_frames(seqs: Sequence[PoseSequence]) -> Iterator[tuple[str, int, np.ndarray]]:
    for s in seqs:
        for i, kp in enumerate(s.keypoints):
            yield s.video_id, s.start_index + i, kp
