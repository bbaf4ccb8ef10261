import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from posevad.data import (
    ConfigError,
    DegeneratePoseError,
    PoseFormatError,
    PoseSequence,
    SynthConfig,
    load_directory,
    load_pose_sequence,
    normalize_pose,
    reassemble,
    synth_dataset,
    window_sequence,
    write_pose_sequence,
)


def _seq(N=5, K=3, d=2, labels=False, seed=0, vid="v0"):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 2, N) if labels else None
    return PoseSequence(vid, rng.normal(size=(N, K, d)), lab)


# ---------------------------------------------------------------- file format


@pytest.mark.parametrize("labels,d", [(False, 2), (True, 2), (True, 3)])
def test_round_trip_is_exact(tmp_path, labels, d):
    s = _seq(N=7, K=4, d=d, labels=labels)
    s.keypoints[0, 0, 0] = 1e-300
    s.keypoints[1, 1, 1] = -12345.678901234567
    path = tmp_path / "a.pose"
    write_pose_sequence(s, path)
    back = load_pose_sequence(path)
    assert back.video_id == s.video_id
    np.testing.assert_array_equal(back.keypoints, s.keypoints)
    if labels:
        np.testing.assert_array_equal(back.labels, s.labels)
    else:
        assert back.labels is None
    assert len(back) == len(path.read_text().splitlines()) - 1


def test_scientific_notation_is_accepted(tmp_path):
    p = tmp_path / "s.pose"
    p.write_text("# posevad-pose v1 video_id=s K=2 d=2 labels=0\n0,1e-3,2E2,-3.5e+1,4\n")
    np.testing.assert_array_equal(load_pose_sequence(p).keypoints[0], [[1e-3, 200.0], [-35.0, 4.0]])


def test_short_row_reports_line_and_keypoint_count(tmp_path):
    p = tmp_path / "bad.pose"
    p.write_text("# posevad-pose v1 video_id=b K=17 d=2 labels=0\n0," + ",".join(["0.5"] * 32) + "\n")
    with pytest.raises(PoseFormatError) as exc:
        load_pose_sequence(p)
    assert exc.value.line_no == 2
    assert "16 keypoints" in str(exc.value) and "K=17" in str(exc.value)


@pytest.mark.parametrize("body,line,needle", [
    ("0,1,2,3,4\n0,1,2,3,4\n", 3, "duplicate"),
    ("0,1,2,3,4\n2,1,2,3,4\n", 3, "missing"),
    ("0,1,2,3,x\n", 2, "could not convert"),
    ("0,1,2,3,nan\n", 2, "non-finite"),
    ("0,1,2,3,4\n\n", 3, "blank"),
])
def test_malformed_rows(tmp_path, body, line, needle):
    p = tmp_path / "m.pose"
    p.write_text("# posevad-pose v1 video_id=m K=2 d=2 labels=0\n" + body)
    with pytest.raises(PoseFormatError) as exc:
        load_pose_sequence(p)
    assert exc.value.line_no == line and needle in str(exc.value)


def test_bad_header_and_labels(tmp_path):
    p = tmp_path / "h.pose"
    p.write_text("x,y\n")
    with pytest.raises(PoseFormatError):
        load_pose_sequence(p)
    p.write_text("# posevad-pose v1 video_id=h K=2 d=2 labels=1\n0,1,2,3,4,7\n")
    with pytest.raises(PoseFormatError, match="label"):
        load_pose_sequence(p)


def test_load_directory_sorted(tmp_path):
    for vid in ("b", "a", "c"):
        write_pose_sequence(_seq(vid=vid), tmp_path / f"{vid}.pose")
    assert [s.video_id for s in load_directory(tmp_path)] == ["a", "b", "c"]


# ---------------------------------------------------------------- normalization


def test_normalize_known_frame():
    kp = np.array([[0.0, 0.0], [3.0, 4.0], [3.0, 0.0]])
    out = normalize_pose(kp)
    np.testing.assert_allclose(out, [[-0.3, -0.4], [0.3, 0.4], [0.3, -0.4]], atol=1e-15)


def test_normalized_pose_is_fixed_point():
    kp = np.array([[-0.3, -0.4], [0.3, 0.4], [0.0, 0.1]])
    np.testing.assert_allclose(normalize_pose(kp), kp, atol=1e-15)


def test_degenerate_pose():
    with pytest.raises(DegeneratePoseError):
        normalize_pose(np.ones((4, 2)))


pose = arrays(np.float64, st.tuples(st.integers(2, 8), st.sampled_from([2, 3])),
              elements=st.floats(-100, 100))


@settings(max_examples=200)
@given(pose, st.floats(0.01, 100), st.floats(-50, 50))
def test_normalization_invariances(kp, scale, shift):
    lo, hi = kp.min(0), kp.max(0)
    if np.linalg.norm(hi - lo) < 1e-3:
        return
    n = normalize_pose(kp)
    np.testing.assert_allclose(normalize_pose(n), n, atol=1e-12)
    np.testing.assert_allclose(normalize_pose(scale * kp + shift), n, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(n.max(0) - n.min(0)), 1.0, atol=1e-12)


# ---------------------------------------------------------------- windowing


def test_window_examples():
    s = _seq(N=63, K=2)
    assert window_sequence(s, 64, "train") == []
    (w,) = window_sequence(s, 64, "score")
    assert w.n_valid == 63
    np.testing.assert_array_equal(w.frames[63], w.frames[62])
    assert len(window_sequence(_seq(N=128, K=2), 64, "train")) == 2


@pytest.mark.parametrize("T", [4, 16, 64])
def test_score_windows_partition_every_length(T):
    rng = np.random.default_rng(T)
    base = rng.normal(size=(200, 2, 2))
    for N in range(1, 201):
        wins = window_sequence(PoseSequence("v", base[:N]), T, "score")
        owner = np.concatenate([np.arange(w.start, w.start + w.n_valid) for w in wins])
        np.testing.assert_array_equal(owner, np.arange(N))
        out = reassemble(wins, [np.arange(w.start, w.start + T, dtype=float) for w in wins], N)
        np.testing.assert_array_equal(out, np.arange(N, dtype=float))


# ---------------------------------------------------------------- synthetic data


SMALL = SynthConfig(n_train=3, n_test=4, n_frames=320, segment_len=64, seed=5)


def test_synth_is_deterministic():
    a, b = synth_dataset(SMALL), synth_dataset(SMALL)
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert x.keypoints.tobytes() == y.keypoints.tobytes()
    assert all(s.labels is None for s in a.train)
    assert a.segments == b.segments


def test_synth_seed_changes_data():
    a = synth_dataset(SMALL)
    b = synth_dataset(SynthConfig(n_train=3, n_test=4, n_frames=320, segment_len=64, seed=6))
    assert not np.array_equal(a.train[0].keypoints, b.train[0].keypoints)


def test_anomaly_fraction_within_one_segment():
    cfg = SynthConfig(n_train=1, n_test=5, n_frames=512, segment_len=40, anomaly_fraction=0.3)
    ds = synth_dataset(cfg)
    for s in ds.test:
        assert abs(s.labels.mean() - cfg.anomaly_fraction) <= cfg.segment_len / cfg.n_frames
        assert s.labels[:cfg.segment_len].sum() == 0


@pytest.mark.parametrize("kw", [
    {"anomaly_fraction": 0.9999},
    {"anomaly_fraction": 1.0},
    {"period_range": (3, 10)},
    {"period_range": (12, 8)},
    {"d": 4},
    {"n_train": 0},
])
def test_invalid_synth_config(kw):
    with pytest.raises(ConfigError):
        synth_dataset(SynthConfig(**kw))


def _dominant_period(trace: np.ndarray, pad: int = 4096) -> float:
    x = trace - trace.mean()
    spec = np.abs(np.fft.rfft(x, n=pad))
    spec[0] = 0.0
    return pad / int(np.argmax(spec))


def test_planted_period_matches_spectrum():
    cfg = SynthConfig(n_train=1, n_test=12, n_frames=512, segment_len=80, noise=0.0, seed=3)
    ds = synth_dataset(cfg)
    checked = 0
    for s in ds.test:
        # body-centred coordinates remove the slow wandering of the whole pose
        rel = s.keypoints - s.keypoints.mean(axis=1, keepdims=True)
        for start, L, period, kind in ds.segments[s.video_id]:
            seg = rel[start:start + L]
            if kind == "flap":
                trace = seg[:, 9, 1]
            elif kind == "bang":
                trace = seg[:, 0, 1]
            else:
                # signed projected shoulder width follows cos of the rotation angle
                trace = seg[:, 6, 0] - seg[:, 5, 0]
            assert abs(_dominant_period(trace) - period) <= 1.0, (s.video_id, kind, period)
            checked += 1
    assert checked >= 12
