import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from posevad.data import (
    PoseSequence,
    SynthConfig,
    Window,
    _plant_anomaly,
    normalize_pose,
    synth_dataset,
)
from posevad.numkit import DimensionError, UsageError, grad_check
from posevad.pipeline import score_rd_video
from posevad.rd_stream import (
    LabeledWindow,
    RDHyper,
    RDModel,
    align_rows,
    embed_frames,
    format_matrix,
    init_rd_params,
    make_repetition_corpus,
    pairwise_sq_dists,
    rd_loss_and_grads,
    score_rd,
    score_rd_batch,
    self_similarity,
    similarity_matrix,
    train_rd,
)

GOLDEN = Path(__file__).parent / "golden"


def _model(T=4, K=2, d=2, e=3, hidden=3, seed=0, use_velocity=True):
    p = init_rd_params(np.random.default_rng(seed), K, d, T, e, hidden, use_velocity)
    return RDModel(p, K, d, T, e, use_velocity)


def _window(T=4, K=2, d=2, seed=1):
    return Window("v", 0, normalize_pose(np.random.default_rng(seed).normal(size=(T, K, d))))


# ---------------------------------------------------------------- embedder


def test_zero_embedder_gives_zero_embeddings():
    m = _model()
    for k in ("emb1.W", "emb1.b", "emb2.W", "emb2.b"):
        m.params[k] = np.zeros_like(m.params[k])
    assert np.all(embed_frames(m, _window()) == 0)
    np.testing.assert_array_equal(similarity_matrix(m, _window()), np.full((4, 4), 0.25))


def test_identical_frames_give_identical_embeddings():
    m = _model(use_velocity=False)
    frame = _window().frames[0]
    x = embed_frames(m, Window("v", 0, np.repeat(frame[None], 4, axis=0)))
    assert np.all(x == x[0])


def test_embedding_shape_errors():
    m = _model()
    with pytest.raises(DimensionError):
        embed_frames(m, _window(K=3))
    with pytest.raises(DimensionError):
        score_rd(m, _window(T=5))


def _golden_model():
    cfg = SynthConfig(n_train=2, n_test=1, n_frames=64, segment_len=16, seed=11)
    ds = synth_dataset(cfg)
    corpus = make_repetition_corpus(ds.train, 8, n_windows=20, loop_range=(2, 6), noise=0.1, seed=2)
    m = train_rd(corpus, RDHyper(epochs=3, batch_size=8, hidden_dim=6, seed=4, embed_dim=4,
                                 classifier_hidden=5))
    return m, corpus[0].window


def test_embeddings_match_golden_values():
    m, win = _golden_model()
    got = embed_frames(m, win)
    ref = np.loadtxt(GOLDEN / "rd_embeddings.txt")
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------- self-similarity


def test_self_similarity_examples():
    np.testing.assert_array_equal(self_similarity(np.ones((4, 3))), np.full((4, 4), 0.25))
    x = np.array([[0.0], [math.sqrt(math.log(2))]])
    np.testing.assert_allclose(self_similarity(x), [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-15)
    with pytest.raises(UsageError):
        self_similarity(np.ones((1, 3)))


@pytest.mark.parametrize("p", [3, 5, 8])
def test_periodic_embeddings_peak_at_period_multiples(p):
    T = 40
    t = np.arange(T)
    rng = np.random.default_rng(p)
    base = rng.normal(size=(p, 6))
    M = self_similarity(base[t % p] + 1e-3 * np.sin(t)[:, None])
    for i in range(T):
        row = M[i].copy()
        row[i] = -np.inf
        assert (int(np.argmax(row)) - i) % p == 0


emb = arrays(np.float64, st.tuples(st.integers(2, 16), st.integers(1, 6)), elements=st.floats(-5, 5))


@settings(max_examples=200)
@given(emb, arrays(np.float64, 6, elements=st.floats(-100, 100)))
def test_self_similarity_invariants(x, shift):
    D = pairwise_sq_dists(x)
    assert np.array_equal(D, D.T) and np.all(np.diag(D) == 0)
    M = self_similarity(x)
    np.testing.assert_allclose(M.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(M > 0)
    np.testing.assert_allclose(self_similarity(x + shift[:x.shape[1]]), M, atol=1e-12)


def test_align_rows_puts_diagonal_first():
    M = np.arange(16.0).reshape(4, 4)
    R = align_rows(M)
    np.testing.assert_array_equal(R[:, 0], np.diag(M))
    assert R[1, 3] == M[1, 0]


def test_format_matrix():
    text = format_matrix(np.array([[0.5, 0.5], [0.25, 0.75]]))
    assert text.splitlines() == ["5.000000e-01 5.000000e-01", "2.500000e-01 7.500000e-01"]


# ---------------------------------------------------------------- classifier and scores


def test_zero_classifier_scores_one_half():
    m = _model()
    m.params["cls2.W"][:] = 0
    m.params["cls2.b"][:] = 0
    np.testing.assert_array_equal(score_rd(m, _window()), np.full(4, 0.5))


def test_scores_are_probabilities_on_random_windows():
    m = _model(T=8, K=3, e=4, hidden=4, seed=3)
    rng = np.random.default_rng(0)
    wins = [Window("r", 0, rng.normal(scale=rng.uniform(0.01, 100), size=(8, 3, 2)))
            for _ in range(1000)]
    s = score_rd_batch(m, wins)
    assert s.shape == (1000, 8) and np.all((s >= 0) & (s <= 1))


def test_scores_do_not_depend_on_video_id():
    m = _model()
    w = _window()
    np.testing.assert_array_equal(score_rd(m, w), score_rd(m, Window("other", 7, w.frames)))


@pytest.mark.parametrize("use_velocity", [True, False])
def test_gradients_match_finite_differences(use_velocity):
    m = _model(use_velocity=use_velocity)
    rng = np.random.default_rng(5)
    frames = rng.normal(size=(3, 4, 2, 2))
    labels = rng.integers(0, 2, size=(3, 4)).astype(float)
    rep = grad_check(lambda p: rd_loss_and_grads(p, frames, labels, use_velocity), m.params)
    assert rep.max_rel_error < 1e-4, rep


# ---------------------------------------------------------------- synthetic corpus


@pytest.fixture(scope="module")
def normal_videos():
    return synth_dataset(SynthConfig(n_train=6, n_test=1, n_frames=256, segment_len=32, seed=1)).train


def test_corpus_fraction_and_loops(normal_videos):
    corpus = make_repetition_corpus(normal_videos, 32, n_windows=100, positive_fraction=0.5,
                                    loop_range=(4, 12), noise=0.1, seed=0)
    pos = [c for c in corpus if c.labels[0] == 1]
    assert len(pos) == 50
    assert all(np.all(c.labels == c.labels[0]) for c in corpus)
    for c in pos:
        L = c.loop_len
        assert 4 <= L <= 12
        f = c.window.frames
        # each frame and its loop copy carry independent noise of amplitude 0.1
        assert np.max(np.abs(f[L:] - f[:-L])) <= 0.2 + 1e-12


def test_corpus_rejects_short_videos(normal_videos):
    with pytest.raises(UsageError):
        make_repetition_corpus(normal_videos, 300)
    with pytest.raises(UsageError):
        make_repetition_corpus(normal_videos, 32, loop_range=(1, 8))


def test_positive_window_spectrum_matches_loop():
    # smooth, noise-free source motion: the tiled centre trace is a sawtooth-like
    # L-periodic signal whose fundamental dominates the spectrum
    cfg = SynthConfig(n_train=4, n_test=1, n_frames=256, segment_len=32, noise=0.0, seed=8)
    videos = synth_dataset(cfg).train
    corpus = make_repetition_corpus(videos, 64, n_windows=40, positive_fraction=1.0,
                                    loop_range=(6, 16), noise=0.0, seed=3)
    for c in corpus:
        trace = c.window.frames.mean(axis=1)[:, 1]
        x = trace - trace.mean()
        spec = np.abs(np.fft.rfft(x, n=4096))
        spec[0] = 0
        period = 4096 / np.argmax(spec)
        assert abs(period - c.loop_len) <= 1, (period, c.loop_len)


def test_training_rejects_bad_corpus():
    with pytest.raises(UsageError):
        train_rd([], RDHyper())
    w = _window()
    with pytest.raises(UsageError):
        train_rd([LabeledWindow(w, np.zeros(4, dtype=np.int8))], RDHyper())


@pytest.fixture(scope="module")
def trained(normal_videos):
    corpus = make_repetition_corpus(normal_videos, 32, n_windows=300, loop_range=(4, 16), seed=0)
    hyper = RDHyper(epochs=40, batch_size=30, hidden_dim=32, seed=0, embed_dim=16, classifier_hidden=16)
    return train_rd(corpus, hyper), corpus, hyper


def test_training_separates_corpus_and_is_deterministic(trained):
    m, corpus, hyper = trained
    s = score_rd_batch(m, [c.window for c in corpus])
    lab = np.stack([c.labels for c in corpus])
    assert s[lab == 1].mean() > s[lab == 0].mean() + 0.5
    m2 = train_rd(corpus, hyper)
    assert all(m.params[k].tobytes() == m2.params[k].tobytes() for k in m.params)


def test_planted_period8_segment_scores_higher(trained, tmp_path):
    m, _, _ = trained
    cfg = SynthConfig(n_train=1, n_test=1, n_frames=256, segment_len=64, seed=21)
    seq = synth_dataset(cfg).train[0]
    kp = seq.keypoints.copy()
    _plant_anomaly(kp, 96, 64, 8.0, "flap", 1.0, np.random.default_rng(0))
    s = score_rd_video(m, PoseSequence("p8", kp))
    inside = s[96:160].mean()
    outside = np.concatenate([s[:96], s[160:]]).mean()
    assert inside - outside >= 0.2, (inside, outside)
    m.save(tmp_path / "rd.ckpt")
    back = RDModel.load(tmp_path / "rd.ckpt")
    np.testing.assert_array_equal(score_rd_video(back, PoseSequence("p8", kp)), s)
