import csv
import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from posevad.cli import SCORE_COLUMNS, main, read_scores_csv
from posevad.data import load_pose_sequence, write_pose_sequence
from posevad.fusion import FusionWeights, TrainStats

GOLDEN = Path(__file__).parent / "golden"
TINY = str(GOLDEN / "tiny_config.json")
CHAIN = ("synth", "train", "score", "eval", "gridsearch")


def run(out, *argv, config=TINY):
    args = (["--config", config] if config else []) + ["--out", str(out), *argv]
    return main(args)


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    runs = []
    for name in ("a", "b"):
        out = root / name
        for verb in CHAIN:
            assert run(out, verb) == 0, verb
        runs.append(out)
    return runs


# ---------------------------------------------------------------- happy path


def test_synth_train_outputs(chain):
    out = chain[0]
    assert len(list((out / "data" / "train").glob("*.pose"))) == 6
    assert len(list((out / "data" / "test").glob("*.pose"))) == 3
    ck = out / "checkpoints"
    assert sorted(p.name for p in ck.iterdir()) == ["pp.ckpt", "pr.ckpt", "rd.ckpt", "train_stats.json"]
    for s in ("pr", "pp", "rd"):
        with open(out / "reports" / f"loss_{s}.csv") as fh:
            losses = [float(r["loss"]) for r in csv.DictReader(fh)]
        assert len(losses) == 3 and losses[-1] < losses[0], s
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["synth"]["n_frames"] == 160 and cfg["optim"]["lr"] == 0.004


def test_reruns_are_byte_identical(chain):
    a, b = (tree_bytes(r) for r in chain)
    assert a.keys() == b.keys()
    assert "reports/eval.png" in a and "reports/loss_curves.png" in a
    for k in a:
        assert a[k] == b[k], k


def test_score_csv_rows_and_fused_column(chain):
    out = chain[0]
    with open(out / "scores" / "scores.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == SCORE_COLUMNS
    per_video = {}
    for r in rows[1:]:
        per_video.setdefault(r[0], []).append(int(r[1]))
    for vid, idx in per_video.items():
        n = len(load_pose_sequence(out / "data" / "test" / f"{vid}.pose"))
        assert idx == list(range(n))
    raw = json.loads((out / "checkpoints" / "train_stats.json").read_text())
    st = TrainStats(raw["mu_pr"], raw["sigma_pr"], raw["mu_pp"], raw["sigma_pp"])
    w = FusionWeights()
    for r in rows[1:]:
        p, q, d, S = map(float, r[2:6])
        expect = w.alpha * (p - st.mu_pr) / st.sigma_pr + w.beta * (q - st.mu_pp) / st.sigma_pp + w.gamma * d
        assert abs(S - expect) < 1e-12


def test_eval_matches_golden_report(chain):
    rep = chain[0] / "reports"
    assert (rep / "eval.txt").read_bytes() == (GOLDEN / "tiny_eval.txt").read_bytes()
    assert (rep / "eval.json").read_bytes() == (GOLDEN / "tiny_eval.json").read_bytes()


def test_eval_macro_is_mean_of_its_table(chain):
    rep = json.loads((chain[0] / "reports" / "eval.json").read_text())
    assert rep["macro_auroc"] == np.mean(list(rep["per_video_auroc"].values()))
    scores, fused, _ = read_scores_csv(chain[0] / "scores" / "scores.csv")
    assert len(fused) == 3 and scores.labels is not None


def test_gridsearch_not_worse_than_default(chain):
    best = json.loads((chain[0] / "reports" / "best_weights.json").read_text())
    assert best["micro_auroc"] >= best["default_micro_auroc"]
    with open(chain[0] / "reports" / "gridsearch.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 7 ** 3 - 1


def test_commands_do_not_mutate_inputs(chain, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(chain[0], out)
    digest = lambda: {k: hashlib.sha256(v).hexdigest() for k, v in tree_bytes(out / "data").items()}
    before = digest()
    ck_before = tree_bytes(out / "checkpoints")
    for verb in ("score", "eval", "gridsearch"):
        assert run(out, verb) == 0
    assert digest() == before and tree_bytes(out / "checkpoints") == ck_before


def _write_scores(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        w.writerows(rows)


def test_perfect_separation_csv(tmp_path, capsys):
    p = tmp_path / "perfect.csv"
    _write_scores(p, [("v", i, s, s, s, s, lab) for i, (s, lab) in enumerate([(0.0, 0), (0.1, 0), (0.9, 1), (1.0, 1)])])
    assert run(tmp_path / "r", "eval", "--scores", str(p), config=None) == 0
    rep = json.loads((tmp_path / "r" / "reports" / "eval.json").read_text())
    assert rep["micro_auroc"] == 1.0 and rep["macro_auroc"] == 1.0
    assert "micro_auroc: 1.000000" in capsys.readouterr().out


def test_ablate_writes_full_grid(tmp_path):
    for name in ("a", "b"):
        assert run(tmp_path / name, "ablate") == 0
    with open(tmp_path / "a" / "reports" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 7
    assert {(r["T"], r["d"]) for r in rows} == {("4", "2"), ("8", "2"), ("4", "3"), ("8", "3")}
    assert all(r["error"] == "" for r in rows)
    assert tree_bytes(tmp_path / "a" / "reports") == tree_bytes(tmp_path / "b" / "reports")


def test_single_stream_train_and_score(tmp_path):
    out = tmp_path / "pp_only"
    assert run(out, "synth") == 0
    assert run(out, "train", "--streams", "pp") == 0
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["pp.ckpt", "train_stats.json"]
    assert run(out, "score", "--sim-matrix") == 0
    scores, _, _ = read_scores_csv(out / "scores" / "scores.csv")
    assert scores.pr is None and scores.rd is None
    assert not list((out / "scores").glob("simmatrix_*"))


def test_similarity_matrix_export(chain, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(chain[0], out)
    assert run(out, "score", "--sim-matrix") == 0
    M = np.loadtxt(out / "scores" / "simmatrix_test_000.txt")
    assert M.shape == (16, 16)
    np.testing.assert_allclose(M.sum(axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- exit codes


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["--set", "nosuch.key=1", "synth"],
    ["--set", "synth.anomaly_fraction=0.9999", "synth"],
    ["--set", "model.T=abc", "synth"],
    ["--seed", "-3", "synth"],
    ["train", "--streams", "pr,xx"],
])
def test_usage_errors_exit_1(tmp_path, argv):
    assert run(tmp_path / "r", *argv) == 1


def test_io_errors_exit_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(blocker / "sub", "synth") == 2
    assert run(tmp_path / "r", "synth", config=str(tmp_path / "nope.json")) == 2
    assert run(tmp_path / "empty", "train") == 2
    assert run(tmp_path / "empty", "score") == 2
    assert run(tmp_path / "empty", "eval") == 2


def test_labeled_training_data_exits_3(chain, tmp_path):
    out = tmp_path / "r"
    shutil.copytree(chain[0] / "data", out / "data")
    shutil.copy(chain[0] / "data" / "test" / "test_000.pose", out / "data" / "train" / "x.pose")
    assert run(out, "train") == 3


def test_divergence_exits_4(chain, tmp_path):
    out = tmp_path / "r"
    shutil.copytree(chain[0] / "data", out / "data")
    assert run(out, "--set", "optim.lr=1e200", "train", "--streams", "pr") == 4


def test_checkpoint_data_mismatch_exits_5(chain, tmp_path, capsys):
    other = tmp_path / "d3"
    assert run(other, "--set", "synth.d=3", "synth") == 0
    out = tmp_path / "r"
    shutil.copytree(chain[0], out)
    capsys.readouterr()
    assert run(out, "--set", f"data.test_dir={other / 'data' / 'test'}", "score") == 5
    assert "d=2" in capsys.readouterr().err
    (out / "checkpoints" / "pr.ckpt").write_bytes(b"not a checkpoint")
    assert run(out, "score") == 5


def test_missing_labels_exits_6(chain, tmp_path):
    p = tmp_path / "nolab.csv"
    _write_scores(p, [("v", i, 0.1 * i, 0.1, 0.2, 0.3, "") for i in range(4)])
    assert run(tmp_path / "r", "eval", "--scores", str(p), config=None) == 6
    out = tmp_path / "g"
    shutil.copytree(chain[0], out)
    assert run(out, "gridsearch", "--scores", str(p)) == 6
    one_class = tmp_path / "one.csv"
    _write_scores(one_class, [("v", i, 0.1, 0.1, 0.2, 0.3, 0) for i in range(4)])
    assert run(tmp_path / "r", "eval", "--scores", str(one_class), config=None) == 6


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "posevad", "--out", str(tmp_path / "r"), "bogus"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 1 and "invalid choice" in res.stderr


def test_written_pose_files_round_trip(chain, tmp_path):
    src = chain[0] / "data" / "test" / "test_001.pose"
    seq = load_pose_sequence(src)
    write_pose_sequence(seq, tmp_path / "x.pose")
    assert (tmp_path / "x.pose").read_bytes() == src.read_bytes()
