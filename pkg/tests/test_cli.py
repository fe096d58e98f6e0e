import csv
import filecmp

import pytest

from scch.cli import main
from scch.config import parse_kv
from scch.synthetic import default_roster, roster_hash

OVERFIT_ROSTER = """\
image_size=32
jitter=0
levels=0.2,0.16,0.16,0.16,0.16,0.16
au=0 blob 20,24
au=1 ridge 32,48
au=2 blob 18,36 46,36
"""

OVERFIT_CONFIG = """\
# small model, trained to memorise eight samples
encoder_channels=8,16,16
deconv_channels=8
scc_k=3
epochs=150
batch_size=8
learning_rate=0.003
eval_every=0
"""


def manifest(path):
    return parse_kv((path / "run_manifest.txt").read_text())


def same_tree(a, b, ignore=("run_manifest.txt",)):
    cmp = filecmp.dircmp(a, b, ignore=list(ignore))
    if cmp.diff_files or cmp.left_only or cmp.right_only:
        return False
    return all(same_tree(a / d, b / d, ignore) for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["generate", "--out", str(out), "--n-train", "12", "--n-test", "8", "--seed", "5"]) == 0
    return out


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    (root / "roster.txt").write_text(OVERFIT_ROSTER)
    (root / "train.cfg").write_text(OVERFIT_CONFIG)
    assert main(["generate", "--out", str(root / "d"), "--n-train", "8", "--n-test", "0", "--spec", str(root / "roster.txt"), "--seed", "3"]) == 0
    assert main(["train", "--data", str(root / "d"), "--config", str(root / "train.cfg"), "--out", str(root / "r")]) == 0
    return root


def test_generate_is_byte_identical(tmp_path):
    args = ["--n-train", "5", "--n-test", "3", "--seed", "9"]
    assert main(["generate", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["generate", "--out", str(tmp_path / "b"), *args]) == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")
    assert len(list((tmp_path / "a" / "images").iterdir())) == 8


def test_generate_default_spec_recorded(small_data):
    m = parse_kv((small_data / "manifest.txt").read_text())
    assert m["spec_source"] == "default"
    assert m["spec_hash"] == roster_hash(default_roster())
    run = manifest(small_data)
    assert run["command"] == "generate" and run["seed"] == "5"
    assert "duration_seconds" in run


def test_generate_empty_train(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "d"), "--n-train", "0", "--n-test", "10"]) == 0
    m = parse_kv((tmp_path / "d" / "manifest.txt").read_text())
    assert m["n_train"] == "0" and m["n_test"] == "10"
    assert not list((tmp_path / "d" / "images").glob("train_*"))


def test_out_collision_needs_force(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["generate", "--out", str(out), "--n-train", "1", "--n-test", "1"]) == 0
    assert main(["generate", "--out", str(out), "--n-train", "1", "--n-test", "1"]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["generate", "--out", str(out), "--n-train", "2", "--n-test", "1", "--force"]) == 0
    assert parse_kv((out / "manifest.txt").read_text())["n_train"] == "2"


def test_invalid_spec_is_usage_error(tmp_path):
    (tmp_path / "bad.txt").write_text("au=0 star 10,10\n")
    assert main(["generate", "--out", str(tmp_path / "d"), "--spec", str(tmp_path / "bad.txt")]) == 2


def test_missing_files_are_io_errors(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "none.scch"), "--data", str(tmp_path)]) == 3


def test_unknown_config_key_fails_fast(tmp_path, small_data):
    (tmp_path / "c.cfg").write_text("epochs=1\nlearning_rat=0.1\n")
    assert main(["train", "--data", str(small_data), "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "r")]) == 2
    assert not (tmp_path / "r").exists()


def test_config_disagreeing_with_data_fails(tmp_path, small_data):
    (tmp_path / "c.cfg").write_text("num_maps=3\n")
    assert main(["train", "--data", str(small_data), "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "r")]) == 2


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as err:
        main(["gradcheck", "--scope", "everything"])
    assert err.value.code == 2


def test_gradcheck_ops_passes(tmp_path):
    assert main(["gradcheck", "--scope", "ops", "--tol", "1e-3", "--out", str(tmp_path / "g")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "g" / "gradcheck.csv")))
    assert {"conv2d", "deconv2d", "relu", "mse", "max_aggregate", "edge_conv_dense_both", "edge_conv_pointwise_both"} <= {r["op"] for r in rows}


def test_gradcheck_failure_exit_4_lists_ops(capsys):
    assert main(["gradcheck", "--scope", "ops", "--tol", "1e-12"]) == 4
    err = capsys.readouterr().err
    assert "failing op conv2d" in err and "max relative error" in err


def test_train_writes_artifacts_and_manifest(tmp_path, small_data):
    (tmp_path / "c.cfg").write_text("epochs=1\nbatch_size=12\nencoder_channels=4,8,8\ndeconv_channels=6\nscc_k=3\nseed=2\n")
    out = tmp_path / "r"
    assert main(["train", "--data", str(small_data), "--config", str(tmp_path / "c.cfg"), "--out", str(out)]) == 0
    for name in ("loss_curve.csv", "loss_curve.png", "model.scch", "eval.csv", "eval.jsonl", "run_manifest.txt"):
        assert (out / name).exists(), name
    m = manifest(out)
    assert m["config.seed"] == "2" and m["config.epochs"] == "1" and m["config.scc_k"] == "3"
    assert "model.scch" in m["artifacts"].split(",")


def test_eval_on_overfit_oracle_gives_icc_near_one(overfit, tmp_path, capsys):
    out = tmp_path / "e"
    assert main(["eval", "--checkpoint", str(overfit / "r" / "model.scch"), "--data", str(overfit / "d"), "--split", "train", "--out", str(out)]) == 0
    rows = {r["au"]: r for r in csv.DictReader(open(out / "eval.csv"))}
    assert float(rows["avg"]["icc"]) > 0.95
    assert (out / "eval.png").exists()


def test_eval_empty_split_is_usage_error(overfit):
    assert main(["eval", "--checkpoint", str(overfit / "r" / "model.scch"), "--data", str(overfit / "d")]) == 2


@pytest.mark.parametrize("what", ["heatmaps", "weights", "responses", "graph"])
def test_dump_outputs(overfit, tmp_path, what):
    out = tmp_path / what
    image = overfit / "d" / "images" / "train_00000.pgm"
    assert main(["dump", "--checkpoint", str(overfit / "r" / "model.scch"), "--what", what, "--input", str(image), "--out", str(out)]) == 0
    assert (out / "run_manifest.txt").exists()
    if what == "graph":
        rows = list(csv.DictReader(open(out / "graph_trace.csv")))
        # three SCC layers over 8 channels with k = 3
        assert len(rows) == 3 * 8 * 3
    if what == "weights":
        assert len((out / "pattern_weights.csv").read_text().splitlines()) == 1 + 8 * 4
        assert (out / "pattern_weights.png").exists()
    if what == "heatmaps":
        assert len(list(out.glob("pred_*.pgm"))) == 4
        assert (out / "decoded.csv").exists()


def test_dump_needs_matching_input(overfit, small_data, tmp_path):
    ckpt = str(overfit / "r" / "model.scch")
    assert main(["dump", "--checkpoint", ckpt, "--what", "graph", "--out", str(tmp_path / "a")]) == 2
    big = small_data / "images" / "train_00000.pgm"
    assert main(["dump", "--checkpoint", ckpt, "--what", "graph", "--input", str(big), "--out", str(tmp_path / "b")]) == 2


def test_ablate_small_grid(tmp_path, small_data):
    (tmp_path / "grid.cfg").write_text("scc=on,off\nedge_variant=both\nepochs=1\nbatch_size=12\nencoder_channels=4,8,8\ndeconv_channels=6\nk=3\n")
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(small_data), "--grid", str(tmp_path / "grid.cfg"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["scc"] for r in rows] == ["on", "off"] and all(r["status"] == "ok" for r in rows)
    deltas = list(csv.DictReader(open(out / "ablation_deltas.csv")))
    assert deltas[0]["comparison"] == "scc:True-False"
    assert (out / "ablation.png").exists()
