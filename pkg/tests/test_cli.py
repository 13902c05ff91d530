import json

import cv2
import numpy as np
import pytest

from ctxisp import cli
from ctxisp import data as D
from ctxisp import train as TR


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    code = cli.main(["prep-synth", "--scenes", "2", "--size", "256,256", "--patch-size", "64",
                     "--noise", "0", "--out", str(root / "ds")])
    assert code == 0
    return root / "ds" / "manifest.json"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--data", str(dataset), "--out", str(out), "--steps", "4", "--batch-size", "2",
                     "--guide-size", "16,16"])
    assert code == 0
    return out


def parse_table(text):
    lines = [l.split("\t") for l in text.strip().splitlines()]
    return lines[0], lines[1:]


# --- prep-synth ----------------------------------------------------------------------

def test_prep_synth_two_scenes(dataset):
    doc = json.loads(dataset.read_text())
    assert len(doc["scenes"]) == 2
    assert sorted(s["split"] for s in doc["scenes"]) == ["test", "train"]
    assert len(doc["patches"]) == 32
    assert all(not s["raw"].startswith("/") for s in doc["scenes"])


def test_prep_synth_is_deterministic(dataset, tmp_path, capsys):
    code, out, err = run(capsys, "prep-synth", "--scenes", 2, "--size", "256,256", "--patch-size", 64,
                         "--noise", 0, "--out", tmp_path / "again")
    assert code == 0
    assert (tmp_path / "again/manifest.json").read_bytes() == dataset.read_bytes()
    assert out.splitlines()[0].split("\t") == ["scenes", "2", "train", "1", "test", "1"]
    assert "# scenes=2" in err


@pytest.mark.parametrize("argv", [
    ["prep-synth", "--scenes", "0", "--out", "x"],
    ["prep-synth", "--scenes", "1", "--out", "x"],
    ["prep-synth", "--scenes", "2"],
    ["prep-synth", "--scenes", "2", "--size", "255,256", "--out", "x"],
    ["train", "--data", "m.json"],
    ["nonsense"],
    ["stats", "--width", "abc"],
])
def test_usage_errors_exit_2(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert "error" in err


def test_help_exits_0(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0
    assert "prep-synth" in out


# --- config overlay -------------------------------------------------------------------

def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "model.cfg"
    cfg.write_text("# a comment\nwidth = 16\nproj_hidden=8\n")
    code, out, err = run(capsys, "stats", "--config", cfg, "--proj-hidden", 32)
    assert code == 0
    assert "# width=16" in err          # from the file
    assert "# proj_hidden=32" in err    # flag beats file
    assert "# k=64" in err              # default
    code2, out2, _ = run(capsys, "stats", "--width", 16, "--proj-hidden", 32)
    assert out == out2


def test_config_file_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate=1\n")
    assert run(capsys, "stats", "--config", bad)[0] == 2
    bad.write_text("just words\n")
    assert run(capsys, "stats", "--config", bad)[0] == 2
    bad.write_text("width=wide\n")
    assert run(capsys, "stats", "--config", bad)[0] == 2
    assert run(capsys, "stats", "--config", tmp_path / "missing.cfg")[0] == 2


# --- stats -----------------------------------------------------------------------------

def stats(capsys, *argv):
    code, out, _ = run(capsys, "stats", *argv)
    assert code == 0
    _, rows = parse_table(out)
    return {k: float(v) for k, v in rows}


def test_stats_default_model(capsys):
    s = stats(capsys)
    assert 45e3 <= s["params"] <= 85e3
    assert abs(s["macs@448x448"] - 8.42e9) <= 0.3 * 8.42e9


def test_stats_single_conv_closed_form(capsys):
    s = stats(capsys, "--conv", "3,8,3", "--size", "10,12")
    assert s["params"] == 8 * 3 * 9 + 8
    assert s["macs@10x12"] == 8 * 3 * 9 * 8 * 10
    s = stats(capsys, "--conv", "16,16,3,2,1,4")
    assert s["macs@448x448"] == 16 * 4 * 9 * 224 * 224
    assert run(capsys, "stats", "--conv", "3,8")[0] == 2


def test_stats_macs_affine_in_area(capsys):
    m = {n: stats(capsys, "--size", f"{n},{n}")[f"macs@{n}x{n}"] for n in (224, 896)}
    m[448] = stats(capsys)["macs@448x448"]
    # the guide encoder is a constant offset, everything else grows with H*W
    assert (m[896] - m[448]) == pytest.approx(4 * (m[448] - m[224]), rel=1e-12)


# --- train / eval ---------------------------------------------------------------------------

def test_train_outputs(trained):
    assert (trained / "last.ckpt").exists()
    assert (trained / "config.txt").read_text().count("=") > 10
    log = (trained / "train.log").read_text().splitlines()
    assert log[0].split("\t")[:3] == ["epoch", "step", "lr"]
    assert len(log) == 5
    header, rows = parse_table((trained / "metrics_test.tsv").read_text())
    assert header == ["image_id", "psnr", "ssim", "de00"]
    assert rows[-1][0] == "mean" and len(rows) == 17
    state = TR.load_checkpoint(trained / "last.ckpt")
    assert state.step == 4


def test_eval_loads_checkpoint_and_is_deterministic(trained, dataset, capsys, tmp_path):
    code, out, _ = run(capsys, "eval", "--ckpt", trained / "last.ckpt", "--data", dataset, "--out", tmp_path / "a.tsv")
    assert code == 0
    code, out2, _ = run(capsys, "eval", "--ckpt", trained / "last.ckpt", "--data", dataset)
    assert out == out2 == (tmp_path / "a.tsv").read_text()
    assert (trained / "eval_test.tsv").read_text() == out
    _, rows = parse_table(out)
    body = np.array([[float(v) for v in r[1:]] for r in rows[:-1]])
    mean = np.array([float(v) for v in rows[-1][1:]])
    np.testing.assert_allclose(body.mean(axis=0), mean, atol=1e-3)


def test_eval_runtime_errors(trained, dataset, capsys, tmp_path):
    assert run(capsys, "eval", "--ckpt", tmp_path / "none.ckpt", "--data", dataset)[0] == 1
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all")
    code, _, err = run(capsys, "eval", "--ckpt", tmp_path / "junk.ckpt", "--data", dataset)
    assert code == 1 and "magic" in err
    assert run(capsys, "eval", "--ckpt", trained / "last.ckpt", "--data", dataset, "--split", "val")[0] == 2


def test_train_resume_matches_straight_run(dataset, tmp_path, capsys):
    common = ["--data", dataset, "--batch-size", 2, "--guide-size", "16,16", "--split", "none"]
    assert run(capsys, "train", *common, "--out", tmp_path / "a", "--steps", 6)[0] == 0
    assert run(capsys, "train", *common, "--out", tmp_path / "b", "--steps", 3)[0] == 0
    assert run(capsys, "train", *common, "--out", tmp_path / "b", "--steps", 6,
               "--resume", tmp_path / "b/last.ckpt")[0] == 0
    assert (tmp_path / "a/last.ckpt").read_bytes() == (tmp_path / "b/last.ckpt").read_bytes()
    log = (tmp_path / "b/train.log").read_text().splitlines()
    assert [int(r.split("\t")[1]) for r in log[1:]] == [1, 2, 3, 4, 5, 6]


def test_train_same_seed_same_checkpoint(dataset, tmp_path, capsys, trained):
    assert run(capsys, "train", "--data", dataset, "--out", tmp_path / "c", "--steps", 4, "--batch-size", 2,
               "--guide-size", "16,16")[0] == 0
    assert (tmp_path / "c/last.ckpt").read_bytes() == (trained / "last.ckpt").read_bytes()


# --- infer ---------------------------------------------------------------------------

def read_rgb8(path):
    return cv2.imread(str(path), cv2.IMREAD_UNCHANGED)[..., ::-1]


def test_infer_constant_mosaic(trained, tmp_path, capsys):
    D.write_pgm(tmp_path / "flat.pgm", np.full((64, 96), 400, dtype=np.uint16))
    code, out, _ = run(capsys, "infer", "--ckpt", trained / "last.ckpt", "--raw", tmp_path / "flat.pgm",
                       "--meta", "black=64,white=1023", "--out", tmp_path / "flat.png")
    assert code == 0
    img = read_rgb8(tmp_path / "flat.png")
    assert img.shape == (64, 96, 3)
    interior = img[8:-8, 8:-8].reshape(-1, 3)
    assert (interior == interior[0]).all()


def test_infer_tiled_matches_whole(trained, dataset, tmp_path, capsys):
    scene = json.loads(dataset.read_text())["scenes"][0]
    raw = dataset.parent / scene["raw"]
    ckpt = trained / "last.ckpt"
    # sibling .json next to the mosaic supplies the levels
    assert run(capsys, "infer", "--ckpt", ckpt, "--raw", raw, "--out", tmp_path / "whole.png")[0] == 0
    assert run(capsys, "infer", "--ckpt", ckpt, "--raw", raw, "--out", tmp_path / "tiled.png",
               "--tile", 96, "--overlap", 16)[0] == 0
    whole = read_rgb8(tmp_path / "whole.png").astype(int)
    tiled = read_rgb8(tmp_path / "tiled.png").astype(int)
    assert np.abs(whole - tiled).max() <= 1


def test_infer_meta_sources_agree(trained, dataset, tmp_path, capsys):
    scene = json.loads(dataset.read_text())["scenes"][0]
    raw = dataset.parent / scene["raw"]
    meta_file = tmp_path / "levels.json"
    meta_file.write_text(json.dumps({"black_level": 64, "white_level": 1023}))
    run(capsys, "infer", "--ckpt", trained / "last.ckpt", "--raw", raw, "--out", tmp_path / "a.png",
        "--meta", meta_file)
    run(capsys, "infer", "--ckpt", trained / "last.ckpt", "--raw", raw, "--out", tmp_path / "b.png",
        "--meta", "black=64,white=1023")
    np.testing.assert_array_equal(read_rgb8(tmp_path / "a.png"), read_rgb8(tmp_path / "b.png"))


def test_infer_errors(trained, tmp_path, capsys):
    code, _, err = run(capsys, "infer", "--ckpt", trained / "last.ckpt", "--raw", tmp_path / "missing.pgm",
                       "--out", tmp_path / "o.png")
    assert code == 1
    assert "missing.pgm" in err and "Traceback" not in err
    D.write_pgm(tmp_path / "r.pgm", np.zeros((32, 32), dtype=np.uint16))
    assert run(capsys, "infer", "--ckpt", trained / "last.ckpt", "--raw", tmp_path / "r.pgm",
               "--out", tmp_path / "o.png", "--tile", 16, "--overlap", 16)[0] == 2
    assert run(capsys, "infer", "--ckpt", trained / "last.ckpt", "--raw", tmp_path / "r.pgm",
               "--out", tmp_path / "o.png", "--meta", "nonsense")[0] == 2


# --- gradcheck -----------------------------------------------------------------------

def test_gradcheck_subset_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--only", "gelu,add,conv2d_pointwise", "--seeds", 3)
    assert code == 0
    header, rows = parse_table(out)
    assert header == ["case", "max_rel_error", "tolerance", "result"]
    assert [r[0] for r in rows] == ["add", "conv2d_pointwise", "gelu"]
    assert all(r[3] == "pass" for r in rows)


def test_gradcheck_absurd_tolerance_fails(capsys):
    code, out, _ = run(capsys, "gradcheck", "--only", "gelu,sigmoid", "--seeds", 2, "--tol", "1e-15")
    assert code == 1
    _, rows = parse_table(out)
    assert all(r[3] == "FAIL" and float(r[1]) > 1e-15 for r in rows)


def test_gradcheck_unknown_case(capsys):
    assert run(capsys, "gradcheck", "--only", "warp_drive")[0] == 2
