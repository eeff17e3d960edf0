import csv
import hashlib
import io

import numpy as np
import pytest

from fine3d.checkpoint import Checkpoint
from fine3d.cli import main
from fine3d.config import load
from fine3d.data import read_fvol, write_fvol
from fine3d.model import SegModel

TINY = """\
model.volume_dims = 16,16,4
model.grid_cells = 2,2
model.crop_size = 8,8,4
model.window_size = 2,2,2
model.stages = 8/0/1, 8/2/2
model.fine_stages = 1
model.classes = 2
train.epochs = 2
train.iters_per_epoch = 3
data.marker_radius_range = 2,2
data.dependent_radius_range = 1,1
"""


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture
def data_dir(tmp_path, cfg_file):
    d = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg_file), "--out-dir", str(d), "--count", "3", "--seed", "1"]) == 0
    return d


@pytest.fixture
def trained(tmp_path, cfg_file, data_dir):
    ck = tmp_path / "run" / "model.ckpt"
    assert main(["train", "--config", str(cfg_file), "--data-dir", str(data_dir), "--out", str(ck)]) == 0
    return ck


# usage -------------------------------------------------------------------------

def test_usage_errors_exit_1(tmp_path, cfg_file, capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["gen-data", "--out-dir", str(tmp_path)]) == 1
    assert main(["gen-data", "--out-dir", str(tmp_path), "--count", "1", "--set", "model.nope=1"]) == 1
    assert main(["gen-data", "--config", str(tmp_path / "none.cfg"), "--out-dir", str(tmp_path), "--count", "1"]) == 1
    assert main(["gen-data", "--out-dir", str(tmp_path), "--count", "-1"]) == 1
    assert "error" in capsys.readouterr().err


# gen-data ----------------------------------------------------------------------

def test_gen_data_deterministic(tmp_path, cfg_file):
    runs = []
    for name in ("a", "b", "c"):
        seed = "5" if name != "c" else "6"
        d = tmp_path / name
        assert main(["gen-data", "--config", str(cfg_file), "--out-dir", str(d), "--count", "1", "--seed", seed]) == 0
        runs.append((digest(d / "vol_0000.fvol"), digest(d / "lab_0000.fvol")))
        assert (d / "resolved_config.txt").read_text() == load(cfg_file, [f"seed={seed}"]).render()
    assert runs[0] == runs[1] and runs[0] != runs[2]


def test_gen_data_count_zero(tmp_path, cfg_file):
    d = tmp_path / "empty"
    assert main(["gen-data", "--config", str(cfg_file), "--out-dir", str(d), "--count", "0"]) == 0
    assert not list(d.glob("*.fvol"))


def test_gen_data_pads_to_window_multiple(tmp_path, cfg_file):
    d = tmp_path / "pad"
    assert main(["gen-data", "--config", str(cfg_file), "--out-dir", str(d), "--count", "1",
                 "--set", "data.volume_dims=15,15,3"]) == 0
    vol, orig = read_fvol(d / "vol_0000.fvol")
    lab, lorig = read_fvol(d / "lab_0000.fvol")
    assert vol.shape == lab.shape == (16, 16, 4)
    assert orig == lorig == (15, 15, 3)
    assert not vol[15].any() and not lab[:, :, 3].any()


# train -------------------------------------------------------------------------

def test_train_epochs_zero_writes_initial_model(tmp_path, cfg_file, data_dir):
    ck = tmp_path / "init.ckpt"
    assert main(["train", "--config", str(cfg_file), "--data-dir", str(data_dir), "--out", str(ck),
                 "--set", "train.epochs=0"]) == 0
    model = SegModel(load(cfg_file).model)
    ckpt = Checkpoint.load(ck)
    assert ckpt.iteration == 0 and ckpt.losses == []
    for (n, arr), (m, p) in zip(ckpt.params, model.named_parameters()):
        assert n == m and arr.tobytes() == p.data.tobytes()


def test_train_prints_epochs_and_is_byte_identical(tmp_path, cfg_file, data_dir, capsys):
    blobs = []
    for name in ("a", "b"):
        ck = tmp_path / name / "m.ckpt"
        assert main(["train", "--config", str(cfg_file), "--data-dir", str(data_dir), "--out", str(ck)]) == 0
        blobs.append(ck.read_bytes())
        assert (ck.parent / "resolved_config.txt").exists()
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith("epoch")]
    assert len(lines) == 4 and lines[0].startswith("epoch 1 mean_loss ") and " lr " in lines[0]
    assert blobs[0] == blobs[1]


def test_train_resume_matches_uninterrupted(tmp_path, cfg_file, data_dir, trained):
    part = tmp_path / "part.ckpt"
    rest = tmp_path / "rest.ckpt"
    args = ["--config", str(cfg_file), "--data-dir", str(data_dir)]
    assert main(["train", *args, "--out", str(part), "--stop-after-epochs", "1"]) == 0
    assert Checkpoint.load(part).iteration == 3
    assert main(["train", *args, "--out", str(rest), "--resume", str(part)]) == 0
    a, b = Checkpoint.load(trained), Checkpoint.load(rest)
    assert b.iteration == a.iteration == 6
    assert np.abs(np.array(a.losses) - np.array(b.losses)).max() <= 1e-9
    for (_, x), (_, y) in zip(a.params, b.params):
        assert np.abs(x - y).max() <= 1e-9


def test_resume_with_other_model_config_is_error(tmp_path, cfg_file, data_dir, trained):
    code = main(["train", "--config", str(cfg_file), "--data-dir", str(data_dir), "--out", str(tmp_path / "x"),
                 "--resume", str(trained), "--set", "model.heads=1"])
    assert code == 2


@pytest.mark.parametrize("flag, ablation", [("no-volume-tokens", "no-volume-tokens"), ("no-memory", "no-memory")])
def test_ablate_flag_selects_variant(tmp_path, cfg_file, data_dir, flag, ablation):
    ck = tmp_path / f"{flag}.ckpt"
    assert main(["train", "--config", str(cfg_file), "--data-dir", str(data_dir), "--out", str(ck),
                 "--ablate", flag, "--set", "train.epochs=1"]) == 0
    assert Checkpoint.load(ck).run_config["model"]["ablation"] == ablation


def test_train_data_errors(tmp_path, cfg_file):
    empty = tmp_path / "nothing"
    empty.mkdir()
    base = ["train", "--config", str(cfg_file), "--out", str(tmp_path / "m.ckpt")]
    assert main(base + ["--data-dir", str(empty)]) == 2
    assert main(base + ["--data-dir", str(tmp_path / "missing")]) == 2
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "vol_0000.fvol").write_bytes(b"garbage")
    write_fvol(bad / "lab_0000.fvol", np.zeros((16, 16, 4), np.uint8))
    assert main(base + ["--data-dir", str(bad)]) == 2
    wrong = tmp_path / "wrong"
    wrong.mkdir()
    write_fvol(wrong / "vol_0000.fvol", np.zeros((8, 8, 4), np.float32))
    write_fvol(wrong / "lab_0000.fvol", np.zeros((8, 8, 4), np.uint8))
    assert main(base + ["--data-dir", str(wrong)]) == 2


def test_nan_input_is_numeric_failure(tmp_path, cfg_file):
    d = tmp_path / "nan"
    d.mkdir()
    vol = np.full((16, 16, 4), np.nan, np.float32)
    write_fvol(d / "vol_0000.fvol", vol)
    write_fvol(d / "lab_0000.fvol", np.zeros((16, 16, 4), np.uint8))
    assert main(["train", "--config", str(cfg_file), "--data-dir", str(d), "--out", str(tmp_path / "m")]) == 3


# eval --------------------------------------------------------------------------

def read_report(path):
    text = path.read_bytes()
    assert b"\r" not in text
    return list(csv.DictReader(io.StringIO(text.decode())))


def test_eval_report_and_rerun_identical(tmp_path, data_dir, trained):
    r1, r2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    assert main(["eval", "--checkpoint", str(trained), "--data-dir", str(data_dir), "--report", str(r1)]) == 0
    assert main(["eval", "--checkpoint", str(trained), "--data-dir", str(data_dir), "--report", str(r2)]) == 0
    assert r1.read_bytes() == r2.read_bytes()
    rows = read_report(r1)
    assert list(rows[0]) == ["volume_id", "class", "dice", "hd95"]
    ids = {r["volume_id"] for r in rows}
    assert {"0", "1", "2", "mean"} <= ids
    for r in rows:
        assert 0.0 <= float(r["dice"]) <= 1.0
        assert r["hd95"] == "undefined" or float(r["hd95"]) >= 0.0


def test_eval_errors(tmp_path, cfg_file, trained):
    empty = tmp_path / "nothing"
    empty.mkdir()
    rep = str(tmp_path / "r.csv")
    assert main(["eval", "--checkpoint", str(trained), "--data-dir", str(empty), "--report", rep]) == 2
    d = tmp_path / "d"
    main(["gen-data", "--config", str(cfg_file), "--out-dir", str(d), "--count", "1"])
    assert main(["eval", "--checkpoint", str(trained), "--data-dir", str(d), "--report", rep,
                 "--config", str(cfg_file), "--set", "model.heads=1"]) == 2
    assert main(["eval", "--checkpoint", str(trained), "--data-dir", str(d), "--report", rep,
                 "--config", str(cfg_file)]) == 0
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(trained.read_bytes()[:-3])
    assert main(["eval", "--checkpoint", str(bad), "--data-dir", str(d), "--report", rep]) == 2


def test_eval_perfect_oracle_checkpoint(tmp_path):
    # sigma = 0 and the dependent blob shares the class-1 marker intensity, so
    # "intensity > 1/2" is a perfect rule; it is wired into the level-0 path
    cfg_path = tmp_path / "oracle.cfg"
    cfg_path.write_text(TINY + "data.noise_sigma = 0.0\ndata.dependent_level = 1.0\ntrain.epochs = 0\n")
    d = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg_path), "--out-dir", str(d), "--count", "3"]) == 0
    cfg = load(cfg_path)
    model = SegModel(cfg.model)
    enc0 = model.encoder[0].down.lin
    enc0.weight.data[:] = 0.0
    enc0.weight.data[0, 0] = 1.0
    enc0.bias.data[:] = 0.0
    dec = model.decoder[-1]
    dec.up.lin.weight.data[:] = 0.0
    dec.up.lin.bias.data[:] = 0.0
    dec.mix.fc2.weight.data[:] = 0.0
    dec.mix.fc2.bias.data[:] = 0.0
    dec.head.weight.data[:] = 0.0
    dec.head.weight.data[0] = [-1.0, 1.0]
    dec.head.bias.data[:] = [0.5, -0.5]
    ck = tmp_path / "oracle.ckpt"
    Checkpoint.capture(model, cfg.as_dict(), None, None).save(ck)
    rep = tmp_path / "r.csv"
    assert main(["eval", "--checkpoint", str(ck), "--data-dir", str(d), "--report", str(rep)]) == 0
    rows = read_report(rep)
    assert [float(r["dice"]) for r in rows if r["volume_id"] == "mean"] == [1.0]
    assert all(float(r["hd95"]) == 0.0 for r in rows)


# attn --------------------------------------------------------------------------

def read_rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_attn_rows_sum_to_one_and_files(tmp_path, data_dir, trained):
    prefix = tmp_path / "maps" / "q"
    assert main(["attn", "--checkpoint", str(trained), "--volume", str(data_dir / "vol_0000.fvol"),
                 "--query", "3,4,1", "--out", str(prefix)]) == 0
    for stage in ("w_msa", "g_msa", "global_msa"):
        rows = read_rows(tmp_path / "maps" / f"q_{stage}.csv")
        assert abs(sum(float(r["weight"]) for r in rows) - 1.0) <= 1e-9
        pgm = (tmp_path / "maps" / f"q_{stage}.pgm").read_bytes()
        assert pgm.startswith(b"P5\n")
    glob = read_rows(tmp_path / "maps" / "q_global_msa.csv")
    assert len(glob) == 4 and all(float(r["weight"]) > 0 for r in glob)


def test_attn_cold_unseen_cells_get_exactly_zero(tmp_path, data_dir, trained):
    prefix = tmp_path / "cold"
    assert main(["attn", "--checkpoint", str(trained), "--volume", str(data_dir / "vol_0000.fvol"),
                 "--query", "12,3,2", "--out", str(prefix), "--cold"]) == 0
    rows = read_rows(tmp_path / "cold_global_msa.csv")
    # query cell (1, 0) is the only one visited
    weights = {(int(r["x"]), int(r["y"])): float(r["weight"]) for r in rows}
    assert weights[(1, 0)] == 1.0
    assert all(w == 0.0 for c, w in weights.items() if c != (1, 0))


def test_attn_query_outside_volume(tmp_path, data_dir, trained):
    base = ["attn", "--checkpoint", str(trained), "--volume", str(data_dir / "vol_0000.fvol"), "--out",
            str(tmp_path / "q")]
    assert main(base + ["--query", "16,0,0"]) == 1
    assert main(base + ["--query", "1,2"]) == 1
    assert main(base + ["--query", "a,b,c"]) == 1


# flops -------------------------------------------------------------------------

def test_flops_worked_example(tmp_path, capsys):
    out_csv = tmp_path / "f.csv"
    assert main(["flops", "--params", "N=8,N_u=64,N_v=1,N_w=1,N_wcap=8,M=27,c=16", "--csv", str(out_csv)]) == 0
    text = capsys.readouterr().out
    assert "594528" in text and "# convention:" in text
    rows = list(csv.DictReader(io.StringIO(out_csv.read_text())))
    total = [r for r in rows if r["stage"] == "total"][0]
    assert int(total["analytic"]) == 594_528
    assert float(total["ratio"]) == pytest.approx(32 / 33, abs=1e-6)


def test_flops_from_config_and_bound(cfg_file, capsys):
    assert main(["flops", "--config", str(cfg_file)]) == 0
    assert "N_wcap=4" in capsys.readouterr().out
    assert main(["flops", "--params", "N=8,N_u=64,N_wcap=8,M=27,c=16", "--max-intersections", "4"]) == 1
    assert main(["flops", "--params", "N=8,bogus=1"]) == 1
