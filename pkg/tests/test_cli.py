import csv

import pytest

from stereolidar.cli import main

SMALL = ["--set", "segnet.width=8", "--set", "segnet.tnet_dims=8,8,8", "--set", "segnet.head_dim=8",
         "--set", "train.steps=3", "--set", "train.pool=2", "--set", "train.holdout=1"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    common = ["--set", f"data_root={root / 'data'}", "--set", f"checkpoint={root / 'm.ckpt'}",
              "--set", f"out_dir={root / 'det'}", "--set", "synth.n_scenes=4", *SMALL]
    assert main(["gen-synth", *common]) == 0
    assert main(["train", *common]) == 0
    return root, common


def test_train_writes_checkpoint_and_loss_log(workdir):
    root, _ = workdir
    assert (root / "m.ckpt").stat().st_size > 0
    rows = list(csv.DictReader((root / "m.loss.csv").open()))
    assert [int(r["step"]) for r in rows] == [0, 1, 2]
    assert all(float(r["loss"]) > 0 for r in rows)


def test_resume_appends_to_loss_log(tmp_path, workdir):
    root, common = workdir
    ckpt = tmp_path / "r.ckpt"
    ckpt.write_bytes((root / "m.ckpt").read_bytes())
    log = tmp_path / "r.csv"
    args = [*common, "--set", f"checkpoint={ckpt}", "--loss-log", str(log)]
    assert main(["train", *args]) == 0
    assert main(["train", "--resume", *args]) == 0
    assert [int(r["step"]) for r in csv.DictReader(log.open())] == [0, 1, 2, 3, 4, 5]


def test_infer_and_eval(workdir, capsys):
    root, common = workdir
    assert main(["infer", *common]) == 0
    assert sorted(p.name for p in (root / "det").iterdir()) == [f"{i:06d}.txt" for i in range(4)]
    capsys.readouterr()
    assert main(["eval", *common, "--out", str(root / "report.txt")]) == 0
    report = capsys.readouterr().out
    assert "AP_iou3d_Car_moderate_R40:" in report and report == (root / "report.txt").read_text()


def test_eval_with_missing_frames_uses_intersection(workdir, tmp_path, capsys):
    root, common = workdir
    det = tmp_path / "partial"
    det.mkdir()
    (det / "000000.txt").write_text((root / "det" / "000000.txt").read_text())
    assert main(["eval", *common, "--det", str(det), "--single"]) == 0
    assert "num_gt" in capsys.readouterr().out


def test_debug_dump(workdir, tmp_path):
    _, common = workdir
    dump = tmp_path / "dump"
    assert main(["infer", *common, "--out", str(tmp_path / "o"), "--debug-dump", str(dump)]) == 0
    assert len(list(dump.glob("*.json"))) == 4


def test_exit_codes(workdir, tmp_path):
    root, common = workdir
    assert main(["infer", "--set", "xi=-5"]) == 2
    assert main(["infer", "--set", "bogus=1"]) == 2
    assert main(["infer", *common, "--set", f"checkpoint={tmp_path / 'none.ckpt'}"]) == 3
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX")
    assert main(["infer", *common, "--set", f"checkpoint={bad}"]) == 3
    assert main(["infer", *common, "--set", "box_head=learned"]) == 3
    assert main(["eval", *common, "--gt", str(tmp_path / "missing")]) == 3


def test_print_config(capsys):
    assert main(["bench-iou", "--pairs", "10", "--print-config"]) == 0
    out = capsys.readouterr().out
    assert "xi = -0.5" in out and "pairs_per_second:" in out


def test_gradcheck_single_seed(tmp_path, capsys):
    out = tmp_path / "g.csv"
    assert main(["gradcheck", "--seeds", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {r["status"] for r in rows} == {"ok"}
    assert {"matmul", "segnet_full", "residual_attention"} <= {r["case"] for r in rows}
