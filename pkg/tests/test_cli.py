import numpy as np
import pytest

from taskseg.annotations import PanopticDataset, write_dataset
from taskseg.cli import main

import auditcase
from gradcases import toy_config


@pytest.fixture
def toy_cfg(tmp_path):
    cfg = toy_config()
    cfg.contrastive.window = 2
    # synthetic scenes carry up to 4 things plus stuff
    cfg.model.num_text, cfg.model.num_queries = 8, 10
    path = tmp_path / "toy.txt"
    cfg.save(path)
    return path


def test_pipeline_semantic_eval(tmp_path, toy_cfg, capsys):
    data = tmp_path / "data"
    assert main(["synth-gen", "--seed", "1", "--count", "8", "--size", "32", "--out", str(data)]) == 0
    assert len(PanopticDataset(data)) == 8
    run = tmp_path / "run"
    assert main(["train", "--config", str(toy_cfg), "--data", str(data), "--out", str(run), "--iterations", "3"]) == 0
    ev = tmp_path / "eval"
    code = main(["eval", "--checkpoint", str(run / "model.ckpt"), "--data", str(data), "--task", "semantic",
                 "--out", str(ev)])
    assert code == 0
    lines = (ev / "metrics_semantic.tsv").read_text().splitlines()
    assert any(line.startswith("miou\t") for line in lines)
    assert "semantic:" in capsys.readouterr().out


def test_derive_gt_two_cars(tmp_path, two_car_label, classes, capsys):
    image = np.zeros((8, 8, 3), np.uint8)
    write_dataset(tmp_path / "d", classes, [("cars.png", image, two_car_label)])
    assert main(["derive-gt", "--data", str(tmp_path / "d"), "--task", "instance", "--image", "cars",
                 "--out", str(tmp_path / "out")]) == 0
    assert capsys.readouterr().out.split("\t")[:3] == ["cars", "instance", "2"]
    written = PanopticDataset(tmp_path / "out")
    assert [s.class_id for s in written.records[0].segments] == [0, 0]


def test_derive_gt_unknown_image(tmp_path, two_car_label, classes):
    write_dataset(tmp_path / "d", classes, [("cars.png", np.zeros((8, 8, 3), np.uint8), two_car_label)])
    assert main(["derive-gt", "--data", str(tmp_path / "d"), "--image", "nope"]) == 1


def test_audit_lists_merged_pair(tmp_path, capsys):
    pan, inst = auditcase.write_fixture(tmp_path)
    assert main(["audit", "--data", str(pan), "--instances", str(inst)]) == 0
    captured = capsys.readouterr()
    assert "street\tmerged\t1,2\tcar,car\t1" in captured.out.splitlines()
    assert "2 discrepancies" in captured.err


def test_audit_report_file(tmp_path):
    pan, inst = auditcase.write_fixture(tmp_path, flawed=False)
    out = tmp_path / "report.tsv"
    assert main(["audit", "--data", str(pan), "--instances", str(inst), "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand():
    assert main([]) == 1


def test_missing_data_is_io_error(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == 2


def test_invalid_config_is_validation_error(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("model.nope = 3\n")
    assert main(["train", "--config", str(bad), "--data", str(tmp_path)]) == 1


def test_train_without_data(toy_cfg):
    assert main(["train", "--config", str(toy_cfg)]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "synth-gen" in capsys.readouterr().out
