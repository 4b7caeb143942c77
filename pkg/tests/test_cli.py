import filecmp

import pytest
import yaml

from gcd.cli import EXIT_CONFIG, EXIT_NUMERIC, main

CONFIG = {
    "scenarios": [{"seed": 3, "n_buildings": 3, "area_side": 60.0}],
    "grid_step": 10.0, "max_order": 1, "n_train": 16, "n_val": 8, "n_test": 8, "n_max": 3,
    "model": {"K": 1, "L": 1, "hidden": 16, "heads": 4},
    "train": {"epochs": 2, "batch_size": 8},
}


def write_config(path, **over):
    cfg = {**CONFIG, **over}
    path.write_text(yaml.safe_dump(cfg))
    return path


def pipeline(d, config):
    steps = [
        ["scene-gen", "--seed", "3", "--buildings", "3", "--side", "60", "--out", d / "scene.json"],
        ["build-featureset", "--scene", d / "scene.json", "--step", "10", "--max-order", "1",
         "--out", d / "fs.gcdf"],
        ["gen-dataset", "--scene", d / "scene.json", "--featureset", d / "fs.gcdf",
         "--samples", "16", "--seed", "1", "--n-max", "3", "--max-order", "1",
         "--out", d / "train.gcdd"],
        ["gen-dataset", "--scene", d / "scene.json", "--featureset", d / "fs.gcdf",
         "--samples", "8", "--seed", "2", "--n-max", "3", "--max-order", "1",
         "--out", d / "val.gcdd"],
        ["train", "--dataset", d / "train.gcdd", "--val", d / "val.gcdd", "--featureset",
         d / "fs.gcdf", "--config", config, "--seed", "4", "--out", d / "model.gcdc"],
        ["eval", "--checkpoint", d / "model.gcdc", "--dataset", d / "val.gcdd", "--featureset",
         d / "fs.gcdf", "--config", config, "--report", d / "eval"],
        ["sweep", "--axis", "disturbance", "--checkpoint", d / "model.gcdc", "--config", config,
         "--values", "0,0.1", "--out", d / "sweep"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv


def test_pipeline_reruns_are_byte_identical(tmp_path):
    config = write_config(tmp_path / "cfg.yaml")
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    pipeline(a, config)
    pipeline(b, config)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert {"scene.json", "fs.gcdf", "train.gcdd", "val.gcdd", "model.gcdc", "eval.csv",
            "eval.json"} <= {str(f) for f in files}
    assert any(str(f).startswith("sweep") for f in files)
    for f in files:
        assert filecmp.cmp(a / f, b / f, shallow=False), f


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["build-featureset", "--scene", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenarios: []\n")
    assert main(["cross-scenario", "--config", str(bad)]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--axis", "weather", "--checkpoint", "x"])
    assert exc.value.code == 2


def test_numeric_failure_exit_3(tmp_path):
    d = tmp_path
    cfg = write_config(d / "cfg.yaml", train={"epochs": 3, "batch_size": 4, "lr_initial": 1e300})
    for argv in (
        ["scene-gen", "--seed", "3", "--buildings", "3", "--side", "60", "--out", d / "s.json"],
        ["build-featureset", "--scene", d / "s.json", "--step", "10", "--max-order", "1",
         "--out", d / "fs.gcdf"],
        ["gen-dataset", "--scene", d / "s.json", "--featureset", d / "fs.gcdf", "--samples", "16",
         "--n-max", "3", "--max-order", "1", "--out", d / "t.gcdd"],
    ):
        assert main([str(a) for a in argv]) == 0
    code = main([str(a) for a in ["train", "--dataset", d / "t.gcdd", "--val", d / "t.gcdd",
                                  "--featureset", d / "fs.gcdf", "--config", cfg,
                                  "--out", d / "m.gcdc"]])
    assert code == EXIT_NUMERIC
