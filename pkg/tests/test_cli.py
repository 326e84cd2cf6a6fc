import json

import pytest

from cxrpipe.cli import main

SMALL_CFG = """\
[data]
manifest = manifest.csv
split = split.json
[hyperparams]
input_size = 32
fc_units = 16
learning_rate = 1e-3
max_epochs = 2
freeze_depth = 0
[run]
out = runs
seeds = 1,2
"""


@pytest.fixture
def toy(tmp_path):
    d = tmp_path / "toy"
    assert main(["gen-toy", "--out", str(d), "--n-per-class", "10", "--image-size", "32", "--seed", "3"]) == 0
    assert main(["split", "--manifest", str(d / "manifest.csv"), "--counts", "20,5,5", "--seed", "1",
                 "--out", str(d)]) == 0
    (d / "small.cfg").write_text(SMALL_CFG)
    return d


def test_gen_toy_counts_and_determinism(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-toy", "--out", str(tmp_path / name), "--n-per-class", "4", "--image-size", "16"]) == 0
    rows = (tmp_path / "a" / "manifest.csv").read_text().splitlines()
    assert len(rows) == 13
    for f in sorted((tmp_path / "a" / "images").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()


def test_missing_manifest_exit_2(tmp_path, capsys):
    missing = tmp_path / "absent.csv"
    assert main(["split", "--manifest", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_config_errors_listed(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[hyperparams]\ndropout_p = 2\nbatch_size = -1\n")
    assert main(["train", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "dropout_p" in err and "batch_size" in err


def test_force_needed_to_overwrite(toy, capsys):
    args = ["split", "--manifest", str(toy / "manifest.csv"), "--counts", "20,5,5", "--out", str(toy)]
    assert main(args) == 2
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--force"]) == 0


def test_pipeline_smoke(toy, tmp_path):
    cfg = str(toy / "small.cfg")
    assert main(["train", "--config", cfg, "--seed", "7"]) == 0
    (run,) = (toy / "runs").glob("run_*_7")
    report = json.loads((run / "report.json").read_text())
    assert report["test"]["confusion_matrix"] and report["seed"] == 7
    first = (run / "report.json").read_bytes()
    assert main(["train", "--config", cfg, "--seed", "7"]) == 2
    assert main(["train", "--config", cfg, "--seed", "7", "--force"]) == 0
    assert (run / "report.json").read_bytes() == first
    assert main(["eval", "--config", cfg, "--model", str(run / "best.ckpt")]) == 0
    assert (run / "eval_report.json").is_file() and (run / "eval_report.txt").is_file()


def test_eval_rejects_wrong_architecture(toy, tmp_path):
    cfg = str(toy / "small.cfg")
    assert main(["train", "--config", cfg, "--seed", "1"]) == 0
    (run,) = (toy / "runs").glob("run_*_1")
    other = toy / "other.cfg"
    other.write_text(SMALL_CFG.replace("fc_units = 16", "fc_units = 24"))
    assert main(["eval", "--config", str(other), "--model", str(run / "best.ckpt")]) == 2


def test_augment_preview(toy, tmp_path):
    img = next((toy / "images").iterdir())
    out = tmp_path / "prev"
    assert main(["augment-preview", "--image", str(img), "--n", "3", "--size", "32", "--out", str(out)]) == 0
    assert len(list(out.glob("*.png"))) == 3


def test_search_and_trials(toy, tmp_path):
    cfg = str(toy / "small.cfg")
    space = tmp_path / "space.cfg"
    space.write_text("[space]\ninput_size = 32\nfreeze_depth = 0,1\nfc_units = 16,32,16\n"
                     "[hyperparams]\nmax_epochs = 1\nfreeze_depth = 0\n")
    assert main(["search", "--config", cfg, "--space", str(space), "--trials", "2", "--out", str(tmp_path / "s")]) == 0
    assert json.loads((tmp_path / "s" / "search_0" / "ranking.json").read_text())["ranking"]
    assert main(["trials", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
    (rep,) = (tmp_path / "t").glob("trials_*/report.json")
    assert json.loads(rep.read_text())["seeds"] == [1, 2]
