import json

import pytest

from pnpseg.cli import load_settings, main
from pnpseg.errors import ArgumentError, ConfigurationError


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_full_pipeline(tmp_path, capsys):
    d, r = tmp_path / "data", tmp_path / "runs"
    assert main(["gen-data", "--out", str(d), "--size", "16", "--n-train", "1", "--n-test", "1"]) == 0
    cfg = tmp_path / "exp.toml"
    cfg.write_text('[network]\ninput_size = 16\nbase_width = 2\ndropout_rate = 0.0\n'
                   '[train]\niterations = 5\nbatch_size = 2\n'
                   '[adapt]\ncritic_pretrain_iters = 1\njoint_updates = 2\nn_critic = 1\nbatch_size = 2\n'
                   'critic_width = 4\n')
    common = ["--data", str(d), "--config", str(cfg)]
    assert main(["train-source", *common, "--out", str(r / "src")]) == 0
    assert main(["train-source", *common, "--target", "--out", str(r / "tgt")]) == 0
    assert main(["evaluate", *common, "--source-run", str(r / "src"), "--out", str(r / "noda")]) == 0
    assert main(["adapt", *common, "--source-run", str(r / "src"), "--out", str(r / "ada"),
                 "--set", "adapt.joint_updates=3"]) == 0
    man = json.loads((r / "ada" / "manifest.json").read_text())
    assert man["config"]["adapt"]["joint_updates"] == 3 and man["config"]["network"]["base_width"] == 2
    assert main(["plot", str(r / "ada")]) == 0
    assert (r / "ada" / "lr.png").exists()
    assert main(["table", f"noda={r / 'noda'}", f"ada={r / 'ada'}", "--out", str(tmp_path / "t.md")]) == 0
    assert "| ada |" in (tmp_path / "t.md").read_text()
    assert main(["sweep", *common, "--source-run", str(r / "src"), "--out", str(r / "sweep"),
                 "--ratios", "0,0.4", "--remove-taps", "RM4"]) == 0
    assert len((r / "sweep" / "table.md").read_text().splitlines()) == 2 + 3


def test_missing_source_run_is_json_error(tmp_path, capsys):
    code = main(["adapt", "--data", str(tmp_path), "--source-run", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")])
    assert code != 0
    err = _err(capsys)
    assert err["error"] == "dependency" and "nope" in err["message"] and err["exit_code"] == code


def test_bad_config_is_json_error(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[bogus]\nx = 1\n")
    code = main(["train-source", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--config", str(cfg)])
    assert code == 2 and _err(capsys)["error"] == "configuration"
    code = main(["train-source", "--data", str(tmp_path), "--out", str(tmp_path / "o"),
                 "--set", "train.nonsense=3"])
    assert code == 2 and _err(capsys)["error"] == "configuration"


def test_usage_error_is_json(capsys):
    assert main(["no-such-verb"]) == 2
    assert _err(capsys)["error"] == "usage"


def test_missing_dataset(tmp_path, capsys):
    code = main(["train-source", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")])
    assert code != 0 and _err(capsys)["error"] == "format"


def test_settings_layering(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[adapt]\nmask_ratio = 0.3\nfeature_taps = ["RM6", "Conv10"]\n')
    s = load_settings(str(cfg), ["adapt.mask_ratio=0.5", "experiment.direction=B->A"])
    assert s["adapt"] == {"mask_ratio": 0.5, "feature_taps": ["RM6", "Conv10"]}
    assert s["experiment"]["direction"] == "B->A"
    with pytest.raises(ArgumentError):
        load_settings(None, ["nodot=1"])
    with pytest.raises(ConfigurationError):
        bad = tmp_path / "b.toml"
        bad.write_text("[wrong]\n")
        load_settings(str(bad), [])
