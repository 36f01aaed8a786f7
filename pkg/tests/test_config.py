from pathlib import Path

import pytest

from edgelora.config import ExperimentConfig
from edgelora.errors import ConfigError


def write(tmp_path, text, name="exp.cfg"):
    (tmp_path / "a.csv").write_text("x\n")
    path = tmp_path / name
    path.write_text(text)
    return path


def test_parses_values_and_resolves_paths(tmp_path):
    path = write(tmp_path, """
        # comment line
        seed = 7
        csv = a.csv
        rank = 4          # trailing comment
        lr = 5e-3
        eval_epochs = 1, 5
        warm_start = no
        out = results
    """)
    cfg = ExperimentConfig.load(path)
    assert cfg.seed == 7 and cfg.rank == 4 and cfg.lr == 5e-3
    assert cfg.eval_epochs == (1, 5) and cfg.warm_start is False
    assert cfg.csv == (tmp_path / "a.csv",) and cfg.out == tmp_path / "results"
    assert cfg.lora_config().rank == 4 and cfg.lora_config().targets == ("q", "v")


def test_full_lr_applies_only_to_full_mode(tmp_path):
    cfg = ExperimentConfig.load(write(tmp_path, "seed = 0\ncsv = a.csv\nlr = 5e-3\nfull_lr = 2e-5\n"))
    assert cfg.train_spec("lora").lr == 5e-3 and cfg.train_spec("full").lr == 2e-5
    assert cfg.modes() == ("lora", "full")


def test_overrides_win(tmp_path):
    cfg = ExperimentConfig.load(write(tmp_path, "seed = 0\ncsv = a.csv\n"), mode="lora", devices=None)
    assert cfg.mode == "lora" and cfg.devices == 2


@pytest.mark.parametrize("text, fragment", [
    ("csv = a.csv\n", "seed"),
    ("seed = 0\n", "csv"),
    ("seed = 0\ncsv = a.csv\ncolour = red\n", "unknown"),
    ("seed = 0\ncsv = a.csv\nseed = 1\n", "duplicate"),
    ("seed = zero\ncsv = a.csv\n", "seed"),
    ("seed = 0\ncsv = a.csv\nmode = qlora\n", "mode"),
    ("seed = 0\ncsv = a.csv\nbackbone = gpt9\n", "preset"),
    ("seed = 0\ncsv = missing.csv\n", "does not exist"),
    ("seed = 0\ncsv = a.csv\nepochs = 2\n", "epoch"),
    ("seed = 0\ncsv = a.csv\njust words\n", "key = value"),
])
def test_bad_configs(tmp_path, text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        ExperimentConfig.load(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "nope.cfg")


def test_shipped_configs_parse():
    root = Path(__file__).resolve().parents[1] / "configs"
    paths = sorted(root.glob("*.cfg"))
    assert paths
    for p in paths:
        ExperimentConfig.load(p, check_files=False)
