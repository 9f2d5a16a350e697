import csv

import numpy as np
import pytest

from paseg.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from paseg.config import dump_run_config, load_run_config
from paseg.core import ConfigurationError, read_tensor_file, write_tensor_file

SMALL = """\
# tiny run
seed = 3
phantom.height = 32
grid.volunteers = 3
grid.locations = 1
split.n_val = 1
unet.epochs = 2
unet.batch_size = 2
unet.batches_per_epoch = 2
unet.base_channels = 2
fcnn.epochs = 2
fcnn.batches_per_epoch = 5
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.cfg").write_text(SMALL)
    assert main(["generate", "--config", str(d / "small.cfg"), "--out", str(d / "data")]) == EXIT_OK
    return d


# --- config parsing ---

def test_defaults_and_overrides():
    cfg = load_run_config(text="seed = 11\nunet.epochs = 4\n", overrides=["fcnn.learning_rate=0.01"])
    assert cfg.seed == 11 and cfg.unet.seed == 11 and cfg.phantom.seed == 11
    assert cfg.unet.epochs == 4 and cfg.unet.learning_rate == 1e-3
    assert cfg.fcnn.learning_rate == 0.01


@pytest.mark.parametrize("text, where", [
    ("seed = 1\nphantom.bogus = 2\n", "run.cfg:2"),
    ("seed = 1\n\nunet.epochs 5\n", "run.cfg:3"),
    ("unet.epochs = five\n", "run.cfg:1"),
    ("seed = 1\nseed = 2\n", "run.cfg:2"),
    ("unet.seed = 4\n", "run.cfg:1"),
])
def test_config_errors_carry_line(tmp_path, text, where):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    with pytest.raises(ConfigurationError, match=where):
        load_run_config(path)


def test_dump_round_trip():
    cfg = load_run_config(text=SMALL)
    again = load_run_config(text=dump_run_config(cfg))
    assert dump_run_config(again) == dump_run_config(cfg)
    assert again.phantom.height == 32 and again.unet.base_channels == 2


# --- commands ---

def test_generate_idempotent(workdir):
    out = workdir / "again"
    assert main(["generate", "--config", str(workdir / "small.cfg"), "--out", str(out)]) == EXIT_OK
    names = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(workdir / "data") for p in (workdir / "data").rglob("*") if p.is_file())
    for n in names:
        assert (out / n).read_bytes() == (workdir / "data" / n).read_bytes()
    assert "seed = 3" in (out / "config.resolved.txt").read_text()


def test_default_grid_count():
    cfg = load_run_config(text="seed = 7\n")
    assert len(cfg.grid.metas()) == 180


def test_generate_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["generate", "--set", "phantom.height=32", "--set", "grid.volunteers=1",
                 "--out", str(blocker / "sub")]) == EXIT_RUNTIME


def test_train_fcnn_us_usage_error(workdir, capsys):
    rc = main(["train", "--data", str(workdir / "data"), "--arch", "fcnn", "--input", "us",
               "--out", str(workdir / "x.ckpt")])
    assert rc == EXIT_USAGE
    assert "US" in capsys.readouterr().err


def test_train_epochs_override_and_default_lr(workdir):
    ckpt = workdir / "t" / "unet_paus.ckpt"
    rc = main(["train", "--config", str(workdir / "small.cfg"), "--data", str(workdir / "data"),
               "--arch", "unet", "--input", "paus", "--epochs", "5", "--out", str(ckpt), "--quiet"])
    assert rc == EXIT_OK and ckpt.is_file()
    with open(workdir / "t" / "unet_paus_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == list(range(5))
    resolved = (workdir / "t" / "unet_paus_config.resolved.txt").read_text()
    assert "unet.learning_rate = 0.001" in resolved and "unet.epochs = 5" in resolved


def test_evaluate_writes_report(workdir):
    ckpt = workdir / "e" / "fcnn_pa.ckpt"
    assert main(["train", "--config", str(workdir / "small.cfg"), "--data", str(workdir / "data"),
                 "--arch", "fcnn", "--input", "pa", "--out", str(ckpt), "--quiet"]) == EXIT_OK
    out = workdir / "e" / "report.csv"
    assert main(["evaluate", "--config", str(workdir / "small.cfg"), "--data", str(workdir / "data"),
                 "--checkpoint", str(ckpt), "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "architecture,input,volunteer,site,side,location,class,dice,tpr"
    assert len(lines) == 1 + 2 * 6 * 7  # two test volunteers x 6 scans x 7 classes


def test_bad_config_key_exit_2(workdir, capsys):
    bad = workdir / "bad.cfg"
    bad.write_text("seed = 1\nphantom.bogus = 3\n")
    assert main(["generate", "--config", str(bad), "--out", str(workdir / "nope")]) == EXIT_USAGE
    assert "bad.cfg:2" in capsys.readouterr().err


def test_missing_config_exit_1(workdir):
    assert main(["generate", "--config", str(workdir / "absent.cfg"), "--out", str(workdir / "n")]) == EXIT_RUNTIME


def test_unknown_command_exit_2():
    assert main(["bogus"]) == EXIT_USAGE


def test_robustness_without_neck_exit_2(tmp_path):
    data = tmp_path / "d"
    assert main(["generate", "--set", "phantom.height=32", "--set", "grid.volunteers=3",
                 "--set", "grid.locations=1", "--set", "grid.sites=forearm,calf", "--out", str(data)]) == EXIT_OK
    rc = main(["experiment", "robustness", "--set", "split.n_val=1", "--data", str(data),
               "--out", str(tmp_path / "x"), "--quiet"])
    assert rc == EXIT_USAGE


def test_preprocess_command(tmp_path):
    rng = np.random.default_rng(0)
    frames = rng.random((8, 2, 6, 6)).astype(np.float32)
    write_tensor_file(tmp_path / "f.patc", frames)
    (tmp_path / "e.txt").write_text("\n".join(["2.0"] * 8) + "\n")
    rc = main(["preprocess", "--frames", str(tmp_path / "f.patc"), "--energies", str(tmp_path / "e.txt"),
               "--crop", "1,1,4,4", "--out", str(tmp_path / "c.patc")])
    assert rc == EXIT_OK
    assert read_tensor_file(tmp_path / "c.patc").shape == (2, 4, 4)
    assert main(["preprocess", "--frames", str(tmp_path / "f.patc"), "--energies", str(tmp_path / "e.txt"),
                 "--crop", "1,1", "--out", str(tmp_path / "c.patc")]) == EXIT_USAGE
