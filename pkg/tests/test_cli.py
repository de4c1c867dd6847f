import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from feddiffuse.cli import main
from feddiffuse.data import synthetic_fashion, write_idx
from feddiffuse.experiment import COMPARISON_COLUMNS, METRICS_COLUMNS, load_config, resolve
from feddiffuse.federation import expected_traffic
from feddiffuse.model import load_checkpoint, segment_layout

CONFIG = """
[data]
images = {images}
labels = {labels}
reference_size = 100

[model]
base_channels = 4
depth = 1
emb_dim = 4
image_size = 8
pad = 0
groups = 2

[diffusion]
timesteps = 10
beta_end = 0.2

[federation]
batch = 32
lr = 0.001

[evaluation]
samples = 8
grid_size = 4
"""


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture")
    ds = synthetic_fashion(200, seed=0, size=8)
    write_idx(ds, root / "train-images-idx3-ubyte.gz", root / "train-labels-idx1-ubyte.gz", compress=True)
    path = root / "exp.ini"
    path.write_text(CONFIG.format(images=root / "train-images-idx3-ubyte.gz",
                                  labels=root / "train-labels-idx1-ubyte.gz"))
    return path


def run(config, out, *flags):
    return main(["run", "--config", str(config), "--out", str(out), *flags])


def test_smoke_emits_all_artifacts(config, tmp_path):
    out = tmp_path / "a"
    assert run(config, out, "--method", "full", "--clients", "2", "--rounds", "2", "--epochs", "1") == 0
    for name in ("metrics.csv", "ledger.json", "partition.json", "resolved_config.ini",
                 "samples/global.pgm", "checkpoints/global.bin"):
        assert (out / name).is_file(), name
    rows = list(csv.reader((out / "metrics.csv").open()))
    assert rows[0] == METRICS_COLUMNS
    assert [r[0] for r in rows[1:]] == ["1", "2", "eval"]
    ledger = json.loads((out / "ledger.json").read_text())
    d = load_checkpoint(out / "checkpoints" / "global.bin")
    assert ledger["total"] == expected_traffic("full", 2, 2, d.layout)
    assert sum(json.loads((out / "partition.json").read_text())["sizes"]) == 200


def test_repeat_is_byte_identical(config, tmp_path):
    flags = ("--method", "usplit", "--clients", "3", "--rounds", "2", "--epochs", "1", "--seed", "4")
    assert run(config, tmp_path / "a", *flags) == 0
    assert run(config, tmp_path / "b", *flags) == 0
    for name in ("metrics.csv", "ledger.json", "partition.json", "samples/global.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_rerun_from_snapshot(config, tmp_path):
    assert run(config, tmp_path / "a", "--method", "udec", "--rounds", "1", "--epochs", "1",
               "--partition", "label-skew") == 0
    snap = tmp_path / "a" / "resolved_config.ini"
    assert main(["--config", str(snap), "--out", str(tmp_path / "b")]) == 0
    for name in ("metrics.csv", "ledger.json", "samples/client0.pgm", "samples/client1.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    rows = list(csv.reader((tmp_path / "a" / "metrics.csv").open()))
    assert len(rows[-1][7].split(";")) == 2


def test_checkpoint_rounds(config, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(config.read_text() + "\n[run]\ncheckpoint_rounds = true\n")
    assert run(cfg, tmp_path / "o", "--rounds", "2", "--epochs", "1") == 0
    assert sorted(p.name for p in (tmp_path / "o" / "checkpoints").glob("round*.bin")) == \
        ["round001.bin", "round002.bin"]


@pytest.mark.parametrize("flags,msg", [
    (("--method", "usplit", "--clients", "1"), "usplit"),
    (("--rounds", "0"), "rounds"),
    (("--dirichlet-beta", "0"), "partition"),
    (("--timesteps", "0"), "diffusion"),
])
def test_validation_errors_exit_2(config, tmp_path, capsys, flags, msg):
    assert run(config, tmp_path / "x", *flags) == 2
    assert msg in capsys.readouterr().err


def test_bad_config_file(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[federation]\nclinets = 2\n")
    assert main(["--config", str(bad)]) == 2
    assert "clinets" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.ini")]) == 2


def test_flags_override_file(config):
    parser = load_config(config, {("federation", "clients"): 5, ("federation", "method"): None})
    cfg = resolve(parser)
    assert cfg.federation.num_clients == 5 and cfg.federation.method == "full"
    assert cfg.model.image_size == 8 and cfg.timesteps == 10


def test_desk_scale_preset(config):
    cfg = resolve(load_config(config, {("federation", "rounds"): 4}, desk_scale=True))
    fed = cfg.federation
    assert (cfg.subset, fed.rounds, fed.epochs, fed.batch_size, fed.lr, cfg.samples) == (2000, 4, 1, 32, 1e-3, 128)


def test_sweep_methods_traffic(config, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(config), "--out", str(out), "--axis", "method",
                 "--values", "full,usplit,ulatdec,udec", "--seeds", "1", "--rounds", "1", "--epochs", "1",
                 "--samples", "4"]) == 0
    rows = list(csv.DictReader((out / "comparison.csv").open()))
    assert list(rows[0]) == COMPARISON_COLUMNS
    cfg = resolve(load_config(config))
    layout = segment_layout(cfg.model)
    for row in rows:
        assert int(row["n"]) == expected_traffic(row["method"], 2, 1, layout)
        assert np.isfinite(float(row["score_mean"]))


def test_sweep_clients_linear(config, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(config), "--out", str(out), "--axis", "clients", "--values", "2,5",
                 "--seeds", "1", "--rounds", "1", "--epochs", "1", "--samples", "4"]) == 0
    n = [int(r["n"]) for r in csv.DictReader((out / "comparison.csv").open())]
    assert n[1] * 2 == n[0] * 5


def test_sweep_empty_values(config, tmp_path, capsys):
    assert main(["sweep", "--config", str(config), "--out", str(tmp_path), "--axis", "epochs", "--values", ","]) == 2
    assert "at least one value" in capsys.readouterr().err


def test_module_entry_point(config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "feddiffuse", "--config", str(config), "--out", str(tmp_path / "m"),
                           "--rounds", "1", "--epochs", "1"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "m" / "metrics.csv").exists()
