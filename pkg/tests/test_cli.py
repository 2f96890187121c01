import csv
import json

import numpy as np
import pytest

from fedsophia import config as configmod
from fedsophia.cli import METRICS_HEADER, expand_grid, load_grid, main
from fedsophia.data import IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, write_idx
from fedsophia.errors import ConfigError

SMALL = """\
algorithm = "fed-sophia"
rounds = {rounds}
seed = 1

[data]
classes = 4
per_class = 20
dim = 10
spread = 1.0
scale = 0.5

[model]
hidden = [6]

[partition]
devices = 4

[optimizer]
eta = 0.01
local_iters = 2
batch_size = 8
"""


def write_config(tmp_path, rounds=2, extra=""):
    path = tmp_path / "exp.toml"
    path.write_text(SMALL.format(rounds=rounds) + extra)
    return path


def read_rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_run_writes_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = read_rows(tmp_path / "o" / "metrics.csv")
    assert rows[0] == METRICS_HEADER
    assert ",".join(rows[0]) == "round,accuracy,mean_loss,e_comp_j,e_tx_j,bits,seconds"
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert len(summary["devices"]) == 4
    assert summary["aggregate"]["e_tx_j"] == pytest.approx(sum(d["e_tx_j"] for d in summary["devices"]))
    resolved = json.loads((tmp_path / "o" / "resolved-config.json").read_text())
    assert resolved["optimizer"]["beta2"] == 0.95
    assert resolved["optimizer"]["rho"] == 1.0
    assert resolved["channel"]["distance_m"] == 50.0
    assert resolved["out"] == str(tmp_path / "o")


def test_zero_rounds_one_row(tmp_path):
    cfg = write_config(tmp_path, rounds=0)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert len(read_rows(tmp_path / "o" / "metrics.csv")) == 2


def test_run_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--workers", "1"])
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--workers", "8"])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_flag_changes_run(tmp_path):
    cfg = write_config(tmp_path)
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "9"])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_missing_dataset_file(tmp_path, capsys):
    cfg = tmp_path / "idx.toml"
    cfg.write_text('[data]\nsource = "idx"\nimages = "nope-images"\nlabels = "nope-labels"\n')
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "nope-images" in err
    assert "idx.toml:3:" in err


def test_invalid_value_reports_line(tmp_path, capsys):
    cfg = write_config(tmp_path, extra="\n[channel]\ndistance_m = -5\n")
    assert main(["run", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    line = cfg.read_text().splitlines().index("distance_m = -5") + 1
    assert f":{line}:" in err and "distance_m" in err


def test_unknown_key_reports_line(tmp_path, capsys):
    cfg = write_config(tmp_path, extra="\n[optimizer2]\nfoo = 1\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "optimizer2" in capsys.readouterr().err


def test_malformed_toml(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("rounds = 3\nseed = = 4\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "bad.toml:2:" in capsys.readouterr().err


def test_runtime_failure_flushes_partial_metrics(tmp_path, capsys):
    # DONE with an absurd Richardson step diverges inside round 1
    extra = '\n[done]\nalpha = 1e6\nrichardson_iters = 5\n'
    cfg = write_config(tmp_path, extra=extra)
    text = cfg.read_text().replace('algorithm = "fed-sophia"', 'algorithm = "done"')
    cfg.write_text(text)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    rows = read_rows(tmp_path / "o" / "metrics.csv")
    assert rows[0] == METRICS_HEADER and len(rows) == 2
    assert "diverged" in capsys.readouterr().err


def test_idx_source_end_to_end(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(4), 10).astype(np.uint8)
    images = (rng.random((40, 4, 4)) * 255).astype(np.uint8)
    write_idx(tmp_path / "img.idx", images, IDX_IMAGE_MAGIC)
    write_idx(tmp_path / "lab.idx", labels, IDX_LABEL_MAGIC)
    cfg = tmp_path / "idx.toml"
    cfg.write_text('rounds = 1\n[data]\nsource = "idx"\nimages = "img.idx"\nlabels = "lab.idx"\nlimit = 32\n'
                   '[model]\nhidden = [4]\n[partition]\ndevices = 2\n')
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert len(read_rows(tmp_path / "o" / "metrics.csv")) == 3


def test_quadratic_demo_full_newton(tmp_path, capsys):
    assert main(["quadratic-demo", "--method", "full-newton", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "trajectory.csv")
    assert rows[0] == ["step", "theta1", "theta2", "f"]
    assert len(rows) == 3
    assert float(rows[2][1]) == 0.0 and float(rows[2][2]) == 0.0


def test_quadratic_demo_gradient_monotone(tmp_path):
    assert main(["quadratic-demo", "--method", "gradient", "--eta", "0.1", "--max-steps", "50",
                 "--out", str(tmp_path)]) == 0
    f = [float(r[3]) for r in read_rows(tmp_path / "trajectory.csv")[1:]]
    assert len(f) == 51 and all(b < a for a, b in zip(f, f[1:]))


def test_quadratic_demo_zero_steps(tmp_path):
    assert main(["quadratic-demo", "--max-steps", "0", "--out", str(tmp_path)]) == 0
    assert len(read_rows(tmp_path / "trajectory.csv")) == 2


def test_quadratic_demo_unknown_method():
    with pytest.raises(SystemExit) as exc:
        main(["quadratic-demo", "--method", "adam"])
    assert exc.value.code == 2


def test_gnb_check_passes(capsys):
    assert main(["gnb-check", "--draws", "10000"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_sweep_three_etas(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"),
                 "--param", "optimizer.eta=0.01,0.003,0.0005"]) == 0
    rows = read_rows(tmp_path / "s" / "sweep.csv")
    assert rows[0] == ["cell", "optimizer.eta", "final_accuracy", "rounds_to_90pct", "status"]
    assert len(rows) == 4 and all(r[-1] == "ok" for r in rows[1:])


def test_sweep_grid_file_blocks(tmp_path):
    grid = tmp_path / "grid.toml"
    grid.write_text("[[block]]\noptimizer.eta = [0.01, 0.003]\noptimizer.local_iters = [2]\n"
                    "[[block]]\noptimizer.eta = [0.001]\noptimizer.local_iters = [1, 2, 3]\n")
    blocks = load_grid(grid)
    assert len(expand_grid(blocks)) == 5


def test_sweep_failed_cell_recorded(tmp_path):
    cfg = write_config(tmp_path)
    cfg.write_text(cfg.read_text().replace('"fed-sophia"', '"done"'))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"),
                 "--param", "done.alpha=0.01,1e6", "--param", "done.richardson_iters=5"]) == 0
    rows = read_rows(tmp_path / "s" / "sweep.csv")
    assert rows[1][-1] == "ok" and rows[2][-1].startswith("error")


def test_sweep_empty_grid(tmp_path):
    assert main(["sweep", "--config", str(write_config(tmp_path))]) == 2


def test_sweep_bad_key(tmp_path):
    assert main(["sweep", "--config", str(write_config(tmp_path)), "--param", "optimizer.etta=1"]) == 2


def test_config_defaults_and_overrides():
    cfg = configmod.ExperimentConfig()
    assert cfg.partition.devices == 32 and cfg.partition.train_fraction == 0.75
    assert cfg.optimizer.local_iters == 10 and cfg.optimizer.batch_size == 512
    assert cfg.model.hidden == (128,)
    new = cfg.with_overrides(**{"optimizer.eta": 0.5, "rounds": 3})
    assert new.optimizer.eta == 0.5 and new.rounds == 3
    with pytest.raises(ConfigError):
        cfg.with_overrides(**{"nope.eta": 1})


def test_dotted_top_level_keys():
    cfg = configmod.loads('optimizer.eta = 0.2\npartition.devices = 3\n')
    assert cfg.optimizer.eta == 0.2 and cfg.partition.devices == 3


def test_type_errors():
    with pytest.raises(ConfigError) as exc:
        configmod.loads('rounds = "many"\n')
    assert exc.value.line == 1
