import csv
import hashlib
from dataclasses import fields

import numpy as np
import pytest

from unkd.cli import main
from unkd.config import ConfigError, ExperimentConfig, load_config, parse_config_text, serialize_config


def write_ratings(path, num_users=40, num_items=60, per_user=15, seed=0):
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, num_items + 1)
    weights /= weights.sum()
    lines = []
    for u in range(num_users):
        for t, i in enumerate(rng.choice(num_items, per_user, replace=False, p=weights)):
            lines.append(f"{u + 1}::{i + 1}::{int(rng.integers(1, 6))}::{1000 + t}")
    path.write_text("\n".join(lines) + "\n")


TINY = """\
dataset_path = ratings.dat
min_interactions = 5
teacher_dim = 16
student_dim = 4
teacher_lr = 0.01
student_lr = 0.01
batch_size = 128
max_epochs = 4
patience = 4
soft_labels = 30
lambda = 0.5
mu = 10
k = {k}
method = {method}
sweep_k = {sweep}
lemma_models = 3
lemma_users = 10
lemma_items = 60
"""


@pytest.fixture
def workdir(tmp_path):
    write_ratings(tmp_path / "ratings.dat")
    return tmp_path


def write_config(workdir, name="tiny.cfg", k=2, method="unkd", sweep="1, 2, 3", extra=""):
    path = workdir / name
    path.write_text(TINY.format(k=k, method=method, sweep=sweep) + extra)
    return str(path)


def cli(*args):
    return main([str(a) for a in args])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_minimal_config_gets_defaults(tmp_path):
    (tmp_path / "r.dat").write_text("1::1::5::0\n")
    (tmp_path / "c.cfg").write_text("dataset_path = r.dat\n")
    cfg = load_config(tmp_path / "c.cfg")
    default = ExperimentConfig()
    for f in fields(cfg):
        if f.name not in ("dataset_path", "dataset_name"):
            assert getattr(cfg, f.name) == getattr(default, f.name)
    assert cfg.dataset_path == str(tmp_path / "r.dat")


@pytest.mark.parametrize("text", ["k = 0", "k = 11", "mu = 15", "lambda = 1.5", "soft_labels = 35",
                                  "method = dk", "backbone = cnn"])
def test_invalid_values_rejected(text):
    with pytest.raises(ConfigError):
        parse_config_text(text).validate(check_files=False)


def test_out_of_grid_override():
    cfg = parse_config_text("mu = 15\nallow_out_of_grid = true").validate(check_files=False)
    assert cfg.mu == 15.0


def test_unknown_key_and_type_errors():
    with pytest.raises(ConfigError):
        parse_config_text("teacher_dimension = 100")
    with pytest.raises(ConfigError):
        parse_config_text("k = four")
    with pytest.raises(ConfigError):
        parse_config_text("just words")


def test_missing_dataset_rejected(tmp_path):
    (tmp_path / "c.cfg").write_text("dataset_path = nowhere.dat\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.cfg")


def test_config_round_trip():
    cfg = ExperimentConfig(dataset_path="/x/y.dat", delimiter="\t", lam=0.25, k=7, sweep_k=(2, 5),
                           lemma_gammas=(0.5, 3.0), resample_pairs=False, backbone="lightgcn")
    back = parse_config_text(serialize_config(cfg))
    for f in fields(cfg):
        assert getattr(back, f.name) == getattr(cfg, f.name), f.name
    assert "lambda = 0.25" in serialize_config(cfg)


def test_bad_config_exits_two(workdir):
    path = workdir / "bad.cfg"
    path.write_text("k = 0\n")
    assert cli("lemma-check", "--config", path, "--out", workdir / "run") == 2


def test_lemma_check_passes(workdir):
    out = workdir / "run"
    assert cli("lemma-check", "--config", write_config(workdir), "--out", out) == 0
    rows = list(csv.DictReader(open(out / "reports" / "lemma_check.csv")))
    assert len(rows) == 9 and all(r["holds"] == "True" for r in rows)
    assert (out / "config.resolved").exists()
    assert (out / "reports" / "bias_by_gamma.csv").exists()


def prepare_and_teach(workdir, out, cfg):
    assert cli("prepare", "--config", cfg, "--out", out) == 0
    assert cli("train-teacher", "--config", cfg, "--out", out) == 0


def test_unkd_k1_matches_cd(workdir):
    out = workdir / "run"
    cfg = write_config(workdir)
    prepare_and_teach(workdir, out, cfg)
    assert cli("distill", "--config", cfg, "--out", out, "--method", "unkd", "--k", 1) == 0
    assert cli("distill", "--config", cfg, "--out", out, "--method", "cd") == 0
    unkd = (out / "reports" / "metrics_unkd.csv").read_text().replace(",unkd,", ",M,")
    cd = (out / "reports" / "metrics_cd.csv").read_text().replace(",cd,", ",M,")
    assert unkd == cd
    assert sha(out / "checkpoints" / "student_unkd.ckpt") == sha(out / "checkpoints" / "student_cd.ckpt")


def test_sweep_k_shape(workdir):
    out = workdir / "run"
    cfg = write_config(workdir, sweep="1, 2, 3, 4, 5, 6")
    prepare_and_teach(workdir, out, cfg)
    assert cli("sweep-k", "--config", cfg, "--out", out) == 0
    rows = list(csv.DictReader(open(out / "reports" / "sweep_k.csv")))
    keys = [(r["K"], r["metric"], r["group"]) for r in rows]
    assert len(keys) == len(set(keys))
    assert sorted({int(r["K"]) for r in rows}) == [1, 2, 3, 4, 5, 6]
    per_k = {k: sum(1 for r in rows if r["K"] == str(k)) for k in range(1, 7)}
    assert len(set(per_k.values())) == 1
    assert {("recall", "unpopular"), ("recall", "overall")} <= {(r["metric"], r["group"]) for r in rows}


def test_pipeline_reproducible_and_evaluate_is_read_only(workdir):
    cfg = write_config(workdir, method="rd")
    outputs = []
    for name in ("a", "b"):
        out = workdir / name
        assert cli("pipeline", "--config", cfg, "--out", out, "--seed", 3) == 0
        outputs.append(out)
    reports = sorted(p.name for p in (outputs[0] / "reports").iterdir())
    assert "metrics.csv" in reports and "metrics_rd.csv" in reports
    for name in reports:
        assert (outputs[0] / "reports" / name).read_bytes() == (outputs[1] / "reports" / name).read_bytes()
    ckpts = {p: sha(p) for p in (outputs[0] / "checkpoints").iterdir()}
    assert cli("evaluate", "--config", cfg, "--out", outputs[0], "--seed", 3) == 0
    assert {p: sha(p) for p in ckpts} == ckpts


def test_failure_marks_run_stale(workdir):
    out = workdir / "run"
    cfg = write_config(workdir)
    assert cli("train-teacher", "--config", cfg, "--out", out) == 1
    assert "prepare" in (out / "STALE").read_text()
    prepare_and_teach(workdir, out, cfg)
    assert not (out / "STALE").exists()


def test_lightgcn_distill_runs(workdir):
    out = workdir / "run"
    cfg = write_config(workdir, extra="backbone = lightgcn\nmax_epochs = 2\n")
    prepare_and_teach(workdir, out, cfg)
    assert cli("distill", "--config", cfg, "--out", out) == 0
    rows = list(csv.DictReader(open(out / "reports" / "metrics_unkd.csv")))
    assert rows[0]["backbone"] == "lightgcn"
