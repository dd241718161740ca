import json

import numpy as np
import pytest

from pfedgm.experiment import (CLIENT_COLUMNS, ROUND_COLUMNS, ConfigError, config_from_dict,
                               default_config, load_config, read_csv, run_experiment, summarize)
from pfedgm.model import load_checkpoint


def _small(method, seed, tmp_path, **kw):
    cfg = default_config(method, seed, out_dir=str(tmp_path), **kw)
    cfg.scenario.num_clients = 6
    cfg.train.rounds = 4
    cfg.train.participation = 0.5
    return cfg


def test_summarize_population_std():
    assert summarize([0.5, 1.0]) == (0.75, 0.25)
    with pytest.raises(ValueError):
        summarize([])


@pytest.mark.parametrize("method", ["pfedgm", "fedavg", "fedavgft", "local"])
def test_artifacts_written(method, tmp_path):
    res = run_experiment(_small(method, 0, tmp_path))
    run = tmp_path / f"{method}-seed0"
    for name in ("manifest.json", "rounds.csv", "clients.csv", "summary.json", "checkpoint.json"):
        assert (run / name).exists()
    rounds = read_csv(run / "rounds.csv")
    assert list(rounds[0]) == ROUND_COLUMNS
    assert all(r["wall_ms"] is None for r in rounds)
    clients = read_csv(run / "clients.csv")
    assert list(clients[0]) == CLIENT_COLUMNS
    assert 0 <= res.mean <= 1
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["lineage"]["kernel_backend"] in ("cython", "python")


def test_csv_floats_roundtrip_exactly(tmp_path):
    res = run_experiment(_small("pfedgm", 1, tmp_path))
    back = read_csv(tmp_path / "pfedgm-seed1" / "rounds.csv")
    assert [r["mean_train_loss"] for r in back] == [m.mean_train_loss for m in res.rounds]


def test_manifest_rerun_is_byte_identical(tmp_path):
    first = run_experiment(_small("pfedgm", 2, tmp_path / "a"))
    cfg = load_config(tmp_path / "a" / "pfedgm-seed2" / "manifest.json")
    cfg.out_dir = str(tmp_path / "b")
    second = run_experiment(cfg)
    for name in ("rounds.csv", "clients.csv"):
        assert (tmp_path / "a" / "pfedgm-seed2" / name).read_bytes() == \
               (tmp_path / "b" / "pfedgm-seed2" / name).read_bytes()
    assert first.per_client == second.per_client


def test_timing_column_only_when_requested(tmp_path):
    cfg = _small("fedavg", 0, tmp_path, record_timing=True)
    run_experiment(cfg)
    rows = read_csv(tmp_path / "fedavg-seed0" / "rounds.csv")
    assert all(r["wall_ms"] is not None and r["wall_ms"] >= 0 for r in rows)


def test_checkpoint_matches_server(tmp_path):
    run_experiment(_small("pfedgm", 3, tmp_path))
    ck = load_checkpoint(tmp_path / "pfedgm-seed3" / "checkpoint.json")
    assert ck["navigator"] is not None and np.all(ck["covariance_bank"].precisions > 0)
    assert ck["lineage"]["master_seed"] == 3


def test_representation_dump(tmp_path):
    cfg = _small("pfedgm", 0, tmp_path, dump_representations=True)
    run_experiment(cfg)
    lines = (tmp_path / "pfedgm-seed0" / "reps.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["client_id", "label"]
    assert len(lines[0].split(",")) == 2 + cfg.train.rep_dim


def test_config_errors_name_the_field(tmp_path):
    good = default_config().to_dict()
    with pytest.raises(ConfigError, match="scenario"):
        config_from_dict({})
    with pytest.raises(ConfigError, match=r"scenario\.mixture: missing field"):
        config_from_dict({"scenario": {"kind": "synthetic"}})
    with pytest.raises(ConfigError, match="scenario"):
        config_from_dict({"scenario_path": str(tmp_path / "missing.json")})
    with pytest.raises(ConfigError, match=r"train\.bogus"):
        config_from_dict(good | {"train": {"bogus": 1}})
    with pytest.raises(ConfigError, match="method"):
        config_from_dict(good | {"method": "sgd"})


def test_config_dict_roundtrip():
    cfg = default_config("fedavgft", 5)
    again = config_from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert again.train.method == "fedavg" and again.train.seed == 5
