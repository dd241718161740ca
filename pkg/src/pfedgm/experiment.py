"""End-to-end experiment driver and its on-disk artifacts.

Layout of one run::

    <out_dir>/<run_id>/manifest.json   fully resolved config (re-runnable as --config)
                       rounds.csv      one row per federated round
                       clients.csv     one row per client
                       checkpoint.json global model after Phase 1
                       summary.json    mean/std accuracies, ablation, wall-clock
                       reps.csv        optional representation dump
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .datagen import Scenario, build_clients, default_scenario, load_scenario, scenario_from_dict, scenario_to_dict
from .fedsim import (METHODS, FedResult, TrainConfig, global_accuracy, personal_accuracy,
                     run_fedavg, run_fedavgft, run_local, run_phase1)
from .model import embed, save_checkpoint
from .personalize import PersonalizeConfig, run_phase2

log = logging.getLogger(__name__)

ROUND_COLUMNS = ["round", "method", "mean_train_loss", "H", "R", "global_test_acc", "wall_ms"]
CLIENT_COLUMNS = ["client_id", "n_train", "n_test", "acc_global", "acc_personalized",
                  "train_loss_before_lbfgs", "train_loss_after_lbfgs"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: Scenario
    method: str = "pfedgm"
    train: TrainConfig = field(default_factory=TrainConfig)
    personalize: PersonalizeConfig = field(default_factory=PersonalizeConfig)
    out_dir: str | None = "out"
    run_id: str | None = None
    seed: int = 0
    record_timing: bool = False
    dump_representations: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: must be one of {METHODS}, got {self.method!r}")
        # the master seed and method are authoritative for the sub-configs
        self.train.seed = self.seed
        self.train.method = "fedavg" if self.method == "fedavgft" else self.method
        self.personalize.seed = self.seed
        self.personalize.lam = self.train.lam

    @property
    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.method}-seed{self.seed}"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "run_id": self.resolved_run_id,
            "out_dir": self.out_dir,
            "record_timing": self.record_timing,
            "dump_representations": self.dump_representations,
            "scenario": scenario_to_dict(self.scenario),
            "train": self.train.to_dict(),
            "personalize": self.personalize.to_dict(),
        }


def _dataclass_from(cls, d: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown field")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(d: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if ("scenario" in d) == ("scenario_path" in d):
        raise ConfigError("scenario: give exactly one of 'scenario' or 'scenario_path'")
    try:
        if "scenario" in d:
            sc = scenario_from_dict(d["scenario"])
        else:
            p = Path(d["scenario_path"])
            sc = load_scenario(p if p.is_absolute() or base_dir is None else base_dir / p)
    except KeyError as e:
        raise ConfigError(f"scenario.{e.args[0]}: missing field") from e
    except (ValueError, OSError) as e:
        raise ConfigError(f"scenario: {e}") from e
    train = _dataclass_from(TrainConfig, dict(d.get("train", {})), "train")
    pers = _dataclass_from(PersonalizeConfig, dict(d.get("personalize", {})), "personalize")
    extra = set(d) - {"method", "seed", "run_id", "out_dir", "record_timing",
                      "dump_representations", "scenario", "scenario_path", "train",
                      "personalize", "lineage"}
    if extra:
        raise ConfigError(f"{sorted(extra)[0]}: unknown field")
    return ExperimentConfig(
        scenario=sc, method=d.get("method", "pfedgm"), train=train, personalize=pers,
        out_dir=d.get("out_dir", "out"), run_id=d.get("run_id"), seed=int(d.get("seed", 0)),
        record_timing=bool(d.get("record_timing", False)),
        dump_representations=bool(d.get("dump_representations", False)))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return config_from_dict(json.loads(path.read_text()), path.parent)


def default_config(method: str = "pfedgm", seed: int = 0, **kw) -> ExperimentConfig:
    return ExperimentConfig(scenario=default_scenario(seed), method=method, seed=seed, **kw)


def summarize(per_client_acc) -> tuple[float, float]:
    """Mean and population standard deviation."""
    a = np.asarray(list(per_client_acc), dtype=np.float64)
    if a.size == 0:
        raise ValueError("no accuracies to summarize")
    return float(a.mean()), float(a.std())


@dataclass
class ResultSummary:
    method: str
    per_client: dict          # client_id -> accuracy of the method's final model
    mean: float
    std: float
    wall_seconds: dict
    global_mean: float | None = None   # shared-model accuracy (FedAvg global / NA for pfedgm)
    ablation: dict | None = None       # pfedgm: {"NA", "FA", "GA"} means
    rounds: list = field(default_factory=list, repr=False)
    client_rows: list = field(default_factory=list, repr=False)
    run_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mean": self.mean,
            "std": self.std,
            "global_mean": self.global_mean,
            "ablation": self.ablation,
            "per_client": {str(k): v for k, v in self.per_client.items()},
            "wall_seconds": self.wall_seconds,
        }


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rounds_csv_text(rounds, record_timing: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_COLUMNS)
    for m in rounds:
        w.writerow([m.round, m.method, _fmt(m.mean_train_loss), _fmt(m.H), _fmt(m.R),
                    _fmt(m.global_test_acc), _fmt(m.wall_ms) if record_timing else ""])
    return buf.getvalue()


def clients_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CLIENT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in CLIENT_COLUMNS])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    """Parse a metrics CSV back into typed values (floats at full precision)."""
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            parsed = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = None
                elif k in ("method",):
                    parsed[k] = v
                elif k in ("round", "client_id", "n_train", "n_test"):
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v)
            out.append(parsed)
    return out


def _mean_of(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ResultSummary:
    """Data -> Phase 1 (or baseline) -> Phase 2 / fine-tuning -> evaluation -> artifacts."""
    t0 = time.perf_counter()
    clients = build_clients(cfg.scenario)
    t_data = time.perf_counter()
    tc = cfg.train
    rows = []
    ablation = None
    if cfg.method == "pfedgm":
        fed = run_phase1(tc, clients)
        t_p1 = time.perf_counter()
        s = fed.server
        results = run_phase2(clients, s.gen, s.nav, s.bank, cfg.personalize)
        for r in results:
            rows.append({"client_id": r.client_id, "n_train": r.n_train, "n_test": r.n_test,
                         "acc_global": r.acc_global, "acc_personalized": r.acc_personalized,
                         "acc_finetuned": r.acc_finetuned,
                         "train_loss_before_lbfgs": r.train_loss_before_lbfgs,
                         "train_loss_after_lbfgs": r.train_loss_after_lbfgs})
        ablation = {"NA": _mean_of(r["acc_global"] for r in rows),
                    "FA": _mean_of(r["acc_finetuned"] for r in rows),
                    "GA": _mean_of(r["acc_personalized"] for r in rows)}
        per_client = {r["client_id"]: r["acc_personalized"] for r in rows if r["acc_personalized"] is not None}
    else:
        if cfg.method == "local":
            fed = run_local(tc, clients)
        elif cfg.method == "fedavgft":
            fed = run_fedavgft(tc, clients)
        else:
            fed = run_fedavg(tc, clients)
        t_p1 = time.perf_counter()
        personal = personal_accuracy(fed.personal_models, clients) if fed.personal_models else {}
        for c in sorted(clients, key=lambda c: c.client_id):
            g = global_accuracy(fed.server, [c]) if cfg.method != "local" else None
            rows.append({"client_id": c.client_id, "n_train": c.n_train, "n_test": c.n_test,
                         "acc_global": g, "acc_personalized": personal.get(c.client_id)})
        key = "acc_global" if cfg.method == "fedavg" else "acc_personalized"
        per_client = {r["client_id"]: r[key] for r in rows if r[key] is not None}
    t_end = time.perf_counter()
    mean, std = summarize(per_client.values())
    summary = ResultSummary(
        cfg.method, per_client, mean, std,
        {"data": t_data - t0, "phase1": t_p1 - t_data, "phase2": t_end - t_p1, "total": t_end - t0},
        global_mean=_mean_of(r["acc_global"] for r in rows), ablation=ablation,
        rounds=fed.rounds, client_rows=rows)
    if write and cfg.out_dir is not None:
        summary.run_dir = str(write_artifacts(cfg, summary, fed, clients))
    return summary


def write_artifacts(cfg: ExperimentConfig, summary: ResultSummary, fed: FedResult, clients) -> Path:
    run_dir = Path(cfg.out_dir) / cfg.resolved_run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = cfg.to_dict()
    manifest["lineage"] = {
        "master_seed": cfg.seed,
        "scenario_seed": cfg.scenario.seed,
        "streams": "philox(seed, client_id, round, purpose)",
        "package_version": __version__,
        "kernel_backend": kernels.backend_name(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (run_dir / "rounds.csv").write_text(rounds_csv_text(summary.rounds, cfg.record_timing))
    (run_dir / "clients.csv").write_text(clients_csv_text(summary.client_rows))
    (run_dir / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
    s = fed.server
    save_checkpoint(run_dir / "checkpoint.json", gen=s.gen, nav=s.nav, bank=s.bank, head=s.head,
                    lineage=manifest["lineage"])
    if cfg.dump_representations:
        write_representations(run_dir / "reps.csv", s.gen, clients)
    return run_dir


def write_representations(path, gen, clients) -> None:
    """Rows of (client_id, label, z_0..z_{d-1}) over each client's train split."""
    d = gen.output_dim
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["client_id", "label"] + [f"z{j}" for j in range(d)])
        for c in sorted(clients, key=lambda c: c.client_id):
            if c.n_train == 0:
                continue
            z = embed(gen, c.x_train)
            for yi, zi in zip(c.y_train, z):
                w.writerow([c.client_id, int(yi)] + [repr(float(v)) for v in zi])
