"""Phase-1 federated training and the Local / FedAvg / FedAvgFT baselines.

Random streams are derived from ``(seed, client_id, round, purpose)``, and
client updates are sorted by client id before aggregation, so a run is
reproducible whatever order (or thread) the clients execute in.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import ClientDataset
from .model import (CovarianceBank, DenseHead, GeneratorParams, Navigator, SGDState,
                    backward, embed, forward, init_covariance_bank, init_dense_head,
                    init_generator, init_navigator, model_param_groups, sgd_step)
from .numcore import EPS_PD, rng_stream
from .objectives import (LossBreakdown, compute_prototypes_exact, covariance_loss_and_grad,
                         dense_ce_and_grads, dense_logits, gaussian_logits,
                         personal_loss_and_grad, shared_loss_and_grads, update_prototypes)

log = logging.getLogger(__name__)

METHODS = ("pfedgm", "fedavg", "fedavgft", "local")


@dataclass
class TrainConfig:
    rounds: int = 60
    local_epochs: int = 5
    batch_size: int = 50
    lr: float = 0.01
    momentum: float = 0.5
    weight_decay: float = 5e-4
    lam: float = 1.0
    participation: float = 0.3
    method: str = "pfedgm"
    seed: int = 0
    hidden: tuple = (32,)
    rep_dim: int = 8
    ema_rate: float = 0.1
    finetune_epochs: int = 5
    track_global_acc: bool = True
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class ServerState:
    gen: GeneratorParams
    nav: Navigator | None = None
    bank: CovarianceBank | None = None
    head: DenseHead | None = None
    round: int = 0


@dataclass
class ClientUpdate:
    client_id: int
    n: int
    gen: GeneratorParams
    nav: Navigator | None = None
    bank: CovarianceBank | None = None
    head: DenseHead | None = None
    losses: list = field(default_factory=list)  # LossBreakdown per batch
    missing_protos: int = 0


@dataclass
class RoundMetrics:
    round: int
    method: str
    mean_train_loss: float
    H: float
    R: float
    global_test_acc: float | None
    wall_ms: float
    participants: int


@dataclass
class FedResult:
    server: ServerState
    rounds: list  # RoundMetrics
    personal_models: dict | None = None  # client_id -> (gen, head) for local / fedavgft


def _workers(cfg: TrainConfig) -> int:
    env = os.environ.get("PFEDGM_THREADS")
    return max(1, int(env)) if env else max(1, cfg.workers)


def num_selected(M: int, q: float) -> int:
    return max(1, int(math.floor(q * M + 0.5)))


def select_clients(M: int, q: float, rng) -> np.ndarray:
    """Uniform sample without replacement of ``max(1, round(q M))`` client indices."""
    if not 0 < q <= 1:
        raise ValueError("participation must lie in (0, 1]")
    return np.sort(rng.choice(M, size=min(M, num_selected(M, q)), replace=False))


def minibatches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def init_server(cfg: TrainConfig, input_dim: int, num_classes: int) -> ServerState:
    rng = rng_stream(cfg.seed, "init")
    gen = init_generator([input_dim, *cfg.hidden, cfg.rep_dim], rng)
    if cfg.method == "pfedgm":
        return ServerState(gen, init_navigator(num_classes, cfg.rep_dim, rng),
                           init_covariance_bank(num_classes, cfg.rep_dim))
    return ServerState(gen, head=init_dense_head(num_classes, cfg.rep_dim, rng))


def local_train(client: ClientDataset, server: ServerState, cfg: TrainConfig, rng,
                num_classes: int) -> ClientUpdate | None:
    """One client's Phase-1 work: composite objective over ``local_epochs``."""
    if client.n_train == 0:
        log.warning("client %d has an empty train split; skipped", client.client_id)
        return None
    gen, nav, bank = server.gen.copy(), server.nav.copy(), server.bank.copy()
    x, y = client.x_train, client.y_train
    protos = compute_prototypes_exact(x, y, gen, num_classes, cfg.ema_rate)
    params, decay, floors = model_param_groups(gen, nav, bank)
    state = SGDState(params)
    losses, missing = [], 0
    for _ in range(cfg.local_epochs):
        for idx in minibatches(len(y), cfg.batch_size, rng):
            xb, yb = x[idx], y[idx]
            z, tape = forward(gen, xb)
            sh = shared_loss_and_grads(z, yb, nav)
            pr = personal_loss_and_grad(z, yb, protos, cfg.rep_dim)
            _, dprec = covariance_loss_and_grad(z, yb, nav, bank)
            ggen, _ = backward(gen, tape, sh.dz + cfg.lam * pr.dz)
            sgd_step(params, ggen + [sh.dmeans, sh.dbiases, dprec], cfg.lr, cfg.momentum,
                     cfg.weight_decay, state, decay, floors)
            update_prototypes(protos, z, yb)
            losses.append(LossBreakdown(sh.H, pr.R, cfg.lam))
            missing += pr.n_missing
    return ClientUpdate(client.client_id, client.n_train, gen, nav, bank,
                        losses=losses, missing_protos=missing)


def train_dense(gen: GeneratorParams, head: DenseHead, x, y, epochs: int, cfg: TrainConfig, rng):
    """Full-model cross-entropy SGD in place; returns per-batch losses."""
    params = gen.arrays() + [head.W, head.c]
    decay = [True] * len(gen.arrays()) + [True, False]
    state = SGDState(params)
    losses = []
    for _ in range(epochs):
        for idx in minibatches(len(y), cfg.batch_size, rng):
            z, tape = forward(gen, x[idx])
            loss, dz, dW, dc = dense_ce_and_grads(z, y[idx], head)
            ggen, _ = backward(gen, tape, dz)
            sgd_step(params, ggen + [dW, dc], cfg.lr, cfg.momentum, cfg.weight_decay, state, decay)
            losses.append(LossBreakdown(loss, 0.0, 0.0))
    return losses


def local_train_dense(client: ClientDataset, server: ServerState, cfg: TrainConfig, rng) -> ClientUpdate | None:
    if client.n_train == 0:
        log.warning("client %d has an empty train split; skipped", client.client_id)
        return None
    gen, head = server.gen.copy(), server.head.copy()
    losses = train_dense(gen, head, client.x_train, client.y_train, cfg.local_epochs, cfg, rng)
    return ClientUpdate(client.client_id, client.n_train, gen, head=head, losses=losses)


def _weighted_sum(arrays, weights):
    out = np.zeros_like(arrays[0])
    for a, w in zip(arrays, weights):
        out += w * a
    return out


def aggregate(updates: list[ClientUpdate]):
    """Sample-count weighted average of every tensor, summed in client-id order."""
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    ups = sorted(updates, key=lambda u: u.client_id)
    total = float(sum(u.n for u in ups))
    w = [u.n / total for u in ups]
    gen = ups[0].gen.copy()
    for li, layer in enumerate(gen.layers):
        layer.W = _weighted_sum([u.gen.layers[li].W for u in ups], w)
        layer.b = _weighted_sum([u.gen.layers[li].b for u in ups], w)
    nav = bank = head = None
    if ups[0].nav is not None:
        nav = Navigator(_weighted_sum([u.nav.means for u in ups], w),
                        _weighted_sum([u.nav.biases for u in ups], w))
        bank = CovarianceBank(np.maximum(_weighted_sum([u.bank.precisions for u in ups], w), EPS_PD))
    if ups[0].head is not None:
        head = DenseHead(_weighted_sum([u.head.W for u in ups], w),
                         _weighted_sum([u.head.c for u in ups], w))
    return gen, nav, bank, head


def global_accuracy(server: ServerState, clients, split: str = "test") -> float | None:
    """Mean over clients of the shared model's accuracy on each client's split."""
    accs = []
    for c in clients:
        x, y = (c.x_test, c.y_test) if split == "test" else (c.x_train, c.y_train)
        if len(y) == 0:
            continue
        z = embed(server.gen, x)
        if server.nav is not None:
            logits = gaussian_logits(z, server.nav, server.bank)
        else:
            logits = dense_logits(z, server.head)
        accs.append(float(np.mean(np.argmax(logits, axis=1) == y)))
    return float(np.mean(accs)) if accs else None


def _run_rounds(cfg: TrainConfig, clients, train_one) -> FedResult:
    clients = sorted(clients, key=lambda c: c.client_id)
    server = init_server(cfg, clients[0].features.shape[1], _num_classes(clients))
    M = len(clients)
    metrics = []
    workers = _workers(cfg)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(cfg.rounds):
            t0 = time.perf_counter()
            chosen = [clients[i] for i in select_clients(M, cfg.participation,
                                                         rng_stream(cfg.seed, r, "select"))]

            def job(c, r=r):
                return train_one(c, server, rng_stream(cfg.seed, c.client_id, r, "local"))

            results = list(pool.map(job, chosen)) if pool else [job(c) for c in chosen]
            updates = sorted((u for u in results if u is not None), key=lambda u: u.client_id)
            if not updates:
                raise RuntimeError(f"round {r}: no client produced an update")
            gen, nav, bank, head = aggregate(updates)
            server = ServerState(gen, nav, bank, head, r + 1)
            # per-client mean over batches, then mean over clients
            tot = float(np.mean([np.mean([l.total for l in u.losses]) for u in updates]))
            H = float(np.mean([np.mean([l.H for l in u.losses]) for u in updates]))
            R = float(np.mean([np.mean([l.R for l in u.losses]) for u in updates]))
            missing = sum(u.missing_protos for u in updates)
            if missing:
                log.info("round %d: %d samples without a prototype", r, missing)
            acc = global_accuracy(server, clients) if cfg.track_global_acc else None
            metrics.append(RoundMetrics(r + 1, cfg.method, tot, H, R, acc,
                                        (time.perf_counter() - t0) * 1e3, len(updates)))
    finally:
        if pool:
            pool.shutdown()
    return FedResult(server, metrics)


def _num_classes(clients) -> int:
    return 1 + max(int(c.labels.max()) for c in clients if len(c.labels))


def run_phase1(cfg: TrainConfig, clients) -> FedResult:
    """Global collaborative training: select, train locally, aggregate, repeat."""
    if cfg.method != "pfedgm":
        raise ValueError("run_phase1 requires method='pfedgm'")
    K = _num_classes(clients)
    return _run_rounds(cfg, clients, lambda c, s, rng: local_train(c, s, cfg, rng, K))


def run_fedavg(cfg: TrainConfig, clients) -> FedResult:
    if cfg.method not in ("fedavg", "fedavgft"):
        raise ValueError("run_fedavg requires method 'fedavg' or 'fedavgft'")
    return _run_rounds(cfg, clients, lambda c, s, rng: local_train_dense(c, s, cfg, rng))


def finetune_clients(result: FedResult, cfg: TrainConfig, clients) -> dict:
    """Per-client full-model fine-tuning from the global FedAvg model."""
    out = {}
    for c in sorted(clients, key=lambda c: c.client_id):
        gen, head = result.server.gen.copy(), result.server.head.copy()
        if c.n_train and cfg.finetune_epochs > 0:
            train_dense(gen, head, c.x_train, c.y_train, cfg.finetune_epochs, cfg,
                        rng_stream(cfg.seed, c.client_id, "finetune"))
        out[c.client_id] = (gen, head)
    return out


def run_fedavgft(cfg: TrainConfig, clients, fedavg_result: FedResult | None = None) -> FedResult:
    res = fedavg_result if fedavg_result is not None else run_fedavg(cfg, clients)
    return FedResult(res.server, res.rounds, finetune_clients(res, cfg, clients))


def local_epochs_budget(cfg: TrainConfig) -> int:
    """Epochs a client would run in expectation under the federated schedule."""
    return max(1, int(math.ceil(cfg.rounds * cfg.participation)) * cfg.local_epochs)


def run_local(cfg: TrainConfig, clients) -> FedResult:
    """Each client trains alone from the common initialization; no aggregation."""
    if cfg.method != "local":
        raise ValueError("run_local requires method='local'")
    clients = sorted(clients, key=lambda c: c.client_id)
    K = _num_classes(clients)
    server = init_server(cfg, clients[0].features.shape[1], K)
    models, losses = {}, []
    t0 = time.perf_counter()
    for c in clients:
        gen, head = server.gen.copy(), server.head.copy()
        if c.n_train:
            tr = train_dense(gen, head, c.x_train, c.y_train, local_epochs_budget(cfg), cfg,
                             rng_stream(cfg.seed, c.client_id, "local-only"))
            losses.append(np.mean([l.total for l in tr]))
        models[c.client_id] = (gen, head)
    m = RoundMetrics(1, "local", float(np.mean(losses)) if losses else float("nan"),
                     float(np.mean(losses)) if losses else float("nan"), 0.0, None,
                     (time.perf_counter() - t0) * 1e3, len(losses))
    return FedResult(server, [m], models)


def personal_accuracy(models: dict, clients) -> dict:
    """client_id -> test accuracy of that client's own dense model."""
    out = {}
    for c in clients:
        if c.n_test == 0:
            continue
        gen, head = models[c.client_id]
        pred = np.argmax(dense_logits(embed(gen, c.x_test), head), axis=1)
        out[c.client_id] = float(np.mean(pred == c.y_test))
    return out
