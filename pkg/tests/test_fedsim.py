import numpy as np
import pytest

from pfedgm.datagen import ClientDataset, build_clients, default_scenario
from pfedgm.fedsim import (ClientUpdate, TrainConfig, aggregate, local_epochs_budget, num_selected,
                           run_fedavg, run_fedavgft, run_local, run_phase1, select_clients)
from pfedgm.model import CovarianceBank, Navigator, init_generator
from pfedgm.numcore import EPS_PD, rng_stream


def _update(cid, n, value, rng):
    gen = init_generator([2, 2], rng)
    for l in gen.layers:
        l.W[:] = value
        l.b[:] = value
    return ClientUpdate(cid, n, gen, Navigator(np.full((2, 2), value), np.full(2, value)),
                        CovarianceBank(np.full((2, 2), value)))


def test_selection_count_and_uniqueness():
    assert num_selected(20, 0.3) == 6
    assert num_selected(3, 0.01) == 1
    s = select_clients(20, 0.3, rng_stream(0, 1, "select"))
    assert len(np.unique(s)) == 6 and s.min() >= 0 and s.max() < 20
    assert np.array_equal(select_clients(5, 1.0, rng_stream(0)), np.arange(5))
    with pytest.raises(ValueError):
        select_clients(5, 0.0, rng_stream(0))


def test_selection_is_uniform():
    counts = np.zeros(10)
    for r in range(3000):
        counts[select_clients(10, 0.3, rng_stream(1, r, "select"))] += 1
    # each client appears with probability 0.3 per round
    sd = np.sqrt(3000 * 0.3 * 0.7)
    assert np.all(np.abs(counts - 900) < 4 * sd)


def test_aggregate_weights_by_sample_count():
    rng = rng_stream(0)
    gen, nav, bank, _ = aggregate([_update(1, 3, 1.0, rng), _update(0, 1, 5.0, rng)])
    np.testing.assert_allclose(gen.layers[0].W, 2.0)
    np.testing.assert_allclose(nav.means, 2.0)
    np.testing.assert_allclose(bank.precisions, 2.0)


def test_aggregate_single_update_is_identity_and_floor():
    rng = rng_stream(0)
    u = _update(0, 7, 0.25, rng)
    gen, nav, *_ = aggregate([u])
    assert gen.layers[0].W.tobytes() == u.gen.layers[0].W.tobytes()
    assert nav.biases.tobytes() == u.nav.biases.tobytes()
    _, _, bank, _ = aggregate([_update(0, 1, -1.0, rng)])
    assert np.all(bank.precisions == EPS_PD)
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_order_independent():
    rng = rng_stream(0)
    ups = [_update(i, i + 1, float(i) / 3, rng) for i in range(5)]
    a = aggregate(ups)[0].layers[0].W
    b = aggregate(list(reversed(ups)))[0].layers[0].W
    assert a.tobytes() == b.tobytes()


def test_local_epoch_budget():
    assert local_epochs_budget(TrainConfig(rounds=60, participation=0.3, local_epochs=5)) == 90


@pytest.fixture(scope="module")
def clients():
    sc = default_scenario(1)
    sc.num_clients = 6
    return build_clients(sc)


def test_phase1_rounds_and_loss_trend(clients):
    res = run_phase1(TrainConfig(rounds=8, participation=0.5), clients)
    assert [m.round for m in res.rounds] == list(range(1, 9))
    assert all(m.participants == 3 for m in res.rounds)
    assert res.rounds[-1].mean_train_loss < res.rounds[0].mean_train_loss
    for m in res.rounds:
        assert m.mean_train_loss == pytest.approx(m.H + m.R)
    assert np.all(res.server.bank.precisions >= EPS_PD)


def test_methods_reject_wrong_config(clients):
    with pytest.raises(ValueError):
        run_phase1(TrainConfig(rounds=1, method="fedavg"), clients)
    with pytest.raises(ValueError):
        run_local(TrainConfig(rounds=1, method="pfedgm"), clients)
    with pytest.raises(ValueError):
        TrainConfig(participation=1.5)


def test_fedavgft_reuses_fedavg_server(clients):
    cfg = TrainConfig(rounds=3, method="fedavg", participation=0.5)
    base = run_fedavg(cfg, clients)
    ft = run_fedavgft(cfg, clients, base)
    assert ft.server is base.server
    assert set(ft.personal_models) == {c.client_id for c in clients}


def test_parallel_matches_serial(clients):
    a = run_phase1(TrainConfig(rounds=3, participation=0.5, workers=1), clients)
    b = run_phase1(TrainConfig(rounds=3, participation=0.5, workers=3), clients)
    assert [m.mean_train_loss for m in a.rounds] == [m.mean_train_loss for m in b.rounds]
    assert a.server.nav.means.tobytes() == b.server.nav.means.tobytes()


def test_round_isolation_with_empty_client(clients):
    """A participant with no train data is skipped without disturbing the others."""
    c0 = clients[0]
    extra = ClientDataset(99, c0.features[:3], c0.labels[:3], np.zeros(3, dtype=bool))
    cfg = TrainConfig(rounds=2, participation=1.0)
    base = run_phase1(cfg, clients)
    with_extra = run_phase1(cfg, clients + [extra])
    assert all(m.participants == len(clients) for m in with_extra.rounds)
    assert base.server.nav.means.tobytes() == with_extra.server.nav.means.tobytes()
