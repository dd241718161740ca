"""Acceptance checks, runnable from the CLI (``pfedgm selftest``) or pytest.

Each check returns a :class:`CheckResult`; the end-to-end checks share one
cached set of runs so the expensive training happens once per process.
"""

from __future__ import annotations

import functools
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import ResampleWeight, analytic_resample_params, weighted_resample
from .experiment import default_config, load_config, run_experiment
from .model import CovarianceBank, Navigator, backward, forward, init_generator
from .numcore import finite_diff_grad, relative_error, rng_stream, softmax
from .objectives import (Prototypes, class_posterior, covariance_loss_and_grad, gaussian_logits,
                         mixture_nll, personal_loss_and_grad, shared_loss_and_grads)
from .personalize import (FusionHead, PersonalContext, combine_observations, fused_params,
                          fusion_logits, fusion_loss,
                          fusion_loss_and_grads, lbfgs_minimize, posterior_from_observations)

E2E_SEEDS = (0, 1, 2)


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# shared random instances


def _random_context(rng, K, d, n, absent=True):
    nav = Navigator(rng.standard_normal((K, d)), rng.standard_normal(K))
    bank = CovarianceBank(rng.uniform(0.5, 2.0, (K, d)))
    present = np.ones(K, dtype=bool)
    if absent and K > 1:
        present[rng.integers(K)] = False
    protos = Prototypes(np.where(present[:, None], rng.standard_normal((K, d)), 0.0), present)
    z = rng.standard_normal((n, d))
    y = rng.integers(0, K, n)
    return PersonalContext(None, nav, bank, protos, z, y)


def _random_head(rng, K, d, lam=1.0):
    return FusionHead(0.3 * rng.standard_normal((K, d)), 0.3 * rng.standard_normal(K),
                      rng.uniform(0.5, 1.5, d), rng.uniform(0.2, 1.5, d), lam, d)


# ---------------------------------------------------------------------------
# 1


def check_resampling(instances=20, pool=200_000, n_out=100_000, tol=0.02, budget_s=30.0):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(instances):
        rng = rng_stream(1234, i, "accept-resample")
        d = int(rng.integers(1, 9))
        mu = rng.uniform(-1, 1, d)
        S = rng.uniform(0.2, 1.0, d)
        nu = mu + rng.uniform(-0.5, 0.5, d)
        Om = rng.uniform(1.0, 4.0, d)
        src = mu + np.sqrt(S) * rng.standard_normal((pool, d))
        out = weighted_resample(src, ResampleWeight(nu, Om), n_out, rng)
        m_star, S_star = analytic_resample_params(mu, S, nu, Om)
        worst = max(worst, np.max(np.abs(out.mean(axis=0) - m_star)),
                    np.max(np.abs(out.var(axis=0) - S_star)))
    dt = time.perf_counter() - t0
    return CheckResult(1, "re-sampling oracle", worst < tol and dt < budget_s,
                       f"max abs err {worst:.4f} (tol {tol}), {dt:.1f}s (budget {budget_s:.0f}s)")


# ---------------------------------------------------------------------------
# 2


def _fd_check(f, x, analytic, h=1e-5):
    return relative_error(analytic, finite_diff_grad(f, x, h))


def _gen_instance(rng, h=1e-5):
    """Generator and input batch with every pre-activation clear of the ReLU kink."""
    while True:
        gen = init_generator([5, 7, 6, 4], rng)
        for layer in gen.layers:
            layer.b[:] = 0.1 * rng.standard_normal(layer.b.shape)
        x = rng.standard_normal((6, 5))
        _, tape = forward(gen, x)
        if all(np.min(np.abs(p)) > 1e3 * h for p in tape.pre[:-1]):
            return gen, x


def check_gradients(instances=10, tol=1e-4, budget_s=10.0):
    t0 = time.perf_counter()
    worst = {}

    def note(key, err):
        worst[key] = max(worst.get(key, 0.0), err)

    for i in range(instances):
        rng = rng_stream(99, i, "accept-grad")
        K, d, n = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(3, 9))
        ctx = _random_context(rng, K, d, n)
        z, y, nav, bank = ctx.z, ctx.y, ctx.nav, ctx.bank

        g = shared_loss_and_grads(z, y, nav)
        note("H/z", _fd_check(lambda v: mixture_nll(v, y, nav), z, g.dz))
        note("H/mu", _fd_check(lambda v: mixture_nll(z, y, Navigator(v, nav.biases)), nav.means, g.dmeans))
        note("H/b", _fd_check(lambda v: mixture_nll(z, y, Navigator(nav.means, v)), nav.biases, g.dbiases))

        _, dprec = covariance_loss_and_grad(z, y, nav, bank)
        note("Hhat/A", _fd_check(lambda v: mixture_nll(z, y, nav, CovarianceBank(v)), bank.precisions, dprec))

        pl = personal_loss_and_grad(z, y, ctx.protos)
        note("R/z", _fd_check(lambda v: personal_loss_and_grad(v, y, ctx.protos).R, z, pl.dz))

        head = _random_head(rng, K, d, lam=float(rng.uniform(0.1, 2.0)))
        fg = fusion_loss_and_grads(z, y, ctx, head)

        def with_block(name):
            def f(v):
                h2 = head.copy()
                setattr(h2, name, v)
                return fusion_loss(z, y, ctx, h2)
            return f

        note("L/offsets", _fd_check(with_block("mean_offsets"), head.mean_offsets, fg.dmeans))
        note("L/bias", _fd_check(with_block("bias_offsets"), head.bias_offsets, fg.dbiases))
        note("L/A_g", _fd_check(with_block("a_g"), head.a_g, fg.da_g))
        note("L/A_c", _fd_check(with_block("a_c"), head.a_c, fg.da_c))

        gen, x = _gen_instance(rng)
        w = rng.standard_normal((len(x), gen.output_dim))
        out, tape = forward(gen, x)
        grads, dx = backward(gen, tape, w, need_input_grad=True)
        note("gen/x", _fd_check(lambda v: float(np.sum(forward(gen, v)[0] * w)), x, dx))
        for arr, ga in zip(gen.arrays(), grads):
            def f(v, arr=arr):
                saved = arr.copy()
                arr[...] = v
                val = float(np.sum(forward(gen, x)[0] * w))
                arr[...] = saved
                return val
            note("gen/params", _fd_check(f, arr.copy(), ga))
    dt = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = all(v < tol for v in worst.values()) and dt < budget_s
    return CheckResult(2, "gradient suite", ok,
                       f"worst rel err {worst[top]:.2e} ({top}, tol {tol:g}), {dt:.1f}s (budget {budget_s:.0f}s)")


# ---------------------------------------------------------------------------
# 3


def check_identities(n=1000):
    rng = rng_stream(7, "accept-identities")
    K, d = 6, 5
    ctx = _random_context(rng, K, d, n)
    z = 3.0 * rng.standard_normal((n, d))
    head = _random_head(rng, K, d)
    sum_err = max(np.max(np.abs(class_posterior(gaussian_logits(z, ctx.nav, ctx.bank)).sum(axis=1) - 1)),
                  np.max(np.abs(softmax(fusion_logits(z, ctx, head), axis=1).sum(axis=1) - 1)))
    init = FusionHead.init(K, d, lam=0.0)
    red_err = np.max(np.abs(fusion_logits(z, ctx, init) - gaussian_logits(z, ctx.nav, ctx.bank)))
    y = rng.integers(0, K, n)
    ident = CovarianceBank(np.ones((K, d)))
    h_err = abs(covariance_loss_and_grad(z, y, ctx.nav, ident)[0] - shared_loss_and_grads(z, y, ctx.nav).H)
    ok = sum_err <= 1e-9 and red_err <= 1e-12 and h_err <= 1e-12
    return CheckResult(3, "posterior and reduction identities", ok,
                       f"|sum P - 1| {sum_err:.1e}, lam=0 head {red_err:.1e}, Hhat(I)-H {h_err:.1e}")


# ---------------------------------------------------------------------------
# 4


def check_bayes_fusion(tol=1e-6):
    worst = 0.0
    exact = True
    for i in range(5):
        rng = rng_stream(5, i, "accept-bayes")
        m0, p0 = rng.uniform(-2, 2), rng.uniform(0.2, 3.0)
        A, n = rng.uniform(0.5, 4.0), int(rng.integers(1, 12))
        zs = rng.normal(rng.uniform(-2, 2), 1 / np.sqrt(A), (n, 1))
        mean, prec = posterior_from_observations(np.array([m0]), np.array([p0]), zs, np.array([A]))
        sd = 1 / np.sqrt(prec[0])
        grid = np.linspace(mean[0] - 14 * sd, mean[0] + 14 * sd, 200_001)
        logp = -0.5 * p0 * (grid - m0) ** 2 - 0.5 * A * np.sum((grid[None, :] - zs) ** 2, axis=0)
        w = np.exp(logp - logp.max())
        w /= w.sum()
        gm = float(np.sum(w * grid))
        gv = float(np.sum(w * (grid - gm) ** 2))
        worst = max(worst, abs(gm - mean[0]), abs(gv - 1 / prec[0]))
        exact &= bool(combine_observations(zs, np.array([A]))[1][0] == n * A)
    return CheckResult(4, "Bayesian fusion oracle", worst < tol and exact,
                       f"grid vs closed form {worst:.1e} (tol {tol:g}), precision n*A exact: {exact}")


# ---------------------------------------------------------------------------
# 5


def check_fused_consistency(tol=1e-8):
    worst = 0.0
    for i in range(10):
        rng = rng_stream(17, i, "accept-fused")
        K, d = int(rng.integers(2, 7)), int(rng.integers(1, 9))
        ctx = _random_context(rng, K, d, 1)
        head = _random_head(rng, K, d, lam=float(rng.uniform(0.0, 3.0)))
        fg = fused_params(ctx, head)
        z = 2.0 * rng.standard_normal((100, d))
        diff = fg.logits(z) - fusion_logits(z, ctx, head)
        worst = max(worst, float(np.max(diff.max(axis=0) - diff.min(axis=0))))
    return CheckResult(5, "fused-parameter consistency", worst < tol,
                       f"max spread of score difference {worst:.1e} (tol {tol:g})")


# ---------------------------------------------------------------------------
# 6


def check_lbfgs(tol=1e-8, problems=100):
    worst, max_it = 0.0, 0
    for i in range(20):
        rng = rng_stream(23, i, "accept-quad")
        K = int(rng.integers(1, 11))
        B = rng.standard_normal((K, K))
        Q = B @ B.T / K + np.diag(rng.uniform(0.5, 2.0, K))
        c = rng.standard_normal(K)
        res = lbfgs_minimize(lambda x: (0.5 * x @ Q @ x - c @ x, Q @ x - c), np.zeros(K),
                             max_iter=10, memory=10, step=1.0)
        worst = max(worst, float(np.max(np.abs(res.x - np.linalg.solve(Q, c)))))
        max_it = max(max_it, res.n_iter)
    increases = 0
    for i in range(problems):
        rng = rng_stream(29, i, "accept-bias")
        K, d = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        ctx = _random_context(rng, K, d, int(rng.integers(5, 60)))
        head = _random_head(rng, K, d)

        def fun(b):
            head.bias_offsets = b
            g = fusion_loss_and_grads(ctx.z, ctx.y, ctx, head)
            return g.loss, g.dbiases

        res = lbfgs_minimize(fun, head.bias_offsets.copy(), max_iter=10, step=0.05)
        increases += int(np.any(np.diff(res.history) > 0))
    ok = worst < tol and max_it <= 10 and increases == 0
    return CheckResult(6, "L-BFGS correctness", ok,
                       f"quadratic err {worst:.1e} in <= {max_it} iters; "
                       f"{increases}/{problems} bias problems with an increase")


# ---------------------------------------------------------------------------
# 7, 8, 10: shared end-to-end runs


@functools.lru_cache(maxsize=None)
def e2e_runs(seeds=E2E_SEEDS):
    """Per seed: (pfedgm summary, fedavgft summary); plus total wall seconds."""
    t0 = time.perf_counter()
    out = {}
    for s in seeds:
        p = run_experiment(default_config("pfedgm", s), write=False)
        f = run_experiment(default_config("fedavgft", s), write=False)
        out[s] = (p, f)
    return out, time.perf_counter() - t0


def check_directional(margin=0.05, budget_s=300.0):
    runs, dt = e2e_runs()
    gaps = {s: p.mean - f.global_mean for s, (p, f) in runs.items()}
    p_avg = np.mean([p.mean for p, _ in runs.values()])
    ft_avg = np.mean([f.mean for _, f in runs.values()])
    ok = all(g >= margin for g in gaps.values()) and p_avg >= ft_avg and dt < budget_s
    gap_txt = ", ".join(f"{100 * g:.1f}" for g in gaps.values())
    return CheckResult(7, "end-to-end direction", ok,
                       f"pFedGM - FedAvg per seed [{gap_txt}] pts; pFedGM {p_avg:.4f} vs "
                       f"FedAvgFT {ft_avg:.4f}; {dt:.0f}s (budget {budget_s:.0f}s)")


def check_ablation(min_gap=0.03):
    runs, _ = e2e_runs()
    na = np.mean([p.ablation["NA"] for p, _ in runs.values()])
    fa = np.mean([p.ablation["FA"] for p, _ in runs.values()])
    ga = np.mean([p.ablation["GA"] for p, _ in runs.values()])
    ok = ga >= fa >= na and fa - na >= min_gap
    return CheckResult(8, "ablation direction", ok, f"GA {ga:.4f} >= FA {fa:.4f} >= NA {na:.4f}")


def check_convergence():
    runs, _ = e2e_runs()
    pairs = [(p.rounds[0].mean_train_loss, p.rounds[-1].mean_train_loss) for p, _ in runs.values()]
    ok = all(last < first for first, last in pairs)
    txt = ", ".join(f"{a:.3f}->{b:.3f}" for a, b in pairs)
    return CheckResult(10, "phase-1 loss decreases", ok, txt)


# ---------------------------------------------------------------------------
# 9


def _small_config(seed, workers, out_dir):
    cfg = default_config("pfedgm", seed, out_dir=str(out_dir), run_id="a")
    cfg.train.rounds = 6
    cfg.train.workers = workers
    return cfg


def check_determinism():
    names = ("rounds.csv", "clients.csv")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        first = run_experiment(_small_config(4, 1, tmp / "one"))
        again = load_config(Path(first.run_dir) / "manifest.json")
        again.out_dir = str(tmp / "two")
        rerun = run_experiment(again)
        par = run_experiment(_small_config(4, 4, tmp / "par"))
        ft_a = run_experiment(default_config("fedavgft", 4, out_dir=str(tmp / "fa"), run_id="a"))
        ft_b = run_experiment(default_config("fedavgft", 4, out_dir=str(tmp / "fb"), run_id="a"))
        same = lambda a, b: all((Path(a.run_dir) / n).read_bytes() == (Path(b.run_dir) / n).read_bytes()
                                for n in names)
        rerun_ok, par_ok, ft_ok = same(first, rerun), same(first, par), same(ft_a, ft_b)
    return CheckResult(9, "determinism", rerun_ok and par_ok and ft_ok,
                       f"manifest re-run identical: {rerun_ok}; 4 workers identical: {par_ok}; "
                       f"fedavgft re-run identical: {ft_ok}")


CHECKS = {
    1: check_resampling,
    2: check_gradients,
    3: check_identities,
    4: check_bayes_fusion,
    5: check_fused_consistency,
    6: check_lbfgs,
    7: check_directional,
    8: check_ablation,
    9: check_determinism,
    10: check_convergence,
}


def run_all(numbers=None) -> list[CheckResult]:
    return [CHECKS[k]() for k in sorted(numbers or CHECKS)]
