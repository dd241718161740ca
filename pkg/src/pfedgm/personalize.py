"""Phase 2: per-client fusion heads on frozen-generator representations.

For class ``i`` the fused logit is ``xi_i + zeta_i + beta_i`` where

* ``xi_i   = -1/2 (z - m_i)^T (A_g A*_i) (z - m_i)``, ``m_i = mu*_i + offset_i``
  (global prior, scaled by the gain ``A_g``);
* ``zeta_i = -(lam/d) (z - u_i)^T A_c (z - u_i)`` with ``u_i`` the client's
  class prototype (local evidence, gated by ``A_c``; zero for classes the
  client never saw);
* ``beta_i = b*_i + bias_offset_i``.

Completing the square in ``z`` turns ``xi_i + zeta_i`` into one Gaussian score
with precision ``A_g A*_i + (2 lam/d) A_c``; :func:`fused_params` returns it.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .datagen import ClientDataset
from .model import CovarianceBank, GeneratorParams, Navigator, SGDState, embed, sgd_step
from .numcore import EPS_PD, gaussian_product_diag, log_sum_exp, rng_stream, softmax
from .objectives import Prototypes, gaussian_logits, prototypes_from_embeddings

log = logging.getLogger(__name__)


@dataclass
class PersonalizeConfig:
    epochs: int = 5
    batch_size: int = 50
    lr: float = 0.05
    momentum: float = 0.5
    weight_decay: float = 5e-4
    lam: float = 1.0
    lbfgs_step: float = 0.05
    lbfgs_iters: int = 10
    lbfgs_cycles: int = 5
    lbfgs_memory: int = 10
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FusionHead:
    mean_offsets: np.ndarray  # (K, d)
    bias_offsets: np.ndarray  # (K,)
    a_g: np.ndarray           # (d,)
    a_c: np.ndarray           # (d,)
    lam: float
    d: int

    @classmethod
    def init(cls, K: int, d: int, lam: float = 1.0) -> "FusionHead":
        return cls(np.zeros((K, d)), np.zeros(K), np.ones(d), np.ones(d), float(lam), int(d))

    @property
    def coef(self) -> float:
        return self.lam / self.d

    def copy(self) -> "FusionHead":
        return FusionHead(self.mean_offsets.copy(), self.bias_offsets.copy(), self.a_g.copy(),
                          self.a_c.copy(), self.lam, self.d)


@dataclass
class FusedGaussian:
    cov: np.ndarray   # (K, d) diagonal of S-hat
    mean: np.ndarray  # (K, d)
    bias: np.ndarray  # (K,)

    def logits(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        diff = z[:, None, :] - self.mean[None]
        return -0.5 * np.sum(diff * diff / self.cov[None], axis=2) + self.bias[None]


@dataclass
class PersonalContext:
    gen: GeneratorParams
    nav: Navigator
    bank: CovarianceBank
    protos: Prototypes
    z: np.ndarray
    y: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.nav.means.shape[0]

    @property
    def dim(self) -> int:
        return self.nav.means.shape[1]


@dataclass
class FusionGrads:
    loss: float
    dmeans: np.ndarray
    dbiases: np.ndarray
    da_g: np.ndarray
    da_c: np.ndarray


def build_context(client: ClientDataset, gen: GeneratorParams, nav: Navigator,
                  bank: CovarianceBank) -> PersonalContext:
    """Embed the client's train split once; prototypes come from the same embeddings."""
    if client.n_train == 0:
        raise ValueError(f"client {client.client_id} has no training data")
    z = embed(gen, client.x_train)
    y = client.y_train.astype(np.int64)
    protos = prototypes_from_embeddings(z, y, nav.means.shape[0])
    return PersonalContext(gen, nav, bank, protos, z, y)


def _args(ctx: PersonalContext, head: FusionHead):
    return (ctx.nav.means + head.mean_offsets, ctx.bank.precisions, head.a_g,
            ctx.protos.means, head.a_c, head.coef, ctx.protos.present,
            ctx.nav.biases + head.bias_offsets)


def fusion_logits(z, ctx: PersonalContext, head: FusionHead) -> np.ndarray:
    single = np.ndim(z) == 1
    out = kernels.fusion_logits(np.atleast_2d(z), *_args(ctx, head))
    return out[0] if single else out


def fusion_loss(z_batch, y_batch, ctx: PersonalContext, head: FusionHead) -> float:
    logits = fusion_logits(np.atleast_2d(z_batch), ctx, head)
    y = np.asarray(y_batch, dtype=np.int64)
    return float(np.mean(log_sum_exp(logits, axis=1) - logits[np.arange(len(y)), y]))


def fusion_loss_and_grads(z_batch, y_batch, ctx: PersonalContext, head: FusionHead) -> FusionGrads:
    loss, dm, db, dg, dc = kernels.fusion_ce_grads(np.atleast_2d(z_batch), y_batch, *_args(ctx, head))
    return FusionGrads(loss, dm, db, dg, dc)


def predict(z, ctx: PersonalContext, head: FusionHead):
    """Class ids (ties to the smallest id) and posteriors for one vector or a batch."""
    logits = fusion_logits(z, ctx, head)
    post = softmax(logits, axis=-1)
    return np.argmax(post, axis=-1), post


def fit_personalized_head(ctx: PersonalContext, cfg: PersonalizeConfig, rng=None,
                          head: FusionHead | None = None) -> FusionHead:
    """Momentum SGD on the fusion loss over cached representations."""
    head = FusionHead.init(ctx.num_classes, ctx.dim, cfg.lam) if head is None else head.copy()
    if rng is None:
        rng = rng_stream(cfg.seed, "phase2-fit")
    params = [head.mean_offsets, head.bias_offsets, head.a_g, head.a_c]
    decay = [True, False, False, False]
    floors = [None, None, EPS_PD, 0.0]
    state = SGDState(params)
    n = len(ctx.y)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            g = fusion_loss_and_grads(ctx.z[idx], ctx.y[idx], ctx, head)
            sgd_step(params, [g.dmeans, g.dbiases, g.da_g, g.da_c], cfg.lr, cfg.momentum,
                     cfg.weight_decay, state, decay, floors)
    return head


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------

@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    n_iter: int
    history: list = field(default_factory=list)  # objective after each accepted step
    status: str = "max_iter"


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _line_search(fun, x, f0, g0, d, alpha0, c1, shrink, max_backtracks, c2=0.9):
    """Weak-Wolfe bracketing, with one secant probe of the directional derivative.

    While the sufficient-decrease test fails the step shrinks toward the last
    acceptable point, so with no curvature failures this is plain Armijo
    backtracking; when the slope is still too negative the step doubles. The
    probe lands on the exact line minimizer when the objective is quadratic
    along ``d``. Returns ``(f, alpha, grad)`` or None when no step decreases
    the objective enough.
    """
    gd = float(g0 @ d)
    armijo = lambda fa, a: fa <= f0 + c1 * a * gd
    wolfe = lambda ga: float(ga @ d) >= c2 * gd
    best = None  # lowest Armijo point seen, used if the bracket runs out

    def consider(fa, a, ga):
        nonlocal best
        if armijo(fa, a) and (best is None or fa < best[0]):
            best = (fa, a, ga)

    a = alpha0
    fa, ga = fun(x + a * d)
    consider(fa, a, ga)
    slope_a = float(ga @ d)
    if slope_a > gd:
        aq = a * gd / (gd - slope_a)
        if np.isfinite(aq) and aq > 0 and aq != a:
            fq, gq = fun(x + aq * d)
            consider(fq, aq, gq)
            if armijo(fq, aq) and wolfe(gq) and fq <= fa:
                return fq, aq, gq
    lo, hi = 0.0, np.inf
    for _ in range(2 * max_backtracks):
        if not armijo(fa, a):
            hi = a
        elif not wolfe(ga):
            lo = a
        else:
            return fa, a, ga
        a = lo + shrink * (hi - lo) if np.isfinite(hi) else 2.0 * a
        fa, ga = fun(x + a * d)
        consider(fa, a, ga)
    return best


def lbfgs_minimize(fun, x0, max_iter: int = 10, memory: int = 10, step: float = 1.0,
                   c1: float = 1e-4, shrink: float = 0.5, max_backtracks: int = 20,
                   gtol: float = 1e-10) -> LBFGSResult:
    """Minimize ``fun(x) -> (f, grad)`` with two-loop L-BFGS.

    Every accepted step satisfies the Armijo condition, so the objective
    never increases. On line-search failure the last accepted iterate is
    returned with ``status='line_search_failed'``.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    s_hist, y_hist = deque(maxlen=memory), deque(maxlen=memory)
    res = LBFGSResult(x, f, 0, [f])
    for it in range(max_iter):
        if np.max(np.abs(g)) < gtol:
            res.status = "converged"
            break
        d = -_two_loop(g, list(s_hist), list(y_hist))
        if g @ d >= 0:
            s_hist.clear(); y_hist.clear()
            d = -g
        found = _line_search(fun, x, f, g, d, step, c1, shrink, max_backtracks)
        if found is None:
            res.status = "line_search_failed"
            log.info("L-BFGS line search failed at iteration %d", it)
            break
        f_new, a, g_new = found
        s, yv = a * d, g_new - g
        if s @ yv > 1e-12 * max(1.0, np.linalg.norm(s) * np.linalg.norm(yv)):
            s_hist.append(s); y_hist.append(yv)
        x, f, g = x + s, f_new, g_new
        res.history.append(f)
        res.n_iter = it + 1
    res.x, res.fun = x, f
    if res.status == "max_iter" and np.max(np.abs(g)) < gtol:
        res.status = "converged"
    return res


def lbfgs_refine_bias(ctx: PersonalContext, head: FusionHead, cfg: PersonalizeConfig):
    """Refine only the bias offsets on the full local data.

    Returns ``(head, loss_before, loss_after)``; other head blocks are frozen.
    """
    head = head.copy()
    z, y = ctx.z, ctx.y

    def fun(b):
        head.bias_offsets = b
        g = fusion_loss_and_grads(z, y, ctx, head)
        return g.loss, g.dbiases

    start = head.bias_offsets.copy()
    before, _ = fun(start)
    b = start
    for _ in range(cfg.lbfgs_cycles):
        r = lbfgs_minimize(fun, b, max_iter=cfg.lbfgs_iters, memory=cfg.lbfgs_memory,
                           step=cfg.lbfgs_step)
        b = r.x
        if r.status != "max_iter":
            break
    head.bias_offsets = b.copy()
    after = fusion_loss(z, y, ctx, head)
    return head, before, after


# ---------------------------------------------------------------------------
# Fused Gaussian view and Bayesian combination
# ---------------------------------------------------------------------------

def fused_params(ctx: PersonalContext, head: FusionHead) -> FusedGaussian:
    """Per-class Gaussian equivalent to ``xi + zeta + beta`` (exact, z-independent offset absorbed)."""
    m = ctx.nav.means + head.mean_offsets
    G = head.a_g[None, :] * ctx.bank.precisions
    C = (2.0 * head.lam / head.d) * np.broadcast_to(head.a_c, G.shape)
    C = np.where(ctx.protos.present[:, None], C, 0.0)
    u = ctx.protos.means
    mean, prec = gaussian_product_diag(m, G, u, C)
    const = np.sum(G * m * m, axis=1) + np.sum(C * u * u, axis=1) - np.sum(prec * mean * mean, axis=1)
    bias = ctx.nav.biases + head.bias_offsets - 0.5 * const
    return FusedGaussian(1.0 / prec, mean, bias)


def combine_observations(zs, obs_prec):
    """n i.i.d. observations with shared precision collapse to one at their mean with n times the precision."""
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    return zs.mean(axis=0), len(zs) * np.asarray(obs_prec, dtype=np.float64)


def posterior_from_observations(prior_mean, prior_prec, zs, obs_prec):
    zbar, prec_n = combine_observations(zs, obs_prec)
    return gaussian_product_diag(prior_mean, prior_prec, zbar, prec_n)


# ---------------------------------------------------------------------------
# Phase 2 driver
# ---------------------------------------------------------------------------

@dataclass
class ClientResult:
    client_id: int
    n_train: int
    n_test: int
    acc_global: float | None
    acc_finetuned: float | None
    acc_personalized: float | None
    train_loss_before_lbfgs: float
    train_loss_after_lbfgs: float
    head: FusionHead = field(repr=False, default=None)


def _acc(pred, y) -> float:
    return float(np.mean(pred == y))


def personalize_client(client: ClientDataset, gen, nav, bank, cfg: PersonalizeConfig) -> ClientResult:
    ctx = build_context(client, gen, nav, bank)
    head = fit_personalized_head(ctx, cfg, rng_stream(cfg.seed, client.client_id, "phase2"))
    refined, before, after = lbfgs_refine_bias(ctx, head, cfg)
    acc_g = acc_f = acc_p = None
    if client.n_test:
        zt = embed(gen, client.x_test)
        yt = client.y_test
        acc_g = _acc(np.argmax(gaussian_logits(zt, nav, bank), axis=1), yt)
        acc_f = _acc(predict(zt, ctx, head)[0], yt)
        acc_p = _acc(predict(zt, ctx, refined)[0], yt)
    return ClientResult(client.client_id, client.n_train, client.n_test, acc_g, acc_f, acc_p,
                        before, after, refined)


def run_phase2(clients, gen, nav, bank, cfg: PersonalizeConfig) -> list[ClientResult]:
    """Independent per-client adaptation; results ordered by client id."""
    out = []
    for c in sorted(clients, key=lambda c: c.client_id):
        if c.n_train == 0:
            log.warning("client %d has no training data; excluded from phase 2", c.client_id)
            continue
        r = personalize_client(c, gen, nav, bank, cfg)
        if c.n_test == 0:
            log.warning("client %d has an empty test split; excluded from accuracy", c.client_id)
        out.append(r)
    return out
