"""Phase-1 losses and their analytic gradients.

All losses are batch means. Signs follow ``logit_i = -1/2 (z-mu_i)^T A_i (z-mu_i) + b_i``
and the loss is the negative log softmax of the true class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import CovarianceBank, DenseHead, GeneratorParams, Navigator, embed
from .numcore import log_sum_exp, softmax


@dataclass
class Prototypes:
    means: np.ndarray    # (K, d)
    present: np.ndarray  # (K,) bool
    ema_rate: float = 0.1

    def copy(self) -> "Prototypes":
        return Prototypes(self.means.copy(), self.present.copy(), self.ema_rate)


@dataclass
class LossBreakdown:
    H: float
    R: float
    lam: float

    @property
    def total(self) -> float:
        return self.H + self.lam * self.R


@dataclass
class SharedGrads:
    H: float
    dz: np.ndarray     # (n, d)
    dmeans: np.ndarray  # (K, d)
    dbiases: np.ndarray  # (K,)


@dataclass
class PersonalLoss:
    R: float
    dz: np.ndarray
    n_missing: int  # samples whose label had no prototype


def _batch(z):
    z = np.asarray(z, dtype=np.float64)
    return z[None, :] if z.ndim == 1 else z


def gaussian_logits(z, nav: Navigator, bank: CovarianceBank | None = None) -> np.ndarray:
    """Logits for one vector ``(K,)`` or a batch ``(n, K)``."""
    single = np.ndim(z) == 1
    prec = np.ones_like(nav.means) if bank is None else bank.precisions
    out = kernels.mixture_logits(_batch(z), nav.means, prec, nav.biases)
    return out[0] if single else out


def class_posterior(logits) -> np.ndarray:
    return softmax(logits, axis=-1)


def shared_loss_and_grads(z_batch, y_batch, nav: Navigator) -> SharedGrads:
    """Shared objective: mixture cross-entropy with identity covariances.

    Per sample, the gradient with respect to ``z`` is ``(sum_i P_i mu_i - mu_y) / n``.
    """
    loss, dz, dm, _, db = kernels.mixture_ce_grads(
        _batch(z_batch), y_batch, nav.means, np.ones_like(nav.means), nav.biases)
    return SharedGrads(loss, dz, dm, db)


def covariance_loss_and_grad(z_batch, y_batch, nav_frozen: Navigator, bank: CovarianceBank):
    """Mixture cross-entropy with the bank's precisions; gradient only w.r.t. the bank.

    ``dHhat/dA_ij = mean over batch of 1/2 (1{i=y} - P_i) (z_j - mu_ij)^2``.
    """
    loss, _, _, dprec, _ = kernels.mixture_ce_grads(
        _batch(z_batch), y_batch, nav_frozen.means, bank.precisions, nav_frozen.biases)
    return loss, dprec


def personal_loss_and_grad(z_batch, y_batch, protos: Prototypes, d: int | None = None) -> PersonalLoss:
    z = _batch(z_batch)
    y = np.asarray(y_batch, dtype=np.int64)
    n = len(z)
    d = z.shape[1] if d is None else d
    ok = protos.present[y]
    diff = np.where(ok[:, None], z - protos.means[y], 0.0)
    R = float(np.sum(diff * diff) / (n * d))
    return PersonalLoss(R, 2.0 / (n * d) * diff, int(n - ok.sum()))


def compute_prototypes_exact(x, y, gen: GeneratorParams, num_classes: int,
                             ema_rate: float = 0.1) -> Prototypes:
    z = embed(gen, x)
    return prototypes_from_embeddings(z, y, num_classes, ema_rate)


def prototypes_from_embeddings(z, y, num_classes: int, ema_rate: float = 0.1) -> Prototypes:
    z = _batch(z)
    y = np.asarray(y, dtype=np.int64)
    counts = np.bincount(y, minlength=num_classes).astype(np.float64)
    sums = np.zeros((num_classes, z.shape[1]))
    np.add.at(sums, y, z)
    present = counts > 0
    means = np.zeros_like(sums)
    means[present] = sums[present] / counts[present, None]
    return Prototypes(means, present, ema_rate)


def update_prototypes(protos: Prototypes, z_batch, y_batch, ema_rate: float | None = None) -> Prototypes:
    """EMA step toward this batch's class means; in place, also returned."""
    rate = protos.ema_rate if ema_rate is None else ema_rate
    if not 0 < rate <= 1:
        raise ValueError("ema_rate must lie in (0, 1]")
    z = _batch(z_batch)
    y = np.asarray(y_batch, dtype=np.int64)
    for k in np.unique(y):
        m = z[y == k].mean(axis=0)
        if protos.present[k]:
            protos.means[k] = (1.0 - rate) * protos.means[k] + rate * m
        else:
            protos.means[k] = m
            protos.present[k] = True
    return protos


def mixture_nll(z_batch, y_batch, nav: Navigator, bank: CovarianceBank | None = None) -> float:
    """Loss only, via logits; used as an independent cross-check."""
    logits = gaussian_logits(_batch(z_batch), nav, bank)
    y = np.asarray(y_batch, dtype=np.int64)
    return float(np.mean(log_sum_exp(logits, axis=1) - logits[np.arange(len(y)), y]))


def dense_logits(z, head: DenseHead) -> np.ndarray:
    return _batch(z) @ head.W.T + head.c


def dense_ce_and_grads(z_batch, y_batch, head: DenseHead):
    """Softmax cross-entropy of a dense head; returns ``(loss, dz, dW, dc)``."""
    z = _batch(z_batch)
    y = np.asarray(y_batch, dtype=np.int64)
    n = len(z)
    logits = z @ head.W.T + head.c
    loss = float(np.mean(log_sum_exp(logits, axis=1) - logits[np.arange(n), y]))
    g = softmax(logits, axis=1)
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, g @ head.W, g.T @ z, g.sum(axis=0)
