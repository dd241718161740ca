"""Pure-NumPy implementations of the mixture-classifier kernels.

Shapes: ``z`` is ``(n, d)``, ``y`` is ``(n,)`` integer labels, per-class
arrays are ``(K, d)`` and biases ``(K,)``. Loss values are batch means and
gradients are gradients of that mean.
"""

import numpy as np


def _ce(logits, y):
    n = logits.shape[0]
    top = logits.max(axis=1, keepdims=True)
    shifted = logits - top
    e = np.exp(shifted)
    s = e.sum(axis=1)
    loss = float(np.mean(np.log(s) - shifted[np.arange(n), y]))
    g = e / s[:, None]
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, g


def mixture_logits(z, means, prec, bias):
    diff = z[:, None, :] - means[None, :, :]
    q = (diff * diff * prec[None, :, :]).sum(axis=2)
    return -0.5 * q + bias[None, :]


def mixture_ce_grads(z, y, means, prec, bias):
    """Cross-entropy of diagonal-precision Gaussian logits and all gradients.

    Returns ``(loss, dz, dmeans, dprec, dbias)``.
    """
    diff = z[:, None, :] - means[None, :, :]
    sq = diff * diff
    logits = -0.5 * (sq * prec[None, :, :]).sum(axis=2) + bias[None, :]
    loss, g = _ce(logits, y)
    # d logit_i / d z = -A_i (z - mu_i); d logit_i / d mu_i = A_i (z - mu_i)
    w = g[:, :, None] * prec[None, :, :] * diff
    dz = -w.sum(axis=1)
    dmeans = w.sum(axis=0)
    dprec = -0.5 * (g[:, :, None] * sq).sum(axis=0)
    dbias = g.sum(axis=0)
    return loss, dz, dmeans, dprec, dbias


def fusion_logits(z, centers, prec_star, a_g, protos, a_c, coef, present, bias):
    diff = z[:, None, :] - centers[None, :, :]
    gprec = a_g[None, :] * prec_star
    xi = -0.5 * (diff * diff * gprec[None, :, :]).sum(axis=2)
    dp = z[:, None, :] - protos[None, :, :]
    zeta = -coef * (dp * dp * a_c[None, None, :]).sum(axis=2)
    zeta = np.where(present[None, :], zeta, 0.0)
    return xi + zeta + bias[None, :]


def fusion_ce_grads(z, y, centers, prec_star, a_g, protos, a_c, coef, present, bias):
    """Cross-entropy of the fused logits.

    Returns ``(loss, dcenters, dbias, da_g, da_c)``. ``dcenters`` equals the
    gradient with respect to the per-class mean offsets.
    """
    diff = z[:, None, :] - centers[None, :, :]
    sq = diff * diff
    gprec = a_g[None, :] * prec_star
    xi = -0.5 * (sq * gprec[None, :, :]).sum(axis=2)
    dp = z[:, None, :] - protos[None, :, :]
    sqp = dp * dp
    zeta = -coef * (sqp * a_c[None, None, :]).sum(axis=2)
    mask = present.astype(bool)
    zeta = np.where(mask[None, :], zeta, 0.0)
    logits = xi + zeta + bias[None, :]
    loss, g = _ce(logits, y)
    dcenters = (g[:, :, None] * gprec[None, :, :] * diff).sum(axis=0)
    da_g = -0.5 * (g[:, :, None] * prec_star[None, :, :] * sq).sum(axis=(0, 1))
    gm = g * mask[None, :]
    da_c = -coef * (gm[:, :, None] * sqp).sum(axis=(0, 1))
    dbias = g.sum(axis=0)
    return loss, dcenters, dbias, da_g, da_c
