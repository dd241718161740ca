"""Random streams, diagonal Gaussian helpers and numerical utilities.

Every stochastic routine in the package takes a ``numpy.random.Generator``
built by :func:`rng_stream`. Streams are keyed by a tuple of integers
(master seed, client id, round, purpose...) so that parallel tasks can derive
their own generator without coordinating with each other.
"""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

EPS_PD = 1e-6

RngStream = np.random.Generator


def _key_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


def rng_stream(seed: int, *keys) -> RngStream:
    """Return a Philox-backed generator for ``(seed, *keys)``.

    String keys are hashed with CRC32, so ``rng_stream(7, 3, "local")`` is
    stable across runs, processes and platforms.
    """
    entropy = [_key_int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def project_pd(diag: np.ndarray, floor: float = EPS_PD) -> np.ndarray:
    """Clip a diagonal (or stack of diagonals) in place to ``>= floor``."""
    np.maximum(diag, floor, out=diag)
    return diag


def sample_gaussian(mean, cov_diag, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Draw from N(mean, diag(cov_diag)).

    With ``size`` set, returns an array of shape ``(size, d)``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    scale = np.sqrt(np.asarray(cov_diag, dtype=np.float64))
    shape = mean.shape if size is None else (size,) + mean.shape
    return mean + scale * rng.standard_normal(shape)


def log_sum_exp(values, axis: int = -1) -> np.ndarray | float:
    values = np.asarray(values, dtype=np.float64)
    top = np.max(values, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(values - top), axis=axis, keepdims=True)) + top
    out = np.squeeze(out, axis=axis)
    return float(out) if out.ndim == 0 else out


def softmax(logits, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar field; ``x`` keeps its shape."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(x)
        flat[j] = orig - h
        fm = f(x)
        flat[j] = orig
        grad[j] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative discrepancy ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gaussian_product_diag(mean_a, prec_a, mean_b, prec_b):
    """Combine two diagonal Gaussians by multiplying their densities.

    Returns ``(mean, precision)`` of the normalized product; precisions add.
    """
    prec_a = np.asarray(prec_a, dtype=np.float64)
    prec_b = np.asarray(prec_b, dtype=np.float64)
    prec = prec_a + prec_b
    mean = (prec_a * np.asarray(mean_a, dtype=np.float64)
            + prec_b * np.asarray(mean_b, dtype=np.float64)) / prec
    return mean, prec
