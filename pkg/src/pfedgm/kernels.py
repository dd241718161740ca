"""Backend selection for the mixture-classifier kernels.

The compiled extension ``pfedgm._ckernels`` is used when it imports; setting
``PFEDGM_PURE_PYTHON=1`` forces the NumPy fallback. Both backends share one
contract, and :func:`use_backend` switches between them at runtime (tests and
the benchmark do this).
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

_active = _pykernels if (_ckernels is None or os.environ.get("PFEDGM_PURE_PYTHON") == "1") else _ckernels


def backend_name() -> str:
    return "cython" if _active is _ckernels and _ckernels is not None else "python"


def use_backend(name: str) -> str:
    """Activate a backend by name; returns the previously active name."""
    global _active
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    prev = backend_name()
    _active = BACKENDS[name]
    return prev


def _f(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _labels(y):
    return np.ascontiguousarray(y, dtype=np.int64)


def mixture_logits(z, means, prec, bias):
    return _active.mixture_logits(_f(z), _f(means), _f(prec), _f(bias))


def mixture_ce_grads(z, y, means, prec, bias):
    return _active.mixture_ce_grads(_f(z), _labels(y), _f(means), _f(prec), _f(bias))


def fusion_logits(z, centers, prec_star, a_g, protos, a_c, coef, present, bias):
    return _active.fusion_logits(
        _f(z), _f(centers), _f(prec_star), _f(a_g), _f(protos), _f(a_c), float(coef),
        np.ascontiguousarray(present, dtype=np.uint8), _f(bias))


def fusion_ce_grads(z, y, centers, prec_star, a_g, protos, a_c, coef, present, bias):
    return _active.fusion_ce_grads(
        _f(z), _labels(y), _f(centers), _f(prec_star), _f(a_g), _f(protos), _f(a_c),
        float(coef), np.ascontiguousarray(present, dtype=np.uint8), _f(bias))
