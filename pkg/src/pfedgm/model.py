"""Generator MLP with hand-derived backprop, and the decoupled classifier state.

The classifier is split into a navigator (class means and biases, scored with
identity covariance) and a covariance bank (per-class diagonal precisions)
whose gradients never reach the generator or the navigator.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import EPS_PD, RngStream


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "relu"  # "relu" | "identity"


@dataclass
class GeneratorParams:
    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [l.W.shape[0] for l in self.layers]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def copy(self) -> "GeneratorParams":
        return copy.deepcopy(self)


@dataclass
class Navigator:
    means: np.ndarray  # (K, d)
    biases: np.ndarray  # (K,)

    def copy(self) -> "Navigator":
        return Navigator(self.means.copy(), self.biases.copy())


@dataclass
class CovarianceBank:
    precisions: np.ndarray  # (K, d), diagonal inverse covariances

    def copy(self) -> "CovarianceBank":
        return CovarianceBank(self.precisions.copy())


@dataclass
class DenseHead:
    """Softmax head ``logits = z W^T + c`` used by the FedAvg-family baselines."""
    W: np.ndarray  # (K, d)
    c: np.ndarray  # (K,)

    def copy(self) -> "DenseHead":
        return DenseHead(self.W.copy(), self.c.copy())


@dataclass
class ForwardTape:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)     # pre-activations


def forward(gen: GeneratorParams, x) -> tuple[np.ndarray, ForwardTape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != gen.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != generator input dim {gen.input_dim}")
    tape = ForwardTape()
    h = x
    for layer in gen.layers:
        tape.inputs.append(h)
        a = h @ layer.W.T + layer.b
        tape.pre.append(a)
        h = np.maximum(a, 0.0) if layer.activation == "relu" else a
    return h, tape


def embed(gen: GeneratorParams, x) -> np.ndarray:
    return forward(gen, x)[0]


def backward(gen: GeneratorParams, tape: ForwardTape, dz, need_input_grad: bool = False):
    """Reverse-mode pass; returns ``(grads, dx)`` with grads ordered like ``gen.arrays()``.

    ReLU subgradient at 0 is 0.
    """
    g = np.asarray(dz, dtype=np.float64)
    if g.shape != tape.pre[-1].shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {tape.pre[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(gen.layers))
    for i in range(len(gen.layers) - 1, -1, -1):
        layer = gen.layers[i]
        if layer.activation == "relu":
            g = g * (tape.pre[i] > 0)
        grads[2 * i] = g.T @ tape.inputs[i]
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ layer.W
    return grads, (g if need_input_grad else None)


def init_generator(dims, rng: RngStream) -> GeneratorParams:
    """He-initialized MLP; ReLU on hidden layers, identity on the last."""
    dims = list(dims)
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise ValueError(f"invalid layer dims {dims}")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        W = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        act = "identity" if i == len(dims) - 2 else "relu"
        layers.append(Layer(W, np.zeros(fan_out), act))
    return GeneratorParams(layers)


def init_navigator(K: int, d: int, rng: RngStream) -> Navigator:
    # entries ~ N(0, 1/sqrt(d)), i.e. std d**-0.25
    return Navigator(rng.standard_normal((K, d)) * d ** -0.25, np.zeros(K))


def init_covariance_bank(K: int, d: int) -> CovarianceBank:
    return CovarianceBank(np.ones((K, d)))


def init_dense_head(K: int, d: int, rng: RngStream) -> DenseHead:
    return DenseHead(rng.standard_normal((K, d)) * d ** -0.25, np.zeros(K))


class SGDState:
    """Momentum buffers, one per parameter array."""

    def __init__(self, params):
        self.velocity = [np.zeros_like(p) for p in params]


def sgd_step(params, grads, lr, momentum, weight_decay, state: SGDState,
             decay=None, floors=None):
    """Classical momentum SGD, updating ``params`` in place.

    ``v <- m v + (g + wd p)``; ``p <- p - lr v``. ``decay[i]`` switches weight
    decay per array; ``floors[i]`` (when not None) clips the array from below
    after the step.
    """
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param/grad shape mismatch at {i}: {p.shape} vs {g.shape}")
        step = g + weight_decay * p if (decay is None or decay[i]) and weight_decay else g
        v = state.velocity[i]
        v *= momentum
        v += step
        p -= lr * v
        if floors is not None and floors[i] is not None:
            np.maximum(p, floors[i], out=p)
    return params, state


def model_param_groups(gen: GeneratorParams, nav: Navigator, bank: CovarianceBank):
    """Arrays updated in Phase 1 with their weight-decay flags and floors."""
    params = gen.arrays() + [nav.means, nav.biases, bank.precisions]
    decay = [True] * len(gen.arrays()) + [True, False, False]
    floors = [None] * (len(params) - 1) + [EPS_PD]
    return params, decay, floors


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_dict(gen: GeneratorParams, nav: Navigator | None = None,
                    bank: CovarianceBank | None = None, head: DenseHead | None = None,
                    lineage: dict | None = None) -> dict:
    d = {
        "dims": gen.dims,
        "activations": [l.activation for l in gen.layers],
        "generator": [[l.W.ravel().tolist(), l.b.tolist()] for l in gen.layers],
        "lineage": lineage or {},
    }
    if nav is not None:
        d["navigator"] = {"K": nav.means.shape[0], "means": nav.means.ravel().tolist(),
                          "biases": nav.biases.tolist()}
    if bank is not None:
        d["covariance_bank"] = bank.precisions.ravel().tolist()
    if head is not None:
        d["dense_head"] = {"K": head.W.shape[0], "W": head.W.ravel().tolist(), "c": head.c.tolist()}
    return d


def checkpoint_from_dict(d: dict):
    dims = d["dims"]
    layers = []
    for (w, b), act, fi, fo in zip(d["generator"], d["activations"], dims[:-1], dims[1:]):
        layers.append(Layer(np.array(w, dtype=np.float64).reshape(fo, fi),
                            np.array(b, dtype=np.float64), act))
    gen = GeneratorParams(layers)
    out = {"generator": gen, "navigator": None, "covariance_bank": None,
           "dense_head": None, "lineage": d.get("lineage", {})}
    dout = dims[-1]
    if "navigator" in d:
        K = d["navigator"]["K"]
        out["navigator"] = Navigator(np.array(d["navigator"]["means"]).reshape(K, dout),
                                     np.array(d["navigator"]["biases"], dtype=np.float64))
        if "covariance_bank" in d:
            out["covariance_bank"] = CovarianceBank(
                np.array(d["covariance_bank"], dtype=np.float64).reshape(K, dout))
    if "dense_head" in d:
        K = d["dense_head"]["K"]
        out["dense_head"] = DenseHead(np.array(d["dense_head"]["W"]).reshape(K, dout),
                                      np.array(d["dense_head"]["c"], dtype=np.float64))
    return out


def save_checkpoint(path, **kwargs) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(**kwargs)) + "\n")


def load_checkpoint(path):
    return checkpoint_from_dict(json.loads(Path(path).read_text()))
