"""Synthetic heterogeneous clients, Dirichlet label skew and IDX ingestion.

Client heterogeneity has two sources that compose:

* feature shift: each client's class-``k`` data is a weighted re-sample of the
  global class Gaussian, with selection weights proportional to another
  Gaussian density (centre ``nu_rs``, covariance ``Omega``);
* label skew: per-class sample counts are split across clients by a
  Dirichlet(alpha) draw.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import RngStream, gaussian_product_diag, rng_stream, sample_gaussian

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRAIN_FRACTION = 0.8
MIN_POOL = 10_000


class DegenerateWeightsError(ValueError):
    pass


class PartitionInfeasibleError(RuntimeError):
    pass


class IDXFormatError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass
class MixtureSpec:
    means: np.ndarray      # (K, D)
    variances: np.ndarray  # (K, D) diagonal covariances
    weights: np.ndarray    # (K,)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.means.shape[0] < 2:
            raise ValueError("a mixture needs at least two classes")
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances must have the same shape")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class ResampleWeight:
    center: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if np.any(self.cov <= 0):
            raise ValueError("re-sampling covariance must be positive")


@dataclass
class ClientDataset:
    client_id: int
    features: np.ndarray  # (n, D)
    labels: np.ndarray    # (n,)
    train_mask: np.ndarray

    @property
    def test_mask(self) -> np.ndarray:
        return ~self.train_mask

    @property
    def x_train(self):
        return self.features[self.train_mask]

    @property
    def y_train(self):
        return self.labels[self.train_mask]

    @property
    def x_test(self):
        return self.features[self.test_mask]

    @property
    def y_test(self):
        return self.labels[self.test_mask]

    @property
    def n_train(self) -> int:
        return int(self.train_mask.sum())

    @property
    def n_test(self) -> int:
        return int(self.test_mask.sum())


@dataclass
class PartitionConfig:
    alpha: float
    num_clients: int
    seed: int = 0
    max_retries: int = 1000

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("Dirichlet alpha must be positive")
        if self.num_clients < 1:
            raise ValueError("need at least one client")


def analytic_resample_params(mu, S, nu_rs, Omega):
    """Limit distribution of Gaussian-weighted re-sampling from N(mu, S).

    Returns ``(mu_star, S_star)`` with ``S* = (S^-1 + Omega^-1)^-1`` and
    ``mu* = S* (S^-1 mu + Omega^-1 nu_rs)`` (all diagonal).
    """
    mean, prec = gaussian_product_diag(mu, 1.0 / np.asarray(S, dtype=np.float64),
                                       nu_rs, 1.0 / np.asarray(Omega, dtype=np.float64))
    return mean, 1.0 / prec


def resample_log_weights(points, w: ResampleWeight) -> np.ndarray:
    diff = np.asarray(points, dtype=np.float64) - w.center
    return -0.5 * np.sum(diff * diff / w.cov, axis=-1)


def weighted_resample(points, w: ResampleWeight, n_out: int, rng: RngStream) -> np.ndarray:
    """Draw ``n_out`` points with replacement, P(i) proportional to N(points_i; center, cov)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if len(points) == 0:
        raise ValueError("cannot re-sample from an empty set")
    logw = resample_log_weights(points, w)
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegenerateWeightsError("re-sampling weights are all zero or non-finite")
    p = np.exp(logw - top)
    total = p.sum()
    if not np.isfinite(total) or total <= 0:
        raise DegenerateWeightsError("re-sampling weights are all zero or non-finite")
    idx = rng.choice(len(points), size=n_out, replace=True, p=p / total)
    return points[idx]


def split_mask(n: int, rng: RngStream, train_fraction: float = TRAIN_FRACTION) -> np.ndarray:
    n_train = int(np.floor(train_fraction * n + 0.5))
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:n_train]] = True
    return mask


def generate_client_dataset(spec: MixtureSpec, per_class_weights: dict, class_counts: dict,
                            client_id: int, rng: RngStream) -> ClientDataset:
    """Sample one client by weighted re-sampling of each global class Gaussian."""
    K = spec.num_classes
    feats, labels = [], []
    for k in sorted(class_counts):
        if not 0 <= k < K:
            raise ValueError(f"class id {k} outside [0, {K})")
        n_k = int(class_counts[k])
        if n_k <= 0:
            continue
        pool = sample_gaussian(spec.means[k], spec.variances[k], rng, size=max(20 * n_k, MIN_POOL))
        feats.append(weighted_resample(pool, per_class_weights[k], n_k, rng))
        labels.append(np.full(n_k, k, dtype=np.int64))
    if not feats:
        raise EmptyDatasetError(f"client {client_id} has zero samples")
    x = np.concatenate(feats)
    y = np.concatenate(labels)
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    return ClientDataset(client_id, x, y, split_mask(len(y), rng))


def dirichlet_partition(labels, cfg: PartitionConfig, rng: RngStream) -> list[np.ndarray]:
    """Split sample indices across clients with per-class Dirichlet proportions.

    The whole allocation is redrawn while any client ends up empty, up to
    ``cfg.max_retries`` attempts.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("labels must be non-empty")
    M = cfg.num_clients
    classes = np.unique(labels)
    by_class = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    for _ in range(cfg.max_retries):
        parts = [[] for _ in range(M)]
        for c in classes:
            idx = by_class[c]
            p = rng.dirichlet(np.full(M, cfg.alpha))
            cuts = (np.cumsum(p) * len(idx)).astype(int)[:-1]
            for i, chunk in enumerate(np.split(idx, cuts)):
                parts[i].append(chunk)
        out = [np.sort(np.concatenate(chunks)) for chunks in parts]
        if all(len(o) for o in out):
            return out
    raise PartitionInfeasibleError(
        f"no allocation without empty clients after {cfg.max_retries} draws")


def _read_header(buf: bytes, path, magic_expected: int):
    if len(buf) < 8:
        raise IDXFormatError(f"{path}: truncated header at offset {len(buf)}")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != magic_expected:
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{magic_expected:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(buf) < hdr:
        raise IDXFormatError(f"{path}: truncated header at offset {len(buf)}")
    dims = struct.unpack(">" + "I" * ndim, buf[4:hdr])
    return dims, hdr


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels are scaled to [0, 1] and flattened."""
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    idims, ih = _read_header(ibuf, images_path, IDX_IMAGES_MAGIC)
    ldims, lh = _read_header(lbuf, labels_path, IDX_LABELS_MAGIC)
    n_img, n_lab = idims[0], ldims[0]
    if n_img != n_lab:
        raise IDXFormatError(
            f"count mismatch: {images_path} has {n_img} items (offset 4), "
            f"{labels_path} has {n_lab} items (offset 4)")
    per_item = int(np.prod(idims[1:]))
    need = ih + n_img * per_item
    if len(ibuf) < need:
        raise IDXFormatError(f"{images_path}: truncated payload at offset {len(ibuf)}, expected {need} bytes")
    if len(lbuf) < lh + n_lab:
        raise IDXFormatError(f"{labels_path}: truncated payload at offset {len(lbuf)}, expected {lh + n_lab} bytes")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n_img * per_item, offset=ih)
    x = pixels.reshape(n_img, per_item).astype(np.float64) / 255.0
    y = np.frombuffer(lbuf, dtype=np.uint8, count=n_lab, offset=lh).astype(np.int64)
    return x, y


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 arrays in IDX layout (test fixtures, exported subsets)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", 0x00000800 | images.ndim))
        f.write(struct.pack(">" + "I" * images.ndim, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """Experiment data source: a synthetic mixture or an IDX pair."""
    num_clients: int = 20
    alpha: float = 0.3
    seed: int = 0
    mixture: MixtureSpec | None = None
    samples_per_class: int = 400
    tau: float = 1.0
    omega: float = 1.0
    client_weights: list | None = None  # per client: list over classes of ResampleWeight
    idx_images: str | None = None
    idx_labels: str | None = None

    def __post_init__(self):
        if (self.mixture is None) == (self.idx_images is None):
            raise ValueError("scenario needs exactly one data source (mixture or idx paths)")


def default_mixture(num_classes=5, dim=16, separation=1.0, variance=1.0, seed=0) -> MixtureSpec:
    rng = rng_stream(seed, "mixture")
    means = rng.standard_normal((num_classes, dim)) * separation
    variances = np.full((num_classes, dim), variance) * rng.uniform(0.5, 1.5, (num_classes, dim))
    return MixtureSpec(means, variances, np.full(num_classes, 1.0 / num_classes))


def default_scenario(seed: int = 0) -> Scenario:
    return Scenario(num_clients=20, alpha=0.3, seed=seed,
                    mixture=default_mixture(seed=seed, separation=0.4), samples_per_class=400,
                    tau=2.0, omega=0.5)


def draw_client_weights(spec: MixtureSpec, num_clients: int, tau: float, omega: float,
                        seed: int) -> list[list[ResampleWeight]]:
    """Per client and class: centre ~ N(mu_k, tau^2 I), covariance omega * I."""
    out = []
    for c in range(num_clients):
        rng = rng_stream(seed, c, "resample-centres")
        row = []
        for k in range(spec.num_classes):
            centre = spec.means[k] + tau * rng.standard_normal(spec.dim)
            row.append(ResampleWeight(centre, np.full(spec.dim, float(omega))))
        out.append(row)
    return out


def build_clients(sc: Scenario) -> list[ClientDataset]:
    """Materialize every client of a scenario (deterministic in ``sc.seed``)."""
    part = PartitionConfig(sc.alpha, sc.num_clients, sc.seed)
    if sc.mixture is None:
        x, y = load_idx(sc.idx_images, sc.idx_labels)
        parts = dirichlet_partition(y, part, rng_stream(sc.seed, "partition"))
        clients = []
        for c, idx in enumerate(parts):
            rng = rng_stream(sc.seed, c, "split")
            idx = rng.permutation(idx)
            clients.append(ClientDataset(c, x[idx], y[idx], split_mask(len(idx), rng)))
        return clients

    spec = sc.mixture
    K = spec.num_classes
    totals = np.floor(spec.weights * sc.samples_per_class * K + 0.5).astype(int)
    pseudo = np.repeat(np.arange(K), totals)
    parts = dirichlet_partition(pseudo, part, rng_stream(sc.seed, "partition"))
    weights = sc.client_weights or draw_client_weights(spec, sc.num_clients, sc.tau, sc.omega, sc.seed)
    clients = []
    for c, idx in enumerate(parts):
        counts = np.bincount(pseudo[idx], minlength=K)
        clients.append(generate_client_dataset(
            spec, dict(enumerate(weights[c])), {k: int(counts[k]) for k in range(K)},
            c, rng_stream(sc.seed, c, "client-data")))
    return clients


def scenario_to_dict(sc: Scenario) -> dict:
    if sc.mixture is None:
        return {"kind": "idx", "images": sc.idx_images, "labels": sc.idx_labels,
                "num_clients": sc.num_clients, "alpha": sc.alpha, "seed": sc.seed}
    d = {
        "kind": "synthetic",
        "num_clients": sc.num_clients,
        "alpha": sc.alpha,
        "seed": sc.seed,
        "samples_per_class": sc.samples_per_class,
        "mixture": {
            "means": sc.mixture.means.tolist(),
            "variances": sc.mixture.variances.tolist(),
            "weights": sc.mixture.weights.tolist(),
        },
        "tau": sc.tau,
        "omega": sc.omega,
    }
    if sc.client_weights is not None:
        d["client_weights"] = [
            [{"center": w.center.tolist(), "cov": w.cov.tolist()} for w in row]
            for row in sc.client_weights
        ]
    return d


def scenario_from_dict(d: dict) -> Scenario:
    kind = d.get("kind", "synthetic")
    if kind == "idx":
        return Scenario(num_clients=int(d["num_clients"]), alpha=float(d["alpha"]),
                        seed=int(d.get("seed", 0)), idx_images=d["images"], idx_labels=d["labels"])
    if kind != "synthetic":
        raise ValueError(f"scenario.kind: unknown value {kind!r}")
    m = d["mixture"]
    cw = None
    if "client_weights" in d:
        cw = [[ResampleWeight(w["center"], w["cov"]) for w in row] for row in d["client_weights"]]
    return Scenario(
        num_clients=int(d["num_clients"]), alpha=float(d["alpha"]), seed=int(d.get("seed", 0)),
        mixture=MixtureSpec(m["means"], m["variances"], m["weights"]),
        samples_per_class=int(d.get("samples_per_class", 400)),
        tau=float(d.get("tau", 1.0)), omega=float(d.get("omega", 1.0)), client_weights=cw)


def load_scenario(path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2) + "\n")
