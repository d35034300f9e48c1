"""Diagnostics: proxy H-divergence, divergence matrices, ARI, accuracy and
the computable terms of the latent-domain error bound."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.neural_network import MLPClassifier
from sklearn.preprocessing import StandardScaler

from .dataio import SegmentDataset, sub_seed
from .errors import DataError, ShapeError
from .model import ModelBundle, batched_forward

log = logging.getLogger(__name__)

PROBES = ("linear", "mlp")
FEATURE_SPACES = ("raw", "step3", "step4")
MIN_SAMPLES = 4
NOT_COMPUTABLE = "not computable"


@dataclass(frozen=True)
class ProbeConfig:
    kind: str = "linear"
    hidden: int = 32
    max_iter: int = 300
    n_probes: int = 3
    max_per_set: int = 1000

    def validate(self) -> None:
        if self.kind not in PROBES:
            raise ValueError(f"unknown probe {self.kind!r}; choose from {PROBES}")
        if self.n_probes < 1 or self.max_iter < 1 or self.hidden < 1:
            raise ValueError("probe sizes must be positive")


def _fingerprint(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return hashlib.sha256(str(a.shape).encode() + a.tobytes()).digest()


def _make_probe(cfg: ProbeConfig, seed: int):
    if cfg.kind == "linear":
        return LogisticRegression(max_iter=cfg.max_iter)
    return MLPClassifier(hidden_layer_sizes=(cfg.hidden,), max_iter=cfg.max_iter, random_state=seed)


def _probe_error(A: np.ndarray, B: np.ndarray, cfg: ProbeConfig, seed: int) -> float:
    rng = np.random.default_rng(seed)
    n = min(len(A), len(B), cfg.max_per_set)
    # balanced sets so that chance error is exactly one half
    A = A[np.sort(rng.permutation(len(A))[:n])]
    B = B[np.sort(rng.permutation(len(B))[:n])]
    X = np.concatenate([A, B])
    y = np.r_[np.zeros(n, dtype=int), np.ones(n, dtype=int)]
    train = np.zeros(2 * n, dtype=bool)
    for label in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == label))
        train[idx[: n // 2]] = True
    scaler = StandardScaler().fit(X[train])
    probe = _make_probe(cfg, seed % (2 ** 31))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        probe.fit(scaler.transform(X[train]), y[train])
    pred = probe.predict(scaler.transform(X[~train]))
    return float(np.mean(pred != y[~train]))


def proxy_h_divergence(features_a, features_b, probe: ProbeConfig | str = "linear",
                       seed: int = 0, return_error: bool = False):
    """Proxy estimate ``2 (1 - 2 err)`` of the divergence between two sample sets.

    A binary probe separates the two sets on a 50/50 train/validation split
    of the pooled, balanced sample; the estimate is clamped to [0, 2] and
    averaged over ``probe.n_probes`` seeds. The pair is put in a canonical
    order first, so swapping the arguments gives the same value.
    """
    cfg = ProbeConfig(kind=probe) if isinstance(probe, str) else probe
    cfg.validate()
    A = np.asarray(features_a, dtype=np.float64)
    B = np.asarray(features_b, dtype=np.float64)
    A = A.reshape(len(A), -1) if A.ndim != 1 else A[:, None]
    B = B.reshape(len(B), -1) if B.ndim != 1 else B[:, None]
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"feature widths differ: {A.shape[1]} vs {B.shape[1]}")
    for name, S in (("A", A), ("B", B)):
        if len(S) < MIN_SAMPLES:
            raise DataError(f"set {name} has {len(S)} samples; need at least {MIN_SAMPLES}")
    if _fingerprint(B) < _fingerprint(A):
        A, B = B, A
    errors = [_probe_error(A, B, cfg, sub_seed(seed, p)) for p in range(cfg.n_probes)]
    estimates = [min(max(2.0 * (1.0 - 2.0 * e), 0.0), 2.0) for e in errors]
    est = float(np.mean(estimates))
    return (est, float(np.mean(errors))) if return_error else est


def best_threshold_error(a, b) -> float:
    """Lowest error of any 1-D threshold rule separating ``a`` from ``b``
    (either orientation), counted on the pooled sample."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    cuts = np.concatenate([[-np.inf], np.unique(np.concatenate([a, b]))])
    n = len(a) + len(b)
    best = 1.0
    for c in cuts:
        # rule: predict "b" for x > c
        err = (np.sum(a > c) + np.sum(b <= c)) / n
        best = min(best, err, 1.0 - err)
    return float(best)


@dataclass
class DivergenceReport:
    split_names: list[str]
    matrix: list[list[float]]
    val_error: list[list[float]]
    mean_off_diagonal: float
    max_off_diagonal: float
    feature_space: str = "raw"
    probe: dict = field(default_factory=dict)
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DivergenceReport":
        return cls(**json.loads(text))

    def matrix_csv(self) -> str:
        buf = io.StringIO()
        buf.write("," + ",".join(self.split_names) + "\n")
        for name, row in zip(self.split_names, self.matrix):
            buf.write(name + "," + ",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()


def feature_matrix(dataset: SegmentDataset, feature_space: str = "raw",
                   bundle: ModelBundle | None = None) -> np.ndarray:
    if feature_space not in FEATURE_SPACES:
        raise ValueError(f"unknown feature space {feature_space!r}; choose from {FEATURE_SPACES}")
    if feature_space == "raw":
        return dataset.X.reshape(len(dataset), -1).astype(np.float64)
    if bundle is None:
        raise ValueError(f"feature space {feature_space!r} needs a trained model")
    feats, _ = batched_forward(bundle, dataset.X, int(feature_space[-1]))
    return feats.astype(np.float64)


def pairwise_divergence_matrix(dataset: SegmentDataset, groups, bundle: ModelBundle | None = None,
                               feature_space: str = "raw", probe: ProbeConfig | str = "linear",
                               seed: int = 0, names: list[str] | None = None) -> DivergenceReport:
    """Proxy divergence for every unordered pair of groups; diagonal is 0."""
    groups = np.asarray(groups)
    if groups.shape != (len(dataset),):
        raise ShapeError(f"need one group per segment, got {groups.shape} for {len(dataset)} segments")
    labels = sorted(np.unique(groups).tolist())
    if names is not None:
        missing = [g for g in range(len(names)) if g not in labels]
        if missing:
            raise DataError(f"empty group(s): {', '.join(names[g] for g in missing)}")
        labels = list(range(len(names)))
    if len(labels) < 2:
        raise DataError("need at least two non-empty groups")
    cfg = ProbeConfig(kind=probe) if isinstance(probe, str) else probe
    F = feature_matrix(dataset, feature_space, bundle)
    k = len(labels)
    M = np.zeros((k, k))
    E = np.full((k, k), 0.5)
    for i in range(k):
        for j in range(i + 1, k):
            d, e = proxy_h_divergence(F[groups == labels[i]], F[groups == labels[j]], cfg,
                                      sub_seed(seed, i, j), return_error=True)
            M[i, j] = M[j, i] = d
            E[i, j] = E[j, i] = e
    off = M[~np.eye(k, dtype=bool)]
    return DivergenceReport(
        split_names=names or [str(g) for g in labels],
        matrix=M.tolist(), val_error=E.tolist(),
        mean_off_diagonal=float(off.mean()), max_off_diagonal=float(off.max()),
        feature_space=feature_space, probe=asdict(cfg), seed=seed,
    )


def random_groups(n: int, k: int, seed: int) -> np.ndarray:
    """Uniform random split into ``k`` groups of (near) equal size."""
    rng = np.random.default_rng(seed)
    return rng.permutation(np.arange(n) % k)


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise ShapeError(f"{p.shape[0] if p.ndim else 0} predictions for {y.shape[0] if y.ndim else 0} labels")
    if p.size == 0:
        raise DataError("accuracy of an empty set is undefined")
    return float(np.count_nonzero(p == y)) / p.size


def _pairs(n):
    n = np.asarray(n, dtype=np.float64)
    return n * (n - 1) / 2.0


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Pair-counting ARI. Two single-cluster labelings score 1.0."""
    a, b = np.asarray(labels_a), np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"labelings differ in shape: {a.shape} vs {b.shape}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1))
    np.add.at(table, (ai, bi), 1)
    index = _pairs(table).sum()
    rows, cols = _pairs(table.sum(axis=1)).sum(), _pairs(table.sum(axis=0)).sum()
    total = _pairs(len(a))
    if total == 0:
        return 1.0
    expected = rows * cols / total
    max_index = (rows + cols) / 2.0
    if max_index == expected:
        # both labelings are trivial (all-one-cluster or all-singletons)
        return 1.0
    return float((index - expected) / (max_index - expected))


@dataclass
class BoundReport:
    phi: list[float]
    source_errors: list[float]
    weighted_error: float
    max_divergence: float
    divergence_term: float
    cluster_sizes: list[int]
    ideal_joint_error: str = NOT_COMPUTABLE
    min_over_splits: str = NOT_COMPUTABLE
    feature_space: str = "raw"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BoundReport":
        return cls(**json.loads(text))


def bound_report(bundle: ModelBundle, dataset: SegmentDataset, splits=None,
                 feature_space: str = "raw", probe: ProbeConfig | str = "linear",
                 seed: int = 0) -> BoundReport:
    """Weighted per-cluster source error and the max pairwise divergence term.

    ``splits`` defaults to the dataset's pseudo domains.
    """
    from .training import predict

    splits = dataset.pseudo_domain if splits is None else np.asarray(splits)
    if splits.shape != (len(dataset),):
        raise ShapeError("need one split label per segment")
    pred, _ = predict(bundle, dataset.X)
    labels = np.unique(splits)
    sizes = [int(np.sum(splits == g)) for g in labels]
    phi = [s / len(dataset) for s in sizes]
    errs = [1.0 - accuracy(pred[splits == g], dataset.y[splits == g]) for g in labels]
    if len(labels) >= 2:
        rep = pairwise_divergence_matrix(dataset, splits, bundle, feature_space, probe, seed)
        max_div = rep.max_off_diagonal
    else:
        max_div = 0.0
    return BoundReport(
        phi=phi, source_errors=errs, weighted_error=float(np.dot(phi, errs)),
        max_divergence=max_div, divergence_term=0.5 * max_div, cluster_sizes=sizes,
        feature_space=feature_space,
    )
