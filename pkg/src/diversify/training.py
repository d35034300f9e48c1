"""Iterative min-max training and the ERM / DANN baselines.

Each round runs three steps on one shared feature extractor:

* step 2 trains the extractor with the joint domain-class targets
  ``s = d' * C + y``;
* step 3 (extractor frozen) refreshes the pseudo domain labels ``d'`` by
  centroid clustering and trains a latent-domain classifier whose bottleneck
  is made class-invariant through a gradient-reversed class adversary;
* step 4 (extractor frozen) trains the final classifier with a
  gradient-reversed adversary on ``d'``.

After every round the step-4 predictor is scored on the validation split and
the best round's parameters are kept.
"""

from __future__ import annotations

import copy
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dataio import SegmentDataset, sub_seed
from .errors import ConfigError, NumericError
from .model import ArchConfig, ModelBundle, batched_forward, build_model
from .numerics import Adam, Tensor, cross_entropy, no_grad
from .numerics.functional import softmax
from .pseudolabel import METRICS, domain_class_label, refresh_pseudo_labels

log = logging.getLogger(__name__)

METHODS = ("diversify", "erm", "dann")
_STREAMS = {"init": 0, "step2": 2, "step3": 3, "step4": 4, "dann": 5}


@dataclass
class TrainConfig:
    K: int = 3
    lambda1: float = 0.5
    lambda2: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 5e-4
    decoupled_weight_decay: bool = False
    rounds: int = 4
    local_epochs: int = 2
    batch_size: int = 32
    max_epochs: int = 150
    metric: str = "cosine"
    refresh: str = "epoch"
    lambda_schedule: str = "constant"
    reinit_step2_heads: bool = False
    steps: tuple[int, ...] = (2, 3, 4)
    seed: int = 0

    def validate(self) -> None:
        if self.K < 1:
            raise ConfigError("must be >= 1", "train.K")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("GRL coefficients must be >= 0", "train.lambda1")
        if self.lr <= 0:
            raise ConfigError("must be > 0", "train.lr")
        if self.weight_decay < 0:
            raise ConfigError("must be >= 0", "train.weight_decay")
        for key in ("rounds", "local_epochs", "batch_size", "max_epochs"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", f"train.{key}")
        if self.batch_size < 2:
            raise ConfigError("batch norm needs batches of at least 2", "train.batch_size")
        if self.rounds * self.local_epochs * len(self.steps) > self.max_epochs:
            raise ConfigError(
                f"rounds*local_epochs*steps = {self.rounds * self.local_epochs * len(self.steps)}"
                f" exceeds max_epochs={self.max_epochs}", "train.rounds")
        if self.metric not in METRICS:
            raise ConfigError(f"choose from {METRICS}", "train.metric")
        if self.refresh not in ("epoch", "round"):
            raise ConfigError("choose epoch or round", "train.refresh")
        if self.lambda_schedule not in ("constant", "ramp"):
            raise ConfigError("choose constant or ramp", "train.lambda_schedule")
        if 2 not in self.steps or any(s not in (2, 3, 4) for s in self.steps):
            raise ConfigError("steps must include 2 and be drawn from 2,3,4", "train.steps")
        if 4 in self.steps and 3 not in self.steps and self.K > 1:
            raise ConfigError("step 4 needs step 3 to supply pseudo labels", "train.steps")

    def to_strings(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                out[k] = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                out[k] = str(v).lower()
            else:
                out[k] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_strings(cls, raw: dict[str, str]) -> "TrainConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            v = raw[f.name]
            default = f.default
            if isinstance(default, bool):
                kw[f.name] = v.lower() in ("1", "true", "yes")
            elif isinstance(default, tuple):
                kw[f.name] = tuple(int(x) for x in v.split(",") if x)
            elif isinstance(default, int):
                kw[f.name] = int(v)
            elif isinstance(default, float):
                kw[f.name] = float(v)
            else:
                kw[f.name] = v
        return cls(**kw)


@dataclass
class HistoryRow:
    round: int
    step: str
    epoch: int
    L_super: float | None = None
    L_self: float | None = None
    L_cls: float | None = None
    L_dom: float | None = None
    val_acc: float | None = None
    label_changes: int | None = None
    cluster_sizes: list[int] | None = None


HISTORY_COLUMNS = [f.name for f in fields(HistoryRow)]


def history_to_csv(rows: list[HistoryRow]) -> str:
    buf = io.StringIO()
    buf.write(",".join(HISTORY_COLUMNS) + "\n")
    for r in rows:
        cells = []
        for name in HISTORY_COLUMNS:
            v = getattr(r, name)
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(repr(v))
            elif isinstance(v, list):
                cells.append(";".join(str(x) for x in v))
            else:
                cells.append(str(v))
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches; a trailing batch of one joins its predecessor
    because batch norm cannot train on a single sample."""
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def accuracy_of(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(pred == y)) if len(y) else float("nan")


def class_logits(bundle: ModelBundle, logits: np.ndarray) -> np.ndarray:
    """Reduce step-2 domain-class logits to class logits (log-sum-exp over domains)."""
    c = bundle.n_classes
    if logits.shape[1] == c:
        return logits
    blocks = logits.reshape(len(logits), -1, c).astype(np.float64)
    m = blocks.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(blocks - m).sum(axis=1, keepdims=True)))[:, 0, :]


def predict(bundle: ModelBundle, X, batch_size: int = 256):
    """Eval-mode class predictions and softmax scores from the inference heads."""
    X = np.asarray(X)
    _, logits = batched_forward(bundle, X, bundle.predict_step, batch_size)
    logits = class_logits(bundle, logits)
    return logits.argmax(axis=1), softmax(logits.astype(np.float64))


class Trainer:
    """Stateful training loop; all state lives on ``self.bundle`` so that a
    checkpoint taken between rounds resumes bit-for-bit."""

    def __init__(self, train_set: SegmentDataset, val_set: SegmentDataset, cfg: TrainConfig,
                 arch: ArchConfig | None = None, method: str = "diversify",
                 domain_labels: np.ndarray | None = None, bundle: ModelBundle | None = None):
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}", "method")
        cfg.validate()
        self.cfg = cfg
        self.method = method
        self.train_set = train_set
        self.val_set = val_set
        C = train_set.n_classes

        if method == "dann":
            if domain_labels is None:
                raise ConfigError("DANN needs domain labels (true domains or another split)",
                                  "domain_labels")
            domain_labels = np.asarray(domain_labels, dtype=np.int64)
            if domain_labels.shape != (len(train_set),) or domain_labels.min() < 0:
                raise ConfigError("one non-negative domain label per training segment", "domain_labels")
            self.domain_labels = domain_labels
            K = int(domain_labels.max()) + 1
        elif method == "erm":
            self.domain_labels = None
            K = 1
        else:
            self.domain_labels = None
            K = cfg.K

        if bundle is None:
            arch = arch or ArchConfig(channels=train_set.channels, window=train_set.window)
            bundle = build_model(arch, C, K, seed=sub_seed(cfg.seed, _STREAMS["init"]), method=method)
        self.bundle = bundle
        bundle.hparams = cfg.to_strings()
        self.K = bundle.n_domains

        st = bundle.state
        self.rngs = {}
        for name, idx in _STREAMS.items():
            rng = np.random.default_rng(sub_seed(cfg.seed, idx))
            if name in st.rng_states:
                rng.bit_generator.state = st.rng_states[name]
            self.rngs[name] = rng
        if st.pseudo_domain is None:
            st.pseudo_domain = np.zeros(len(train_set), dtype=np.int64)
        if len(st.pseudo_domain) != len(train_set):
            raise ConfigError("checkpoint pseudo labels do not match the training set size", "dataset")
        self._bind_optimizers()
        self.history: list[HistoryRow] = []

    # ------------------------------------------------------------------
    def _param_groups(self) -> dict[str, list[Tensor]]:
        b = self.bundle
        f = b.feature_extractor.parameters()
        h2 = b.heads[2].bottleneck.parameters() + b.heads[2].classifier.parameters()
        if self.method == "erm":
            return {"step2": f + h2}
        if self.method == "dann":
            return {"dann": f + b.heads[4].parameters()}
        return {"step2": f + h2, "step3": b.heads[3].parameters(), "step4": b.heads[4].parameters()}

    def _bind_optimizers(self) -> None:
        cfg = self.cfg
        for name, params in self._param_groups().items():
            opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                       decoupled=cfg.decoupled_weight_decay)
            old = self.bundle.optimizers.get(name)
            if old is not None:
                if len(old.state.m) != len(params):
                    raise ConfigError(f"optimizer {name} state does not match model", "checkpoint")
                opt.state = old.state
            self.bundle.optimizers[name] = opt

    def _sync_state(self) -> None:
        self.bundle.state.rng_states = {k: r.bit_generator.state for k, r in self.rngs.items()}

    def _lambda(self, base: float, epoch_index: int) -> float:
        if self.cfg.lambda_schedule == "constant":
            return base
        total = self.cfg.rounds * self.cfg.local_epochs
        p = min(epoch_index / max(total - 1, 1), 1.0)
        return base * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)

    @staticmethod
    def _finite(value: float, where: str) -> float:
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at {where}")
        return value

    def _tensor(self, X: np.ndarray) -> Tensor:
        return Tensor(np.asarray(X).astype(self.bundle.dtype, copy=False))

    # ------------------------------------------------------------------
    def step2_epoch(self, r: int, e: int) -> HistoryRow:
        b, ds = self.bundle, self.train_set
        targets = domain_class_label(b.state.pseudo_domain, ds.y, ds.n_classes, self.K)
        opt = b.optimizers["step2"]
        b.feature_extractor.train()
        head = b.heads[2]
        total, n = 0.0, 0
        for idx in batches(len(ds), self.cfg.batch_size, self.rngs["step2"]):
            loss = cross_entropy(head(b.extract(self._tensor(ds.X[idx]))), targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        return HistoryRow(r, "2", e, L_super=self._finite(total / n, f"round {r} step 2 epoch {e}"))

    def frozen_features(self, X: np.ndarray) -> Tensor:
        """Extractor output in eval mode; no graph, no batch-norm updates."""
        b = self.bundle
        b.feature_extractor.eval()
        with no_grad():
            out = [b.extract(self._tensor(X[i:i + 256])).data for i in range(0, len(X), 256)]
        return Tensor(np.concatenate(out))

    def refresh(self, F: Tensor) -> tuple[int, list[int]]:
        """Recompute soft centroids, provisional and refined pseudo labels."""
        b = self.bundle
        head = b.heads[3]
        with no_grad():
            z = head.bottleneck(F).data.astype(np.float64)
            delta = softmax(head.classifier(Tensor(z.astype(b.dtype))).data.astype(np.float64))
        _, _, labels, result = refresh_pseudo_labels(z, delta, self.cfg.metric)
        prev = b.state.pseudo_domain
        changes = int((labels != prev).sum())
        b.state.pseudo_domain = labels.astype(np.int64)
        b.centroids = result.centroids
        return changes, np.bincount(labels, minlength=self.K).tolist()

    def step3_epoch(self, F: Tensor, r: int, e: int, lam: float) -> HistoryRow:
        b, ds = self.bundle, self.train_set
        head = b.heads[3]
        head.grl.lam = lam
        opt = b.optimizers["step3"]
        d = b.state.pseudo_domain
        s_self = s_cls = 0.0
        n = 0
        for idx in batches(len(ds), self.cfg.batch_size, self.rngs["step3"]):
            z = head.bottleneck(Tensor(F.data[idx]))
            l_self = cross_entropy(head.classifier(z), d[idx])
            l_cls = cross_entropy(head.adversary_logits(z), ds.y[idx])
            opt.zero_grad()
            (l_self + l_cls).backward()
            opt.step()
            s_self += l_self.item() * len(idx)
            s_cls += l_cls.item() * len(idx)
            n += len(idx)
        where = f"round {r} step 3 epoch {e}"
        return HistoryRow(r, "3", e, L_self=self._finite(s_self / n, where),
                          L_cls=self._finite(s_cls / n, where))

    def step4_epoch(self, F: Tensor, r: int, e: int, lam: float) -> HistoryRow:
        b, ds = self.bundle, self.train_set
        head = b.heads[4]
        head.grl.lam = lam
        opt = b.optimizers["step4"]
        d = b.state.pseudo_domain
        s_cls = s_dom = 0.0
        n = 0
        for idx in batches(len(ds), self.cfg.batch_size, self.rngs["step4"]):
            z = head.bottleneck(Tensor(F.data[idx]))
            l_cls = cross_entropy(head.classifier(z), ds.y[idx])
            l_dom = cross_entropy(head.adversary_logits(z), d[idx])
            opt.zero_grad()
            (l_cls + l_dom).backward()
            opt.step()
            s_cls += l_cls.item() * len(idx)
            s_dom += l_dom.item() * len(idx)
            n += len(idx)
        where = f"round {r} step 4 epoch {e}"
        return HistoryRow(r, "4", e, L_cls=self._finite(s_cls / n, where),
                          L_dom=self._finite(s_dom / n, where))

    def dann_epoch(self, r: int, e: int, lam: float) -> HistoryRow:
        b, ds = self.bundle, self.train_set
        head = b.heads[4]
        head.grl.lam = lam
        opt = b.optimizers["dann"]
        b.feature_extractor.train()
        s_cls = s_dom = 0.0
        n = 0
        for idx in batches(len(ds), self.cfg.batch_size, self.rngs["dann"]):
            z = head.bottleneck(b.extract(self._tensor(ds.X[idx])))
            l_cls = cross_entropy(head.classifier(z), ds.y[idx])
            l_dom = cross_entropy(head.adversary_logits(z), self.domain_labels[idx])
            opt.zero_grad()
            (l_cls + l_dom).backward()
            opt.step()
            s_cls += l_cls.item() * len(idx)
            s_dom += l_dom.item() * len(idx)
            n += len(idx)
        where = f"round {r} dann epoch {e}"
        return HistoryRow(r, "dann", e, L_cls=self._finite(s_cls / n, where),
                          L_dom=self._finite(s_dom / n, where))

    # ------------------------------------------------------------------
    def run_round(self) -> list[HistoryRow]:
        cfg, b = self.cfg, self.bundle
        r = b.state.round
        E = cfg.local_epochs
        rows: list[HistoryRow] = []

        if self.method == "dann":
            for e in range(E):
                rows.append(self.dann_epoch(r, e, self._lambda(cfg.lambda2, r * E + e)))
        else:
            if cfg.reinit_step2_heads and r > 0:
                self._reinit_step2_heads(r)
            for e in range(E):
                rows.append(self.step2_epoch(r, e))

        if self.method == "diversify" and 3 in cfg.steps:
            F = self.frozen_features(self.train_set.X)
            for e in range(E):
                refreshed = self.refresh(F) if cfg.refresh == "epoch" else None
                row = self.step3_epoch(F, r, e, self._lambda(cfg.lambda1, r * E + e))
                if refreshed:
                    row.label_changes, row.cluster_sizes = refreshed
                rows.append(row)
            changes, sizes = self.refresh(F)
            rows.append(HistoryRow(r, "3", E, label_changes=changes, cluster_sizes=sizes))
            if 4 in cfg.steps:
                for e in range(E):
                    rows.append(self.step4_epoch(F, r, e, self._lambda(cfg.lambda2, r * E + e)))

        acc = self.validate()
        rows[-1].val_acc = acc
        if acc > b.state.best_val_acc:
            b.state.best_val_acc = acc
            b.state.best_round = r
            b.state.best_params = b.parameter_snapshot()
        b.state.round = r + 1
        self._sync_state()
        self.history.extend(rows)
        log.info("round %d: val_acc=%.4f", r, acc)
        return rows

    def _reinit_step2_heads(self, r: int) -> None:
        fresh = build_model(self.bundle.arch, self.bundle.n_classes, self.K,
                            seed=sub_seed(self.cfg.seed, 100 + r))
        live = self.bundle.heads[2]
        for (_, p), (_, q) in zip(live.named_parameters(), fresh.heads[2].named_parameters()):
            p.data[...] = q.data

    def validate(self) -> float:
        if len(self.val_set) == 0:
            return float("nan")
        if self.method == "diversify" and 4 not in self.cfg.steps:
            self.bundle.predict_step = 2
        pred, _ = predict(self.bundle, self.val_set.X)
        return accuracy_of(pred, self.val_set.y)

    def run(self, rounds: int | None = None) -> list[HistoryRow]:
        target = self.cfg.rounds if rounds is None else self.bundle.state.round + rounds
        while self.bundle.state.round < target:
            self.run_round()
        return self.history

    def best_bundle(self) -> ModelBundle:
        """Copy of the bundle with the best validation round's parameters loaded."""
        out = copy.deepcopy(self.bundle)
        if out.state.best_params is not None:
            out.load_snapshot(out.state.best_params)
        return out

    @property
    def pseudo_domain(self) -> np.ndarray:
        return self.bundle.state.pseudo_domain


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[HistoryRow]
    trainer: Trainer = field(repr=False)

    @property
    def pseudo_domain(self) -> np.ndarray:
        return self.trainer.pseudo_domain

    @property
    def val_accs(self) -> list[float]:
        return [r.val_acc for r in self.history if r.val_acc is not None]


def train(train_set: SegmentDataset, val_set: SegmentDataset, cfg: TrainConfig,
          arch: ArchConfig | None = None) -> TrainResult:
    t = Trainer(train_set, val_set, cfg, arch, "diversify")
    t.run()
    return TrainResult(t.best_bundle(), t.history, t)


def train_erm(train_set: SegmentDataset, val_set: SegmentDataset, cfg: TrainConfig,
              arch: ArchConfig | None = None) -> TrainResult:
    t = Trainer(train_set, val_set, cfg, arch, "erm")
    t.run()
    return TrainResult(t.best_bundle(), t.history, t)


def train_dann(train_set: SegmentDataset, val_set: SegmentDataset, cfg: TrainConfig,
               domain_labels, arch: ArchConfig | None = None) -> TrainResult:
    t = Trainer(train_set, val_set, cfg, arch, "dann", domain_labels)
    t.run()
    return TrainResult(t.best_bundle(), t.history, t)
