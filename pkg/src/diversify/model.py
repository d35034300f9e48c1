"""Shared-backbone model with three per-step head groups, and checkpoints.

Step 2 trains the feature extractor with a (K*C)-way classifier; step 3
owns a K-way latent-domain classifier plus a class adversary; step 4 owns
the final C-way classifier plus a domain adversary. Only the feature
extractor is shared.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError
from .numerics import (
    Adam,
    ConvBlock,
    Flatten,
    GradientReversal,
    Linear,
    Module,
    ReLU,
    Sequential,
    Tensor,
    no_grad,
)
from .numerics.optim import AdamState

FORMAT_VERSION = 1
MAGIC = b"DVFY1\n"
STEPS = (2, 3, 4)


@dataclass
class ArchConfig:
    channels: int = 3
    window: int = 64
    kernel_width: int = 9
    conv_channels: tuple[int, int] = (16, 32)
    pool_width: int = 2
    bottleneck_dim: int = 256
    adv_hidden: tuple[int, ...] = (256, 256)
    dtype: str = "float32"

    def feature_length(self) -> int:
        length = self.window
        for _ in self.conv_channels:
            if length < self.kernel_width:
                raise ShapeError(
                    f"kernel width {self.kernel_width} exceeds the length {length} reaching a conv block")
            length = ConvBlock.output_length(length, self.kernel_width, self.pool_width)
            if length < 1:
                raise ShapeError(f"window {self.window} too short for the conv stack")
        return self.conv_channels[-1] * length


class HeadGroup(Module):
    """Bottleneck, classifier and (optionally) a gradient-reversed adversary."""

    def __init__(self, in_dim: int, bottleneck_dim: int, n_out: int, adv_out: int | None,
                 adv_hidden: tuple[int, ...], rng: np.random.Generator, dtype):
        super().__init__()
        self.bottleneck = Linear(in_dim, bottleneck_dim, rng, dtype)
        self.classifier = Linear(bottleneck_dim, n_out, rng, dtype)
        self.grl = GradientReversal(0.0)
        if adv_out is not None:
            layers: list[Module] = []
            width = bottleneck_dim
            for h in adv_hidden:
                layers += [Linear(width, h, rng, dtype), ReLU()]
                width = h
            layers.append(Linear(width, adv_out, rng, dtype))
            self.adversary = Sequential(*layers)
        else:
            self.adversary = None

    def forward(self, feats):
        return self.classifier(self.bottleneck(feats))

    def adversary_logits(self, z):
        return self.adversary(self.grl(z))


@dataclass
class TrainingState:
    round: int = 0
    rng_states: dict[str, dict] = field(default_factory=dict)
    pseudo_domain: np.ndarray | None = None
    best_round: int = -1
    best_val_acc: float = -math.inf
    best_params: dict[str, np.ndarray] | None = None


class ModelBundle:
    def __init__(self, arch: ArchConfig, n_classes: int, n_domains: int, seed: int = 0,
                 method: str = "diversify"):
        if n_classes < 1 or n_domains < 1:
            raise ShapeError("need at least one class and one domain")
        self.arch = arch
        self.n_classes = n_classes
        self.n_domains = n_domains
        self.seed = seed
        self.method = method
        self.predict_step = 2 if method == "erm" else 4
        self.hparams: dict[str, str] = {}
        self.optimizers: dict[str, Adam] = {}
        self.state = TrainingState()

        dtype = np.dtype(arch.dtype)
        rng = np.random.default_rng(seed)
        flat = arch.feature_length()
        blocks = []
        c_in = arch.channels
        for c_out in arch.conv_channels:
            blocks.append(ConvBlock(c_in, c_out, arch.kernel_width, rng, dtype, arch.pool_width))
            c_in = c_out
        self.feature_extractor = Sequential(*blocks, Flatten())
        k, c, b = n_domains, n_classes, arch.bottleneck_dim
        self.heads = {
            2: HeadGroup(flat, b, k * c, None, arch.adv_hidden, rng, dtype),
            3: HeadGroup(flat, b, k, c, arch.adv_hidden, rng, dtype),
            4: HeadGroup(flat, b, c, k, arch.adv_hidden, rng, dtype),
        }
        self.centroids = np.zeros((k, b), dtype=np.float64)

    # ------------------------------------------------------------------
    @property
    def dtype(self):
        return np.dtype(self.arch.dtype)

    def modules(self) -> dict[str, Module]:
        return {"f": self.feature_extractor, **{f"h{s}": self.heads[s] for s in STEPS}}

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer by stable name (live references)."""
        out = {}
        for prefix, mod in self.modules().items():
            out.update(mod.state_arrays(prefix + "."))
        return out

    def parameter_snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_arrays().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        live = self.named_arrays()
        if set(live) != set(snap):
            raise CheckpointError("snapshot does not match model parameters")
        for k, arr in live.items():
            if arr.shape != snap[k].shape:
                raise CheckpointError(f"{k}: shape {snap[k].shape} != {arr.shape}")
            arr[...] = snap[k]

    def train(self, mode: bool = True) -> None:
        for mod in self.modules().values():
            mod.train(mode)

    def eval(self) -> None:
        self.train(False)

    def check_input(self, X: np.ndarray) -> None:
        expected = (self.arch.channels, 1, self.arch.window)
        if X.ndim != 4 or X.shape[1:] != expected:
            raise ShapeError(f"batch shape {X.shape[1:]} does not match model input {expected}")

    def extract(self, X) -> Tensor:
        if not isinstance(X, Tensor):
            X = np.asarray(X)
            self.check_input(X)
            X = Tensor(X.astype(self.dtype, copy=False))
        return self.feature_extractor(X)


def build_model(arch: ArchConfig, n_classes: int, n_domains: int, seed: int = 0,
                method: str = "diversify") -> ModelBundle:
    if arch.kernel_width > arch.window:
        raise ShapeError(f"kernel width {arch.kernel_width} exceeds window {arch.window}")
    return ModelBundle(arch, n_classes, n_domains, seed, method)


def features(bundle: ModelBundle, step: int, X, training: bool = False) -> Tensor:
    """Bottleneck activations ``h_b^(step)(h_f(X))``."""
    if step not in STEPS:
        raise ValueError(f"step must be one of {STEPS}, got {step}")
    bundle.feature_extractor.train(training)
    bundle.heads[step].train(training)
    return bundle.heads[step].bottleneck(bundle.extract(X))


def batched_forward(bundle: ModelBundle, X: np.ndarray, step: int, batch_size: int = 256):
    """Eval-mode (bottleneck features, logits) for step ``step`` over all of ``X``."""
    bundle.check_input(np.asarray(X))
    feats, logits = [], []
    bundle.eval()
    with no_grad():
        for i in range(0, len(X), batch_size):
            z = features(bundle, step, X[i:i + batch_size])
            feats.append(z.data)
            logits.append(bundle.heads[step].classifier(z).data)
    width = bundle.heads[step].classifier.out_features
    if not feats:
        return np.zeros((0, bundle.arch.bottleneck_dim)), np.zeros((0, width))
    return np.concatenate(feats), np.concatenate(logits)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _arch_from(manifest: dict[str, str]) -> ArchConfig:
    kw = {}
    for f in fields(ArchConfig):
        raw = manifest.get(f"arch.{f.name}")
        if raw is None:
            raise CheckpointError(f"manifest lacks arch.{f.name}")
        if f.name in ("conv_channels", "adv_hidden"):
            kw[f.name] = tuple(int(x) for x in raw.split(",") if x)
        elif f.name == "dtype":
            kw[f.name] = raw
        else:
            kw[f.name] = int(raw)
    return ArchConfig(**kw)


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Write a DVFY1 checkpoint: magic, key=value manifest, CRC-guarded blobs."""
    blob_dtype = "float64" if bundle.dtype == np.float64 else "float32"
    st = bundle.state
    man: dict[str, str] = {
        "format_version": str(FORMAT_VERSION),
        "blob_dtype": blob_dtype,
        "method": bundle.method,
        "predict_step": str(bundle.predict_step),
        "n_classes": str(bundle.n_classes),
        "n_domains": str(bundle.n_domains),
        "seed": str(bundle.seed),
        "round": str(st.round),
        "best_round": str(st.best_round),
        "best_val_acc": repr(float(st.best_val_acc)),
    }
    for k, v in asdict(bundle.arch).items():
        man[f"arch.{k}"] = _fmt(v)
    for k, v in bundle.hparams.items():
        man[f"train.{k}"] = v
    for name, s in st.rng_states.items():
        man[f"rng.{name}"] = json.dumps(s, sort_keys=True)

    blobs: list[tuple[str, np.ndarray]] = [(f"param.{k}", v) for k, v in bundle.named_arrays().items()]
    blobs.append(("state.centroids", bundle.centroids))
    if st.pseudo_domain is not None:
        blobs.append(("state.pseudo_domain", st.pseudo_domain))
    if st.best_params is not None:
        blobs += [(f"best.{k}", v) for k, v in st.best_params.items()]
    for name, opt in bundle.optimizers.items():
        s = opt.state
        for key in ("lr", "beta1", "beta2", "eps", "weight_decay"):
            man[f"opt.{name}.{key}"] = repr(float(getattr(s, key)))
        man[f"opt.{name}.decoupled"] = str(int(s.decoupled))
        man[f"opt.{name}.step"] = str(s.step)
        man[f"opt.{name}.n"] = str(len(s.m))
        for i, (m, v) in enumerate(zip(s.m, s.v)):
            blobs += [(f"opt.{name}.m.{i}", m), (f"opt.{name}.v.{i}", v)]
    man["blob_count"] = str(len(blobs))

    text = "".join(f"{k}={v}\n" for k, v in man.items())
    crc = zlib.crc32(text.encode())
    out = bytearray(MAGIC)
    out += text.encode()
    out += f"manifest_crc32={crc:08x}\n\n".encode()
    for name, arr in blobs:
        payload = np.ascontiguousarray(arr, dtype="<f8" if blob_dtype == "float64" else "<f4").tobytes()
        shape = ",".join(str(d) for d in np.shape(arr))
        key = f"{name}:{shape}".encode()
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<QI", len(payload), zlib.crc32(payload))
        out += payload
    Path(path).write_bytes(bytes(out))


def _read_manifest(raw: bytes) -> tuple[dict[str, str], int]:
    if not raw.startswith(MAGIC):
        raise CheckpointError("bad magic; not a DVFY1 checkpoint")
    end = raw.find(b"\n\n", len(MAGIC))
    if end < 0:
        raise CheckpointError("truncated manifest")
    try:
        text = raw[len(MAGIC):end + 1].decode()
    except UnicodeDecodeError:
        raise CheckpointError("manifest checksum failure") from None
    body, _, crc_line = text.rstrip("\n").rpartition("\n")
    body += "\n"
    if not crc_line.startswith("manifest_crc32="):
        raise CheckpointError("manifest lacks a checksum")
    try:
        expected = int(crc_line.split("=", 1)[1], 16)
    except ValueError:
        raise CheckpointError("manifest checksum failure") from None
    if zlib.crc32(body.encode()) != expected:
        raise CheckpointError("manifest checksum failure")
    manifest = {}
    for line in body.splitlines():
        key, sep, val = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed manifest line {line!r}")
        manifest[key] = val
    return manifest, end + 2


def load_checkpoint(path) -> ModelBundle:
    raw = Path(path).read_bytes()
    man, pos = _read_manifest(raw)
    version = man.get("format_version")
    if version != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported version {version}")
    dt = "<f8" if man.get("blob_dtype") == "float64" else "<f4"

    blobs: dict[str, np.ndarray] = {}
    for _ in range(int(man["blob_count"])):
        if pos + 2 > len(raw):
            raise CheckpointError("truncated blob header")
        (klen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        key = raw[pos:pos + klen].decode(errors="replace")
        pos += klen
        if pos + 12 > len(raw):
            raise CheckpointError("truncated blob header")
        nbytes, crc = struct.unpack_from("<QI", raw, pos)
        pos += 12
        payload = raw[pos:pos + nbytes]
        if len(payload) != nbytes:
            raise CheckpointError(f"truncated blob {key}")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"checksum failure in blob {key}")
        pos += nbytes
        name, _, shape = key.rpartition(":")
        dims = tuple(int(d) for d in shape.split(",") if d)
        blobs[name] = np.frombuffer(payload, dtype=dt).reshape(dims)
    if pos != len(raw):
        raise CheckpointError("trailing bytes after the last blob")

    bundle = ModelBundle(_arch_from(man), int(man["n_classes"]), int(man["n_domains"]),
                         int(man["seed"]), man["method"])
    bundle.predict_step = int(man.get("predict_step", bundle.predict_step))
    bundle.hparams = {k[6:]: v for k, v in man.items() if k.startswith("train.")}
    params = {k[6:]: v for k, v in blobs.items() if k.startswith("param.")}
    bundle.load_snapshot(params)
    bundle.centroids = blobs["state.centroids"].astype(np.float64)
    st = bundle.state
    st.round = int(man["round"])
    st.best_round = int(man["best_round"])
    st.best_val_acc = float(man["best_val_acc"])
    st.rng_states = {k[4:]: json.loads(v) for k, v in man.items() if k.startswith("rng.")}
    if "state.pseudo_domain" in blobs:
        st.pseudo_domain = blobs["state.pseudo_domain"].astype(np.int64)
    best = {k[5:]: v.astype(bundle.dtype) for k, v in blobs.items() if k.startswith("best.")}
    st.best_params = best or None

    names = sorted({k.split(".")[1] for k in man if k.startswith("opt.")})
    bundle.optimizers = {}
    for name in names:
        n = int(man[f"opt.{name}.n"])
        m = [blobs[f"opt.{name}.m.{i}"].astype(bundle.dtype) for i in range(n)]
        v = [blobs[f"opt.{name}.v.{i}"].astype(bundle.dtype) for i in range(n)]
        opt = Adam.__new__(Adam)
        opt.params = []
        opt.state = AdamState(
            lr=float(man[f"opt.{name}.lr"]), beta1=float(man[f"opt.{name}.beta1"]),
            beta2=float(man[f"opt.{name}.beta2"]), eps=float(man[f"opt.{name}.eps"]),
            weight_decay=float(man[f"opt.{name}.weight_decay"]),
            decoupled=bool(int(man[f"opt.{name}.decoupled"])),
            step=int(man[f"opt.{name}.step"]), m=m, v=v,
        )
        bundle.optimizers[name] = opt
    return bundle
