"""Segment datasets, preprocessing, synthetic data and the DVTS1 file format.

A dataset holds fixed-size windows of shape (channels, 1, window) together
with a class label, an optional ground-truth domain (``-1`` when unknown)
and a mutable pseudo domain label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, DataError, ParseError

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x``; used to derive sub-seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sub_seed(master: int, *path: int) -> int:
    """Deterministic child seed: fold ``path`` into ``master`` with splitmix64."""
    s = splitmix64(int(master) & _MASK64)
    for p in path:
        s = splitmix64(s ^ (int(p) & _MASK64))
    return s


# ----------------------------------------------------------------------
# data types
# ----------------------------------------------------------------------

@dataclass
class RawSeries:
    id: str
    samples: np.ndarray  # (channels, T)
    class_label: int
    true_domain: int | None = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[1] < 1:
            raise DataError(f"series {self.id!r} is empty")
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"series {self.id!r} has non-finite values")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class Segment:
    values: np.ndarray  # (channels, 1, window)
    y: int
    true_domain: int | None = None
    pseudo_domain: int = 0
    id: str = ""


@dataclass
class SegmentDataset:
    X: np.ndarray  # (N, channels, 1, window)
    y: np.ndarray
    n_classes: int
    true_domain: np.ndarray | None = None
    pseudo_domain: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)
    n_domains: int = 1

    def __post_init__(self):
        self.X = np.asarray(self.X)
        if self.X.ndim == 3:
            self.X = self.X[:, :, None, :]
        n = len(self.X)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.true_domain is None:
            self.true_domain = np.full(n, -1, dtype=np.int64)
        self.true_domain = np.asarray(self.true_domain, dtype=np.int64)
        if self.pseudo_domain is None:
            self.pseudo_domain = np.zeros(n, dtype=np.int64)
        self.pseudo_domain = np.asarray(self.pseudo_domain, dtype=np.int64)
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if self.X.ndim != 4 or self.X.shape[2] != 1:
            raise DataError(f"segments must be (N, channels, 1, window), got {self.X.shape}")
        if not (len(self.y) == len(self.true_domain) == len(self.pseudo_domain) == len(self.ids) == n):
            raise DataError("label arrays and segments differ in length")
        if n and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise DataError(f"class labels must lie in [0, {self.n_classes})")
        if n and (self.pseudo_domain.min() < 0 or self.pseudo_domain.max() >= self.n_domains):
            raise DataError(f"pseudo domains must lie in [0, {self.n_domains})")

    def __len__(self) -> int:
        return len(self.X)

    def __getitem__(self, i: int) -> Segment:
        td = int(self.true_domain[i])
        return Segment(self.X[i], int(self.y[i]), None if td < 0 else td,
                       int(self.pseudo_domain[i]), self.ids[i])

    @property
    def channels(self) -> int:
        return self.X.shape[1]

    @property
    def window(self) -> int:
        return self.X.shape[3]

    @property
    def has_true_domain(self) -> bool:
        return len(self) > 0 and bool(np.all(self.true_domain >= 0))

    def subset(self, idx) -> "SegmentDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SegmentDataset(self.X[idx], self.y[idx], self.n_classes, self.true_domain[idx],
                              self.pseudo_domain[idx], [self.ids[i] for i in idx], self.n_domains)

    def with_domains(self, k: int) -> "SegmentDataset":
        """Copy with ``k`` latent domains and every pseudo label reset to 0."""
        return replace(self, pseudo_domain=np.zeros(len(self), dtype=np.int64), n_domains=k)

    @classmethod
    def from_segments(cls, segments: Sequence[Segment], n_classes: int, n_domains: int = 1):
        if not segments:
            raise DataError("no segments")
        return cls(
            np.stack([s.values for s in segments]),
            [s.y for s in segments],
            n_classes,
            [-1 if s.true_domain is None else s.true_domain for s in segments],
            [s.pseudo_domain for s in segments],
            [s.id for s in segments],
            n_domains,
        )


# ----------------------------------------------------------------------
# preprocessing
# ----------------------------------------------------------------------

def segment(series: RawSeries, window: int, step: int) -> list[Segment]:
    """Sliding windows; segment ``i`` covers samples ``[i*step, i*step + window)``."""
    if step < 1:
        raise DataError(f"step must be >= 1, got {step}")
    if window < 1 or window > series.length:
        raise DataError(f"window {window} longer than series {series.id!r} of length {series.length}")
    count = (series.length - window) // step + 1
    return [
        Segment(series.samples[:, None, i * step: i * step + window].copy(), series.class_label,
                series.true_domain, 0, f"{series.id}:{i}")
        for i in range(count)
    ]


def minmax_normalize(values: np.ndarray, extrema: tuple[float, float] | None = None,
                     per_channel: bool = False) -> np.ndarray:
    """Scale to [0, 1] with ``(x - min) / (max - min)``.

    Extrema default to the sample's own, taken jointly over all channels or
    per channel (axis 0). A degenerate range maps to zeros.
    """
    values = np.asarray(values, dtype=np.float64)
    if extrema is not None:
        lo, hi = (np.asarray(e, dtype=np.float64) for e in extrema)
    elif per_channel:
        axes = tuple(range(1, values.ndim))
        lo = values.min(axis=axes, keepdims=True)
        hi = values.max(axis=axes, keepdims=True)
    else:
        lo, hi = values.min(), values.max()
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (values - lo) / safe, 0.0)


def normalize_dataset(ds: SegmentDataset, per_channel: bool = False) -> SegmentDataset:
    X = np.stack([minmax_normalize(x, per_channel=per_channel) for x in ds.X]) if len(ds) else ds.X
    return replace(ds, X=X)


def split_train_val(ds: SegmentDataset, ratio: float = 0.8, seed: int = 0):
    """Class-stratified, seeded split into (train, val)."""
    if not 0 < ratio < 1:
        raise ConfigError(f"ratio must lie in (0, 1), got {ratio}", "ratio")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in np.unique(ds.y):
        members = np.flatnonzero(ds.y == c)
        if len(members) < 2:
            raise DataError(f"class {c} has {len(members)} segment(s); need at least 2 to split")
        members = members[rng.permutation(len(members))]
        n_train = min(max(math.floor(ratio * len(members) + 0.5), 1), len(members) - 1)
        train_idx.extend(members[:n_train])
        val_idx.extend(members[n_train:])
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(val_idx))


# ----------------------------------------------------------------------
# synthetic non-stationary benchmark
# ----------------------------------------------------------------------

SIGNALS = ("periodic", "resonant")


@dataclass
class SynthConfig:
    """Generator settings.

    Each domain is a recording site: the class waveforms are shared, while
    every site adds its own narrowband interference (``hum_*``) and,
    optionally, amplitude, tempo, AR-noise, channel-offset, channel-gain and
    channel-mixing changes. Per-domain values are drawn from ``seed`` unless
    given explicitly (one entry per domain).
    """

    k_true: int = 3
    n_classes: int = 4
    channels: int = 3
    series_per_cell: int = 10
    length: int = 256
    window: int = 64
    step: int = 32
    seed: int = 1
    signal: str = "periodic"
    base_cycles: float = 1.5
    cycle_step: float = 1.25
    pole_radius: float = 0.95
    noise_std: float = 0.2
    ar_center: float = 0.5
    ar_spread: float = 0.0
    amp_spread: float = 0.0
    freq_spread: float = 0.0
    offset_spread: float = 0.0
    gain_spread: float = 0.0
    mixing_strength: float = 0.0
    hum_strength: float = 2.5
    hum_cycles: float = 10.0
    hum_step: float = 6.0
    hum_single_channel: bool = False
    hum_levels: tuple[float, ...] | None = None
    amp_scales: tuple[float, ...] | None = None
    freq_offsets: tuple[float, ...] | None = None
    ar_coefs: tuple[float, ...] | None = None
    normalize: bool = True
    per_channel_norm: bool = False

    def validate(self) -> None:
        if self.k_true < 2:
            raise ConfigError("must be >= 2", "data.k_true")
        for key in ("n_classes", "channels", "series_per_cell", "window", "step"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", f"data.{key}")
        if self.window > self.length:
            raise ConfigError(f"window {self.window} exceeds length {self.length}", "data.window")
        for key in ("amp_scales", "freq_offsets", "ar_coefs", "hum_levels"):
            vals = getattr(self, key)
            if vals is not None and len(vals) != self.k_true:
                raise ConfigError(f"needs {self.k_true} entries", f"data.{key}")
        if self.ar_coefs is not None and any(abs(a) >= 1 for a in self.ar_coefs):
            raise ConfigError("AR coefficients must satisfy |a| < 1", "data.ar_coefs")
        if abs(self.ar_center) + abs(self.ar_spread) >= 1:
            raise ConfigError("AR coefficients must satisfy |a| < 1", "data.ar_spread")
        if self.signal not in SIGNALS:
            raise ConfigError(f"choose from {SIGNALS}", "data.signal")
        if not 0 < self.pole_radius < 1:
            raise ConfigError("must be in (0, 1)", "data.pole_radius")
        if self.noise_std < 0:
            raise ConfigError("must be >= 0", "data.noise_std")


@dataclass
class DomainParams:
    amp_scale: float
    freq_offset: float
    ar_coef: float
    phase_drift: float
    mixing: np.ndarray  # orthogonal (channels, channels)
    offset: np.ndarray  # (channels,)
    gain: np.ndarray  # (channels,)


def domain_params(cfg: SynthConfig) -> list[DomainParams]:
    rng = np.random.default_rng(sub_seed(cfg.seed, 0))
    k = cfg.k_true
    # constant settings draw nothing, so switching a spread on does not
    # reshuffle the other parameters
    if cfg.amp_scales is not None:
        amps = cfg.amp_scales
    elif cfg.amp_spread:
        amps = tuple(np.exp(rng.uniform(-cfg.amp_spread, cfg.amp_spread, size=k)))
    else:
        amps = (1.0,) * k
    freqs = cfg.freq_offsets or tuple(rng.uniform(-cfg.freq_spread, cfg.freq_spread, size=k))
    if cfg.ar_coefs is not None:
        ars = cfg.ar_coefs
    elif cfg.ar_spread:
        lo, hi = cfg.ar_center - cfg.ar_spread, cfg.ar_center + cfg.ar_spread
        ars = tuple(rng.permutation(np.linspace(lo, hi, k)))
    else:
        ars = (cfg.ar_center,) * k
    offsets = cfg.offset_spread * _simplex_offsets(k, cfg.channels, rng)
    gains = np.exp(cfg.gain_spread * _simplex_offsets(k, cfg.channels, rng))
    out = []
    for d in range(k):
        g = rng.normal(size=(cfg.channels, cfg.channels))
        q, r = np.linalg.qr(np.eye(cfg.channels) + cfg.mixing_strength * g)
        q = q * np.sign(np.diag(r))
        out.append(DomainParams(
            float(amps[d]), float(freqs[d]), float(ars[d]), float(rng.uniform(-1.0, 1.0)),
            q, offsets[d], gains[d],
        ))
    return out


def _simplex_offsets(k: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` channel offsets, pairwise sqrt(2) apart, each summing to zero.

    Joint min-max normalisation cancels any offset shared by all channels, so
    only the zero-sum part of an offset can distinguish domains.
    """
    z = rng.normal(size=(channels, max(channels - 1, 1)))
    z -= z.mean(axis=0)
    basis, _ = np.linalg.qr(z)
    if channels < 2 or k > channels:
        v = rng.normal(size=(k, channels))
        return v - v.mean(axis=1, keepdims=True)
    simplex = np.eye(k) - 1.0 / k
    coords, _ = np.linalg.qr(simplex.T)  # orthonormal frame of the zero-sum subspace of R^k
    coords = simplex @ coords[:, : k - 1]
    return coords @ basis[:, : k - 1].T


_CHANNEL_LAG = 0.8

_SHAPES = (
    np.sin,
    lambda p: np.tanh(3.0 * np.sin(p)),
    lambda p: 2.0 * ((p / (2 * np.pi)) % 1.0) - 1.0,
    lambda p: np.sin(p) + 0.5 * np.sin(2 * p),
)


def _class_wave(k: int, n_classes: int, channels: int, phase: np.ndarray) -> np.ndarray:
    shape = _SHAPES[k % len(_SHAPES)]
    return np.stack([shape(phase + j * _CHANNEL_LAG) for j in range(channels)])


def _resonant_wave(omega: float, radius: float, channels: int, length: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Unit-variance noise through a two-pole resonator at ``omega`` rad/sample."""
    burn = 200
    drive = rng.normal(size=(channels, length + burn))
    out = lfilter([1.0], [1.0, -2.0 * radius * math.cos(omega), radius * radius], drive, axis=1)[:, burn:]
    return out / out.std(axis=1, keepdims=True)


def generate_series(cfg: SynthConfig) -> list[RawSeries]:
    """Raw series ordered by (domain, class, replicate), each with its own sub-seed."""
    cfg.validate()
    params = domain_params(cfg)
    t = np.arange(cfg.length, dtype=np.float64)
    series = []
    index = 0
    for d, p in enumerate(params):
        for c in range(cfg.n_classes):
            cycles = cfg.base_cycles + cfg.cycle_step * c
            freq = cycles * (1.0 + p.freq_offset) / cfg.window
            for r in range(cfg.series_per_cell):
                rng = np.random.default_rng(sub_seed(cfg.seed, 1, index))
                phase = 2 * np.pi * (freq * t + rng.uniform(0, 1)) + p.phase_drift * np.pi * (t / cfg.length) ** 2
                if cfg.signal == "resonant":
                    wave = _resonant_wave(2 * np.pi * freq, cfg.pole_radius, cfg.channels, cfg.length, rng)
                else:
                    wave = _class_wave(c, cfg.n_classes, cfg.channels, phase)
                innov = rng.normal(0.0, cfg.noise_std * math.sqrt(1 - p.ar_coef ** 2),
                                   size=(cfg.channels, cfg.length))
                noise = lfilter([1.0], [1.0, -p.ar_coef], innov, axis=1)
                x = p.amp_scale * p.gain[:, None] * (p.mixing @ wave) + p.offset[:, None] + noise
                if cfg.hum_strength:
                    hum_freq = (cfg.hum_cycles + cfg.hum_step * d) / cfg.window
                    level = 1.0 if cfg.hum_levels is None else cfg.hum_levels[d]
                    hum = level * np.sin(2 * np.pi * (hum_freq * t + rng.uniform(0, 1)))
                    if cfg.hum_single_channel:
                        x[d % cfg.channels] += cfg.hum_strength * p.gain[d % cfg.channels] * hum
                    else:
                        x = x + cfg.hum_strength * p.gain[:, None] * hum
                series.append(RawSeries(f"d{d}c{c}r{r}", x, c, d))
                index += 1
    return series


def generate_synthetic(cfg: SynthConfig, n_domains: int = 1) -> SegmentDataset:
    series = generate_series(cfg)
    segs = [s for ser in series for s in segment(ser, cfg.window, cfg.step)]
    ds = SegmentDataset.from_segments(segs, cfg.n_classes, n_domains)
    return normalize_dataset(ds, cfg.per_channel_norm) if cfg.normalize else ds


def summary_statistics(ds: SegmentDataset) -> np.ndarray:
    """Per-channel mean, variance and lag-1 autocorrelation of every segment."""
    x = ds.X[:, :, 0, :]
    mu = x.mean(axis=-1)
    var = x.var(axis=-1)
    xc = x - mu[..., None]
    num = (xc[..., 1:] * xc[..., :-1]).sum(axis=-1)
    den = (xc * xc).sum(axis=-1)
    ac = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.concatenate([mu, var, ac], axis=1)


# ----------------------------------------------------------------------
# DVTS1 file format
# ----------------------------------------------------------------------

def _header(ds: SegmentDataset, magic: str) -> str:
    return f"{magic} channels={ds.channels} window={ds.window} classes={ds.n_classes}"


def save_dataset(ds: SegmentDataset, path, binary: bool = False) -> None:
    """Write ``ds`` as DVTS1 text, or DVTS1B (float32 payload) when ``binary``."""
    path = Path(path)
    for sid in ds.ids:
        if "," in sid or "\n" in sid:
            raise DataError(f"segment id {sid!r} contains a delimiter")
    flat = ds.X.reshape(len(ds), -1)
    if binary:
        head = _header(ds, "DVTS1B") + f" records={len(ds)}\n"
        meta = "".join(f"{sid},{y},{td}\n" for sid, y, td in zip(ds.ids, ds.y, ds.true_domain))
        with open(path, "wb") as fh:
            fh.write(head.encode())
            fh.write(meta.encode())
            fh.write(flat.astype("<f4").tobytes())
        return
    with open(path, "w", newline="\n") as fh:
        fh.write(_header(ds, "DVTS1") + "\n")
        for sid, y, td, row in zip(ds.ids, ds.y, ds.true_domain, flat):
            fh.write(f"{sid},{y},{td}," + ",".join(repr(float(v)) for v in row) + "\n")


def _parse_header(line: str):
    parts = line.split()
    if not parts or parts[0] not in ("DVTS1", "DVTS1B"):
        raise ParseError("no header" if not line.strip() else f"bad magic {parts[0]!r}", 1)
    fields = {}
    for item in parts[1:]:
        key, sep, val = item.partition("=")
        if not sep:
            raise ParseError(f"malformed header field {item!r}", 1)
        try:
            fields[key] = int(val)
        except ValueError:
            raise ParseError(f"header field {key} is not an integer", 1) from None
    for key in ("channels", "window", "classes"):
        if fields.get(key, 0) < 1:
            raise ParseError(f"header lacks a positive {key}", 1)
    return parts[0], fields


def _check_labels(sid: str, y: int, td: int, classes: int, line: int) -> None:
    if not 0 <= y < classes:
        raise ParseError(f"record {sid!r} has y={y} outside [0, {classes})", line)
    if td < -1:
        raise ParseError(f"record {sid!r} has true_domain={td}", line)


def load_dataset(path, n_domains: int = 1) -> SegmentDataset:
    path = Path(path)
    raw = path.read_bytes()
    first, nl, rest = raw.partition(b"\n")
    try:
        header = first.decode()
    except UnicodeDecodeError:
        raise ParseError("no header", 1) from None
    magic, h = _parse_header(header)
    c, w, classes = h["channels"], h["window"], h["classes"]
    width = c * w
    ids, ys, tds, rows = [], [], [], []

    if magic == "DVTS1B":
        n = h.get("records", -1)
        if n < 0:
            raise ParseError("binary header lacks records=", 1)
        pos = 0
        for i in range(n):
            end = rest.find(b"\n", pos)
            if end < 0:
                raise ParseError("truncated metadata", i + 2)
            sid, y, td = _split_meta(rest[pos:end].decode(), i + 2)
            _check_labels(sid, y, td, classes, i + 2)
            ids.append(sid), ys.append(y), tds.append(td)
            pos = end + 1
        payload = rest[pos:]
        if len(payload) != n * width * 4:
            raise ParseError(f"payload holds {len(payload)} bytes, expected {n * width * 4}")
        X = np.frombuffer(payload, dtype="<f4").reshape(n, width)
        if not np.all(np.isfinite(X)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(X), axis=1))[0])
            raise ParseError(f"record {bad} has non-finite values", bad + 2)
        X = X.astype(np.float32)
    else:
        for lineno, line in enumerate(rest.decode().split("\n"), start=2):
            if not line.strip():
                continue
            cells = line.split(",")
            if len(cells) != 3 + width:
                raise ParseError(f"record has {len(cells) - 3} values, expected {width}", lineno)
            sid, y, td = _split_meta(",".join(cells[:3]), lineno)
            _check_labels(sid, y, td, classes, lineno)
            try:
                vals = np.array([float(v) for v in cells[3:]])
            except ValueError:
                raise ParseError("non-numeric value", lineno) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite value", lineno)
            ids.append(sid), ys.append(y), tds.append(td), rows.append(vals)
        X = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    return SegmentDataset(X.reshape(len(ids), c, 1, w), np.array(ys, dtype=np.int64), classes,
                          np.array(tds, dtype=np.int64), None, ids, n_domains)


def _split_meta(text: str, line: int):
    parts = text.split(",")
    if len(parts) != 3:
        raise ParseError("record metadata must be id,y,true_domain", line)
    try:
        return parts[0], int(parts[1]), int(parts[2])
    except ValueError:
        raise ParseError("labels must be integers", line) from None
