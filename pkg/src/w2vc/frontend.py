"""Log-STFT features, the W2VF feature file format, corpus manifests, and a
seeded synthetic corpus of piecewise-stationary "phone" segments."""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"W2VF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FeatureFormatError(ValueError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class VersionMismatchError(FeatureFormatError):
    pass


class TruncatedError(FeatureFormatError):
    pass


class SizeMismatchError(FeatureFormatError):
    pass


class InputTooShortError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    """``T x F`` log-magnitude features, stored as float32 (the on-disk width)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"feature matrix must be T x F with T >= 1, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature matrix contains non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    window: int = 400   # 25 ms
    hop: int = 160      # 10 ms
    window_fn: str = "hann"
    floor: float = 1e-10

    def __post_init__(self):
        if not 0 < self.hop <= self.window:
            raise ValueError(f"need 0 < hop <= window, got hop={self.hop}, window={self.window}")
        if self.floor <= 0:
            raise ValueError("magnitude floor must be positive")


def make_window(name: str, n: int) -> np.ndarray:
    if name == "hann":
        # periodic Hann
        return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    if name in ("rect", "boxcar"):
        return np.ones(n)
    if name == "hamming":
        return 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / n)
    raise ValueError(f"unknown window function {name!r}")


def stft_frames(waveform, cfg: StftConfig) -> np.ndarray:
    """Windowed frames, shape ``(T, window)``."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or len(x) < cfg.window:
        raise InputTooShortError(f"waveform of {len(x)} samples is shorter than the {cfg.window}-sample window")
    n = 1 + (len(x) - cfg.window) // cfg.hop
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(n)[:, None]
    return x[idx] * make_window(cfg.window_fn, cfg.window)


def log_stft(waveform, cfg: StftConfig = StftConfig()) -> FeatureMatrix:
    frames = stft_frames(waveform, cfg)
    mag = np.abs(np.fft.rfft(frames, axis=1))
    return FeatureMatrix(np.log(np.maximum(mag, cfg.floor)))


# --- feature files -----------------------------------------------------------

def write_features(fm: FeatureMatrix, path) -> None:
    T, F = fm.values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, T, F))
        fh.write(fm.values.astype("<f4", copy=False).tobytes())


def read_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a W2VF feature file")
    if len(blob) < _HEADER.size:
        raise TruncatedError(f"{path}: header truncated ({len(blob)} bytes)")
    _, version, T, F = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    payload = len(blob) - _HEADER.size
    if payload % 4:
        raise TruncatedError(f"{path}: payload of {payload} bytes is not whole float32 values")
    if payload // 4 != T * F:
        raise SizeMismatchError(f"{path}: header says {T}x{F}={T * F} values, payload holds {payload // 4}")
    values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(T, F)
    return FeatureMatrix(values.astype(np.float32))


# --- manifests -------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    path: str
    frames: int


@dataclass
class NormStats:
    mean: np.ndarray
    var: np.ndarray
    count: int

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["var"], dtype=np.float64), int(d["count"]))


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    dim: int
    seed: int | None = None
    stats: NormStats | None = None
    templates: np.ndarray | None = None
    root: Path = field(default_factory=Path)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load(self, i: int) -> FeatureMatrix:
        return read_features(self.resolve(self.entries[i]))

    def save(self, path) -> None:
        path = Path(path)
        header = {"dim": self.dim, "seed": self.seed,
                  "normalization": None if self.stats is None else self.stats.to_json()}
        if self.templates is not None:
            header["templates"] = self.templates.tolist()
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for e in self.entries:
                fh.write(json.dumps({"id": e.id, "path": e.path, "frames": e.frames}) + "\n")


def load_manifest(path, check: bool = True) -> CorpusManifest:
    path = Path(path)
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise FeatureFormatError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    entries = [ManifestEntry(**{k: d[k] for k in ("id", "path", "frames")}) for d in map(json.loads, lines[1:])]
    norm = header.get("normalization")
    tmpl = header.get("templates")
    m = CorpusManifest(
        entries=entries, dim=int(header["dim"]), seed=header.get("seed"),
        stats=None if norm is None else NormStats.from_json(norm),
        templates=None if tmpl is None else np.asarray(tmpl, dtype=np.float64),
        root=path.parent,
    )
    if check:
        for e in m.entries:
            p = m.resolve(e)
            if not p.exists():
                raise FileNotFoundError(f"manifest entry {e.id}: {p} does not exist")
            with open(p, "rb") as fh:
                head = fh.read(_HEADER.size)
            if len(head) < _HEADER.size or head[:4] != MAGIC:
                raise BadMagicError(f"{p}: not a W2VF feature file")
            _, _, T, F = _HEADER.unpack(head)
            if T != e.frames or F != m.dim:
                raise SizeMismatchError(f"{p}: header {T}x{F} disagrees with manifest {e.frames}x{m.dim}")
    return m


def normalize_corpus(manifest: CorpusManifest) -> NormStats:
    """One streaming pass of per-dimension mean/variance (Chan et al. merge).

    Stores the statistics on the manifest; they are applied lazily by
    :class:`NormalizedCorpus`. Zero-variance dimensions are clamped to 1.
    """
    if not manifest.entries:
        raise ValueError("cannot normalise an empty corpus")
    n = 0
    mu = np.zeros(manifest.dim)
    m2 = np.zeros(manifest.dim)
    for i in range(len(manifest.entries)):
        x = manifest.load(i).values.astype(np.float64)
        nb = len(x)
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        delta = mb - mu
        tot = n + nb
        mu = mu + delta * (nb / tot)
        m2 = m2 + m2b + delta ** 2 * (n * nb / tot)
        n = tot
    var = m2 / n
    flat = var <= 0.0
    if flat.any():
        warnings.warn(f"{int(flat.sum())} feature dimension(s) have zero variance; clamped to 1", stacklevel=2)
        var = np.where(flat, 1.0, var)
    stats = NormStats(mu, var, n)
    manifest.stats = stats
    return stats


class NormalizedCorpus:
    """Lazily standardised, float64 view of a manifest's utterances."""

    def __init__(self, manifest: CorpusManifest, cache: bool = True):
        if manifest.stats is None:
            normalize_corpus(manifest)
        self.manifest = manifest
        self._cache: dict[int, np.ndarray] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def __getitem__(self, i: int) -> np.ndarray:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        x = self.manifest.stats.apply(self.manifest.load(i).values)
        if self._cache is not None:
            self._cache[i] = x
        return x

    def ids(self) -> list[str]:
        return [e.id for e in self.manifest.entries]


# --- synthetic corpus ------------------------------------------------------

DWELL_MIN, DWELL_MAX = 3, 15


def synth_utterance(rng: np.random.Generator, templates: np.ndarray, n_frames: int, noise: float):
    """Random walk over templates; returns ``(values, labels)``."""
    n_cls, dim = templates.shape
    labels = np.empty(n_frames, dtype=np.int64)
    t = 0
    cls = int(rng.integers(n_cls))
    while t < n_frames:
        dwell = int(rng.integers(DWELL_MIN, DWELL_MAX + 1))
        labels[t: t + dwell] = cls
        t += dwell
        step = int(rng.integers(1, n_cls))
        cls = (cls + step) % n_cls
    values = templates[labels]
    if noise > 0:
        values = values + noise * rng.standard_normal((n_frames, dim))
    return values, labels


def synth_corpus(
    out_dir,
    seed: int = 0,
    n_utts: int = 64,
    frames_range: tuple[int, int] = (60, 120),
    dim: int = 64,
    n_phone_classes: int = 8,
    noise: float = 0.3,
) -> CorpusManifest:
    """Write a synthetic corpus and its ``manifest.jsonl`` under ``out_dir``.

    Each utterance walks over ``n_phone_classes`` Gaussian templates, moving
    to a different class after a dwell of 3..15 frames. Templates go into the
    manifest header so ground-truth labels are recoverable.
    """
    if n_phone_classes < 2:
        raise ValueError("need at least two phone classes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((n_phone_classes, dim)).astype(np.float32).astype(np.float64)
    lo, hi = frames_range
    entries = []
    for u in range(n_utts):
        T = int(rng.integers(lo, hi + 1))
        values, _ = synth_utterance(rng, templates, T, noise)
        name = f"utt{u:05d}"
        write_features(FeatureMatrix(values), out_dir / f"{name}.w2vf")
        entries.append(ManifestEntry(name, f"{name}.w2vf", T))
    m = CorpusManifest(entries, dim, seed=seed, templates=templates, root=out_dir)
    normalize_corpus(m)
    m.save(out_dir / "manifest.jsonl")
    return m


def frame_labels(values: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Ground-truth class per frame: the nearest template."""
    d = ((np.asarray(values, dtype=np.float64)[:, None, :] - templates[None]) ** 2).sum(-1)
    return d.argmin(axis=1)


# --- waveform ingestion ----------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono 16-bit PCM WAV as float samples in [-1, 1]."""
    import wave

    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        raw = w.readframes(w.getnframes())
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
        if w.getnchannels() > 1:
            x = x.reshape(-1, w.getnchannels()).mean(axis=1)
        return x, w.getframerate()


def featurize_files(paths, out_dir, cfg: StftConfig = StftConfig(), workers: int | None = None) -> CorpusManifest:
    """Log-STFT every WAV (or ``.npy`` waveform) into ``out_dir`` with a manifest."""
    from concurrent.futures import ThreadPoolExecutor

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [Path(p) for p in paths]
    workers = workers or int(os.environ.get("W2VC_NUM_THREADS", "1"))

    def one(p: Path) -> ManifestEntry:
        if p.suffix == ".npy":
            x = np.load(p)
        else:
            x, sr = read_wav(p)
            if sr != cfg.sample_rate:
                raise ValueError(f"{p}: sample rate {sr} != configured {cfg.sample_rate}")
        fm = log_stft(x, cfg)
        write_features(fm, out_dir / f"{p.stem}.w2vf")
        return ManifestEntry(p.stem, f"{p.stem}.w2vf", fm.frames)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        entries = list(pool.map(one, paths))
    m = CorpusManifest(entries, cfg.window // 2 + 1, root=out_dir)
    normalize_corpus(m)
    m.save(out_dir / "manifest.jsonl")
    return m
