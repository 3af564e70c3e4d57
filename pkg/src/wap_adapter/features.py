"""Frame-embedding files, dataset manifests, session folds and synthetic data.

Feature file layout (little-endian)::

    0-3    magic b"WAPF"
    4-7    uint32 version (1)
    8-11   uint32 D
    12-15  uint32 T
    16-    T*D float32, frame-major

The manifest is a tab-separated text file with a ``#classes:`` header line.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FEATURE_MAGIC = b"WAPF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FeatureFileError(ValueError):
    """Base class for malformed feature files."""


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedPayloadError(FeatureFileError):
    pass


class EmptySequenceError(FeatureFileError):
    pass


class NonFiniteError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class FrameSequence:
    frames: np.ndarray
    utterance_id: str = ""
    label: Optional[int] = None
    session_id: int = 0
    speaker_id: str = ""

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


def encode_feature_file(frames) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError(f"frames must be 2-D, got shape {frames.shape}")
    T, D = frames.shape
    if T < 1:
        raise EmptySequenceError("T = 0")
    if not np.all(np.isfinite(frames)):
        raise NonFiniteError("non-finite value in frames")
    payload = np.ascontiguousarray(frames, dtype="<f4").tobytes()
    return _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, D, T) + payload


def decode_feature_file(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("truncated header")
    magic, version, D, T = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"version mismatch: {version} != {FEATURE_VERSION}")
    if T == 0:
        raise EmptySequenceError("T = 0")
    expected = T * D * 4
    payload = data[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}"
        )
    if len(payload) > expected:
        raise FeatureFileError(f"{len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(T, D).astype(np.float32)


def write_feature_file(seq, path):
    """Write a FrameSequence (or a bare T x D array) to ``path``."""
    frames = seq.frames if isinstance(seq, FrameSequence) else seq
    data = encode_feature_file(frames)
    with open(path, "wb") as fh:
        fh.write(data)


def read_feature_file(path) -> FrameSequence:
    with open(path, "rb") as fh:
        frames = decode_feature_file(fh.read())
    return FrameSequence(frames=frames, utterance_id=Path(path).stem)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    path: str
    label: int
    session_id: int
    speaker_id: str


@dataclass
class Manifest:
    records: list
    class_names: list
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ManifestError("duplicate paths in manifest")
        for r in self.records:
            if not 0 <= r.label < len(self.class_names):
                raise ManifestError(f"label {r.label} out of range for {r.path}")

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def sessions(self):
        return sorted({r.session_id for r in self.records})

    def __len__(self):
        return len(self.records)

    def load(self, index) -> FrameSequence:
        rec = self.records[index]
        seq = read_feature_file(self.root / rec.path)
        seq.label = rec.label
        seq.session_id = rec.session_id
        seq.speaker_id = rec.speaker_id
        return seq

    def load_all(self):
        return [self.load(i) for i in range(len(self.records))]


def format_manifest(manifest: Manifest) -> str:
    lines = ["#classes: " + ",".join(manifest.class_names)]
    for r in manifest.records:
        lines.append(f"{r.path}\t{r.label}\t{r.session_id}\t{r.speaker_id}")
    return "\n".join(lines) + "\n"


def write_manifest(manifest: Manifest, path):
    Path(path).write_text(format_manifest(manifest), encoding="utf-8")


def read_manifest(path) -> Manifest:
    path = Path(path)
    class_names = None
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("#classes:"):
                class_names = [c.strip() for c in line[len("#classes:"):].split(",") if c.strip()]
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields")
        records.append(Record(fields[0], int(fields[1]), int(fields[2]), fields[3]))
    if class_names is None:
        raise ManifestError(f"{path}: missing '#classes:' header")
    return Manifest(records, class_names, root=path.parent)


# ---------------------------------------------------------------------------
# cross-session folds
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    folds: list  # (train indices, validation indices) pairs
    sessions: list  # validation session of each fold

    def __len__(self):
        return len(self.folds)


def make_folds(manifest: Manifest) -> FoldPlan:
    """One fold per session: validate on it, train on all the others."""
    sessions = manifest.sessions
    if len(sessions) < 2:
        raise ValueError("need at least 2 sessions for a cross-session split")
    session_of = np.array([r.session_id for r in manifest.records])
    folds = []
    for s in sessions:
        val = np.flatnonzero(session_of == s)
        train = np.flatnonzero(session_of != s)
        folds.append((train, val))
    return FoldPlan(folds, list(sessions))


# ---------------------------------------------------------------------------
# synthetic embeddings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    utterances_per_class: tuple = (50, 50, 50, 50)
    dim: int = 64
    t_range: tuple = (8, 24)
    separation: float = 6.0
    noise: float = 1.0
    num_sessions: int = 5
    speakers_per_session: int = 2
    smooth_window: int = 5
    seed: int = 0

    def __post_init__(self):
        upc = self.utterances_per_class
        if isinstance(upc, int):
            object.__setattr__(self, "utterances_per_class", (upc,) * self.num_classes)
        else:
            object.__setattr__(self, "utterances_per_class", tuple(int(n) for n in upc))
        object.__setattr__(self, "t_range", tuple(int(t) for t in self.t_range))
        if len(self.utterances_per_class) != self.num_classes:
            raise ValueError("utterances_per_class must have one entry per class")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.separation <= 0 or self.noise <= 0:
            raise ValueError("separation and noise must be positive")
        lo, hi = self.t_range
        if lo < 4 or hi < lo:
            raise ValueError("t_range must satisfy 4 <= min <= max")
        if self.num_sessions < 1 or self.speakers_per_session < 1:
            raise ValueError("need at least one session and one speaker per session")


def class_centroids(num_classes, dim, separation, rng):
    """Centroids whose pairwise distances are all >= ``separation``."""
    if num_classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        # orthonormal columns scaled so every pair is exactly `separation` apart
        return (separation / math.sqrt(2.0)) * q.T
    radius = separation
    while True:
        mu = rng.standard_normal((num_classes, dim)) * radius
        diff = mu[:, None, :] - mu[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= separation:
            return mu
        radius *= 1.1


def smoothed_noise(T, dim, scale, window, rng):
    """Gaussian noise moving-averaged over ``window`` frames, rescaled to std ``scale``."""
    raw = rng.standard_normal((T + window - 1, dim))
    kernel = np.ones(window) / window
    out = np.empty((T, dim))
    for d in range(dim):
        out[:, d] = np.convolve(raw[:, d], kernel, mode="valid")
    # averaging `window` iid draws shrinks the std by sqrt(window)
    return out * (scale * math.sqrt(window))


def generate_synthetic(spec: SynthSpec):
    """Return ``(manifest, sequences)`` fully determined by ``spec``."""
    rng = np.random.default_rng(spec.seed)
    centroids = class_centroids(spec.num_classes, spec.dim, spec.separation, rng)
    lo, hi = spec.t_range
    records, seqs = [], []
    idx = 0
    for c, n in enumerate(spec.utterances_per_class):
        for _ in range(n):
            T = int(rng.integers(lo, hi + 1))
            frames = centroids[c] + smoothed_noise(T, spec.dim, spec.noise, spec.smooth_window, rng)
            session = idx % spec.num_sessions
            speaker = (idx // spec.num_sessions) % spec.speakers_per_session
            uid = f"utt{idx:05d}"
            rec = Record(f"feats/{uid}.wapf", c, session, f"s{session}spk{speaker}")
            records.append(rec)
            seqs.append(FrameSequence(frames.astype(np.float32), uid, c, session, rec.speaker_id))
            idx += 1
    names = [f"class{c}" for c in range(spec.num_classes)]
    return Manifest(records, names), seqs


def gen_synthetic(spec: SynthSpec, out_dir) -> Manifest:
    """Generate a synthetic dataset and write it under ``out_dir``."""
    out_dir = Path(out_dir)
    manifest, seqs = generate_synthetic(spec)
    (out_dir / "feats").mkdir(parents=True, exist_ok=True)
    for rec, seq in zip(manifest.records, seqs):
        write_feature_file(seq, out_dir / rec.path)
    write_manifest(manifest, out_dir / "manifest.tsv")
    manifest.root = out_dir
    return manifest


def utterance_means(seqs: Sequence[FrameSequence]):
    return np.stack([np.asarray(s.frames, dtype=np.float64).mean(axis=0) for s in seqs])


def nearest_centroid_predict(train_x, train_y, test_x, num_classes):
    centroids = np.stack([train_x[train_y == c].mean(axis=0) for c in range(num_classes)])
    d = ((test_x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    return d.argmin(axis=1)


def nearest_centroid_cv(seqs, folds: FoldPlan, num_classes):
    """Per-fold predictions of a nearest-class-centroid rule on utterance means.

    Returns a list of ``(true labels, predicted labels)`` per fold.
    """
    x = utterance_means(seqs)
    y = np.array([s.label for s in seqs])
    out = []
    for train, val in folds.folds:
        pred = nearest_centroid_predict(x[train], y[train], x[val], num_classes)
        out.append((y[val], pred))
    return out
