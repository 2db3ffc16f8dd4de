"""Dataset files, loaders and the planted synthetic generator.

Layout of a dataset directory::

    manifest.json
    <id>.rsgn              frame features (see write_features)
    <id>.scores.json       frame scores, one array or one array per annotator
    <id>.summaries.json    per-annotator 0/1 frame masks
    <id>.boundaries.json   1-based inclusive segment ends
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kts

FEATURE_MAGIC = b"RSGN"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class DatasetError(ValueError):
    pass


class FeatureFileError(DatasetError):
    pass


class BadMagicError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class ManifestError(DatasetError):
    pass


def write_features(path, matrix) -> None:
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"features must be a non-empty n x d matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{path}: refusing to write non-finite features")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, x.shape[0], x.shape[1]))
        fh.write(x.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FeatureFileError(f"{path}: cannot read feature file ({exc.strerror})") from exc
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated ({len(blob)} bytes)")
    _, version, n, d = _HEADER.unpack_from(blob)
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{path}: feature format version {version}, expected {FEATURE_VERSION}")
    need = n * d * 4
    if len(blob) - _HEADER.size < need:
        raise TruncatedFileError(f"{path}: payload has {len(blob) - _HEADER.size} bytes, header implies {need}")
    if n < 1 or d < 1:
        raise FeatureFileError(f"{path}: empty feature matrix {n} x {d}")
    x = np.frombuffer(blob, dtype="<f4", count=n * d, offset=_HEADER.size)
    return x.reshape(n, d).astype(np.float64)


def normalize_scores(raw) -> tuple[np.ndarray, bool]:
    """Min-max scale to [0, 1]. Constant input maps to 0.5 and is flagged."""
    x = np.asarray(raw, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot normalise an empty score vector")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5), True
    return (x - lo) / (hi - lo), False


@dataclass
class VideoRecord:
    id: str
    features: np.ndarray
    frame_scores: np.ndarray | None = None
    user_summaries: list[np.ndarray] | None = None
    boundaries: list[int] | None = None
    # raw per-annotator scores, kept for leave-one-out baselines
    user_scores: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or min(self.features.shape) < 1:
            raise ValueError(f"video {self.id}: features must be n x d with n, d >= 1")
        n = self.n_frames
        if self.frame_scores is not None:
            self.frame_scores = np.asarray(self.frame_scores, dtype=np.float64).reshape(-1)
            if self.frame_scores.size != n:
                raise ValueError(f"video {self.id}: {self.frame_scores.size} scores for {n} frames")
        if self.user_summaries is not None:
            self.user_summaries = [np.asarray(s, dtype=bool).reshape(-1) for s in self.user_summaries]
            for s in self.user_summaries:
                if s.size != n:
                    raise ValueError(f"video {self.id}: summary mask of length {s.size} for {n} frames")
        if self.boundaries is not None:
            self.boundaries = [int(b) for b in self.boundaries]
            kts.validate_ends(self.boundaries, n)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def spans(self) -> list[tuple[int, int]] | None:
        return None if self.boundaries is None else kts.spans_from_ends(self.boundaries)

    def without_labels(self) -> "VideoRecord":
        return VideoRecord(self.id, self.features, boundaries=self.boundaries)


@dataclass
class Dataset:
    videos: list[VideoRecord]
    fps: float = 15.0
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.videos[0].dim

    def __len__(self) -> int:
        return len(self.videos)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.videos[i] for i in indices], self.fps, self.name, dict(self.meta))

    def without_labels(self) -> "Dataset":
        return Dataset([v.without_labels() for v in self.videos], self.fps, self.name, dict(self.meta))


def shot_spans(video: VideoRecord, fps: float = 15.0, penalty: float = kts.DEFAULT_PENALTY):
    """Planted/annotated boundaries when present, otherwise KTS."""
    spans = video.spans()
    if spans is not None:
        return spans
    seg = kts.segment(video.features, kts.default_max_segments(video.n_frames, fps), penalty)
    return seg.spans()


def shot_means(frame_values, spans) -> np.ndarray:
    v = np.asarray(frame_values, dtype=np.float64)
    return np.array([v[a:b].mean() for a, b in spans])


# ---------------------------------------------------------------- manifest IO

def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True) + "\n")


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in ds.videos:
        entry = {"id": v.id, "features": f"{v.id}.rsgn"}
        write_features(root / entry["features"], v.features)
        if v.frame_scores is not None or v.user_scores is not None:
            entry["scores"] = f"{v.id}.scores.json"
            scores = v.user_scores if v.user_scores is not None else v.frame_scores
            _dump_json(root / entry["scores"], np.asarray(scores).tolist())
        if v.user_summaries is not None:
            entry["summaries"] = f"{v.id}.summaries.json"
            _dump_json(root / entry["summaries"], [s.astype(int).tolist() for s in v.user_summaries])
        if v.boundaries is not None:
            entry["boundaries"] = f"{v.id}.boundaries.json"
            _dump_json(root / entry["boundaries"], list(v.boundaries))
        entries.append(entry)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "name": ds.name,
        "d": ds.dim,
        "fps": ds.fps,
        "meta": ds.meta,
        "videos": entries,
    }
    _dump_json(root / "manifest.json", manifest)
    return root / "manifest.json"


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json" if root.is_dir() or not root.suffix else root
    root = mpath.parent
    if not mpath.exists():
        raise ManifestError(f"{mpath}: manifest not found")
    manifest = _read_json(mpath)
    if not isinstance(manifest, dict):
        raise ManifestError(f"{mpath}: manifest must be a JSON object")
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(f"{mpath}: unsupported manifest version {manifest.get('format_version')!r}")
    entries = manifest.get("videos")
    if not isinstance(entries, list) or not entries:
        raise ManifestError(f"{mpath}: 'videos' must be a non-empty list")
    videos = []
    seen = set()
    for entry in entries:
        try:
            vid = str(entry["id"])
            feats = read_features(root / entry["features"])
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{mpath}: malformed video entry {entry!r}") from exc
        if vid in seen:
            raise ManifestError(f"{mpath}: duplicate video id {vid}")
        seen.add(vid)
        if "d" in manifest and feats.shape[1] != manifest["d"]:
            raise ManifestError(f"{root / entry['features']}: dimension {feats.shape[1]} != manifest d {manifest['d']}")
        scores = user_scores = summaries = bounds = None
        try:
            if entry.get("scores"):
                raw = np.asarray(_read_json(root / entry["scores"]), dtype=np.float64)
                if raw.ndim == 2:
                    user_scores = raw
                    raw = raw.mean(axis=0)
                scores, _ = normalize_scores(raw)
            if entry.get("summaries"):
                summaries = [np.asarray(s) for s in _read_json(root / entry["summaries"])]
            if entry.get("boundaries"):
                bounds = _read_json(root / entry["boundaries"])
            videos.append(VideoRecord(vid, feats, scores, summaries, bounds, user_scores))
        except DatasetError:
            raise
        except (ValueError, TypeError) as exc:
            raise ManifestError(f"{mpath}: video {vid}: {exc}") from exc
    return Dataset(videos, float(manifest.get("fps", 15.0)), str(manifest.get("name", root.name)),
                   dict(manifest.get("meta", {})))


# ---------------------------------------------------------------- synthetic data

def _split_lengths(rng, total: int, parts: int, jitter: float, minimum: int) -> list[int]:
    if parts * minimum > total:
        raise ValueError(f"cannot split {total} frames into {parts} shots of >= {minimum} frames")
    w = 1.0 + jitter * rng.uniform(-1.0, 1.0, size=parts)
    raw = w / w.sum() * (total - parts * minimum)
    lengths = np.floor(raw).astype(int) + minimum
    for i in np.argsort(-(raw - np.floor(raw)))[: total - lengths.sum()]:
        lengths[i] += 1
    return [int(v) for v in lengths]


def _center(rng, d: int, norm: float, prev: np.ndarray | None) -> np.ndarray:
    while True:
        c = rng.normal(size=d)
        c *= norm / np.linalg.norm(c)
        if prev is None or np.linalg.norm(c - prev) >= 1.0:
            return c


def generate_synthetic(seed: int = 0, n_videos: int = 20, frames_per_video: int = 300, d: int = 16,
                       n_key_shots: int = 4, key_fraction: float = 0.12, noise: float = 0.01,
                       drift: float = 0.05, fps: float = 15.0, shot_seconds: float = 2.0,
                       key_norm: float = 3.0, with_labels: bool = True) -> Dataset:
    """Videos made of shots around random unit-norm centres; the planted key
    shots get centres of norm ``key_norm`` and together cover ``key_fraction``
    of the frames. Oracle scores are 1 on key frames, 0 elsewhere, and the
    single oracle user summary is the key-frame mask."""
    if n_videos < 1 or frames_per_video < 2 or d < 1 or n_key_shots < 1:
        raise ValueError("n_videos, n_key_shots and d must be positive; frames_per_video >= 2")
    if not 0.0 < key_fraction < 1.0:
        raise ValueError("key_fraction must lie in (0, 1)")
    key_frames = max(n_key_shots, int(round(key_fraction * frames_per_video)))
    rest = frames_per_video - key_frames
    if rest < 1:
        raise ValueError("no frames left for non-key shots")
    n_plain = max(1, int(round(rest / max(1.0, shot_seconds * fps))))
    n_plain = min(n_plain, rest)
    if n_key_shots >= n_key_shots + n_plain:
        raise ValueError("n_key_shots must be smaller than the total number of shots")

    rng = np.random.default_rng(seed)
    videos = []
    for v in range(n_videos):
        key_len = _split_lengths(rng, key_frames, n_key_shots, 0.2, 1)
        plain_len = _split_lengths(rng, rest, n_plain, 0.3, 1)
        kinds = np.array([1] * n_key_shots + [0] * n_plain)
        rng.shuffle(kinds)
        ki, pi = iter(key_len), iter(plain_len)
        lengths = [next(ki) if k else next(pi) for k in kinds]
        frames, scores, prev = [], [], None
        for kind, length in zip(kinds, lengths):
            c = _center(rng, d, key_norm if kind else 1.0, prev)
            prev = c
            u = rng.normal(size=d)
            u *= drift / np.linalg.norm(u)
            ramp = (np.arange(length) / max(1, length - 1) - 0.5)[:, None]
            frames.append(c + ramp * u + noise * rng.normal(size=(length, d)))
            scores.append(np.full(length, float(kind)))
        feats = np.concatenate(frames)
        s = np.concatenate(scores)
        ends = np.cumsum(lengths).tolist()
        videos.append(VideoRecord(
            f"video_{v:03d}", feats,
            frame_scores=s if with_labels else None,
            user_summaries=[s > 0.5] if with_labels else None,
            boundaries=ends,
        ))
    meta = {"seed": seed, "key_fraction": key_frames / frames_per_video, "noise": noise, "synthetic": True}
    return Dataset(videos, fps, "synthetic", meta)


def key_frame_fraction(video: VideoRecord) -> float:
    return float(np.mean(video.frame_scores > 0.5)) if video.frame_scores is not None else math.nan
