"""Frame stores, synthetic identities, preprocessing and identity splits.

A frame store is a list of :class:`Video` objects holding raw ``uint8``
frames ``(T, H, W, 3)``.  On disk it is laid out as
``<root>/<identity>/<video>/<frame-index>.ras`` where each ``.ras`` file is a
16-byte little-endian header (magic ``FRAS``, width, height, channels)
followed by the raw ``H * W * C`` bytes in row-major HWC order.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

CLIP_LENGTH = 8
RASTER_MAGIC = b"FRAS"
_HEADER = struct.Struct("<4sIII")


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class Video:
    identity: str
    video_id: str
    frames: np.ndarray  # uint8 (T, H, W, 3)


@dataclass
class DatasetManifest:
    identities: list[str]
    videos: dict[str, dict[str, int]]  # identity -> video -> frame count
    split: dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    preprocessing: dict = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def num_videos(self) -> int:
        return sum(len(v) for v in self.videos.values())

    @property
    def num_frames(self) -> int:
        return sum(n for v in self.videos.values() for n in v.values())

    @classmethod
    def from_store(cls, store: Sequence[Video], seed: Optional[int] = None) -> "DatasetManifest":
        videos: dict[str, dict[str, int]] = {}
        for v in store:
            videos.setdefault(v.identity, {})[v.video_id] = int(v.frames.shape[0])
        return cls(identities=sorted(videos), videos=videos, seed=seed)

    def to_json(self) -> str:
        doc = {
            "identities": self.identities,
            "videos": self.videos,
            "split": self.split,
            "seed": self.seed,
            "preprocessing": self.preprocessing,
            "skipped": self.skipped,
            "counts": {"identities": len(self.identities), "videos": self.num_videos, "frames": self.num_frames},
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls(doc["identities"], doc["videos"], doc.get("split", {}), doc.get("seed"),
                   doc.get("preprocessing", {}), doc.get("skipped", []))


@dataclass
class SampleRecord:
    sample_id: int
    label: Hashable
    payload: np.ndarray
    video_id: str


@dataclass
class SampleSet:
    """Preprocessed samples of one split as aligned arrays."""

    x: np.ndarray  # (N, 3, H, W) stills or (N, 3, 8, H, W) clips
    labels: np.ndarray
    ids: np.ndarray
    videos: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask_or_index) -> "SampleSet":
        return SampleSet(self.x[mask_or_index], self.labels[mask_or_index], self.ids[mask_or_index],
                         self.videos[mask_or_index])

    def records(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            yield SampleRecord(int(self.ids[i]), self.labels[i], self.x[i], str(self.videos[i]))


# ---------------------------------------------------------------------------
# synthetic identities
# ---------------------------------------------------------------------------

Wave = tuple  # (frequency (fy, fx), phase, per-channel amplitude)


def _waves(rng: np.random.Generator, count: int, fmin: float, fmax: float) -> list[Wave]:
    return [(rng.uniform(fmin, fmax, size=2) * rng.choice([-1, 1], size=2), rng.uniform(0, 2 * np.pi),
             rng.uniform(0.3, 1.0, size=3)) for _ in range(count)]


def _field(waves: Sequence[Wave], yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    out = sum(amp * np.sin(2 * np.pi * (f[0] * yy + f[1] * xx) + ph)[..., None] for f, ph, amp in waves)
    return out / len(waves)


def _blob(yy, xx, cy, cx, ry, rx, sharpness: float = 12.0) -> np.ndarray:
    """Soft-edged ellipse mask with a trailing channel axis."""
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return expit(sharpness * (1.0 - r))[..., None]


@dataclass
class FaceModel:
    """Geometry and colours of one synthetic identity, in unit face coordinates."""

    skin: np.ndarray
    radii: tuple
    eyes: tuple  # (dy, dx, radius)
    eye_colour: np.ndarray
    mouth: tuple  # (dy, ry, rx)
    mouth_colour: np.ndarray
    hair_height: float
    hair_colour: np.ndarray
    texture: list

    @classmethod
    def sample(cls, rng: np.random.Generator, spread: float = 1.0) -> "FaceModel":
        def jitter(centre, half, size=None):
            return centre + spread * rng.uniform(-half, half, size)

        return cls(
            skin=jitter(np.array([150.0, 120.0, 100.0]), 50, 3),
            radii=(jitter(0.34, 0.05), jitter(0.27, 0.05)),
            eyes=(jitter(0.10, 0.04), jitter(0.12, 0.04), jitter(0.045, 0.015)),
            eye_colour=rng.uniform(0, 90, 3),
            mouth=(jitter(0.16, 0.04), jitter(0.03, 0.01), jitter(0.10, 0.04)),
            mouth_colour=rng.uniform(60, 200, 3),
            hair_height=jitter(0.12, 0.06),
            hair_colour=rng.uniform(0, 120, 3),
            texture=_waves(rng, 3, 1.0, 4.0),
        )

    def render(self, yy: np.ndarray, xx: np.ndarray, background: np.ndarray) -> np.ndarray:
        """Composite the face (face-frame coordinates ``yy, xx``) over ``background``."""
        ry, rx = self.radii
        face = _blob(yy, xx, 0.0, 0.0, ry, rx)
        img = background * (1 - face) + (self.skin + 25 * _field(self.texture, yy, xx)) * face
        hair = _blob(yy, xx, -ry + self.hair_height / 2, 0.0, self.hair_height, rx * 1.05) * face
        img = img * (1 - hair) + self.hair_colour * hair
        eye_dy, eye_dx, eye_r = self.eyes
        for side in (-1, 1):
            eye = _blob(yy, xx, -eye_dy, side * eye_dx, eye_r, eye_r * 1.3)
            img = img * (1 - eye) + self.eye_colour * eye
        mouth_dy, mouth_ry, mouth_rx = self.mouth
        mouth = _blob(yy, xx, mouth_dy, 0.0, mouth_ry, mouth_rx)
        return img * (1 - mouth) + self.mouth_colour * mouth


def generate_synthetic_identities(
    num_ids: int = 20,
    clips_per_id: int = 4,
    frames_per_clip: int = 24,
    height: int = 32,
    width: int = 32,
    seed: int = 0,
    spread: float = 1.0,
    drift: float = 0.08,
    noise: float = 8.0,
    background: float = 60.0,
    lighting: float = 0.8,
) -> tuple[list[Video], DatasetManifest]:
    """Render ``num_ids`` identities with ``clips_per_id`` videos each.

    Identities are variations of one face template (``spread`` scales how
    far apart they are).  Each video draws its own background, exposure,
    tint, face scale and light direction; within a video the face drifts
    smoothly (``drift`` as a fraction of the frame), breathes in scale, the
    light direction rotates, and every frame gets independent pixel noise.
    """
    for name, v in (("num_ids", num_ids), ("clips_per_id", clips_per_id), ("frames_per_clip", frames_per_clip),
                    ("height", height), ("width", width)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width) - 0.5
    store = []
    for k in range(num_ids):
        identity = f"id{k:03d}"
        face = FaceModel.sample(rng, spread)
        for v in range(clips_per_id):
            bg = 110 + background * _field(_waves(rng, 4, 0.5, 3.0), yy, xx)
            offset = rng.uniform(-drift, drift, size=2)
            freq = rng.uniform(0.1, 0.4, size=3)
            phase = rng.uniform(0, 2 * np.pi, size=3)
            gain = rng.uniform(0.7, 1.3)
            tint = rng.uniform(-20, 20, size=3)
            scale = 1 + rng.uniform(-0.1, 0.1)
            light0 = rng.uniform(0, 2 * np.pi)
            frames = np.empty((frames_per_clip, height, width, 3), dtype=np.uint8)
            for t in range(frames_per_clip):
                dy, dx = offset + drift * np.sin(freq[:2] * t + phase[:2])
                s = scale * (1 + 0.05 * np.sin(freq[2] * t + phase[2]))
                img = face.render((yy - dy) / s, (xx - dx) / s, bg)
                angle = light0 + 0.15 * t
                shade = 1 + lighting * (np.cos(angle) * yy + np.sin(angle) * xx)[..., None]
                img = (img - 128.0) * gain * shade + 128.0 + tint + rng.normal(0, noise, size=img.shape)
                frames[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            store.append(Video(identity, f"v{v:02d}", frames))
    return store, DatasetManifest.from_store(store, seed)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def segment_sequences(frames: np.ndarray, length: int = CLIP_LENGTH) -> list[np.ndarray]:
    """Consecutive non-overlapping clips; a short remainder is dropped."""
    if length < 1:
        raise ValueError("clip length must be >= 1")
    return [frames[k * length : (k + 1) * length] for k in range(len(frames) // length)]


def _check_raw(frames: np.ndarray) -> np.ndarray:
    arr = np.asarray(frames, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("raw pixel values must lie in [0, 255]")
    return arr


def preprocess_stills(frames: np.ndarray, training_mean: Optional[np.ndarray] = None,
                      split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Scale HWC frames to [0, 1], move channels first and subtract the training mean image.

    For the training split the per-pixel mean is computed from ``frames``
    unless given; other splits must be given the training mean.
    """
    x = np.moveaxis(_check_raw(frames) / 255.0, -1, -3)
    if training_mean is None:
        if split != "train":
            raise ValueError(f"the {split!r} split needs the training mean image")
        training_mean = x.mean(axis=0)
    return x - training_mean, training_mean


def preprocess_sequences(clips: np.ndarray) -> np.ndarray:
    """Scale ``(N, T, H, W, C)`` clips to [0, 1] as ``(N, C, T, H, W)``; no mean subtraction."""
    return np.moveaxis(_check_raw(clips) / 255.0, -1, 1)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_identities(identities: Sequence[str], train_frac: float = 0.8, seed: int = 0) -> dict[str, str]:
    """Assign whole identities to ``train`` or ``test``."""
    identities = sorted(identities)
    if len(identities) < 5:
        raise ValueError(f"need at least 5 identities to split, got {len(identities)}")
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must be in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(identities))
    n_train = int(round(train_frac * len(identities)))
    n_train = min(max(n_train, 1), len(identities) - 1)
    return {identities[i]: ("train" if rank < n_train else "test") for rank, i in enumerate(order)}


VALIDATION_FRACTION = {"stills": 0.2, "clips": 0.33}


@dataclass
class DataSplits:
    train: SampleSet
    validation: SampleSet
    test: SampleSet
    modality: str
    assignment: dict[str, str]
    mean_image: Optional[np.ndarray] = None
    dropped: list[str] = field(default_factory=list)


def _samples_for(store: Sequence[Video], identities: set, modality: str):
    xs, labels, videos = [], [], []
    for v in store:
        if v.identity not in identities:
            continue
        units = list(v.frames) if modality == "stills" else segment_sequences(v.frames)
        for u in units:
            xs.append(u)
            labels.append(v.identity)
            videos.append(f"{v.identity}/{v.video_id}")
    return xs, labels, videos


def _carve_validation(labels: np.ndarray, fraction: float, min_val: int, min_train: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    """Boolean validation mask over training samples, per identity.

    Identities with too few samples to keep ``min_val`` in validation and
    ``min_train`` in training are dropped (mask value -1 marks them).
    """
    role = np.zeros(len(labels), dtype=np.int8)  # 0 train, 1 validation, -1 dropped
    dropped = []
    for label in sorted(set(labels.tolist())):
        pos = np.flatnonzero(labels == label)
        n_val = max(min_val, int(round(fraction * len(pos))))
        if len(pos) - n_val < min_train:
            role[pos] = -1
            dropped.append(label)
            continue
        role[rng.choice(pos, size=n_val, replace=False)] = 1
    return role, dropped


def build_splits(store: Sequence[Video], modality: str, seed: int = 0, train_frac: float = 0.8,
                 val_frac: Optional[float] = None, validation_mode: str = "samples") -> DataSplits:
    """Identity-disjoint train/test split plus a validation carve-out from training.

    ``validation_mode="samples"`` holds out a fraction of every training
    identity's samples (each keeps at least two on both sides);
    ``"identities"`` holds out whole training identities instead.
    """
    if modality not in VALIDATION_FRACTION:
        raise ValueError(f"modality must be 'stills' or 'clips', got {modality!r}")
    val_frac = VALIDATION_FRACTION[modality] if val_frac is None else val_frac
    manifest = DatasetManifest.from_store(store)
    assignment = split_identities(manifest.identities, train_frac, seed)
    rng = np.random.default_rng([seed, 1])
    train_ids = {i for i, s in assignment.items() if s == "train"}
    test_ids = {i for i, s in assignment.items() if s == "test"}

    tx, tl, tv = _samples_for(store, train_ids, modality)
    labels = np.array(tl)
    dropped: list[str] = []
    if validation_mode == "samples":
        role, dropped = _carve_validation(labels, val_frac, 2, 2, rng)
    elif validation_mode == "identities":
        ids = sorted(train_ids)
        n_val = max(1, int(round(val_frac * len(ids))))
        val_ids = {ids[i] for i in rng.choice(len(ids), size=n_val, replace=False)}
        role = np.where(np.isin(labels, list(val_ids)), 1, 0).astype(np.int8)
        for i in val_ids:
            assignment[i] = "validation"
    else:
        raise ValueError(f"unknown validation_mode {validation_mode!r}")
    for label in dropped:
        log.warning("identity %s dropped: too few samples for a validation carve-out", label)

    qx, ql, qv = _samples_for(store, test_ids, modality)
    raw_train = np.array(tx)
    if modality == "stills":
        # the mean image comes from the samples that actually train
        x_train, mean_image = preprocess_stills(raw_train[role == 0])
        x_val, _ = preprocess_stills(raw_train[role == 1], mean_image, split="validation")
        x_test, _ = preprocess_stills(np.array(qx), mean_image, split="test")
    else:
        mean_image = None
        x_all = preprocess_sequences(raw_train)
        x_train, x_val = x_all[role == 0], x_all[role == 1]
        x_test = preprocess_sequences(np.array(qx))

    ids_all = np.arange(len(labels))
    videos = np.array(tv)
    train = SampleSet(x_train, labels[role == 0], ids_all[role == 0], videos[role == 0])
    validation = SampleSet(x_val, labels[role == 1], ids_all[role == 1], videos[role == 1])
    test = SampleSet(x_test, np.array(ql), np.arange(len(ql)) + len(labels), np.array(qv))
    return DataSplits(train, validation, test, modality, assignment, mean_image, dropped)


# ---------------------------------------------------------------------------
# raster frame store on disk
# ---------------------------------------------------------------------------

def write_raster(path: Path, frame: np.ndarray) -> None:
    frame = np.ascontiguousarray(frame, dtype=np.uint8)
    h, w, c = frame.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RASTER_MAGIC, w, h, c))
        fh.write(frame.tobytes())


def read_raster(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, w, h, c = _HEADER.unpack_from(blob)
    if magic != RASTER_MAGIC or min(w, h, c) < 1:
        raise ValueError(f"{path}: malformed raster header")
    body = blob[_HEADER.size :]
    if len(body) != w * h * c:
        raise ValueError(f"{path}: expected {w * h * c} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).copy()


def write_frame_store(store: Sequence[Video], root, manifest: Optional[DatasetManifest] = None) -> Path:
    """Write the store and its manifest, replacing ``root`` atomically."""
    root = Path(root)
    root.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{root.name}-", dir=root.parent))
    try:
        for v in store:
            vdir = tmp / v.identity / v.video_id
            vdir.mkdir(parents=True, exist_ok=True)
            for t, frame in enumerate(v.frames):
                write_raster(vdir / f"{t:06d}.ras", frame)
        manifest = manifest or DatasetManifest.from_store(store)
        (tmp / "manifest.json").write_text(manifest.to_json())
        if root.exists():
            old = root.with_name(f".{root.name}-old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(root, old)
            os.replace(tmp, root)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, root)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return root


def _frame_index(path: Path) -> int:
    try:
        return int(path.stem)
    except ValueError:
        return -1


def ingest_frames(root) -> tuple[list[Video], DatasetManifest]:
    """Read a ``<identity>/<video>/<index>.ras`` tree.

    Unreadable frames, and frames whose size differs from the first good
    frame of their video, are skipped and listed in ``manifest.skipped``.
    """
    root = Path(root)
    store: list[Video] = []
    skipped: list[str] = []
    for idir in sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []:
        for vdir in sorted(p for p in idir.iterdir() if p.is_dir()):
            frames = []
            for fpath in sorted(vdir.glob("*.ras"), key=_frame_index):
                try:
                    frame = read_raster(fpath)
                except (OSError, ValueError) as exc:
                    log.warning("skipping %s: %s", fpath, exc)
                    skipped.append(str(fpath.relative_to(root)))
                    continue
                if frames and frame.shape != frames[0].shape:
                    log.warning("skipping %s: size %s differs from %s", fpath, frame.shape, frames[0].shape)
                    skipped.append(str(fpath.relative_to(root)))
                    continue
                frames.append(frame)
            if frames:
                store.append(Video(idir.name, vdir.name, np.stack(frames)))
    if not store:
        log.warning("no frames found under %s", root)
    if skipped:
        log.warning("ingest skipped %d file(s)", len(skipped))
    manifest = DatasetManifest.from_store(store)
    manifest.skipped = skipped
    return store, manifest
