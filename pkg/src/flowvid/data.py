"""Synthetic moving-sprite corpus, the ``NFVV`` video container and PPM export.

Each video shows one sprite (square, circle or bar) drifting 1-2 pixels per
frame in one direction with wraparound over a dark solid background.  The
label encodes shape and/or direction depending on the label scheme.
"""

import csv
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import FormatError
from .video import VideoRecord

VIDEO_MAGIC = b"NFVV"
VIDEO_VERSION = 1
HEADER = struct.Struct("<4s7i")  # magic, version, T, C, H, W, label, video_id

SHAPES = ("square", "circle", "bar")
DIRECTIONS = ("left", "right", "up", "down")
# (drow, dcol) unit steps
_STEP = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}
LABEL_SCHEMES = ("shape_direction", "shape", "direction")


def label_names(scheme="shape_direction"):
    if scheme == "shape_direction":
        return [f"{s},{d}" for s in SHAPES for d in DIRECTIONS]
    if scheme == "shape":
        return list(SHAPES)
    if scheme == "direction":
        return list(DIRECTIONS)
    raise ValueError(f"unknown label scheme {scheme!r}; choose one of {', '.join(LABEL_SCHEMES)}")


@dataclass
class CorpusSpec:
    num_videos: int = 1000
    frames: int = 8
    size: int = 16
    labels: str = "shape_direction"
    seed: int = 0
    train_fraction: float = 0.99

    def validate(self):
        if self.num_videos < 1 or self.frames < 1 or self.size < 4:
            raise ValueError(f"invalid corpus spec {self}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")
        label_names(self.labels)
        return self

    @property
    def label_count(self):
        return len(label_names(self.labels))

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


# ----------------------------------------------------------------- rendering

def _sprite_mask(shape, size):
    """Boolean footprint of the sprite relative to its top-left corner."""
    r = max(2, size // 4)  # 4 px at 16x16
    if shape == "square":
        return np.ones((r, r), dtype=bool)
    if shape == "circle":
        d = r + 1
        yy, xx = np.mgrid[:d, :d]
        c = (d - 1) / 2.0
        return (yy - c) ** 2 + (xx - c) ** 2 <= (d / 2.0) ** 2
    if shape == "bar":
        return np.ones((max(1, r // 2), r + 2), dtype=bool)
    raise ValueError(f"unknown shape {shape!r}")


def _label_parts(label, scheme, rng):
    names = label_names(scheme)
    name = names[label]
    if scheme == "shape_direction":
        return name.split(",")
    if scheme == "shape":
        return name, DIRECTIONS[rng.integers(len(DIRECTIONS))]
    return SHAPES[rng.integers(len(SHAPES))], name


def render_video(shape, direction, frames, size, rng):
    """Draw one clip; returns uint8 ``(T, 3, size, size)``."""
    mask = _sprite_mask(shape, size)
    ys, xs = np.nonzero(mask)
    background = rng.integers(0, 64, size=3)
    color = rng.integers(160, 256, size=3)
    row, col = rng.integers(0, size, size=2)
    speed = int(rng.integers(1, 3))
    dr, dc = _STEP[direction]
    video = np.empty((frames, 3, size, size), dtype=np.uint8)
    for t in range(frames):
        img = np.empty((3, size, size), dtype=np.uint8)
        img[:] = background[:, None, None]
        r = (row + dr * speed * t + ys) % size
        c = (col + dc * speed * t + xs) % size
        img[:, r, c] = color[:, None]
        video[t] = img
    return video


def make_video(video_id, spec):
    """Video ``video_id`` of the corpus; depends only on ``(spec.seed, video_id)``."""
    rng = np.random.default_rng([spec.seed, video_id])
    label = int(rng.integers(spec.label_count))
    shape, direction = _label_parts(label, spec.labels, rng)
    frames = render_video(shape, direction, spec.frames, spec.size, rng)
    return VideoRecord(frames, label, video_id)


def split_ids(num_videos, seed, train_fraction=0.99):
    """Seeded disjoint (train, validation) id lists covering ``range(num_videos)``."""
    n_val = int(round(num_videos * (1.0 - train_fraction)))
    perm = np.random.default_rng([seed, 0x5EED]).permutation(num_videos)
    val = sorted(int(i) for i in perm[:n_val])
    train = sorted(int(i) for i in perm[n_val:])
    return train, val


def generate_corpus(spec, out_dir):
    """Write videos, ``manifest.csv`` and ``corpus.json``; returns the manifest rows."""
    spec.validate()
    os.makedirs(os.path.join(out_dir, "videos"), exist_ok=True)
    train, val = split_ids(spec.num_videos, spec.seed, spec.train_fraction)
    split_of = {i: "train" for i in train}
    split_of.update({i: "val" for i in val})
    rows = []
    for vid in range(spec.num_videos):
        video = make_video(vid, spec)
        rel = os.path.join("videos", f"video_{vid:06d}.nfvv")
        write_video(os.path.join(out_dir, rel), video)
        rows.append({"video_id": vid, "label": video.label, "split": split_of[vid], "path": rel})
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["video_id", "label", "split", "path"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    meta = {"spec": spec.to_dict(), "corpus_hash": spec.digest(), "label_names": label_names(spec.labels)}
    with open(os.path.join(out_dir, "corpus.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rows


class Corpus:
    """Read-side view of a corpus directory."""

    def __init__(self, root):
        self.root = root
        with open(os.path.join(root, "corpus.json")) as fh:
            meta = json.load(fh)
        self.spec = CorpusSpec(**meta["spec"])
        self.hash = meta["corpus_hash"]
        self.label_names = meta["label_names"]
        with open(os.path.join(root, "manifest.csv"), newline="") as fh:
            self.rows = [{"video_id": int(r["video_id"]), "label": int(r["label"]),
                          "split": r["split"], "path": r["path"]} for r in csv.DictReader(fh)]

    def ids(self, split):
        return [r["video_id"] for r in self.rows if r["split"] == split]

    def load(self, split=None, ids=None):
        rows = self.rows
        if split is not None:
            rows = [r for r in rows if r["split"] == split]
        if ids is not None:
            wanted = set(ids)
            rows = [r for r in rows if r["video_id"] in wanted]
        return [read_video(os.path.join(self.root, r["path"])) for r in rows]


# ------------------------------------------------------------------ container

def encode_video(video):
    frames = np.asarray(video.frames)
    if frames.ndim != 4 or frames.dtype != np.uint8:
        raise ValueError(f"frames must be uint8 (T, C, H, W), got {frames.dtype} {frames.shape}")
    t, c, h, w = frames.shape
    return HEADER.pack(VIDEO_MAGIC, VIDEO_VERSION, t, c, h, w, int(video.label), int(video.video_id)) \
        + np.ascontiguousarray(frames).tobytes()


def decode_video(blob):
    if len(blob) < HEADER.size:
        raise FormatError("header: truncated video header")
    magic, version, t, c, h, w, label, vid = HEADER.unpack_from(blob)
    if magic != VIDEO_MAGIC:
        raise FormatError("magic: not an NFVV video")
    if version != VIDEO_VERSION:
        raise FormatError(f"version: unsupported video version {version}")
    if min(t, c, h, w) < 1:
        raise FormatError(f"header: invalid dimensions {t}x{c}x{h}x{w}")
    n = t * c * h * w
    if len(blob) != HEADER.size + n:
        raise FormatError(f"payload: expected {n} pixel bytes, found {len(blob) - HEADER.size}")
    frames = np.frombuffer(blob, dtype=np.uint8, offset=HEADER.size).reshape(t, c, h, w).copy()
    return VideoRecord(frames, label, vid)


def write_video(path, video):
    with open(path, "wb") as fh:
        fh.write(encode_video(video))


def read_video(path):
    with open(path, "rb") as fh:
        return decode_video(fh.read())


# ---------------------------------------------------------------------- PPM

def write_ppm(path, frame):
    frame = np.asarray(frame, dtype=np.uint8)
    _, h, w = frame.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(frame.transpose(1, 2, 0)).tobytes())


def read_ppm(path):
    """Read a binary P6 file written by :func:`write_ppm`; returns ``(3, H, W)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise FormatError("header: not a P6 file with maxval 255")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != 3 * h * w:
        raise FormatError("payload: pixel count does not match header")
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).copy()


def export_frames(video, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for t, frame in enumerate(video.frames):
        path = os.path.join(out_dir, f"frame_{t:04d}.ppm")
        write_ppm(path, frame)
        paths.append(path)
    return paths
