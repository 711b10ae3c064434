"""Tracked-sweep data model and on-disk format.

A sweep directory holds ``manifest.json`` plus one binary PGM (P5) per
frame under ``frames/``. Images are stored as 8-bit and exposed as floats
in [0, 1]; poses are 3-vectors in millimetres (translation only).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class SweepFormatError(ValueError):
    """Raised for malformed sweep directories or files."""


@dataclass(frozen=True)
class ProbePose:
    """Tracked probe translation in millimetres."""

    position: tuple[float, float, float]

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(np.isfinite(pos)):
            raise ValueError(f"pose must be a finite 3-vector, got {self.position!r}")
        object.__setattr__(self, "position", pos)

    def as_array(self):
        return np.asarray(self.position, dtype=np.float64)


def probe_distance(a: ProbePose, b: ProbePose) -> float:
    """Euclidean distance between two probe positions, in mm."""
    return float(np.linalg.norm(a.as_array() - b.as_array()))


@dataclass(frozen=True)
class SweepFrame:
    image: np.ndarray  # H x W float in [0, 1]
    time_s: float
    pose: ProbePose
    frame_index: int

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ValueError("frame image must be 2-d grayscale")
        if self.frame_index < 0 or self.time_s < 0:
            raise ValueError("frame_index and time_s must be non-negative")


@dataclass(frozen=True)
class Sweep:
    id: str
    frames: list[SweepFrame]
    pixel_spacing_mm: float

    def __len__(self):
        return len(self.frames)

    @property
    def image_size(self):
        return self.frames[0].image.shape

    def poses(self):
        return [f.pose for f in self.frames]


def validate_sweep(sweep: Sweep):
    """Check all Sweep invariants; raises SweepFormatError on violation."""
    if len(sweep.frames) < 1:
        raise SweepFormatError(f"sweep {sweep.id}: no frames")
    if sweep.pixel_spacing_mm <= 0:
        raise SweepFormatError(f"sweep {sweep.id}: non-positive pixel spacing")
    h, w = sweep.frames[0].image.shape
    prev_t = -1.0
    for i, f in enumerate(sweep.frames):
        if f.frame_index != i:
            raise SweepFormatError(
                f"sweep {sweep.id}: frame_index {f.frame_index} at position {i}"
            )
        if f.image.shape != (h, w):
            raise SweepFormatError(f"sweep {sweep.id}: frame {i} size mismatch")
        if not (f.time_s > prev_t):
            raise SweepFormatError(
                f"sweep {sweep.id}: timestamps not strictly increasing at frame {i}"
            )
        prev_t = f.time_s
        if f.image.min() < 0 or f.image.max() > 1:
            raise SweepFormatError(f"sweep {sweep.id}: frame {i} outside [0,1]")


# -- PGM (P5) ---------------------------------------------------------------


def write_pgm(path: Path, image: np.ndarray):
    """Write a [0,1] float image as binary 8-bit PGM."""
    data = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise SweepFormatError(f"{path}: corrupt PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise SweepFormatError(f"{path}: unsupported maxval {maxval}")
    pixels = raw[m.end() :]
    if len(pixels) != w * h:
        raise SweepFormatError(f"{path}: expected {w * h} pixels, got {len(pixels)}")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / 255.0


# -- sweep directory round-trip ------------------------------------------------


def save_sweep(sweep: Sweep, directory: Path):
    """Write manifest.json + frames/%06d.pgm; round-trips losslessly."""
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for f in sweep.frames:
        fname = f"frames/{f.frame_index:06d}.pgm"
        write_pgm(directory / fname, f.image)
        entries.append(
            {
                "index": f.frame_index,
                "file": fname,
                "time_s": f.time_s,
                "pose_mm": list(f.pose.position),
            }
        )
    manifest = {
        "id": sweep.id,
        "pixel_spacing_mm": sweep.pixel_spacing_mm,
        "frames": entries,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load_sweep(directory: Path) -> Sweep:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise SweepFormatError(f"{directory}: missing manifest.json")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SweepFormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("id", "pixel_spacing_mm", "frames"):
        if key not in manifest:
            raise SweepFormatError(f"{manifest_path}: missing key {key!r}")
    frames = []
    prev_t = -1.0
    for entry in manifest["frames"]:
        fpath = directory / entry["file"]
        if not fpath.exists():
            raise SweepFormatError(f"{directory}: missing frame file {entry['file']}")
        if entry["time_s"] <= prev_t:
            raise SweepFormatError(
                f"{directory}: non-monotonic timestamp at frame {entry['index']}"
            )
        prev_t = entry["time_s"]
        frames.append(
            SweepFrame(
                image=read_pgm(fpath),
                time_s=float(entry["time_s"]),
                pose=ProbePose(tuple(entry["pose_mm"])),
                frame_index=int(entry["index"]),
            )
        )
    sweep = Sweep(
        id=manifest["id"],
        frames=frames,
        pixel_spacing_mm=float(manifest["pixel_spacing_mm"]),
    )
    validate_sweep(sweep)
    return sweep


def load_sweep_dirs(root: Path) -> list[Sweep]:
    """Load every sweep directory (one level deep) under root, sorted by name."""
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
    if not dirs:
        raise SweepFormatError(f"{root}: no sweep directories found")
    return [load_sweep(d) for d in dirs]


def sweeps_equal(a: Sweep, b: Sweep) -> bool:
    if a.id != b.id or a.pixel_spacing_mm != b.pixel_spacing_mm or len(a) != len(b):
        return False
    for fa, fb in zip(a.frames, b.frames):
        if fa.frame_index != fb.frame_index or fa.time_s != fb.time_s:
            return False
        if fa.pose.position != fb.pose.position:
            return False
        if not np.array_equal(fa.image, fb.image):
            return False
    return True
