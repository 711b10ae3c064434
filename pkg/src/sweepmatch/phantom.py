"""Synthetic phantom sweeps: procedural 3D speckle volumes sliced along a
smooth probe trajectory, with tracked poses.

Stands in for clinical data: each "patient" is a speckle volume with
ellipsoidal hypo/hyper-echoic inclusions and dark tubular vessels. Frames
are y-z slices at probe positions marching mostly along +x; recorded poses
are the true slice centers plus optional Gaussian tracking jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .sweeps import ProbePose, Sweep, SweepFrame


class TrajectoryError(ValueError):
    """Raised when a generated trajectory leaves the phantom volume."""


@dataclass(frozen=True)
class PhantomConfig:
    volume_dims_voxels: tuple[int, int, int] = (168, 72, 72)
    voxel_mm: float = 1.0
    inclusion_count: int = 10
    vessel_count: int = 3
    speckle_scale_mm: float = 1.2
    speckle_period_mm: float = 0.0  # 0 = aperiodic; else texture repeats along x
    speckle_period_weight: float = 1.0  # periodic fraction of the texture
    speckle_noise_sigma: float = 0.03
    sweep_length_frames: int = 150
    sweeps_per_volume: int = 1  # consecutive sweeps re-scan the same volume
    inter_frame_spacing_mm: float = 1.0
    trajectory_curvature: float = 10.0  # total in-plane bend over the sweep, degrees
    pose_jitter_mm: float = 0.2
    seed: int = 0
    image_size: tuple[int, int] = (128, 128)
    pixel_spacing_mm: float = 0.4
    frame_rate_hz: float = 5.76

    def __post_init__(self):
        if self.inter_frame_spacing_mm <= 0:
            raise ValueError("inter_frame_spacing_mm must be positive")
        if any(d <= 0 for d in self.volume_dims_voxels):
            raise ValueError("volume dims must be positive")
        if self.pose_jitter_mm < 0:
            raise ValueError("pose_jitter_mm must be >= 0")
        if self.speckle_period_mm < 0:
            raise ValueError("speckle_period_mm must be >= 0")
        if not 0.0 <= self.speckle_period_weight <= 1.0:
            raise ValueError("speckle_period_weight must be in [0, 1]")
        if self.sweeps_per_volume < 1:
            raise ValueError("sweeps_per_volume must be >= 1")


def _make_volume(config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    nx, ny, nz = config.volume_dims_voxels
    sigma = config.speckle_scale_mm / config.voxel_mm
    if config.speckle_period_mm > 0:
        # repeat part of the texture along the sweep axis so distant frames
        # look alike; filtering the tile with wrap keeps the seams smooth
        px = max(1, int(round(config.speckle_period_mm / config.voxel_mm)))
        tile = gaussian_filter(rng.standard_normal((px, ny, nz)), sigma=sigma,
                               mode=("wrap", "reflect", "reflect"))
        periodic = np.tile(tile, (-(-nx // px), 1, 1))[:nx]
        unique = gaussian_filter(rng.standard_normal((nx, ny, nz)), sigma=sigma)
        w = config.speckle_period_weight
        base = w * periodic + np.sqrt(max(1.0 - w * w, 0.0)) * unique
    else:
        base = gaussian_filter(rng.standard_normal((nx, ny, nz)), sigma=sigma)
    base = 0.5 + 0.22 * base / max(base.std(), 1e-9)

    xs = np.arange(nx)[:, None, None]
    ys = np.arange(ny)[None, :, None]
    zs = np.arange(nz)[None, None, :]

    gain = np.ones((nx, ny, nz))
    for _ in range(config.inclusion_count):
        c = rng.uniform([0.1 * nx, 0.15 * ny, 0.15 * nz],
                        [0.9 * nx, 0.85 * ny, 0.85 * nz])
        radii = rng.uniform(4.0, 14.0, size=3) / config.voxel_mm
        level = rng.choice([0.35, 1.8])
        d2 = (((xs - c[0]) / radii[0]) ** 2 + ((ys - c[1]) / radii[1]) ** 2
              + ((zs - c[2]) / radii[2]) ** 2)
        gain *= np.where(d2 <= 1.0, level, 1.0)

    for _ in range(config.vessel_count):
        # a dark tube running roughly along x with a slow sinusoidal wander
        y0, z0 = rng.uniform(0.2, 0.8, size=2) * (ny, nz)
        amp = rng.uniform(0.0, 0.12) * ny
        phase = rng.uniform(0, 2 * np.pi)
        radius = rng.uniform(2.0, 4.0) / config.voxel_mm
        yc = y0 + amp * np.sin(2 * np.pi * xs / nx + phase)
        d2 = (ys - yc) ** 2 + (zs - z0) ** 2
        gain = np.where(d2 <= radius**2, gain * 0.15, gain)

    vol = base * gain
    if config.speckle_noise_sigma > 0:
        vol = vol + config.speckle_noise_sigma * rng.standard_normal(vol.shape)
    return np.clip(vol, 0.0, 1.0)


def _trajectory(config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """True slice centers in mm; consecutive points exactly spacing apart."""
    n = config.sweep_length_frames
    nx, ny, nz = config.volume_dims_voxels
    extent = np.array(config.volume_dims_voxels) * config.voxel_mm
    margin_x = 0.5 * (extent[0] - (n - 1) * config.inter_frame_spacing_mm)
    start = np.array([
        max(margin_x, 2.0),
        extent[1] / 2 + rng.uniform(-0.05, 0.05) * extent[1],
        extent[2] / 2 + rng.uniform(-0.05, 0.05) * extent[2],
    ])
    bend_total = np.deg2rad(config.trajectory_curvature) * rng.choice([-1.0, 1.0])
    step_angle = bend_total / max(n - 1, 1)
    heading = rng.uniform(-0.5, 0.5) * abs(step_angle) * (n - 1) * 0.5
    points = np.empty((n, 3))
    pos = start.copy()
    for k in range(n):
        points[k] = pos
        direction = np.array([np.cos(heading), np.sin(heading), 0.0])
        pos = pos + config.inter_frame_spacing_mm * direction
        heading += step_angle
    return points


def generate_phantom_sweep(config: PhantomConfig, sweep_index: int,
                           seed_seq: np.random.SeedSequence,
                           volume: np.ndarray | None = None) -> Sweep:
    rng = np.random.default_rng(seed_seq)
    if volume is None:
        volume = _make_volume(config, rng)
    centers = _trajectory(config, rng)

    extent = np.array(config.volume_dims_voxels) * config.voxel_mm
    if np.any(centers < 0) or np.any(centers >= extent):
        raise TrajectoryError(
            f"sweep {sweep_index}: trajectory exits the phantom volume"
        )

    h, w = config.image_size
    u = (np.arange(w) - (w - 1) / 2) * config.pixel_spacing_mm
    v = (np.arange(h) - (h - 1) / 2) * config.pixel_spacing_mm
    vv, uu = np.meshgrid(v, u, indexing="ij")

    frames = []
    for k, center in enumerate(centers):
        cx = np.full((h, w), center[0]) / config.voxel_mm
        cy = (center[1] + uu) / config.voxel_mm
        cz = (center[2] + vv) / config.voxel_mm
        img = map_coordinates(volume, [cx, cy, cz], order=1, mode="nearest")
        img = np.rint(np.clip(img, 0.0, 1.0) * 255) / 255.0
        recorded = center.copy()
        if config.pose_jitter_mm > 0:
            recorded = recorded + rng.normal(0.0, config.pose_jitter_mm, size=3)
        frames.append(
            SweepFrame(
                image=img,
                time_s=k / config.frame_rate_hz,
                pose=ProbePose(tuple(recorded)),
                frame_index=k,
            )
        )
    return Sweep(
        id=f"phantom-{config.seed:06d}-{sweep_index:03d}",
        frames=frames,
        pixel_spacing_mm=config.pixel_spacing_mm,
    )


def generate_phantom_dataset(config: PhantomConfig, n_sweeps: int) -> list[Sweep]:
    """Generate n_sweeps phantom sweeps, deterministic per seed.

    With ``sweeps_per_volume > 1`` consecutive sweeps re-scan the same
    volume along fresh trajectories, like repeated scans of one patient.
    """
    root = np.random.SeedSequence(config.seed)
    spv = config.sweeps_per_volume
    if spv <= 1:
        children = root.spawn(n_sweeps)
        return [generate_phantom_sweep(config, i, children[i])
                for i in range(n_sweeps)]
    n_volumes = -(-n_sweeps // spv)
    children = root.spawn(n_sweeps + n_volumes)
    sweeps = []
    volumes: dict[int, np.ndarray] = {}
    for i in range(n_sweeps):
        vi = i // spv
        if vi not in volumes:
            volumes[vi] = _make_volume(
                config, np.random.default_rng(children[n_sweeps + vi]))
        sweeps.append(generate_phantom_sweep(config, i, children[i],
                                             volume=volumes[vi]))
    return sweeps
