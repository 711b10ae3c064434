"""Stochastic 2D training augmentation and the 3D mini-volume transform
used by the simulated out-of-plane query protocol."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform, map_coordinates

from .sweeps import ProbePose, Sweep


@dataclass(frozen=True)
class Augment2DParams:
    """Ranges for the random 2D augmentation (affine + crop + intensity)."""

    rotation_deg_range: float = 10.0
    translate_frac_range: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    crop_scale_range: tuple[float, float] = (0.7, 1.0)
    brightness_delta_range: float = 0.2
    contrast_factor_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        for lo, hi in (self.scale_range, self.crop_scale_range,
                       self.contrast_factor_range):
            if lo > hi:
                raise ValueError("range lower bound exceeds upper bound")

    @classmethod
    def identity(cls):
        return cls(rotation_deg_range=0.0, translate_frac_range=0.0,
                   scale_range=(1.0, 1.0), crop_scale_range=(1.0, 1.0),
                   brightness_delta_range=0.0, contrast_factor_range=(1.0, 1.0))


def _warp_2d(image: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    if np.array_equal(matrix, np.eye(2)) and not offset.any():
        return image.copy()
    return affine_transform(image, matrix, offset=offset, order=1,
                            mode="constant", cval=0.0)


def augment_2d(frame: np.ndarray, params: Augment2DParams,
               rng: np.random.Generator) -> np.ndarray:
    """Random affine + resized crop + brightness/contrast jitter.

    Output keeps the input size, values clamped to [0, 1], out-of-bounds
    pixels filled with 0. Zero-width ranges centered at identity reproduce
    the input exactly.
    """
    h, w = frame.shape
    angle = np.deg2rad(rng.uniform(-params.rotation_deg_range,
                                   params.rotation_deg_range))
    tr = rng.uniform(-params.translate_frac_range, params.translate_frac_range,
                     size=2) * (h, w)
    scale = rng.uniform(*params.scale_range)
    crop = rng.uniform(*params.crop_scale_range)
    # crop window center, offset within the slack left by the window
    slack = (1.0 - crop) / 2.0
    cshift = rng.uniform(-slack, slack, size=2) * (h, w)
    brightness = rng.uniform(-params.brightness_delta_range,
                             params.brightness_delta_range)
    contrast = rng.uniform(*params.contrast_factor_range)

    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    if angle == 0.0:
        rot = np.eye(2)
    else:
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s], [s, c]])
    # output -> input mapping; the resize-crop contributes a zoom of `crop`
    matrix = rot * (crop / scale)
    offset = center + cshift - matrix @ center - tr
    out = _warp_2d(frame, matrix, offset)

    if contrast != 1.0:
        m = out.mean()
        out = (out - m) * contrast + m
    if brightness != 0.0:
        out = out + brightness
    return np.clip(out, 0.0, 1.0)


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize a 2D image with bilinear interpolation (exact for no-op)."""
    h, w = image.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return image.copy()
    rows = np.linspace(0, h - 1, oh)
    cols = np.linspace(0, w - 1, ow)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return map_coordinates(image, [rr, cc], order=1, mode="nearest")


@dataclass(frozen=True)
class MiniVolume:
    """Stack of 2*half_width+1 consecutive frames around a source frame."""

    slices: np.ndarray  # (D, H, W), D odd
    center_index: int
    source_pose: ProbePose

    def __post_init__(self):
        if self.slices.shape[0] % 2 != 1:
            raise ValueError("mini-volume slice count must be odd")


def build_mini_volume(sweep: Sweep, index: int, half_width: int = 30) -> MiniVolume:
    """Stack frames [index-half_width, index+half_width], edge-replicated."""
    if not (0 <= index < len(sweep)):
        raise IndexError(f"frame index {index} out of range for sweep {sweep.id}")
    t_max = len(sweep) - 1
    stack = [
        sweep.frames[min(max(index + d, 0), t_max)].image
        for d in range(-half_width, half_width + 1)
    ]
    return MiniVolume(
        slices=np.stack(stack, axis=0),
        center_index=index,
        source_pose=sweep.frames[index].pose,
    )


@dataclass(frozen=True)
class Affine3DParams:
    """Magnitude ranges for the simulated out-of-plane query transform."""

    rotation_deg_range: tuple[float, float, float] = (10.0, 10.0, 10.0)
    translate_frac_range: tuple[float, float, float] = (0.05, 0.05, 0.05)
    scale_range: tuple[float, float] = (0.95, 1.05)

    @classmethod
    def identity(cls):
        return cls(rotation_deg_range=(0.0, 0.0, 0.0),
                   translate_frac_range=(0.0, 0.0, 0.0),
                   scale_range=(1.0, 1.0))


def _rotation_matrix(rotation_deg) -> np.ndarray:
    out = np.eye(3)
    for axis, deg in enumerate(rotation_deg):
        if deg == 0.0:
            continue
        a = np.deg2rad(deg)
        c, s = np.cos(a), np.sin(a)
        rot = np.eye(3)
        i, j = [k for k in range(3) if k != axis]
        rot[i, i] = c
        rot[j, j] = c
        rot[i, j] = -s
        rot[j, i] = s
        out = rot @ out
    return out


def affine_3d_query(volume: MiniVolume, rotation_deg, translation_frac,
                    scale: float) -> np.ndarray:
    """Apply a 3D affine about the volume center and return the central slice.

    Axis 0 is the sweep (out-of-plane) direction. The identity transform
    returns the center slice bit-exactly; otherwise the central output
    slice is sampled with trilinear interpolation, zero outside the stack.
    """
    vol = volume.slices
    d, h, w = vol.shape
    rotation_deg = np.asarray(rotation_deg, dtype=np.float64)
    translation_frac = np.asarray(translation_frac, dtype=np.float64)
    if not rotation_deg.any() and not translation_frac.any() and scale == 1.0:
        return vol[d // 2].copy()

    center = (np.array(vol.shape) - 1) / 2.0
    matrix = _rotation_matrix(rotation_deg) / scale
    shift = translation_frac * np.array(vol.shape)
    # coordinates of the central output slice, mapped into the input stack
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out_coords = np.stack(
        [np.full((h, w), d // 2), ii, jj], axis=0).astype(np.float64)
    rel = out_coords - center.reshape(3, 1, 1) - shift.reshape(3, 1, 1)
    src = np.tensordot(matrix, rel, axes=1) + center.reshape(3, 1, 1)
    # snap float-noise coordinates onto the grid so grid-aligned rotations
    # stay inside the volume instead of hitting the constant-fill border
    nearest = np.rint(src)
    src = np.where(np.abs(src - nearest) < 1e-9, nearest, src)
    return map_coordinates(vol, src, order=1, mode="constant", cval=0.0)


def sample_affine_3d(params: Affine3DParams, rng: np.random.Generator):
    """Draw one (rotation_deg, translation_frac, scale) triple."""
    rot = np.array([rng.uniform(-r, r) for r in params.rotation_deg_range])
    tr = np.array([rng.uniform(-t, t) for t in params.translate_frac_range])
    scale = rng.uniform(*params.scale_range)
    return rot, tr, scale
