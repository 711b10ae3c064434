"""Single JSON config shared by all CLI subcommands, with full-scale
defaults and a desk-scale preset that trains in minutes on CPU."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .augment import Affine3DParams, Augment2DParams
from .encoder import EncoderConfig
from .objective import LossConfig
from .phantom import PhantomConfig


def default_config() -> dict:
    return {
        "data": {
            "train_dir": "data/train",
            "val_dir": "data/val",
            "test_dir": "data/test",
        },
        "gen": {"train_sweeps": 8, "val_sweeps": 2, "test_sweeps": 2},
        "phantom": {
            "volume_dims_voxels": [168, 72, 72],
            "voxel_mm": 1.0,
            "inclusion_count": 10,
            "vessel_count": 3,
            "speckle_scale_mm": 1.2,
            "speckle_period_mm": 0.0,
            "speckle_period_weight": 1.0,
            "speckle_noise_sigma": 0.03,
            "sweep_length_frames": 150,
            "sweeps_per_volume": 1,
            "inter_frame_spacing_mm": 1.0,
            "trajectory_curvature": 10.0,
            "pose_jitter_mm": 0.2,
            "seed": 0,
            "image_size": [128, 128],
            "pixel_spacing_mm": 0.4,
            "frame_rate_hz": 5.76,
        },
        "encoder": {
            "input_size": [128, 128],
            "conv_stages": [[16, 1, 2], [32, 1, 2], [64, 1, 2], [128, 1, 2]],
            "embedding_dim": 512,
            "mlp_layers": 4,
            "mlp_width": 512,
            "mlp_relu_before_bn": False,
            "embedding_bn": False,
        },
        "loss": {
            "tau": 0.1,
            "triplet_weight": 0.1,
            "triplet_dmax_mm": 20.0,
            "logit_scale_mode": "as-written",
            "normalize_by_batch": True,
            "norm_spread_weight": 0.0,
        },
        "augment": {
            "rotation_deg_range": 10.0,
            "translate_frac_range": 0.1,
            "scale_range": [0.9, 1.1],
            "crop_scale_range": [0.7, 1.0],
            "brightness_delta_range": 0.2,
            "contrast_factor_range": [0.8, 1.2],
        },
        "augment3d": {
            "rotation_deg_range": [10.0, 10.0, 10.0],
            "translate_frac_range": [0.05, 0.05, 0.05],
            "scale_range": [0.95, 1.05],
        },
        "optimizer": {
            "lr": 1e-3,
            "step_size": 100,
            "gamma": 0.95,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
        },
        "train": {
            "batch_size": 30,
            "max_epochs": 300,
            "overlap_frac": 0.75,
            "positive_threshold_mm": 10.0,
            "delta_t": 8,
            "delta_probe_mm": 10.0,
            "seed": 0,
            "val_seed": 12345,
        },
        "eval": {
            "queries_per_sweep": 50,
            "success_threshold_mm": 15.0,
            "half_width": 30,
            "seed": 0,
        },
    }


def apply_desk_preset(cfg: dict) -> dict:
    """Shrink images, encoder and epoch budget so training takes minutes."""
    cfg = copy.deepcopy(cfg)
    cfg["phantom"].update({
        "image_size": [32, 32],
        "pixel_spacing_mm": 1.5,
        "sweep_length_frames": 144,
        # coarser speckle: 32x32 renders undersample the 1.2mm texture, and
        # out-of-plane query views then decorrelate from every stored frame
        "speckle_scale_mm": 3.0,
    })
    cfg["encoder"].update({
        "input_size": [32, 32],
        "conv_stages": [[8, 1, 2], [16, 1, 2], [32, 1, 2], [64, 1, 2]],
        "embedding_dim": 128,
        "mlp_width": 128,
    })
    # the 1.105x literal logit scale barely separates the softmax at this
    # image size; 1/tau = 10 trains to useful accuracy within 60 epochs
    cfg["loss"]["logit_scale_mode"] = "inverse-tau"
    # gentler geometry jitter: +/-10% shifts at 1.5mm pixels would dwarf the
    # 1mm frame spacing the pairing task has to resolve
    cfg["augment"].update({
        "rotation_deg_range": 5.0,
        "translate_frac_range": 0.03,
        "scale_range": [0.97, 1.03],
        "crop_scale_range": [0.9, 1.0],
        "brightness_delta_range": 0.1,
        "contrast_factor_range": [0.9, 1.1],
    })
    cfg["train"]["max_epochs"] = 60
    return cfg


def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, desk: bool = False) -> dict:
    cfg = default_config()
    if desk:
        cfg = apply_desk_preset(cfg)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = merge_config(cfg, json.load(fh))
    return cfg


def save_config(cfg: dict, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=1)


# -- typed views ---------------------------------------------------------------


def encoder_config(cfg: dict) -> EncoderConfig:
    return EncoderConfig.from_dict(cfg["encoder"])


def loss_config(cfg: dict) -> LossConfig:
    return LossConfig(**cfg["loss"])


def augment_params(cfg: dict) -> Augment2DParams:
    a = cfg["augment"]
    return Augment2DParams(
        rotation_deg_range=a["rotation_deg_range"],
        translate_frac_range=a["translate_frac_range"],
        scale_range=tuple(a["scale_range"]),
        crop_scale_range=tuple(a["crop_scale_range"]),
        brightness_delta_range=a["brightness_delta_range"],
        contrast_factor_range=tuple(a["contrast_factor_range"]),
    )


def affine3d_params(cfg: dict) -> Affine3DParams:
    a = cfg["augment3d"]
    return Affine3DParams(
        rotation_deg_range=tuple(a["rotation_deg_range"]),
        translate_frac_range=tuple(a["translate_frac_range"]),
        scale_range=tuple(a["scale_range"]),
    )


def phantom_config(cfg: dict, seed=None) -> PhantomConfig:
    p = dict(cfg["phantom"])
    p["volume_dims_voxels"] = tuple(p["volume_dims_voxels"])
    p["image_size"] = tuple(p["image_size"])
    if seed is not None:
        p["seed"] = seed
    return PhantomConfig(**p)
