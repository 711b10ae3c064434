"""Training loop: intra-sweep dual batches (or the baseline samplers),
augmentation, loss assembly, Adam with step decay, validation-loss model
selection and structured logging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import objective
from . import tensor as T
from .augment import augment_2d
from .baselines import TrainingMode, make_training_mode
from .encoder import encoder_forward, init_params, save_checkpoint
from .optim import Adam, StepLR
from .sampler import (
    distance_ivpp_weight,
    ivpp_weight,
    label_pairs,
    label_same_frame,
    label_temporal,
    sample_dual_batches,
    sample_inter_sweep_batch,
)
from .sweeps import Sweep, load_sweep_dirs
from .tensor import GradientError, Tensor


@dataclass
class TrainResult:
    best_checkpoint: Path
    best_epoch: int
    best_val_loss: float
    history: list[dict]


def _effective_mode(baseline: str, ablation: str | None) -> TrainingMode:
    mode = make_training_mode(baseline)
    if not mode.trainable:
        raise ValueError(f"baseline {baseline!r} has no trainable parameters")
    if ablation is None or baseline != "ours":
        return mode
    table = {
        "sce": ("same-frame", "sce"),
        "p1": ("probe", "sce"),
        "p2": ("same-frame", "sce+triplet"),
        "full": ("probe", "sce+triplet"),
    }
    if ablation not in table:
        raise ValueError(f"unknown ablation {ablation!r}")
    labels, loss = table[ablation]
    return TrainingMode(kind=f"ours:{ablation}", sampler="dual", labels=labels,
                        loss=loss, weighting="none")


def _label_batches(mode: TrainingMode, sweep: Sweep, idx1, idx2, cfg):
    if mode.labels == "probe":
        poses1 = [sweep.frames[i].pose for i in idx1]
        poses2 = [sweep.frames[i].pose for i in idx2]
        return label_pairs(poses1, poses2, cfg["train"]["positive_threshold_mm"])
    if mode.labels == "temporal":
        return label_temporal(idx1, idx2, cfg["train"]["delta_t"])
    return label_same_frame(idx1, idx2)


def _pair_weights(mode: TrainingMode, labels, idx1, idx2, sweep: Sweep, cfg):
    """Per-query weights for the labeled pair in each direction."""
    b1, b2 = labels.distance_matrix_mm.shape
    w1 = np.ones(b1)
    w2 = np.ones(b2)
    for i, j in enumerate(labels.gt_1to2):
        if j == b2:
            continue
        if mode.weighting == "ivpp":
            w1[i] = ivpp_weight(idx1[i], idx2[j], cfg["train"]["delta_t"])
        else:
            w1[i] = distance_ivpp_weight(sweep.frames[idx1[i]].pose,
                                         sweep.frames[idx2[j]].pose,
                                         cfg["train"]["delta_probe_mm"])
    for j, i in enumerate(labels.gt_2to1):
        if i == b1:
            continue
        if mode.weighting == "ivpp":
            w2[j] = ivpp_weight(idx1[i], idx2[j], cfg["train"]["delta_t"])
        else:
            w2[j] = distance_ivpp_weight(sweep.frames[idx1[i]].pose,
                                         sweep.frames[idx2[j]].pose,
                                         cfg["train"]["delta_probe_mm"])
    return w1, w2


def _step_loss(mode: TrainingMode, params, alpha, images1, images2, labels,
               loss_cfg, cfg, update_running=True):
    dtype = params.tensors["stem.conv.w"].dtype
    x1 = Tensor(np.stack(images1)[:, None].astype(dtype))
    x2 = Tensor(np.stack(images2)[:, None].astype(dtype))
    z1 = encoder_forward(params, x1, train=True, update_running=update_running)
    z2 = encoder_forward(params, x2, train=True, update_running=update_running)
    m = objective.score_matrix(z1, z2, alpha)
    return m, labels, z1, z2


def _augment_batch(frames, aug_params, rng):
    return [augment_2d(f, aug_params, rng) for f in frames]


def _dual_step(mode, sweep, cfg, aug_params, rng):
    batch = sample_dual_batches(sweep, cfg["train"]["batch_size"], rng,
                                cfg["train"]["overlap_frac"])
    idx1, idx2 = batch.batch1_indices, batch.batch2_indices
    images1 = _augment_batch([sweep.frames[i].image for i in idx1], aug_params, rng)
    images2 = _augment_batch([sweep.frames[i].image for i in idx2], aug_params, rng)
    labels = _label_batches(mode, sweep, idx1, idx2, cfg)
    return images1, images2, labels, idx1, idx2, sweep


def _pooled_step(mode, dataset, cfg, aug_params, rng):
    picks = sample_inter_sweep_batch(dataset, cfg["train"]["batch_size"], rng)
    by_id = {s.id: s for s in dataset}
    frames = [by_id[sid].frames[i].image for sid, i in picks]
    images1 = _augment_batch(frames, aug_params, rng)
    images2 = _augment_batch(frames, aug_params, rng)
    b = len(frames)
    labels = label_same_frame(list(range(b)), list(range(b)))
    return images1, images2, labels, list(range(b)), list(range(b)), None


def _epoch_losses(mode, dataset, params, alpha, cfg, loss_cfg, aug_params, rng,
                  optimizer=None, update_running=True):
    """One pass over the dataset; steps the optimizer when given."""
    losses = []
    if mode.sampler == "pooled":
        total = sum(len(s) for s in dataset)
        plan = [None] * math.ceil(total / cfg["train"]["batch_size"])
    else:
        plan = [s for s in dataset for _ in range(
            math.ceil(len(s) / cfg["train"]["batch_size"]))]
    for sweep in plan:
        if mode.sampler == "pooled":
            images1, images2, labels, idx1, idx2, src = _pooled_step(
                mode, dataset, cfg, aug_params, rng)
        else:
            images1, images2, labels, idx1, idx2, src = _dual_step(
                mode, sweep, cfg, aug_params, rng)
        m, labels, z1, z2 = _step_loss(mode, params, alpha, images1, images2,
                                       labels, loss_cfg, cfg, update_running)
        if mode.weighting in ("ivpp", "distance-ivpp"):
            w1, w2 = _pair_weights(mode, labels, idx1, idx2, src, cfg)
            loss = objective.weighted_ce_loss(m, labels, w1, w2, loss_cfg)
        else:
            loss = objective.total_loss(m, labels, loss_cfg, mode.ablation_mode)
        # part of our objective, not of the published baseline losses
        if loss_cfg.norm_spread_weight and mode.kind == "ours":
            penalty = objective.norm_spread_penalty(z1, z2)
            loss = T.add(loss, T.mul(penalty, loss_cfg.norm_spread_weight))
        value = float(loss.data)
        if not np.isfinite(value):
            raise GradientError(f"non-finite loss {value} in {mode.kind} step")
        losses.append(value)
        if optimizer is not None:
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
    return losses


def train(cfg: dict, out_dir, baseline: str = "ours", ablation: str | None = None,
          log=print) -> TrainResult:
    """Train one model and keep the checkpoint with the lowest validation
    loss. Deterministic for a fixed seed and thread count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    max_epochs = int(cfg["train"]["max_epochs"])
    if max_epochs < 1:
        raise ValueError("max_epochs must be >= 1: nothing to select from")
    mode = _effective_mode(baseline, ablation)
    train_sweeps = load_sweep_dirs(cfg["data"]["train_dir"])
    val_sweeps = load_sweep_dirs(cfg["data"]["val_dir"])

    enc_cfg = cfgmod.encoder_config(cfg)
    loss_cfg = cfgmod.loss_config(cfg)
    aug_params = cfgmod.augment_params(cfg)
    seed = int(cfg["train"]["seed"])
    params = init_params(enc_cfg, seed=seed)
    alpha = params.tensors["dustbin.alpha"]
    opt = Adam(params.tensors, lr=cfg["optimizer"]["lr"],
               beta1=cfg["optimizer"]["beta1"], beta2=cfg["optimizer"]["beta2"],
               eps=cfg["optimizer"]["eps"])
    scheduler = StepLR(opt, step_size=cfg["optimizer"]["step_size"],
                       gamma=cfg["optimizer"]["gamma"])
    rng = np.random.default_rng(seed)

    best_path = out_dir / "best.swmc"
    best_val = float("inf")
    best_epoch = -1
    history = []
    for epoch in range(1, max_epochs + 1):
        train_losses = _epoch_losses(mode, train_sweeps, params, alpha, cfg,
                                     loss_cfg, aug_params, rng, optimizer=opt)
        scheduler.step()
        val_rng = np.random.default_rng(int(cfg["train"]["val_seed"]))
        val_losses = _epoch_losses(mode, val_sweeps, params, alpha, cfg,
                                   loss_cfg, aug_params, val_rng,
                                   optimizer=None, update_running=False)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(train_losses)),
            "val_loss": float(np.mean(val_losses)),
            "lr": opt.lr,
            "mode": mode.kind,
        }
        history.append(record)
        log(json.dumps(record))
        if record["val_loss"] < best_val:
            best_val = record["val_loss"]
            best_epoch = epoch
            save_checkpoint(params, opt.state_dict(), epoch, best_path)
    with open(out_dir / "history.jsonl", "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")
    return TrainResult(best_checkpoint=best_path, best_epoch=best_epoch,
                       best_val_loss=best_val, history=history)
