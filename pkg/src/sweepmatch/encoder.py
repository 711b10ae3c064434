"""Frame encoder: a small residual conv backbone (final pooling removed,
feature map flattened) followed by an MLP head producing unnormalized
embeddings, plus binary checkpoint persistence.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SWMC"
CHECKPOINT_VERSION = 1
BN_MOMENTUM = 0.1


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


@dataclass(frozen=True)
class EncoderConfig:
    input_size: tuple[int, int] = (128, 128)
    conv_stages: tuple[tuple[int, int, int], ...] = (
        (16, 1, 2), (32, 1, 2), (64, 1, 2), (128, 1, 2),
    )  # (channels, blocks, stride) per stage
    embedding_dim: int = 512
    mlp_layers: int = 4
    mlp_width: int = 512
    mlp_relu_before_bn: bool = False
    embedding_bn: bool = False  # BN (no ReLU) on the output layer

    def __post_init__(self):
        if self.mlp_layers < 1:
            raise ValueError("mlp_layers must be >= 1")

    @property
    def flatten_size(self) -> int:
        h, w = self.input_size
        for _, _, stride in self.conv_stages:
            h = (h + stride - 1) // stride
            w = (w + stride - 1) // stride
        return h * w * self.conv_stages[-1][0]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        d["conv_stages"] = tuple(tuple(s) for s in d["conv_stages"])
        return cls(**d)


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor]
    running: dict[str, np.ndarray]
    init_seed: int

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))


def _conv_shapes(config: EncoderConfig):
    """Yield (name, shape) for every parameter, in a fixed order."""
    shapes = []
    in_ch = 1
    stem_ch = config.conv_stages[0][0]
    shapes += [("stem.conv.w", (stem_ch, in_ch, 3, 3)), ("stem.conv.b", (stem_ch,)),
               ("stem.bn.gamma", (stem_ch,)), ("stem.bn.beta", (stem_ch,))]
    in_ch = stem_ch
    for si, (ch, blocks, stride) in enumerate(config.conv_stages):
        for bi in range(blocks):
            s = stride if bi == 0 else 1
            pre = f"stage{si}.block{bi}"
            shapes += [
                (f"{pre}.conv1.w", (ch, in_ch, 3, 3)), (f"{pre}.conv1.b", (ch,)),
                (f"{pre}.bn1.gamma", (ch,)), (f"{pre}.bn1.beta", (ch,)),
                (f"{pre}.conv2.w", (ch, ch, 3, 3)), (f"{pre}.conv2.b", (ch,)),
                (f"{pre}.bn2.gamma", (ch,)), (f"{pre}.bn2.beta", (ch,)),
            ]
            if s != 1 or in_ch != ch:
                shapes += [(f"{pre}.down.w", (ch, in_ch, 1, 1)),
                           (f"{pre}.down.b", (ch,)),
                           (f"{pre}.down_bn.gamma", (ch,)),
                           (f"{pre}.down_bn.beta", (ch,))]
            in_ch = ch
    width_in = config.flatten_size
    for li in range(config.mlp_layers):
        last = li == config.mlp_layers - 1
        width_out = config.embedding_dim if last else config.mlp_width
        shapes += [(f"mlp{li}.w", (width_out, width_in)), (f"mlp{li}.b", (width_out,))]
        if not last or config.embedding_bn:
            shapes += [(f"mlp{li}.bn.gamma", (width_out,)),
                       (f"mlp{li}.bn.beta", (width_out,))]
        width_in = width_out
    shapes.append(("dustbin.alpha", (1,)))
    return shapes


def _bn_names(config: EncoderConfig):
    return sorted({name.rsplit(".", 1)[0] for name, _ in _conv_shapes(config)
                   if name.endswith(".gamma")})


def init_params(config: EncoderConfig, seed: int = 0,
                dtype=np.float32) -> EncoderParams:
    """He fan-in init for conv/linear weights; BN scale 1, shift 0;
    dustbin threshold initialized to 0. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _conv_shapes(config):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:  # biases, beta, dustbin
            data = np.zeros(shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    running = {}
    for bn in _bn_names(config):
        c = tensors[f"{bn}.gamma"].shape[0]
        running[f"{bn}.mean"] = np.zeros(c, dtype=dtype)
        running[f"{bn}.var"] = np.ones(c, dtype=dtype)
    return EncoderParams(config=config, tensors=tensors, running=running,
                         init_seed=seed)


def _bn(params: EncoderParams, prefix: str, x: Tensor, train: bool,
        update_running: bool = True) -> Tensor:
    gamma = params.tensors[f"{prefix}.gamma"]
    beta = params.tensors[f"{prefix}.beta"]
    if train:
        out, mu, var = T.batch_norm(x, gamma, beta)
        if update_running:
            m = BN_MOMENTUM
            run_mu = params.running[f"{prefix}.mean"]
            run_var = params.running[f"{prefix}.var"]
            params.running[f"{prefix}.mean"] = (1 - m) * run_mu + m * mu.astype(run_mu.dtype)
            params.running[f"{prefix}.var"] = (1 - m) * run_var + m * var.astype(run_var.dtype)
        return out
    return T.batch_norm_infer(x, gamma, beta,
                              params.running[f"{prefix}.mean"],
                              params.running[f"{prefix}.var"])


def encoder_forward(params: EncoderParams, x: Tensor, train: bool,
                    update_running: bool = True) -> Tensor:
    """Differentiable forward pass; x is (N, 1, H, W)."""
    config = params.config
    p = params.tensors
    h = T.conv2d(x, p["stem.conv.w"], p["stem.conv.b"], stride=1, pad=1)
    h = T.relu(_bn(params, "stem.bn", h, train, update_running))
    for si, (ch, blocks, stride) in enumerate(config.conv_stages):
        for bi in range(blocks):
            s = stride if bi == 0 else 1
            pre = f"stage{si}.block{bi}"
            out = T.conv2d(h, p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"],
                           stride=s, pad=1)
            out = T.relu(_bn(params, f"{pre}.bn1", out, train, update_running))
            out = T.conv2d(out, p[f"{pre}.conv2.w"], p[f"{pre}.conv2.b"],
                           stride=1, pad=1)
            out = _bn(params, f"{pre}.bn2", out, train, update_running)
            if f"{pre}.down.w" in p:
                skip = T.conv2d(h, p[f"{pre}.down.w"], p[f"{pre}.down.b"],
                                stride=s, pad=0)
                skip = _bn(params, f"{pre}.down_bn", skip, train, update_running)
            else:
                skip = h
            h = T.relu(T.add(out, skip))
    n = x.shape[0]
    h = T.reshape(h, (n, config.flatten_size))
    for li in range(config.mlp_layers):
        last = li == config.mlp_layers - 1
        h = T.add(T.matmul(h, T.transpose(p[f"mlp{li}.w"])), p[f"mlp{li}.b"])
        if not last:
            if config.mlp_relu_before_bn:
                h = _bn(params, f"mlp{li}.bn", T.relu(h), train, update_running)
            else:
                h = T.relu(_bn(params, f"mlp{li}.bn", h, train, update_running))
        elif config.embedding_bn:
            h = _bn(params, f"mlp{li}.bn", h, train, update_running)
    return h


def encode(frames: np.ndarray, params: EncoderParams, mode: str = "infer"):
    """Encode a batch of (N, H, W) images to (N, embedding_dim) embeddings."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.shape[1:] != params.config.input_size:
        raise T.ShapeError(
            f"frames are {frames.shape[1:]}, encoder expects "
            f"{params.config.input_size}"
        )
    if mode == "train" and frames.shape[0] < 2:
        raise ValueError("train mode needs batch size >= 2 for batch statistics")
    dtype = params.tensors["stem.conv.w"].dtype
    x = Tensor(frames[:, None, :, :].astype(dtype))
    out = encoder_forward(params, x, train=(mode == "train"))
    return out.data


# -- checkpoint persistence ---------------------------------------------------


def _write_record(fh, name: str, array: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(array.astype("<f4").tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated file")
    return buf


def _read_record(fh):
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    size = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").reshape(shape)
    return name, data.copy()


def save_checkpoint(params: EncoderParams, optimizer_state, epoch: int, path):
    """Binary checkpoint: magic, version, JSON config block, f32 records."""
    meta = {
        "config": asdict(params.config),
        "epoch": int(epoch),
        "init_seed": int(params.init_seed),
        "optimizer": None,
    }
    records = [(f"param/{k}", t.data) for k, t in params.tensors.items()]
    records += [(f"running/{k}", v) for k, v in params.running.items()]
    if optimizer_state is not None:
        meta["optimizer"] = {
            k: optimizer_state[k]
            for k in ("step_count", "base_lr", "lr", "beta1", "beta2", "eps")
        }
        records += [(f"adam_m/{k}", v) for k, v in optimizer_state["m"].items()]
        records += [(f"adam_v/{k}", v) for k, v in optimizer_state["v"].items()]
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_record(fh, name, np.asarray(arr))


def load_checkpoint(path):
    """Load (EncoderParams, optimizer_state-or-None, epoch); validates magic,
    version and per-parameter shapes against the embedded config."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (json_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            meta = json.loads(_read_exact(fh, json_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt config block ({exc})") from exc
        (n_records,) = struct.unpack("<I", _read_exact(fh, 4))
        records = dict(_read_record(fh) for _ in range(n_records))

    config = EncoderConfig.from_dict(meta["config"])
    expected = dict(_conv_shapes(config))
    tensors = {}
    for name, shape in expected.items():
        key = f"param/{name}"
        if key not in records:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if records[key].shape != shape:
            raise CheckpointError(
                f"{path}: parameter {name} has shape {records[key].shape}, "
                f"config implies {shape}"
            )
        tensors[name] = Tensor(records[key], requires_grad=True, name=name)
    running = {k[len("running/"):]: v for k, v in records.items()
               if k.startswith("running/")}
    params = EncoderParams(config=config, tensors=tensors, running=running,
                           init_seed=int(meta["init_seed"]))
    optimizer_state = None
    if meta["optimizer"] is not None:
        optimizer_state = dict(meta["optimizer"])
        optimizer_state["m"] = {k[len("adam_m/"):]: v for k, v in records.items()
                                if k.startswith("adam_m/")}
        optimizer_state["v"] = {k[len("adam_v/"):]: v for k, v in records.items()
                                if k.startswith("adam_v/")}
    return params, optimizer_state, int(meta["epoch"])
