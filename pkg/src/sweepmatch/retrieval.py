"""Embedding index over a database sweep and dot-product retrieval with
dustbin rejection: the best match is returned only if its similarity
reaches the learned threshold alpha."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .augment import resize_bilinear
from .encoder import EncoderParams, encode, load_checkpoint
from .sweeps import ProbePose, Sweep

INDEX_MAGIC = b"SWIX"
INDEX_VERSION = 1


class IndexError_(ValueError):
    """Raised for unreadable or inconsistent index files."""


@dataclass(frozen=True)
class IndexEntry:
    frame_index: int
    embedding: np.ndarray
    pose: ProbePose


@dataclass(frozen=True)
class EmbeddingIndex:
    sweep_id: str
    entries: list[IndexEntry]
    alpha: float
    embedding_dim: int

    def embedding_matrix(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries])


@dataclass(frozen=True)
class RetrievalResult:
    status: str  # "matched" | "rejected"
    score: float
    runner_up_score: float
    frame_index: int | None = None
    pose: ProbePose | None = None

    @property
    def matched(self) -> bool:
        return self.status == "matched"

    def to_dict(self):
        d = {"status": self.status, "score": self.score,
             "runner_up_score": self.runner_up_score}
        if self.matched:
            d["frame_index"] = self.frame_index
            d["pose_mm"] = list(self.pose.position)
        return d


def _load_params(checkpoint) -> EncoderParams:
    if isinstance(checkpoint, EncoderParams):
        return checkpoint
    params, _, _ = load_checkpoint(checkpoint)
    return params


def _prepare(image: np.ndarray, params: EncoderParams) -> np.ndarray:
    if image.shape != params.config.input_size:
        image = resize_bilinear(image, params.config.input_size)
    return image


def build_index(sweep: Sweep, checkpoint) -> EmbeddingIndex:
    """One infer-mode embedding per database frame; alpha comes from the
    checkpoint's trained dustbin parameter."""
    params = _load_params(checkpoint)
    images = np.stack([_prepare(f.image, params) for f in sweep.frames])
    embeddings = encode(images, params, mode="infer")
    entries = [
        IndexEntry(frame_index=f.frame_index,
                   embedding=embeddings[i].astype(np.float32),
                   pose=f.pose)
        for i, f in enumerate(sweep.frames)
    ]
    alpha = float(params.tensors["dustbin.alpha"].data[0])
    return EmbeddingIndex(sweep_id=sweep.id, entries=entries, alpha=alpha,
                          embedding_dim=embeddings.shape[1])


def match_embedding(index: EmbeddingIndex, z: np.ndarray,
                    alpha_override: float | None = None) -> RetrievalResult:
    """Argmax dot product over the index; reject below alpha. Ties break to
    the lower frame index (argmax returns the first maximum)."""
    if not index.entries:
        raise IndexError_("empty index")
    alpha = index.alpha if alpha_override is None else alpha_override
    sims = index.embedding_matrix() @ np.asarray(z, dtype=np.float32)
    best = int(np.argmax(sims))
    score = float(sims[best])
    if len(sims) > 1:
        runner_up = float(np.partition(sims, -2)[-2])
    else:
        runner_up = float("-inf")
    if score < alpha:
        return RetrievalResult(status="rejected", score=score,
                               runner_up_score=runner_up)
    entry = index.entries[best]
    return RetrievalResult(status="matched", score=score,
                           runner_up_score=runner_up,
                           frame_index=entry.frame_index, pose=entry.pose)


def batch_query(index: EmbeddingIndex, images, checkpoint,
                alpha_override: float | None = None) -> list[RetrievalResult]:
    """Element-wise equal to query(); loads the encoder once."""
    params = _load_params(checkpoint)
    prepared = np.stack([_prepare(np.asarray(img), params) for img in images])
    embeddings = encode(prepared, params, mode="infer")
    return [match_embedding(index, z, alpha_override) for z in embeddings]


def query(index: EmbeddingIndex, image, checkpoint,
          alpha_override: float | None = None) -> RetrievalResult:
    """Retrieve the database frame with the highest dot-product similarity
    to the encoded query, or reject if it falls below the threshold."""
    return batch_query(index, [image], checkpoint, alpha_override)[0]


# -- index persistence --------------------------------------------------------


def save_index(index: EmbeddingIndex, path):
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", INDEX_VERSION))
        sid = index.sweep_id.encode("utf-8")
        fh.write(struct.pack("<I", len(sid)))
        fh.write(sid)
        fh.write(struct.pack("<IfI", index.embedding_dim, index.alpha,
                             len(index.entries)))
        for e in index.entries:
            fh.write(struct.pack("<I", e.frame_index))
            fh.write(np.asarray(e.pose.position, dtype="<f4").tobytes())
            fh.write(e.embedding.astype("<f4").tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise IndexError_("truncated index file")
    return buf


def load_index(path) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != INDEX_MAGIC:
            raise IndexError_(f"{path}: bad magic, not an index file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != INDEX_VERSION:
            raise IndexError_(f"{path}: unsupported version {version}")
        (sid_len,) = struct.unpack("<I", _read_exact(fh, 4))
        sweep_id = _read_exact(fh, sid_len).decode("utf-8")
        dim, alpha, count = struct.unpack("<IfI", _read_exact(fh, 12))
        entries = []
        for _ in range(count):
            (frame_index,) = struct.unpack("<I", _read_exact(fh, 4))
            pose = np.frombuffer(_read_exact(fh, 12), dtype="<f4")
            emb = np.frombuffer(_read_exact(fh, 4 * dim), dtype="<f4").copy()
            entries.append(IndexEntry(frame_index=frame_index, embedding=emb,
                                      pose=ProbePose(tuple(float(v) for v in pose))))
        if fh.read(1):
            raise IndexError_(f"{path}: trailing bytes after last record")
    return EmbeddingIndex(sweep_id=sweep_id, entries=entries, alpha=alpha,
                          embedding_dim=int(dim))
