"""Speaker-embedding losses and the cosine scoring used at test time."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import functional as F
from .tensor import Tensor


class LossConfigurationError(ValueError):
    pass


@dataclass
class AmSoftmaxHead:
    """Additive-margin softmax over cosine logits against per-speaker columns."""

    class_weights: Tensor  # embedding_dim x num_speakers
    scale: float = 30.0
    margin: float = 0.2

    @classmethod
    def initialize(cls, embedding_dim: int, num_speakers: int, rng: np.random.Generator,
                   scale: float = 30.0, margin: float = 0.2, dtype=np.float32) -> "AmSoftmaxHead":
        std = np.sqrt(2.0 / (embedding_dim + num_speakers))
        w = rng.normal(0.0, std, size=(embedding_dim, num_speakers)).astype(dtype)
        return cls(Tensor(w, requires_grad=True), scale, margin)

    @property
    def num_speakers(self) -> int:
        return self.class_weights.shape[1]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"head.ams.class_weights": self.class_weights}

    def cosines(self, embeddings: Tensor) -> Tensor:
        return F.matmul(F.l2_normalize(embeddings, axis=1), F.l2_normalize(self.class_weights, axis=0))


@dataclass
class AngularProtoHead:
    """Scaled, shifted cosine between each speaker's query and every prototype."""

    w: Tensor
    b: Tensor
    min_scale: float = 1e-6

    @classmethod
    def initialize(cls, w: float = 10.0, b: float = -5.0, dtype=np.float32) -> "AngularProtoHead":
        return cls(Tensor(np.array([w], dtype=dtype), requires_grad=True),
                   Tensor(np.array([b], dtype=dtype), requires_grad=True))

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"head.ap.w": self.w, "head.ap.b": self.b}


def ams_terms(head: AmSoftmaxHead, embeddings: Tensor, labels) -> Tensor:
    """Per-sample AM-Softmax losses, each ``-log p(target)``."""
    labels = np.asarray(labels, dtype=np.intp)
    if embeddings.ndim != 2 or labels.shape != (embeddings.shape[0],):
        raise LossConfigurationError(f"need N x D embeddings and N labels, got {embeddings.shape}, {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= head.num_speakers):
        raise LossConfigurationError(f"label outside [0, {head.num_speakers})")
    cos = head.cosines(embeddings)
    margin = np.zeros(cos.shape, dtype=cos.dtype)
    margin[np.arange(labels.size), labels] = -head.margin
    logits = F.scale(F.add(cos, margin), head.scale)
    return F.cross_entropy(logits, labels, reduction="none")


def ams_loss(head: AmSoftmaxHead, embeddings: Tensor, labels) -> Tensor:
    return F.mean(ams_terms(head, embeddings, labels))


def ap_logits(head: AngularProtoHead, embeddings: Tensor, utterances_per_speaker: int) -> Tensor:
    """N x N logits ``w cos(query_i, prototype_j) + b``.

    Rows of ``embeddings`` are speaker-major: speaker 0's M utterances, then
    speaker 1's, and so on. The last utterance of each speaker is its query,
    the mean of the others its prototype.
    """
    M = int(utterances_per_speaker)
    if M < 2:
        raise LossConfigurationError("angular prototype loss needs at least 2 utterances per speaker")
    if embeddings.ndim != 2 or embeddings.shape[0] % M:
        raise LossConfigurationError(f"{embeddings.shape[0]} embeddings do not split into groups of {M}")
    N = embeddings.shape[0] // M
    grouped = F.reshape(embeddings, (N, M, embeddings.shape[1]))
    query = F.reshape(F.take(grouped, [M - 1], axis=1), (N, embeddings.shape[1]))
    proto = F.mean(F.take(grouped, list(range(M - 1)), axis=1), axis=1)
    cos = F.matmul(F.l2_normalize(query, axis=1), F.transpose(F.l2_normalize(proto, axis=1)))
    return F.shift(F.scale(cos, F.clamp_min(head.w, head.min_scale)), head.b)


def ap_loss(head: AngularProtoHead, embeddings: Tensor, utterances_per_speaker: int = 2) -> Tensor:
    logits = ap_logits(head, embeddings, utterances_per_speaker)
    return F.cross_entropy(logits, np.arange(logits.shape[0]))


def cosine_similarity(e1, e2) -> float:
    a = np.asarray(e1.data if isinstance(e1, Tensor) else e1, dtype=np.float64).reshape(-1)
    b = np.asarray(e2.data if isinstance(e2, Tensor) else e2, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip((a / na) @ (b / nb), -1.0, 1.0))
