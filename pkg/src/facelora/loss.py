"""CosFace margin-penalty softmax head."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

NORM_EPS = 1e-12


class CosFaceHead(nn.Module):
    """Class-weight matrix scored in cosine space.

    ``logits[y] = s * (cos_y - m)`` for the target class and ``s * cos_j``
    elsewhere, with embeddings and class rows L2-normalized first. An optional
    linear neck projects backbone features to ``embedding_dim`` before scoring.
    """

    def __init__(
        self,
        in_features: int,
        n_classes: int,
        margin: float = 0.3,
        scale: float = 64.0,
        embedding_dim: int | None = None,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if not 0 <= margin < 1:
            raise ValueError(f"margin must lie in [0, 1), got {margin}")
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.margin = float(margin)
        self.scale = float(scale)
        gen = torch.Generator().manual_seed(seed)
        if embedding_dim is None:
            self.neck = None
            dim = in_features
        else:
            self.neck = nn.Linear(in_features, embedding_dim, bias=False, dtype=dtype)
            with torch.no_grad():
                self.neck.weight.copy_(torch.randn(embedding_dim, in_features, generator=gen) / in_features**0.5)
            dim = embedding_dim
        self.weight = nn.Parameter((torch.randn(n_classes, dim, generator=gen) * 0.01).to(dtype))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def cosines(self, embeddings: torch.Tensor) -> torch.Tensor:
        if self.neck is not None:
            embeddings = self.neck(embeddings)
        return F.normalize(embeddings, dim=-1, eps=NORM_EPS) @ F.normalize(self.weight, dim=-1, eps=NORM_EPS).T

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return cosface_logits(embeddings, self, labels)


def _check(embeddings: torch.Tensor, labels: torch.Tensor, head: CosFaceHead) -> None:
    if embeddings.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.shape[0] != embeddings.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {embeddings.shape[0]} embeddings")
    if (labels < 0).any() or (labels >= head.n_classes).any():
        raise ValueError(f"label out of range [0, {head.n_classes})")
    if (embeddings.detach().norm(dim=-1) == 0).any():
        raise ValueError("zero-norm embedding")


def cosface_logits(embeddings: torch.Tensor, head: CosFaceHead, labels) -> torch.Tensor:
    """Penalized logits, ``(B, C)`` for a batch or ``(C,)`` for one embedding."""
    single = embeddings.dim() == 1
    emb = embeddings.unsqueeze(0) if single else embeddings
    labels = torch.as_tensor(labels).reshape(-1).long()
    _check(emb, labels, head)
    cos = head.cosines(emb)
    margin = F.one_hot(labels, head.n_classes).to(cos.dtype) * head.margin
    logits = head.scale * (cos - margin)
    return logits[0] if single else logits


def cosface_loss(embeddings: torch.Tensor, labels, head: CosFaceHead) -> torch.Tensor:
    """Mean cross-entropy of the CosFace logits over the batch."""
    labels = torch.as_tensor(labels).reshape(-1).long()
    logits = cosface_logits(embeddings, head, labels)
    return F.cross_entropy(logits.reshape(-1, head.n_classes), labels)
