"""Redundancy-reduction objectives over corresponding embedding batches.

Each domain (scanner) contributes one ``EmbeddingBatch`` whose row ``b`` is
the projection of the same tissue location. The tuple loss averages the
two-view Barlow Twins loss over every unique pair of domains.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BatchSizeError, ContractError, DimensionError

DEFAULT_LAMBDA = 5e-3


@dataclass
class EmbeddingBatch:
    values: Tensor
    domain_id: int = 0

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values)
        if self.values.ndim != 2:
            raise DimensionError(f"embeddings must be [B, D], got {self.values.shape}")
        if self.values.shape[0] < 2:
            raise BatchSizeError(f"embedding batch needs B >= 2, got {self.values.shape[0]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class CrossCorrelation:
    matrix: Tensor


@dataclass
class TupleLossConfig:
    lam: float = DEFAULT_LAMBDA
    epsilon: float = 1e-9
    d: int | None = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ContractError(f"lambda must be positive, got {self.lam}")
        if self.d is not None and self.d < 1:
            raise ContractError(f"embedding dimension must be >= 1, got {self.d}")


def _batch(z) -> EmbeddingBatch:
    return z if isinstance(z, EmbeddingBatch) else EmbeddingBatch(z)


def cross_correlation(za, zb, epsilon: float = 1e-9) -> CrossCorrelation:
    """``C[i, j] = mean_b zhat_a[b, i] * zhat_b[b, j]`` on batch-standardized columns."""
    za, zb = _batch(za), _batch(zb)
    if za.shape != zb.shape:
        raise DimensionError(f"cross_correlation: shapes differ {za.shape} vs {zb.shape}")
    na = ad.batchnorm_feature(za.values, epsilon)
    nb = ad.batchnorm_feature(zb.values, epsilon)
    return _correlate(na, nb)


def _correlate(na: Tensor, nb: Tensor) -> CrossCorrelation:
    return CrossCorrelation(ad.scale(ad.matmul(ad.transpose(na), nb), 1.0 / na.shape[0]))


def barlow_twins_loss(c, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """Squared distance of ``c`` to the identity, off-diagonal terms weighted by ``lam``."""
    m = c.matrix if isinstance(c, CrossCorrelation) else ad._as_tensor(c)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"barlow_twins_loss needs a square matrix, got {m.shape}")
    d = m.shape[0]
    eye = np.eye(d)
    weights = np.where(eye > 0, 1.0, lam)
    return ad.sum(ad.mul(ad.square(ad.sub(m, eye)), weights))


def unique_pairs(n: int) -> list[tuple[int, int]]:
    if n < 2:
        raise ContractError(f"need at least two domains, got {n}")
    return list(itertools.combinations(range(n), 2))


def barlow_tuple_loss(embeddings: Sequence, config: TupleLossConfig | None = None) -> Tensor:
    """Mean Barlow Twins loss over all ``n choose 2`` domain pairs."""
    config = config or TupleLossConfig()
    batches = [_batch(z) for z in embeddings]
    pairs = unique_pairs(len(batches))
    shape = batches[0].shape
    if any(b.shape != shape for b in batches):
        raise DimensionError(f"heterogeneous embedding shapes {[b.shape for b in batches]}")
    if config.d is not None and shape[1] != config.d:
        raise DimensionError(f"embedding dim {shape[1]} != configured d={config.d}")

    normed = [ad.batchnorm_feature(b.values, config.epsilon) for b in batches]
    total = None
    for i, j in pairs:
        pair = barlow_twins_loss(_correlate(normed[i], normed[j]), config.lam)
        total = pair if total is None else ad.add(total, pair)
    if len(pairs) == 1:
        return total
    return ad.scale(total, 1.0 / len(pairs))
