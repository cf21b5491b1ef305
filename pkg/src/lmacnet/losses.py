"""Attention-center computation and the training objective.

The objective combines a decision-level MSE on predicted scores with three
feature-level terms driven through the recorded cross-attention weights:
a ranking loss keeping each modality's attention centers in increasing
temporal order, a sparsity loss concentrating each query's attention
around its center, and a consistency loss pulling the centers of
different modalities together query by query. Everything stays on the
graph, so all four terms shape the encoder through backprop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import MODALITIES

CENTER_AGG_MEAN = "mean"
CENTER_AGG_LAST = "last_layer"


@dataclass
class LossConfig:
    # the feature terms are sums over modalities, queries and segments, so
    # their natural magnitude is ~2-3 orders above the MSE; the default
    # weight keeps them regularizer-sized while still shaping attention
    lambda_score: float = 1.0           # weight of the MSE term
    lambda_feature: float = 1e-3        # weight of the feature-level sum
    lambda_rank: dict = field(default_factory=dict)      # per-modality, default 1.0
    lambda_sparsity: dict = field(default_factory=dict)  # per-modality, default 1.0
    margin: float | None = None         # rank-loss margin in segment units; None -> T/(2K)
    rank: bool = True
    sparsity: bool = True
    consistency: bool = True
    center_agg: str = CENTER_AGG_MEAN

    def __post_init__(self):
        if self.lambda_score < 0 or self.lambda_feature < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.margin is not None and self.margin < 0:
            raise ValueError("rank margin must be nonnegative")
        if self.center_agg not in (CENTER_AGG_MEAN, CENTER_AGG_LAST):
            raise ValueError(f"center_agg must be mean or last_layer, got {self.center_agg!r}")
        for table in (self.lambda_rank, self.lambda_sparsity):
            if any(v < 0 for v in table.values()):
                raise ValueError("per-modality loss weights must be nonnegative")

    def rank_weight(self, modality: str) -> float:
        return float(self.lambda_rank.get(modality, 1.0))

    def sparsity_weight(self, modality: str) -> float:
        return float(self.lambda_sparsity.get(modality, 1.0))

    def effective_margin(self, t_len: int, n_queries: int) -> float:
        return self.margin if self.margin is not None else t_len / (2.0 * n_queries)


@dataclass
class AttentionCenters:
    """Per-modality aggregated attention [K, T] and temporal centroids [K, 1].

    Centers live in 1-based segment-index units, i.e. in [1, T] for any
    normalized attention row.
    """

    aggregated: dict[str, Tensor]
    centers: dict[str, Tensor]

    @property
    def modalities(self) -> list[str]:
        return [m for m in MODALITIES if m in self.centers]

    @property
    def t_len(self) -> int:
        return next(iter(self.aggregated.values())).shape[1]

    @property
    def n_queries(self) -> int:
        return next(iter(self.aggregated.values())).shape[0]

    def center_values(self) -> dict[str, np.ndarray]:
        """Detached centers per modality, each shape [K]."""
        return {m: c.data.reshape(-1).copy() for m, c in self.centers.items()}


def attention_centers(per_layer_attn: dict[str, list[Tensor]],
                      agg: str = CENTER_AGG_MEAN) -> AttentionCenters:
    """Aggregate per-layer attention and take the weighted temporal centroid.

    The aggregate is the mean over decoder layers (a mean of distributions
    is itself a distribution, so rows still sum to one); `last_layer` keeps
    only the final layer instead. The centroid of row k is sum_t t*alpha[k,t]
    with t running 1..T.
    """
    if not per_layer_attn:
        raise ValueError("no modalities given")
    aggregated: dict[str, Tensor] = {}
    centers: dict[str, Tensor] = {}
    for modality, layers in per_layer_attn.items():
        if not layers:
            raise ValueError(f"{modality}: empty attention layer list")
        if ad.checked():
            for i, a in enumerate(layers):
                sums = np.sum(a.data, axis=-1)
                if np.max(np.abs(sums - 1.0)) > 1e-4:
                    raise ValueError(f"{modality} layer {i}: attention rows do not sum to 1")
        if agg == CENTER_AGG_LAST:
            merged = layers[-1]
        else:
            acc = layers[0]
            for a in layers[1:]:
                acc = ad.add(acc, a)
            merged = ad.mul(acc, 1.0 / len(layers)) if len(layers) > 1 else acc
        t_len = merged.shape[1]
        tvec = ad.constant(np.arange(1, t_len + 1, dtype=np.float64).reshape(t_len, 1))
        aggregated[modality] = merged
        centers[modality] = ad.matmul(merged, tvec)
    return AttentionCenters(aggregated=aggregated, centers=centers)


def score_loss(pred: Tensor, truth) -> Tensor:
    """Mean squared error between predicted and ground-truth scores."""
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.size != truth.size:
        raise ValueError(f"prediction batch {pred.size} != truth batch {truth.size}")
    if truth.size < 1:
        raise ValueError("empty batch")
    diff = ad.sub(pred, ad.constant(truth.reshape(pred.shape)))
    return ad.mean(ad.square(diff))


def rank_loss(centers: AttentionCenters, t_len: int, cfg: LossConfig) -> Tensor:
    """Hinge penalties keeping centers increasing and inside [1+d, T-d]."""
    d = cfg.effective_margin(t_len, centers.n_queries)
    total = None
    for m in centers.modalities:
        c = centers.centers[m]                       # [K, 1]
        k = c.shape[0]
        terms = []
        if k >= 2:
            gap = ad.add(ad.sub(ad.slice_axis0(c, 0, k - 1), ad.slice_axis0(c, 1, k)), d)
            terms.append(ad.sum_(ad.relu(gap)))
        first = ad.slice_axis0(c, 0, 1)
        terms.append(ad.sum_(ad.relu(ad.sub(float(1.0 + d), first))))
        last = ad.slice_axis0(c, k - 1, k)
        terms.append(ad.sum_(ad.relu(ad.sub(last, float(t_len - d)))))
        m_total = terms[0]
        for t in terms[1:]:
            m_total = ad.add(m_total, t)
        m_total = ad.mul(m_total, cfg.rank_weight(m))
        total = m_total if total is None else ad.add(total, m_total)
    return total


def sparsity_loss(centers: AttentionCenters, cfg: LossConfig) -> Tensor:
    """Mean absolute deviation of each query's attention about its center."""
    total = None
    for m in centers.modalities:
        alpha = centers.aggregated[m]                # [K, T]
        c = centers.centers[m]                       # [K, 1]
        k, t_len = alpha.shape
        tidx = ad.constant(np.tile(np.arange(1, t_len + 1, dtype=np.float64), (k, 1)))
        ones_row = ad.constant(np.ones((1, t_len)))
        spread = ad.abs_(ad.sub(tidx, ad.matmul(c, ones_row)))
        m_total = ad.mul(ad.sum_(ad.mul(spread, alpha)), cfg.sparsity_weight(m))
        total = m_total if total is None else ad.add(total, m_total)
    return total


def consistency_loss(centers: AttentionCenters) -> Tensor:
    """Squared distance between the attention centers of every modality pair."""
    mods = centers.modalities
    if len(mods) < 2:
        raise ValueError(f"consistency loss needs at least 2 modalities, got {mods}")
    total = None
    for i in range(len(mods)):
        for j in range(i + 1, len(mods)):
            diff = ad.sub(centers.centers[mods[i]], centers.centers[mods[j]])
            term = ad.sum_(ad.square(diff))
            total = term if total is None else ad.add(total, term)
    return total


@dataclass
class LossReport:
    """Graph-attached scalars for one step; total is the trained objective."""

    score: Tensor
    rank: Tensor
    sparsity: Tensor
    consistency: Tensor
    total: Tensor

    def to_record(self, step: int) -> dict:
        return {
            "step": step,
            "score": self.score.item(),
            "rank": self.rank.item(),
            "sparsity": self.sparsity.item(),
            "consistency": self.consistency.item(),
            "total": self.total.item(),
        }


def total_loss(score: Tensor, rank: Tensor | None, sparsity: Tensor | None,
               consistency: Tensor | None, cfg: LossConfig) -> LossReport:
    """Weighted sum: lambda_score * score + lambda_feature * (rank + sparsity + consistency).

    Terms whose toggle is off must be passed as None and contribute an
    exact zero.
    """
    zero = ad.constant(0.0)
    rank = rank if (cfg.rank and rank is not None) else zero
    sparsity = sparsity if (cfg.sparsity and sparsity is not None) else zero
    consistency = consistency if (cfg.consistency and consistency is not None) else zero
    feature = ad.add(ad.add(rank, sparsity), consistency)
    total = ad.add(ad.mul(score, cfg.lambda_score), ad.mul(feature, cfg.lambda_feature))
    return LossReport(score=score, rank=rank, sparsity=sparsity,
                      consistency=consistency, total=total)
