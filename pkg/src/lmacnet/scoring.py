"""Two-level score evaluation.

Stage one regresses a scalar score per fused query feature; stage two
fuses the per-query scores into the final score. The default fusion is a
learnable weight vector passed through softmax; `average` and `linear`
variants and a one-stage baseline (mean-pool features, single affine map)
exist for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor

FUSION_WEIGHT = "weight"
FUSION_AVERAGE = "average"
FUSION_LINEAR = "linear"
ONE_STAGE_LINEAR = "one_stage_linear"

_VARIANTS = (FUSION_WEIGHT, FUSION_AVERAGE, FUSION_LINEAR, ONE_STAGE_LINEAR)


@dataclass
class ScoreHeadConfig:
    fusion: str = FUSION_WEIGHT
    per_query_params: bool = False   # one regressor per query instead of a shared one

    def __post_init__(self):
        if self.fusion not in _VARIANTS:
            raise ValueError(f"fusion must be one of {_VARIANTS}, got {self.fusion!r}")


@dataclass
class ScoreHeadParams:
    config: ScoreHeadConfig
    d_fused: int
    n_queries: int
    reg_w: Tensor                    # [d_fused, 1] shared or [d_fused, K] per-query
    reg_b: Tensor                    # [1, 1] shared or [K, 1] per-query
    fusion_w: Tensor | None = None   # [1, K] softmax logits | [K, 1] linear map
    fusion_b: Tensor | None = None   # [1, 1], linear fusion only

    def named(self):
        yield "score.regressor.weight", self.reg_w, True
        yield "score.regressor.bias", self.reg_b, False
        if self.fusion_w is not None:
            # the softmax weight vector is excluded from weight decay
            yield "score.fusion.weight", self.fusion_w, self.config.fusion == FUSION_LINEAR
        if self.fusion_b is not None:
            yield "score.fusion.bias", self.fusion_b, False


def init_score_head(d_fused: int, n_queries: int, cfg: ScoreHeadConfig,
                    rng: RngState) -> ScoreHeadParams:
    bound = 1.0 / np.sqrt(d_fused)
    cols = n_queries if cfg.per_query_params else 1
    reg_w = Tensor(rng.uniform((d_fused, cols), -bound, bound), requires_grad=True)
    reg_b = Tensor(np.zeros((cols, 1)), requires_grad=True)
    fusion_w = fusion_b = None
    if cfg.fusion == FUSION_WEIGHT:
        fusion_w = Tensor(np.zeros((1, n_queries)), requires_grad=True)  # uniform softmax at start
    elif cfg.fusion == FUSION_LINEAR:
        fusion_w = Tensor(np.full((n_queries, 1), 1.0 / n_queries), requires_grad=True)
        fusion_b = Tensor(np.zeros((1, 1)), requires_grad=True)
    return ScoreHeadParams(config=cfg, d_fused=d_fused, n_queries=n_queries,
                           reg_w=reg_w, reg_b=reg_b, fusion_w=fusion_w, fusion_b=fusion_b)


def query_scores(fused: Tensor, head: ScoreHeadParams) -> Tensor:
    """Per-query regression scores, shape [K, 1]."""
    if fused.shape[1] != head.d_fused:
        raise ValueError(f"fused dim {fused.shape[1]} != regressor dim {head.d_fused}")
    if head.config.per_query_params:
        prod = ad.mul(fused, ad.transpose(head.reg_w))            # [K, d]
        scores = ad.matmul(prod, ad.constant(np.ones((head.d_fused, 1))))
    else:
        scores = ad.matmul(fused, head.reg_w)
    return ad.add(scores, head.reg_b)


@dataclass
class ScoreBreakdown:
    """Per-query scores, fusion weights (weight variant only) and the final score."""

    query_scores: Tensor             # [K, 1]
    weights: Tensor | None           # [1, K], rows sum to 1
    final: Tensor                    # [1, 1]


def fuse_scores(scores: Tensor, head: ScoreHeadParams) -> ScoreBreakdown:
    cfg = head.config
    if cfg.fusion == FUSION_WEIGHT:
        weights = ad.softmax(head.fusion_w, temperature=1.0)
        final = ad.matmul(weights, scores)
        return ScoreBreakdown(query_scores=scores, weights=weights, final=final)
    if cfg.fusion == FUSION_AVERAGE:
        k = scores.shape[0]
        final = ad.matmul(ad.constant(np.full((1, k), 1.0 / k)), scores)
        return ScoreBreakdown(query_scores=scores, weights=None, final=final)
    if cfg.fusion == FUSION_LINEAR:
        final = ad.add(ad.matmul(ad.transpose(scores), head.fusion_w), head.fusion_b)
        return ScoreBreakdown(query_scores=scores, weights=None, final=final)
    raise ValueError(f"fuse_scores does not apply to variant {cfg.fusion!r}")


def predict(fused: Tensor, head: ScoreHeadParams):
    """Final score for fused query features; breakdown is None for one-stage."""
    if head.config.fusion == ONE_STAGE_LINEAR:
        k = fused.shape[0]
        pooled = ad.matmul(ad.constant(np.full((1, k), 1.0 / k)), fused)  # [1, d]
        final = ad.add(ad.matmul(pooled, head.reg_w), head.reg_b)
        return final, None
    breakdown = fuse_scores(query_scores(fused, head), head)
    return breakdown.final, breakdown


def breakdown_export(b: ScoreBreakdown) -> dict:
    """Plain-JSON view of a breakdown; weights only exist for the weight variant."""
    record = {
        "query_scores": [float(v) for v in b.query_scores.data.reshape(-1)],
        "final": float(b.final.data.reshape(())),
    }
    if b.weights is not None:
        record["weights"] = [float(v) for v in b.weights.data.reshape(-1)]
    return record
