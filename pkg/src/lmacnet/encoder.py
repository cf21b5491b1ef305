"""Modality-specific temporal query encoder.

Each modality (rgb / flow / audio) gets an independent branch: a stack of
decoder layers with learnable per-layer query vectors. A layer adds the
layer's queries to the running query features, cross-attends over the
temporal segments with a learnable softmax temperature, applies an FFN and
a multi-head self-attention over the query features (all residual), and
records the cross-attention weights. Branch outputs are fused per query by
concatenation or summation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MhaParams, RngState, Tensor

MODALITIES = ("rgb", "flow", "audio")

FUSION_CONCAT = "concat"
FUSION_SUM = "summation"


@dataclass
class ModalitySequence:
    """One modality's segment-level features, shape [T, d_m]."""

    modality: str
    features: Tensor

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}, expected one of {MODALITIES}")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be [T, d] with T >= 1, got {self.features.shape}")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class BranchConfig:
    modality: str
    dim: int
    n_queries: int = 5
    n_layers: int = 2
    self_attn_heads: int = 8
    cross_heads: int = 1
    ffn_mult: int = 4
    tau_init: float = 0.07
    dropout: float = 0.1
    attn_logits: str = "keys"      # "keys" | "values" (literal inner-product-with-values reading)
    layer_norm: bool = True
    positional_encoding: bool = False

    def __post_init__(self):
        if self.dim % self.self_attn_heads != 0:
            raise ValueError(
                f"{self.modality}: dim {self.dim} not divisible by {self.self_attn_heads} self-attention heads"
            )
        if self.dim % self.cross_heads != 0:
            raise ValueError(f"{self.modality}: dim {self.dim} not divisible by {self.cross_heads} cross heads")
        if self.attn_logits not in ("keys", "values"):
            raise ValueError(f"attn_logits must be 'keys' or 'values', got {self.attn_logits!r}")

    @property
    def d_ffn(self) -> int:
        return self.ffn_mult * self.dim


@dataclass
class DecoderLayerParams:
    atomic_queries: Tensor          # [K, d]
    w_q: Tensor                     # [d, d], applied as x @ w ([in, out] layout)
    w_k: Tensor
    w_v: Tensor
    tau: Tensor                     # scalar, clamped positive after each optimizer step
    ffn_w1: Tensor                  # [d, d_ffn]
    ffn_b1: Tensor                  # [d_ffn]
    ffn_w2: Tensor                  # [d_ffn, d]
    ffn_b2: Tensor                  # [d]
    self_attn: MhaParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ln3_gain: Tensor
    ln3_bias: Tensor

    def named(self, prefix: str):
        """(name, tensor, weight_decay) triples in a stable order."""
        yield f"{prefix}.atomic_queries", self.atomic_queries, True
        yield f"{prefix}.w_q", self.w_q, True
        yield f"{prefix}.w_k", self.w_k, True
        yield f"{prefix}.w_v", self.w_v, True
        yield f"{prefix}.tau", self.tau, False
        yield f"{prefix}.ffn_w1", self.ffn_w1, True
        yield f"{prefix}.ffn_b1", self.ffn_b1, False
        yield f"{prefix}.ffn_w2", self.ffn_w2, True
        yield f"{prefix}.ffn_b2", self.ffn_b2, False
        yield f"{prefix}.self_wq", self.self_attn.w_q, True
        yield f"{prefix}.self_wk", self.self_attn.w_k, True
        yield f"{prefix}.self_wv", self.self_attn.w_v, True
        yield f"{prefix}.self_wo", self.self_attn.w_o, True
        yield f"{prefix}.ln1_gain", self.ln1_gain, False
        yield f"{prefix}.ln1_bias", self.ln1_bias, False
        yield f"{prefix}.ln2_gain", self.ln2_gain, False
        yield f"{prefix}.ln2_bias", self.ln2_bias, False
        yield f"{prefix}.ln3_gain", self.ln3_gain, False
        yield f"{prefix}.ln3_bias", self.ln3_bias, False


@dataclass
class BranchParams:
    config: BranchConfig
    layers: list[DecoderLayerParams] = field(default_factory=list)

    def named(self):
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"enc.{self.config.modality}.layer{i}")


@dataclass
class BranchOutput:
    """Final query features plus the recorded per-layer attention maps."""

    query_features: Tensor          # [K, d]
    attention: list[Tensor]         # per layer, [K, T]


def parameter_count(cfg: BranchConfig) -> int:
    """Closed-form number of scalars in one branch."""
    d, k = cfg.dim, cfg.n_queries
    per_layer = (
        k * d                       # atomic queries
        + 3 * d * d                 # cross-attention projections
        + 1                         # temperature
        + d * cfg.d_ffn + cfg.d_ffn + cfg.d_ffn * d + d
        + 4 * d * d                 # self-attention projections
        + 6 * d                     # three layer norms
    )
    return cfg.n_layers * per_layer


def init_branch(cfg: BranchConfig, rng: RngState) -> BranchParams:
    """Uniform(+-1/sqrt(d)) weights, N(0, 0.02^2) queries, tau at its configured start."""
    d = cfg.dim
    bound = 1.0 / math.sqrt(d)

    def weight(rows, cols):
        return Tensor(rng.uniform((rows, cols), -bound, bound), requires_grad=True)

    layers = []
    for _ in range(cfg.n_layers):
        layers.append(DecoderLayerParams(
            atomic_queries=Tensor(rng.normal((cfg.n_queries, d), scale=0.02), requires_grad=True),
            w_q=weight(d, d),
            w_k=weight(d, d),
            w_v=weight(d, d),
            tau=Tensor(cfg.tau_init, requires_grad=True),
            ffn_w1=weight(d, cfg.d_ffn),
            ffn_b1=Tensor(np.zeros(cfg.d_ffn), requires_grad=True),
            ffn_w2=weight(cfg.d_ffn, d),
            ffn_b2=Tensor(np.zeros(d), requires_grad=True),
            self_attn=MhaParams(weight(d, d), weight(d, d), weight(d, d), weight(d, d)),
            ln1_gain=Tensor(np.ones(d), requires_grad=True),
            ln1_bias=Tensor(np.zeros(d), requires_grad=True),
            ln2_gain=Tensor(np.ones(d), requires_grad=True),
            ln2_bias=Tensor(np.zeros(d), requires_grad=True),
            ln3_gain=Tensor(np.ones(d), requires_grad=True),
            ln3_bias=Tensor(np.zeros(d), requires_grad=True),
        ))
    return BranchParams(config=cfg, layers=layers)


def sinusoidal_encoding(t_len: int, dim: int) -> np.ndarray:
    """Classic alternating sin/cos position table, [T, dim]."""
    pos = np.arange(t_len, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(ad.get_default_dtype())


def decode_layer(prev: Tensor, feats: Tensor, layer: DecoderLayerParams,
                 cfg: BranchConfig, rng: RngState | None = None,
                 training: bool = False):
    """One decoder layer: query cross-attention, FFN, query self-attention.

    Returns (updated query features [K, d], cross-attention weights [K, T]).
    The attention weights are exactly those used in the weighted sum over
    the value vectors (head-averaged when cross_heads > 1).
    """
    q_in = ad.layer_norm(prev, layer.ln1_gain, layer.ln1_bias) if cfg.layer_norm else prev
    q_hat = ad.add(q_in, layer.atomic_queries)
    q_tilde = ad.matmul(q_hat, layer.w_q)
    logits_w = layer.w_v if cfg.attn_logits == "values" else layer.w_k
    keys = ad.matmul(feats, logits_w)
    values = ad.matmul(feats, layer.w_v)
    ctx, attn3 = ad.attention_core(q_tilde, keys, values, cfg.cross_heads, temperature=layer.tau)
    attn = ad.mean_axis0(attn3)
    x = ad.add(prev, _maybe_dropout(ctx, cfg, rng, training))

    h = ad.layer_norm(x, layer.ln2_gain, layer.ln2_bias) if cfg.layer_norm else x
    h = ad.relu(ad.add_bias(ad.matmul(h, layer.ffn_w1), layer.ffn_b1))
    h = ad.add_bias(ad.matmul(h, layer.ffn_w2), layer.ffn_b2)
    x = ad.add(x, _maybe_dropout(h, cfg, rng, training))

    s = ad.layer_norm(x, layer.ln3_gain, layer.ln3_bias) if cfg.layer_norm else x
    sa, _ = ad.multi_head_attention(s, s, s, cfg.self_attn_heads, layer.self_attn)
    x = ad.add(x, _maybe_dropout(sa, cfg, rng, training))
    return x, attn


def _maybe_dropout(x: Tensor, cfg: BranchConfig, rng: RngState | None, training: bool) -> Tensor:
    if not training or cfg.dropout == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode forward requires an rng for dropout")
    return ad.dropout(x, cfg.dropout, rng, training=True)


def run_branch(seq: ModalitySequence, branch: BranchParams,
               rng: RngState | None = None, training: bool = False) -> BranchOutput:
    """Chain every decoder layer from zero-initialised query features."""
    cfg = branch.config
    if seq.modality != cfg.modality:
        raise ValueError(f"sequence modality {seq.modality!r} fed to {cfg.modality!r} branch")
    if seq.dim != cfg.dim:
        raise ValueError(f"{cfg.modality}: feature dim {seq.dim} != branch dim {cfg.dim}")
    feats = seq.features
    if cfg.positional_encoding:
        feats = ad.add(feats, ad.constant(sinusoidal_encoding(seq.T, cfg.dim)))
    x = ad.zeros((cfg.n_queries, cfg.dim))
    attention = []
    for layer in branch.layers:
        x, attn = decode_layer(x, feats, layer, cfg, rng=rng, training=training)
        attention.append(attn)
    return BranchOutput(query_features=x, attention=attention)


def fuse(outputs: dict[str, BranchOutput], strategy: str) -> Tensor:
    """Combine per-modality query features row-wise, in fixed modality order."""
    ordered = [outputs[m] for m in MODALITIES if m in outputs]
    if not ordered:
        raise ValueError("fuse called with no branch outputs")
    if strategy == FUSION_CONCAT:
        if len(ordered) == 1:
            return ordered[0].query_features
        return ad.concat([o.query_features for o in ordered])
    if strategy == FUSION_SUM:
        dims = {o.query_features.shape[1] for o in ordered}
        if len(dims) != 1:
            raise ValueError(f"summation fusion requires equal dims, got {sorted(dims)}")
        acc = ordered[0].query_features
        for o in ordered[1:]:
            acc = ad.add(acc, o.query_features)
        return acc
    raise ValueError(f"unknown fusion strategy {strategy!r}")
