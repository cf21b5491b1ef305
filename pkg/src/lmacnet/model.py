"""Full model: per-modality encoder branches feeding the two-level score head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .encoder import (
    FUSION_CONCAT,
    FUSION_SUM,
    MODALITIES,
    BranchConfig,
    BranchOutput,
    BranchParams,
    ModalitySequence,
    fuse,
    init_branch,
    run_branch,
)
from .scoring import ScoreHeadConfig, ScoreHeadParams, init_score_head, predict

TAU_FLOOR = 1e-3


@dataclass
class ModelConfig:
    modalities: list[str] = field(default_factory=lambda: list(MODALITIES))
    dims: dict[str, int] = field(default_factory=lambda: {"rgb": 16, "flow": 16, "audio": 8})
    n_queries: int = 5
    n_layers: int = 2
    self_attn_heads: int = 8
    cross_heads: int = 1
    ffn_mult: int = 4
    tau_init: float = 0.07
    dropout: float = 0.1
    attn_logits: str = "keys"
    layer_norm: bool = True
    positional_encoding: bool = False
    fusion: str = FUSION_CONCAT
    score_fusion: str = "weight"
    per_query_regressors: bool = False

    def __post_init__(self):
        self.modalities = [m.lower() for m in self.modalities]
        unknown = [m for m in self.modalities if m not in MODALITIES]
        if unknown:
            raise ValueError(f"unknown modalities {unknown}; expected subset of {MODALITIES}")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        missing = [m for m in self.modalities if m not in self.dims]
        if missing:
            raise ValueError(f"no feature dim configured for {missing}")
        if self.fusion not in (FUSION_CONCAT, FUSION_SUM):
            raise ValueError(f"fusion must be {FUSION_CONCAT!r} or {FUSION_SUM!r}")
        if self.fusion == FUSION_SUM:
            dims = {self.dims[m] for m in self.modalities}
            if len(dims) != 1:
                raise ValueError(f"summation fusion requires equal dims, got {sorted(dims)}")

    @property
    def fused_dim(self) -> int:
        if self.fusion == FUSION_SUM:
            return self.dims[self.modalities[0]]
        return sum(self.dims[m] for m in self.modalities)

    def branch_config(self, modality: str) -> BranchConfig:
        return BranchConfig(
            modality=modality,
            dim=self.dims[modality],
            n_queries=self.n_queries,
            n_layers=self.n_layers,
            self_attn_heads=self.self_attn_heads,
            cross_heads=self.cross_heads,
            ffn_mult=self.ffn_mult,
            tau_init=self.tau_init,
            dropout=self.dropout,
            attn_logits=self.attn_logits,
            layer_norm=self.layer_norm,
            positional_encoding=self.positional_encoding,
        )

    def score_config(self) -> ScoreHeadConfig:
        return ScoreHeadConfig(fusion=self.score_fusion, per_query_params=self.per_query_regressors)


@dataclass
class ForwardOutput:
    score: Tensor                         # [1, 1]
    breakdown: object | None              # ScoreBreakdown, None for one-stage fusion
    branches: dict[str, BranchOutput]


class Model:
    """Parameter container plus the per-sample forward pass."""

    def __init__(self, config: ModelConfig, branches: dict[str, BranchParams],
                 head: ScoreHeadParams):
        self.config = config
        self.branches = branches
        self.head = head

    @classmethod
    def build(cls, config: ModelConfig, rng: RngState) -> "Model":
        branches = {m: init_branch(config.branch_config(m), rng)
                    for m in MODALITIES if m in config.modalities}
        head = init_score_head(config.fused_dim, config.n_queries, config.score_config(), rng)
        return cls(config, branches, head)

    def forward(self, features: dict[str, Tensor], training: bool = False,
                rng: RngState | None = None) -> ForwardOutput:
        outputs: dict[str, BranchOutput] = {}
        for m in self.config.modalities:
            if m not in features:
                raise ValueError(f"sample is missing modality {m!r}")
            seq = ModalitySequence(m, features[m])
            outputs[m] = run_branch(seq, self.branches[m], rng=rng, training=training)
        fused = fuse(outputs, self.config.fusion)
        final, breakdown = predict(fused, self.head)
        return ForwardOutput(score=final, breakdown=breakdown, branches=outputs)

    def named_parameters(self):
        """(name, tensor, weight_decay) in checkpoint order."""
        for m in MODALITIES:
            if m in self.branches:
                yield from self.branches[m].named()
        yield from self.head.named()

    def parameters(self):
        return [t for _, t, _ in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def clamp_constraints(self):
        """Keep every branch temperature strictly positive after optimizer steps."""
        for branch in self.branches.values():
            for layer in branch.layers:
                np.maximum(layer.tau.data, TAU_FLOOR, out=layer.tau.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t, _ in self.named_parameters()}

    def load_state(self, arrays: dict[str, np.ndarray], extra_ok: bool = False):
        """Copy values in by name; mismatched name sets raise with the diff."""
        own = {name: t for name, t, _ in self.named_parameters()}
        missing = sorted(set(own) - set(arrays))
        unexpected = sorted(set(arrays) - set(own))
        if missing or (unexpected and not extra_ok):
            raise ValueError(
                "checkpoint/model parameter mismatch: "
                f"missing from checkpoint: {missing or 'none'}; "
                f"not in model: {unexpected or 'none'}"
            )
        for name, tensor in own.items():
            incoming = np.asarray(arrays[name], dtype=tensor.data.dtype)
            if incoming.shape != tensor.data.shape:
                raise ValueError(
                    f"parameter {name}: checkpoint shape {incoming.shape} != model shape {tensor.data.shape}"
                )
            tensor.data = incoming.copy()
