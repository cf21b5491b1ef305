"""lmacnet: multimodal action-quality assessment with attention-center alignment.

Library layout:
    autodiff    tensor core with reverse-mode differentiation
    encoder     per-modality temporal query decoder branches
    scoring     two-level (per-query then fused) score head
    losses      attention centers, ranking/sparsity/consistency/MSE terms
    data        synthetic dataset generator and .lmfv feature files
    training    AdamW + cosine decay loop, Spearman / Fisher-z metrics
    checkpoint  binary parameter container
    cli         gen-synthetic / train / eval / inspect-attention commands
"""

from . import _threads  # noqa: F401  (must run before numpy loads BLAS)

from . import autodiff, checkpoint, data, encoder, losses, model, scoring, training
from .autodiff import RngState, Tensor
from .data import Dataset, Sample, SyntheticSpec, generate
from .losses import LossConfig
from .model import Model, ModelConfig
from .training import OptimConfig, fisher_z_average, spearman, train

__version__ = "0.1.0"

__all__ = [
    "autodiff", "checkpoint", "data", "encoder", "losses", "model", "scoring",
    "training", "RngState", "Tensor", "Dataset", "Sample", "SyntheticSpec",
    "generate", "LossConfig", "Model", "ModelConfig", "OptimConfig",
    "fisher_z_average", "spearman", "train", "__version__",
]
