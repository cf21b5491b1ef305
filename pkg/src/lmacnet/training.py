"""Training loop, AdamW with cosine decay, and rank-correlation evaluation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Graph, RngState, Tensor, use_graph
from .data import Dataset, LabelTransform, Sample, normalize_labels
from .model import Model


@dataclass
class OptimConfig:
    lr: float = 9e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 22
    batch_size: int = 32
    lr_min: float = 0.0
    warmup_steps: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr < 0 or self.eps <= 0:
            raise ValueError("lr must be nonnegative and eps positive")
        if self.weight_decay < 0 or self.lr_min < 0 or self.warmup_steps < 0:
            raise ValueError("weight_decay, lr_min and warmup_steps must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def cosine_lr(step: int, total_steps: int, cfg: OptimConfig) -> float:
    """Learning rate at `step` (0-based): linear warmup, then cosine to lr_min.

    Endpoints are exact: the first post-warmup step gets cfg.lr, and
    step == total_steps evaluates to cfg.lr_min.
    """
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(total_steps - cfg.warmup_steps, 1)
    t = min(step - cfg.warmup_steps, span)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * t / span))


class AdamWState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def buffers(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
        return self.m[name], self.v[name]


def adamw_step(named_params, state: AdamWState, cfg: OptimConfig, step: int,
               lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update; `step` is 1-based.

    Decay multiplies the parameter by (1 - lr*wd) before the moment update
    and only touches parameters flagged for decay. Parameters whose grad is
    None are left untouched entirely.
    """
    if step < 1:
        raise ValueError("adamw step index is 1-based")
    if lr is None:
        lr = cfg.lr
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    for name, p, decay in named_params:
        g = p.grad
        if g is None:
            continue
        if ad.checked() and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if decay and cfg.weight_decay > 0.0:
            p.data -= (lr * cfg.weight_decay) * p.data
        m, v = state.buffers(name, p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def clip_gradients(named_params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    grads = [p.grad for _, p, _ in named_params if p.grad is not None]
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# metrics

def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(pred, truth) -> float:
    """Spearman rank correlation: Pearson on average-tie ranks."""
    x = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(truth, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    rx, ry = _average_ranks(x), _average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sx, sy = np.sqrt(np.sum(dx * dx)), np.sqrt(np.sum(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for a constant sequence")
    return float(np.sum(dx * dy) / (sx * sy))


def fisher_z_average(rhos) -> float:
    """Average correlations through atanh/tanh; |rho| = 1 is clamped."""
    rhos = np.asarray(rhos, dtype=np.float64).reshape(-1)
    if rhos.size == 0:
        raise ValueError("no correlations to average")
    limit = 1.0 - 1e-7
    if np.any(np.abs(rhos) >= 1.0):
        warnings.warn("|rho| = 1 clamped for Fisher averaging", RuntimeWarning)
        rhos = np.clip(rhos, -limit, limit)
    return float(np.tanh(np.mean(np.arctanh(rhos))))


# ---------------------------------------------------------------------------
# training

@dataclass
class CenterSnapshot:
    """Eval-mode attention centers for one tracked sample at one epoch."""

    epoch: int
    stem: str
    centers: dict[str, np.ndarray]      # modality -> [K]
    aggregated: dict[str, np.ndarray]   # modality -> [K, T]


@dataclass
class TrainRecord:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    snapshots: list[CenterSnapshot] = field(default_factory=list)
    label_transform: LabelTransform | None = None
    tracked_stems: list[str] = field(default_factory=list)

    def final_spearman(self) -> float:
        return self.epochs[-1]["spearman"] if self.epochs else float("nan")


def _tensors(sample: Sample, modalities) -> dict[str, Tensor]:
    return {m: Tensor(sample.features[m]) for m in modalities}


def predict_scores(model: Model, samples) -> np.ndarray:
    """Eval-mode (dropout-free) predictions in normalized-label space."""
    preds = np.empty(len(samples), dtype=np.float64)
    with ad.no_grad():
        for i, s in enumerate(samples):
            out = model.forward(_tensors(s, model.config.modalities), training=False)
            preds[i] = out.score.item()
    return preds


def snapshot_centers(model: Model, sample: Sample, epoch: int,
                     center_agg: str = L.CENTER_AGG_MEAN) -> CenterSnapshot:
    with ad.no_grad():
        out = model.forward(_tensors(sample, model.config.modalities), training=False)
        centers = L.attention_centers({m: b.attention for m, b in out.branches.items()},
                                      agg=center_agg)
    return CenterSnapshot(
        epoch=epoch,
        stem=sample.stem,
        centers=centers.center_values(),
        aggregated={m: a.data.copy() for m, a in centers.aggregated.items()},
    )


def _batch_feature_losses(centers_list, t_len, loss_cfg: L.LossConfig):
    """Per-sample feature losses averaged over the batch (None while toggled off)."""
    def batch_mean(terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.mul(acc, 1.0 / len(terms))

    rank = sparsity = consistency = None
    if loss_cfg.rank:
        rank = batch_mean([L.rank_loss(c, t_len, loss_cfg) for c in centers_list])
    if loss_cfg.sparsity:
        sparsity = batch_mean([L.sparsity_loss(c, loss_cfg) for c in centers_list])
    if loss_cfg.consistency:
        consistency = batch_mean([L.consistency_loss(c) for c in centers_list])
    return rank, sparsity, consistency


def train(model: Model, dataset: Dataset, optim_cfg: OptimConfig,
          loss_cfg: L.LossConfig, rng: RngState, n_tracked: int = 3,
          on_epoch=None) -> TrainRecord:
    """Mini-batch training with per-epoch test-split evaluation.

    Shuffling, dropout and tracked-sample choice all derive from `rng`, so
    a fixed seed reproduces the run bit for bit. Raises if the training
    objective ever goes non-finite, naming the step.
    """
    train_samples = dataset.train
    test_samples = dataset.test
    if not train_samples:
        raise ValueError("dataset has no training split")
    if loss_cfg.consistency and len(model.config.modalities) < 2:
        raise ValueError("consistency loss requires >= 2 modalities; disable it for unimodal runs")

    labels = np.array([s.label for s in train_samples], dtype=np.float64)
    normalized, transform = normalize_labels(labels)

    need_centers = loss_cfg.rank or loss_cfg.sparsity or loss_cfg.consistency
    tracked_idx = sorted(rng.permutation(len(train_samples))[:n_tracked].tolist())
    tracked = [train_samples[i] for i in tracked_idx]

    record = TrainRecord(label_transform=transform, tracked_stems=[s.stem for s in tracked])
    state = AdamWState()
    named_params = list(model.named_parameters())
    n_batches = math.ceil(len(train_samples) / optim_cfg.batch_size)
    total_steps = optim_cfg.epochs * n_batches
    step = 0

    for epoch in range(optim_cfg.epochs):
        order = rng.permutation(len(train_samples))
        for b in range(n_batches):
            idx = order[b * optim_cfg.batch_size:(b + 1) * optim_cfg.batch_size]
            batch = [train_samples[i] for i in idx]
            truth = normalized[idx]
            with use_graph(Graph()):
                preds = []
                centers_list = []
                t_len = batch[0].T
                for sample in batch:
                    out = model.forward(_tensors(sample, model.config.modalities),
                                        training=True, rng=rng)
                    preds.append(out.score)
                    if need_centers:
                        centers_list.append(L.attention_centers(
                            {m: br.attention for m, br in out.branches.items()},
                            agg=loss_cfg.center_agg))
                pred_row = ad.concat(preds) if len(preds) > 1 else preds[0]
                score = L.score_loss(pred_row, truth)
                rank, sparsity, consistency = (None, None, None)
                if need_centers:
                    rank, sparsity, consistency = _batch_feature_losses(
                        centers_list, t_len, loss_cfg)
                report = L.total_loss(score, rank, sparsity, consistency, loss_cfg)
                if not math.isfinite(report.total.item()):
                    raise RuntimeError(f"non-finite training loss at step {step}")
                report.total.backward()
            if optim_cfg.grad_clip is not None:
                clip_gradients(named_params, optim_cfg.grad_clip)
            lr = cosine_lr(step, total_steps, optim_cfg)
            adamw_step(named_params, state, optim_cfg, step + 1, lr=lr)
            model.clamp_constraints()
            model.zero_grad()
            record.steps.append({**report.to_record(step), "lr": lr, "epoch": epoch})
            step += 1

        test_rho = float("nan")
        if len(test_samples) >= 2:
            preds = predict_scores(model, test_samples)
            test_rho = spearman(preds, [s.label for s in test_samples])
        record.epochs.append({"epoch": epoch, "spearman": test_rho})
        for sample in tracked:
            record.snapshots.append(snapshot_centers(model, sample, epoch, loss_cfg.center_agg))
        if on_epoch is not None:
            on_epoch(model, epoch, record)
    return record


# ---------------------------------------------------------------------------
# alignment diagnostics

def _pairs(modalities):
    mods = list(modalities)
    return [(mods[i], mods[j]) for i in range(len(mods)) for j in range(i + 1, len(mods))]


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    num = np.sum(a * b, axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return num / np.maximum(den, 1e-12)


def alignment_metrics(snapshots) -> list[dict]:
    """Per (epoch, sample, modality pair): mean |center_i - center_j| over
    queries and mean cosine similarity of the aggregated attention rows.
    A synthetic pair "mean" averages both metrics across the real pairs."""
    records = []
    for snap in snapshots:
        mods = [m for m in snap.centers]
        dists, cosines = [], []
        for mi, mj in _pairs(mods):
            dist = float(np.mean(np.abs(snap.centers[mi] - snap.centers[mj])))
            cos = float(np.mean(_row_cosines(snap.aggregated[mi], snap.aggregated[mj])))
            records.append({"epoch": snap.epoch, "sample": snap.stem,
                            "pair": f"{mi}-{mj}", "center_distance": dist, "cosine": cos})
            dists.append(dist)
            cosines.append(cos)
        if dists:
            records.append({"epoch": snap.epoch, "sample": snap.stem, "pair": "mean",
                            "center_distance": float(np.mean(dists)),
                            "cosine": float(np.mean(cosines))})
    return records
