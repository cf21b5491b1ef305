"""End-to-end walkthrough: synthetic data, training, and attention diagnostics.

Run from the repository root:

    python demos/train_and_inspect.py

Generates the default synthetic dataset in memory, trains the trimodal
model for a handful of epochs, then prints the per-query score breakdown
for one test sample and the attention-center trajectory of the tracked
samples. Takes about a minute on a laptop CPU.
"""

import numpy as np

import lmacnet as ln
from lmacnet import losses as L
from lmacnet import training as tr
from lmacnet.autodiff import RngState, Tensor, no_grad
from lmacnet.scoring import breakdown_export

# --- data ------------------------------------------------------------------
# 800 samples of T=24 segments; each sample plants 3 key events whose mean
# quality is the label. Every modality carries the event quality through its
# own noise, so pooling modalities genuinely reduces label noise.
spec = ln.SyntheticSpec()
dataset = ln.generate(spec)
print(f"dataset: {len(dataset.train)} train / {len(dataset.test)} test, "
      f"T={spec.T}, dims={spec.dims}")

# --- model + training --------------------------------------------------------
model = ln.Model.build(ln.ModelConfig(), RngState(0, 1))
print(f"parameters: {sum(t.size for t in model.parameters())}")

record = ln.train(model, dataset, ln.OptimConfig(epochs=10), ln.LossConfig(),
                  RngState(0, 2))
for epoch in record.epochs:
    print(f"  epoch {epoch['epoch']:>2}  test spearman {epoch['spearman']:+.3f}")

# --- score breakdown for one held-out sample --------------------------------
sample = dataset.test[0]
with no_grad():
    out = model.forward({m: Tensor(sample.features[m]) for m in model.config.modalities})
print(f"\nsample {sample.stem}: label {sample.label:.3f}")
for key, value in breakdown_export(out.breakdown).items():
    print(f"  {key}: {np.round(value, 3)}")

# --- attention centers -------------------------------------------------------
# per-query temporal centroids of the (layer-averaged) attention; the
# consistency loss pulls these together across modalities during training
with no_grad():
    centers = L.attention_centers({m: b.attention for m, b in out.branches.items()})
print("\nattention centers (segments 1..T):")
for modality, values in centers.center_values().items():
    print(f"  {modality:<6} {np.round(values, 2)}")

# --- cross-modal alignment over training ------------------------------------
rows = tr.alignment_metrics(record.snapshots)
print("\nmean cross-modal center distance of the tracked samples per epoch:")
for epoch in sorted({r["epoch"] for r in rows}):
    dists = [r["center_distance"] for r in rows
             if r["epoch"] == epoch and r["pair"] == "mean"]
    print(f"  epoch {epoch:>2}  {np.mean(dists):.2f} segments")
