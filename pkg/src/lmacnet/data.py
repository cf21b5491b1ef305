"""Synthetic multimodal datasets and the on-disk feature-file format.

The generator plants K key events in each sample: event e gets a quality
q_e ~ U(0,1), and every modality receives a fixed per-(modality, event)
signature direction scaled by q_e plus modality-private noise, injected at
the event's segment (shifted by at most `event_alignment_jitter` segments
per modality). The label is the mean event quality, so it is recoverable
exactly only by pooling modalities: each single modality sees the quality
through its own noise.

Feature files ({stem}.{modality}.lmfv) hold one modality's [T, d] float32
matrix; the RGB file additionally carries the label as a float64 tail.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import RngState
from .encoder import MODALITIES

MAGIC = b"LMFV"
VERSION = 1
_MODALITY_TAGS = {m: i for i, m in enumerate(MODALITIES)}

SIGNAL_SCALE = 6.0              # signature amplitude per unit quality
QUALITY_NOISE_FACTOR = 0.65     # per-modality quality-readout noise, relative to noise_sigma
_SIGNATURE_STREAM = 2**64 - 1   # reserved rng stream for dataset-level draws

DEFAULT_SEGMENT_LEN = 32


class DataError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    n_samples: int = 800
    T: int = 24
    dims: dict[str, int] = field(default_factory=lambda: {"rgb": 16, "flow": 16, "audio": 8})
    K_events: int = 3
    noise_sigma: float = 0.3
    event_alignment_jitter: int = 1
    seed: int = 0
    train_fraction: float = 0.75

    def __post_init__(self):
        if isinstance(self.dims, (list, tuple)):
            self.dims = dict(zip(MODALITIES, self.dims))
        if set(self.dims) != set(MODALITIES):
            raise DataError(f"dims must cover {MODALITIES}, got {sorted(self.dims)}")
        if self.n_samples < 1 or self.T < 1 or self.K_events < 1:
            raise DataError("n_samples, T and K_events must be positive")
        if self.K_events > self.T:
            raise DataError(f"K_events {self.K_events} exceeds T {self.T}")
        if self.event_alignment_jitter < 0 or self.noise_sigma < 0:
            raise DataError("noise_sigma and event_alignment_jitter must be nonnegative")
        if self.K_events > self.T - self.event_alignment_jitter:
            raise DataError("K_events does not fit into T with the requested jitter")
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError("train_fraction must lie strictly between 0 and 1")

    @property
    def n_train(self) -> int:
        return round(self.n_samples * self.train_fraction)


@dataclass
class Sample:
    stem: str
    features: dict[str, np.ndarray]   # modality -> [T, d] float32
    label: float
    split: str = "train"
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return next(iter(self.features.values())).shape[0]


@dataclass
class Dataset:
    samples: list[Sample]

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    @property
    def train(self) -> list[Sample]:
        return self.split("train")

    @property
    def test(self) -> list[Sample]:
        return self.split("test")


def event_signatures(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """Fixed unit direction per (modality, event index), [K_events, d_m]."""
    rng = RngState(spec.seed, _SIGNATURE_STREAM)
    out = {}
    for m in MODALITIES:
        vec = rng.normal((spec.K_events, spec.dims[m])).astype(np.float64)
        out[m] = (vec / np.linalg.norm(vec, axis=1, keepdims=True)).astype(np.float32)
    return out


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic synthetic dataset; sample i depends only on (seed, i)."""
    signatures = event_signatures(spec)
    root = RngState(spec.seed)
    n_train = spec.n_train
    samples = []
    for i in range(spec.n_samples):
        rng = root.spawn(i)
        positions = rng.choice_sorted(spec.T - spec.event_alignment_jitter, spec.K_events)
        qualities = rng.uniform((spec.K_events,), 0.0, 1.0).astype(np.float64)
        features: dict[str, np.ndarray] = {}
        meta_positions: dict[str, list[int]] = {}
        for m in MODALITIES:
            feats = rng.normal((spec.T, spec.dims[m]), scale=spec.noise_sigma)
            shifts = rng.integers(0, spec.event_alignment_jitter + 1, size=spec.K_events)
            readout_noise = rng.normal((spec.K_events,),
                                       scale=QUALITY_NOISE_FACTOR * spec.noise_sigma)
            placed = []
            for e in range(spec.K_events):
                pos = int(positions[e] + shifts[e])
                amp = SIGNAL_SCALE * (qualities[e] + float(readout_noise[e]))
                feats[pos] += (amp * signatures[m][e]).astype(feats.dtype)
                placed.append(pos)
            features[m] = feats
            meta_positions[m] = placed
        samples.append(Sample(
            stem=f"sample{i:05d}",
            features=features,
            label=float(np.mean(qualities)),
            split="train" if i < n_train else "test",
            meta={"positions": meta_positions,
                  "anchor_positions": [int(p) for p in positions],
                  "qualities": qualities.tolist()},
        ))
    return Dataset(samples)


def segment_and_pad(frames: np.ndarray, segment_len: int = DEFAULT_SEGMENT_LEN) -> np.ndarray:
    """Pool frame-level features into fixed-length segments.

    The trailing partial segment is zero-padded before pooling, so a
    segment's feature is always the mean over exactly `segment_len` rows.
    """
    if segment_len < 1:
        raise DataError("segment_len must be >= 1")
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise DataError(f"expected nonempty [frames, d] input, got shape {frames.shape}")
    n, d = frames.shape
    t_len = math.ceil(n / segment_len)
    padded = np.zeros((t_len * segment_len, d), dtype=np.float32)
    padded[:n] = frames
    return padded.reshape(t_len, segment_len, d).mean(axis=1)


@dataclass
class LabelTransform:
    """Invertible min-max map fitted on the training split."""

    lo: float
    hi: float

    def apply(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def invert(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * (self.hi - self.lo) + self.lo


def normalize_labels(labels, mode: str = "minmax"):
    """Map labels into [0, 1]; returns (normalized, transform). Test-split
    values pushed through the same transform may fall outside [0, 1]."""
    if mode != "minmax":
        raise DataError(f"unsupported normalization mode {mode!r}")
    arr = np.asarray(labels, dtype=np.float64)
    if arr.size < 2:
        raise DataError("need at least 2 labels to fit a range")
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        raise DataError("labels are constant; min-max range is degenerate")
    transform = LabelTransform(lo, hi)
    return transform.apply(arr), transform


# ---------------------------------------------------------------------------
# feature-file container

def write_feature_file(path, modality: str, features: np.ndarray,
                       label: float | None = None) -> None:
    if modality not in _MODALITY_TAGS:
        raise DataError(f"unknown modality {modality!r}")
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise DataError(f"features must be 2-D, got {features.shape}")
    t_len, d = features.shape
    header = MAGIC + np.array([VERSION], "<u4").tobytes() \
        + np.array([_MODALITY_TAGS[modality]], "u1").tobytes() \
        + np.array([t_len, d], "<u4").tobytes()
    payload = features.tobytes()
    tail = b""
    if modality == "rgb":
        if label is None:
            raise DataError("rgb feature file requires the sample label")
        tail = np.array([label], "<f8").tobytes()
    Path(path).write_bytes(header + payload + tail)


def read_feature_file(path):
    """Returns (modality, features [T, d] float32, label-or-None)."""
    blob = Path(path).read_bytes()
    if len(blob) < 17:
        raise DataError(f"{path}: too short to hold a header")
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version = int(np.frombuffer(blob, "<u4", 1, 4)[0])
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    tag = blob[8]
    modality = {v: k for k, v in _MODALITY_TAGS.items()}.get(tag)
    if modality is None:
        raise DataError(f"{path}: unknown modality tag {tag}")
    t_len, d = (int(x) for x in np.frombuffer(blob, "<u4", 2, 9))
    expected = 17 + 4 * t_len * d + (8 if modality == "rgb" else 0)
    if len(blob) != expected:
        raise DataError(f"{path}: payload size {len(blob)} != declared {expected}")
    features = np.frombuffer(blob, "<f4", t_len * d, 17).reshape(t_len, d).copy()
    label = float(np.frombuffer(blob, "<f8", 1, 17 + 4 * t_len * d)[0]) if modality == "rgb" else None
    return modality, features, label


def sample_paths(directory, stem: str) -> dict[str, Path]:
    directory = Path(directory)
    return {m: directory / f"{stem}.{m}.lmfv" for m in MODALITIES}


def write_sample(sample: Sample, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m, feats in sample.features.items():
        write_feature_file(directory / f"{sample.stem}.{m}.lmfv", m, feats,
                           label=sample.label if m == "rgb" else None)


def read_sample(directory, stem: str, modalities=None) -> Sample:
    """Read one sample's files; the label always comes from the RGB file."""
    modalities = list(modalities) if modalities else list(MODALITIES)
    paths = sample_paths(directory, stem)
    features: dict[str, np.ndarray] = {}
    label = None
    t_lens = {}
    for m in modalities:
        got, feats, file_label = read_feature_file(paths[m])
        if got != m:
            raise DataError(f"{paths[m]}: modality tag says {got!r}")
        features[m] = feats
        t_lens[m] = feats.shape[0]
        if m == "rgb":
            label = file_label
    if label is None:
        if not paths["rgb"].exists():
            raise DataError(f"{stem}: rgb file absent, label unavailable")
        _, _, label = read_feature_file(paths["rgb"])
    if len(set(t_lens.values())) > 1:
        raise DataError(f"{stem}: segment counts differ across modalities: {t_lens}")
    return Sample(stem=stem, features=features, label=float(label))


def write_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sample in dataset.samples:
        write_sample(sample, directory)
    manifest = {
        "version": VERSION,
        "samples": [{"stem": s.stem, "split": s.split} for s in dataset.samples],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(directory, modalities=None) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{directory}: manifest.json not found")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for entry in manifest["samples"]:
        sample = read_sample(directory, entry["stem"], modalities=modalities)
        sample.split = entry["split"]
        samples.append(sample)
    return Dataset(samples)
