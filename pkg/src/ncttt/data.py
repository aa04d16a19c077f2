"""Synthetic source domains, parameterized shifts and dataset manifests."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .npyio import read_npy, write_npy

# Per-kind magnitude for severities 0..5. Severity 0 is always the identity.
SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.0, 0.25, 0.5, 0.75, 1.0, 1.5),   # noise std
    "uniform_noise": (0.0, 0.4, 0.8, 1.2, 1.6, 2.4),      # half-width
    "rotation": (0.0, 12.0, 24.0, 36.0, 48.0, 60.0),      # degrees
    "scale": (1.0, 1.2, 1.4, 1.6, 1.8, 2.2),              # multiplicative factor
    "contrast": (1.0, 0.8, 0.6, 0.45, 0.3, 0.2),          # factor towards the mean
    "brightness": (0.0, 0.5, 1.0, 1.5, 2.0, 3.0),         # additive offset
    "blur_1d": (0.0, 0.25, 0.5, 0.75, 1.0, 1.5),          # periodic Gaussian sigma, in samples
}
SHIFT_KINDS = tuple(SEVERITY_TABLE)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] == 0:
            raise ValueError("dataset must be nonempty")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(f"labels shape {self.labels.shape} does not match inputs shape {self.inputs.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain NaN or Inf")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise ValueError(f"unknown shift kind {self.kind!r}; expected one of {list(SHIFT_KINDS)}")
        if not 0 <= self.severity <= 5 or int(self.severity) != self.severity:
            raise ValueError(f"severity must be an integer in [0, 5], got {self.severity}")

    @property
    def magnitude(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity]


def blob_centers(num_classes: int, dim: int, class_separation: float) -> np.ndarray:
    """Class means on a circle in the first two axes, adjacent means ``class_separation`` apart."""
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    radius = class_separation / (2.0 * np.sin(np.pi / num_classes))
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    if dim > 1:
        centers[:, 1] = radius * np.sin(angles)
    return centers


def make_blobs(num_classes: int, n_per_class: int, dim: int, class_separation: float, seed) -> Dataset:
    """Unit-variance Gaussian clusters, one per class, ordered by class."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    centers = blob_centers(num_classes, dim, class_separation)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    inputs = centers[labels] + rng.standard_normal((labels.size, dim))
    return Dataset(inputs, labels, num_classes,
                   {"domain": "source", "generator": "blobs", "centers": centers.tolist()})


RING_RADII = (1.0, 2.0)


def make_rings(n: int, noise: float, seed) -> Dataset:
    """Two concentric rings in 2-D; label 0 is the inner ring."""
    if n < 10:
        raise ValueError(f"n must be >= 10, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.asarray(RING_RADII)[labels] + noise * rng.standard_normal(n)
    inputs = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return Dataset(inputs, labels, 2, {"domain": "source", "generator": "rings"})


def _feature_view(x: np.ndarray) -> tuple[np.ndarray, callable]:
    """Rows of features: (N, F) as-is, (N, C, W, H) as per-location channel vectors."""
    if x.ndim == 2:
        return x, lambda y: y
    if x.ndim == 4:
        n, c, w, h = x.shape
        rows = x.transpose(0, 2, 3, 1).reshape(-1, c)
        return rows, lambda y: y.reshape(n, w, h, c).transpose(0, 3, 1, 2)
    raise ValueError(f"inputs must be (N, F) or (N, C, W, H), got shape {x.shape}")


def _periodic_gaussian_blur(x: np.ndarray, sigma: float, axis: int) -> np.ndarray:
    n = x.shape[axis]
    freq = 2.0 * np.pi * np.fft.fftfreq(n)
    gain = np.exp(-0.5 * (sigma * freq) ** 2)
    shape = [1] * x.ndim
    shape[axis] = n
    return np.real(np.fft.ifft(np.fft.fft(x, axis=axis) * gain.reshape(shape), axis=axis))


def apply_shift(ds: Dataset, shift: ShiftSpec, seed) -> Dataset:
    """Transform inputs, keep labels. Severity 0 returns an identical copy.

    Noise kinds draw one base sample per seed and scale it by the severity
    magnitude, so the perturbation grows monotonically with severity.
    """
    x = ds.inputs
    meta = dict(ds.meta, domain="target", shift={"kind": shift.kind, "severity": shift.severity})
    if shift.severity == 0:
        return replace(ds, inputs=x.copy(), labels=ds.labels.copy(), meta=meta)
    rng = np.random.default_rng(seed)
    mag = shift.magnitude
    kind = shift.kind
    if kind == "gaussian_noise":
        out = x + mag * rng.standard_normal(x.shape)
    elif kind == "uniform_noise":
        out = x + mag * rng.uniform(-1.0, 1.0, size=x.shape)
    elif kind == "scale":
        out = x * mag
    elif kind == "brightness":
        out = x + mag
    elif kind == "contrast":
        mu = x.mean(axis=0, keepdims=True)
        out = mu + mag * (x - mu)
    elif kind == "rotation":
        rows, back = _feature_view(x)
        if rows.shape[1] < 2:
            raise ValueError("rotation needs at least two features")
        t = np.deg2rad(mag)
        rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        rows = rows.copy()
        rows[:, :2] = rows[:, :2] @ rot.T
        out = back(rows)
    elif kind == "blur_1d":
        out = _periodic_gaussian_blur(x, mag, axis=x.ndim - 1)
    else:  # pragma: no cover - ShiftSpec validates kinds
        raise ValueError(f"unknown shift kind {kind!r}")
    return Dataset(out, ds.labels.copy(), ds.num_classes, meta)


def perturbation_msq(ds: Dataset, shifted: Dataset) -> float:
    return float(np.mean((shifted.inputs - ds.inputs) ** 2))


def split(ds: Dataset, fraction: float, seed) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    k = int(round(fraction * len(ds)))
    a, b = perm[:k], perm[k:]
    return (Dataset(ds.inputs[a], ds.labels[a], ds.num_classes, dict(ds.meta)),
            Dataset(ds.inputs[b], ds.labels[b], ds.num_classes, dict(ds.meta)))


# -- manifests ---------------------------------------------------------------------------------

def save_dataset(ds: Dataset, directory, stem: str) -> Path:
    """Write ``<stem>_inputs.npy``, ``<stem>_labels.npy`` and ``<stem>.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_npy(directory / f"{stem}_inputs.npy", ds.inputs, "f8")
    write_npy(directory / f"{stem}_labels.npy", ds.labels, "f8")
    shift = ds.meta.get("shift") or {"kind": None, "severity": 0}
    manifest = {
        "inputs": f"{stem}_inputs.npy",
        "labels": f"{stem}_labels.npy",
        "domain": ds.meta.get("domain", "source"),
        "shift": shift,
        "num_classes": ds.num_classes,
    }
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> Dataset:
    """Load a dataset manifest; array paths resolve relative to the manifest.

    The ``shift`` entry describes how the arrays were produced and is carried
    into ``meta``; it is not re-applied.
    """
    path = Path(path)
    manifest = json.loads(path.read_text())
    for key in ("inputs", "labels", "domain"):
        if key not in manifest:
            raise ValueError(f"manifest {path} lacks key {key!r}")
    base = path.parent
    inputs = read_npy(base / os.fspath(manifest["inputs"]))
    labels_f = read_npy(base / os.fspath(manifest["labels"]))
    labels = labels_f.astype(np.int64)
    if not np.array_equal(labels, labels_f):
        raise ValueError(f"labels in {manifest['labels']} are not integral")
    num_classes = int(manifest.get("num_classes", labels.max() + 1))
    meta = {"domain": manifest["domain"], "shift": manifest.get("shift"), "manifest": str(path)}
    return Dataset(inputs, labels, num_classes, meta)
