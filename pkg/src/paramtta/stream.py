"""Synthetic source data and continual corruption streams.

Pixel corruptions become feature-space analogues because the toy model
consumes vectors. Blur becomes smoothing across feature dimensions. Weather
becomes a brightness shift. Digital corruptions become contrast scaling and
feature dropout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from .numerics import make_rng

CORRUPTIONS = ("identity", "additive_noise", "smoothing", "brightness_shift", "contrast_scale", "feature_dropout")
DEFAULT_SEQUENCE = ("additive_noise", "smoothing", "brightness_shift", "contrast_scale", "feature_dropout")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    corruption: str = "identity"
    severity: float = 5
    seed: int = 0

    def __post_init__(self):
        if self.corruption not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.corruption!r}; expected one of {CORRUPTIONS}")
        if self.corruption != "identity" and not 0 <= self.severity <= 5:
            raise ValueError(f"severity must lie in [0, 5], got {self.severity}")


@dataclass
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray
    domain: str = "source"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels differ in length")

    def __len__(self) -> int:
        return self.labels.shape[0]


def class_means(C: int, d_in: int, scale: float) -> np.ndarray:
    """Vertices of a centred regular simplex with ``|mu_c| = scale``.

    The simplex lives in a fixed random C-dimensional subspace of the input
    space (the orientation depends on ``(C, d_in)`` only, never on the seed),
    so no class is aligned with a coordinate axis.
    """
    if C > d_in:
        raise ValueError(f"need d_in >= C, got d_in={d_in}, C={C}")
    V = np.eye(C) - 1.0 / C
    V *= scale / np.linalg.norm(V[0])
    Q, _ = np.linalg.qr(make_rng(0, "simplex", C, d_in).standard_normal((d_in, C)))
    return V @ Q.T


def _draw(rng, n, C, d_in, scale):
    labels = rng.integers(0, C, size=n)
    X = class_means(C, d_in, scale)[labels] + rng.standard_normal((n, d_in))
    return X, labels


def _batches(X, y, batch_size, domain="source") -> list[LabeledBatch]:
    return [LabeledBatch(X[i : i + batch_size], y[i : i + batch_size], domain) for i in range(0, len(y), batch_size)]


def make_source(seed: int, n_train: int, n_test: int, C: int = 4, d_in: int = 16, batch_size: int = 4,
                scale: float = 4.0) -> tuple[list[LabeledBatch], list[LabeledBatch]]:
    """Class-conditional unit-covariance Gaussians around simplex vertices.

    Train and test draw from independent RNG streams of ``seed``.
    """
    if C < 2:
        raise ValueError("need at least two classes")
    Xtr, ytr = _draw(make_rng(seed, "source", "train"), n_train, C, d_in, scale)
    Xte, yte = _draw(make_rng(seed, "source", "test"), n_test, C, d_in, scale)
    return _batches(Xtr, ytr, batch_size), _batches(Xte, yte, batch_size)


def stack(batches: list[LabeledBatch]) -> tuple[np.ndarray, np.ndarray]:
    return np.concatenate([b.features for b in batches]), np.concatenate([b.labels for b in batches])


def corrupt_features(X: np.ndarray, corruption: str, severity: float, rng: np.random.Generator) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if corruption not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {corruption!r}")
    if corruption == "identity" or severity == 0:
        return X.copy()
    s = float(severity)
    if corruption == "additive_noise":
        return X + rng.normal(0.0, 0.25 * s, X.shape)
    if corruption == "smoothing":
        width = max(1, int(round(s)))
        return uniform_filter1d(X, size=width, axis=1, mode="nearest")
    if corruption == "brightness_shift":
        return X + 0.3 * s
    if corruption == "contrast_scale":
        return X * (1.0 + 0.2 * s)
    # feature_dropout
    mask = rng.random(X.shape) < 0.1 * s
    return np.where(mask, 0.0, X)


def corrupt(batch: LabeledBatch, spec: DomainSpec, rng: np.random.Generator | None = None) -> LabeledBatch:
    rng = make_rng(spec.seed, "corrupt", spec.name) if rng is None else rng
    return LabeledBatch(corrupt_features(batch.features, spec.corruption, spec.severity, rng),
                        batch.labels.copy(), spec.name)


def default_sequence(severity: float = 5, seed: int = 0, names=DEFAULT_SEQUENCE) -> list[DomainSpec]:
    return [DomainSpec(n, n, severity, seed) for n in names]


@dataclass
class StreamBatch:
    """What the adaptation loop is allowed to see."""
    features: np.ndarray
    domain: str
    index: int


@dataclass
class ContinualStream:
    batches: list[StreamBatch]
    hidden_labels: list[np.ndarray]
    source_tail: list[LabeledBatch]
    domains: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.batches)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for b, y in zip(self.batches, self.hidden_labels):
                fh.write(json.dumps({"kind": "adapt", "domain": b.domain, "index": b.index,
                                     "features": b.features.tolist(), "labels": y.tolist()}) + "\n")
            for i, b in enumerate(self.source_tail):
                fh.write(json.dumps({"kind": "tail", "domain": b.domain, "index": i,
                                     "features": b.features.tolist(), "labels": b.labels.tolist()}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ContinualStream":
        batches, labels, tail, domains = [], [], [], []
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                X = np.asarray(rec["features"], dtype=np.float64)
                y = np.asarray(rec["labels"], dtype=np.int64)
                if rec["kind"] == "adapt":
                    batches.append(StreamBatch(X, rec["domain"], rec["index"]))
                    labels.append(y)
                    if rec["domain"] not in domains:
                        domains.append(rec["domain"])
                else:
                    tail.append(LabeledBatch(X, y, rec["domain"]))
        return cls(batches, labels, tail, domains)


def make_continual_stream(source_test: list[LabeledBatch], sequence: list[DomainSpec], batches_per_domain: int,
                          gradual: bool = False) -> ContinualStream:
    """Domains in order, each drawing ``batches_per_domain`` source test batches cyclically.

    With ``gradual`` the severity ramps linearly from 1 to the domain's
    severity across its batches. The clean source test set is appended as a
    labelled tail for forgetting measurement.
    """
    if not sequence:
        raise ValueError("domain sequence is empty")
    batches, labels = [], []
    k = 0
    for spec in sequence:
        rng = make_rng(spec.seed, "stream", spec.name)
        for i in range(batches_per_domain):
            src = source_test[k % len(source_test)]
            k += 1
            sev = spec.severity
            if gradual and batches_per_domain > 1 and spec.corruption != "identity":
                sev = 1.0 + (spec.severity - 1.0) * i / (batches_per_domain - 1)
            X = corrupt_features(src.features, spec.corruption, sev, rng)
            batches.append(StreamBatch(X, spec.name, len(batches)))
            labels.append(src.labels.copy())
    tail = [LabeledBatch(b.features.copy(), b.labels.copy(), "source") for b in source_test]
    return ContinualStream(batches, labels, tail, [s.name for s in sequence])

