"""Dual-path low-rank adapter and its disentanglement losses.

A site wraps a frozen base weight ``W_b`` with two low-rank paths. The
invariant path adds ``A_inv @ B_inv`` and the specific path subtracts
``A_sp @ B_sp``::

    y = x @ W_b + x @ A_inv @ B_inv - x @ A_sp @ B_sp

The two path outputs are kept apart so they can be penalized for overlap
(orthogonality) and for statistical dependence (HSIC).

The ``plain`` variant is an ordinary single-path LoRA of rank ``r1 + r2`` with
the same parameter budget. It exists for ablations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

VARIANTS = ("dual", "plain")


@dataclass
class DisentangledFeatures:
    F_inv: Tensor
    F_sp: Tensor

    def __post_init__(self):
        if self.F_inv.shape != self.F_sp.shape:
            raise DimensionError(f"feature shapes differ: {self.F_inv.shape} vs {self.F_sp.shape}")

    @property
    def n(self) -> int:
        return self.F_inv.shape[0]


class AdapterSite:
    """One insertion point: frozen ``W_b`` plus trainable low-rank factors."""

    def __init__(self, W_b, A_inv, B_inv, A_sp=None, B_sp=None, variant: str = "dual"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown adapter variant {variant!r}")
        self.variant = variant
        self.W_b = Tensor(W_b)  # never requires grad
        d = self.W_b.shape[0]
        if self.W_b.shape != (d, d):
            raise DimensionError(f"W_b must be square, got {self.W_b.shape}")
        self.A_inv = nx.parameter(A_inv, "A_inv")
        self.B_inv = nx.parameter(B_inv, "B_inv")
        r1 = self.A_inv.shape[1]
        if self.A_inv.shape != (d, r1) or self.B_inv.shape != (r1, d):
            raise DimensionError(f"inv factors {self.A_inv.shape}, {self.B_inv.shape} do not fit d={d}")
        if variant == "dual":
            if A_sp is None or B_sp is None:
                raise ValueError("dual adapter needs A_sp and B_sp")
            self.A_sp = nx.parameter(A_sp, "A_sp")
            self.B_sp = nx.parameter(B_sp, "B_sp")
            r2 = self.A_sp.shape[1]
            if self.A_sp.shape != (d, r2) or self.B_sp.shape != (r2, d):
                raise DimensionError(f"sp factors {self.A_sp.shape}, {self.B_sp.shape} do not fit d={d}")
        else:
            self.A_sp = self.B_sp = None
            r2 = 0
        if not (1 <= r1 <= d and 0 <= r2 <= d):
            raise ValueError(f"ranks must satisfy 1 <= r <= d={d}; got r1={r1}, r2={r2}")
        self.d, self.r1, self.r2 = d, r1, r2

    @classmethod
    def init(cls, W_b, r1: int, r2: int, rng: np.random.Generator, variant: str = "dual", std: float = 0.02):
        """A factors ~ N(0, std^2), B factors zero, so the site starts at ``W_b`` exactly."""
        W_b = np.asarray(W_b, dtype=np.float64)
        d = W_b.shape[0]
        if variant == "plain":
            r = r1 + r2
            return cls(W_b, rng.normal(0.0, std, (d, r)), np.zeros((r, d)), variant="plain")
        return cls(
            W_b,
            rng.normal(0.0, std, (d, r1)),
            np.zeros((r1, d)),
            rng.normal(0.0, std, (d, r2)),
            np.zeros((r2, d)),
        )

    # -- parameters -----------------------------------------------------------
    def factors(self) -> list[Tensor]:
        if self.variant == "dual":
            return [self.A_inv, self.B_inv, self.A_sp, self.B_sp]
        return [self.A_inv, self.B_inv]

    @property
    def parameter_count(self) -> int:
        return sum(f.size for f in self.factors())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([f.data.reshape(-1) for f in self.factors()])

    def load_vector(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.parameter_count,):
            raise DimensionError(f"expected {self.parameter_count} values, got shape {values.shape}")
        off = 0
        for f in self.factors():
            f.data[...] = values[off : off + f.size].reshape(f.shape)
            off += f.size

    def effective_weight(self) -> np.ndarray:
        """``W_up`` assembled explicitly (for inspection and tests)."""
        w = self.W_b.data + self.A_inv.data @ self.B_inv.data
        if self.variant == "dual":
            w = w - self.A_sp.data @ self.B_sp.data
        return w

    # -- persistence ----------------------------------------------------------
    def to_record(self) -> dict:
        rec = {
            "variant": self.variant,
            "d": self.d,
            "r1": self.r1,
            "r2": self.r2,
            "W_b": nx.tensor_to_record(self.W_b),
            "A_inv": nx.tensor_to_record(self.A_inv),
            "B_inv": nx.tensor_to_record(self.B_inv),
        }
        if self.variant == "dual":
            rec["A_sp"] = nx.tensor_to_record(self.A_sp)
            rec["B_sp"] = nx.tensor_to_record(self.B_sp)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "AdapterSite":
        variant = rec.get("variant", "dual")
        get = nx.array_from_record
        site = cls(
            get(rec["W_b"]),
            get(rec["A_inv"]),
            get(rec["B_inv"]),
            get(rec["A_sp"]) if variant == "dual" else None,
            get(rec["B_sp"]) if variant == "dual" else None,
            variant=variant,
        )
        if (site.d, site.r1, site.r2) != (rec["d"], rec["r1"], rec["r2"]):
            raise DimensionError("adapter record dimensions disagree with stored factors")
        return site


def adapter_forward(x, site: AdapterSite) -> tuple[Tensor, DisentangledFeatures | None]:
    """Pre-activation output of the adapted layer and the two path outputs.

    Returns ``None`` in place of the features for the plain variant.
    """
    x = nx.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != site.d:
        raise DimensionError(f"input {x.shape} does not match adapter width d={site.d}")
    base = x @ site.W_b
    F_inv = (x @ site.A_inv) @ site.B_inv
    if site.variant == "plain":
        return base + F_inv, None
    F_sp = (x @ site.A_sp) @ site.B_sp
    return base + F_inv - F_sp, DisentangledFeatures(F_inv, F_sp)


def orth_loss(feats: DisentangledFeatures) -> Tensor:
    """Squared Frobenius norm of the cross-product ``F_inv^T F_sp``."""
    return nx.frobenius_norm_sq(feats.F_inv.T @ feats.F_sp)


def centering_matrix(n: int) -> Tensor:
    if n < 2:
        raise ValueError(f"centering matrix needs n >= 2, got {n}")
    return Tensor(np.eye(n) - np.full((n, n), 1.0 / n))


def median_sigma(F: np.ndarray) -> float:
    """Median pairwise distance between rows, the usual RBF bandwidth heuristic."""
    sq = np.sum(F * F, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * F @ F.T
    tri = d2[np.triu_indices_from(d2, k=1)]
    tri = tri[tri > 1e-12]
    return float(np.sqrt(np.median(tri))) if tri.size else 1.0


def gram(F: Tensor, kernel: str = "linear", sigma: float | None = None) -> Tensor:
    if kernel == "linear":
        return F @ F.T
    if kernel != "rbf":
        raise ValueError(f"unknown kernel {kernel!r}")
    if sigma is None:
        sigma = median_sigma(F.data)
    if sigma <= 0:
        raise ValueError(f"rbf bandwidth must be positive, got {sigma}")
    n = F.shape[0]
    sq = nx.row_sum(nx.square(F))  # [n×1]
    ones = Tensor(np.ones((1, n)))
    d2 = sq @ ones + (sq @ ones).T - 2.0 * (F @ F.T)
    return nx.exp(d2 * (-1.0 / (2.0 * sigma * sigma)))


def hsic(feats: DisentangledFeatures, kernel: str = "linear", sigma: float | None = None) -> Tensor:
    """Biased HSIC: ``Tr(K_inv H K_sp H) / (n-1)^2``."""
    n = feats.n
    if n < 2:
        raise ValueError(f"hsic needs at least 2 rows, got {n}")
    if kernel == "rbf" and sigma is not None and sigma <= 0:
        raise ValueError(f"rbf bandwidth must be positive, got {sigma}")
    H = centering_matrix(n)
    K_inv = gram(feats.F_inv, kernel, sigma)
    K_sp = gram(feats.F_sp, kernel, sigma)
    return nx.trace(K_inv @ H @ K_sp @ H) * (1.0 / (n - 1) ** 2)


def adapter_loss(
    feats: DisentangledFeatures,
    lambda_orth: float,
    lambda_hsic: float,
    kernel: str = "linear",
    sigma: float | None = None,
) -> Tensor:
    if lambda_orth < 0 or lambda_hsic < 0:
        raise ValueError(f"loss weights must be nonnegative, got {lambda_orth}, {lambda_hsic}")
    total = Tensor(0.0)
    if lambda_orth:
        total = total + orth_loss(feats) * lambda_orth
    if lambda_hsic:
        total = total + hsic(feats, kernel, sigma) * lambda_hsic
    return total
