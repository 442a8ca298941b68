"""Class-centered optimal-transport alignment.

Target instance features are pulled toward frozen source class centers. The
transport plan is solved without gradient tracking each step. The loss
``sum(P * C(x))`` is then differentiated through the cost only.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import numerics as nx
from .numerics import DimensionError, Tensor


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass
class ClassCenters:
    centers: np.ndarray  # [C_kept × d]
    counts: np.ndarray  # [C_kept]
    classes: np.ndarray  # class ids of the rows
    num_classes: int
    variances: np.ndarray | None = None  # per-class diagonal variances
    dropped: list[int] = field(default_factory=list)

    @property
    def d_feat(self) -> int:
        return self.centers.shape[1]

    def row_of(self, label: int) -> int | None:
        hits = np.flatnonzero(self.classes == label)
        return int(hits[0]) if hits.size else None

    def to_record(self) -> dict:
        rec = {
            "C": self.num_classes,
            "d_feat": self.d_feat,
            "centers": self.centers.tolist(),
            "counts": self.counts.astype(int).tolist(),
            "classes": self.classes.astype(int).tolist(),
            "dropped": list(self.dropped),
        }
        if self.variances is not None:
            rec["variances"] = self.variances.tolist()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ClassCenters":
        var = rec.get("variances")
        return cls(
            np.asarray(rec["centers"], dtype=np.float64).reshape(-1, rec["d_feat"]),
            np.asarray(rec["counts"], dtype=np.int64),
            np.asarray(rec.get("classes", range(rec["C"])), dtype=np.int64),
            rec["C"],
            None if var is None else np.asarray(var, dtype=np.float64),
            list(rec.get("dropped", [])),
        )


def compute_class_centers(features, labels, num_classes: int | None = None) -> ClassCenters:
    """Per-class mean (and diagonal variance) of source features.

    Classes with no samples are dropped with a ``RuntimeWarning`` and listed
    in ``dropped``.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DimensionError(f"features {X.shape} and labels {y.shape} disagree")
    C = int(y.max()) + 1 if num_classes is None else num_classes
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    centers, counts, variances, kept, dropped = [], [], [], [], []
    for c in range(C):
        rows = X[y == c]
        if rows.shape[0] == 0:
            dropped.append(c)
            continue
        centers.append(rows.mean(axis=0))
        variances.append(rows.var(axis=0))
        counts.append(rows.shape[0])
        kept.append(c)
    if dropped:
        warnings.warn(f"classes without source samples dropped: {dropped}", RuntimeWarning, stacklevel=2)
    d = X.shape[1]
    return ClassCenters(
        np.asarray(centers).reshape(-1, d),
        np.asarray(counts, dtype=np.int64),
        np.asarray(kept, dtype=np.int64),
        C,
        np.asarray(variances).reshape(-1, d),
        dropped,
    )


def transport_cost(x, mu) -> float:
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if x.shape != mu.shape:
        raise DimensionError(f"cost operands differ in shape: {x.shape} vs {mu.shape}")
    diff = x - mu
    return float(diff @ diff)


def cost_matrix(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - M[None, :, :]) ** 2).sum(axis=2)


@dataclass
class TransportPlan:
    P: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    def objective(self, cost) -> float:
        return float(np.sum(self.P * np.asarray(cost)))


def _marginal_residual(P, a, b) -> float:
    return float(max(np.abs(P.sum(axis=1) - a).max(), np.abs(P.sum(axis=0) - b).max()))


def solve_transport(cost, a, b, eps: float = 0.05, max_iter: int = 200, tol: float = 1e-9,
                    anneal: bool = True) -> TransportPlan:
    """Entropic OT by log-domain Sinkhorn.

    With ``anneal`` the regularization starts at the cost scale and is
    divided down to ``eps`` geometrically, warm-starting the dual potentials;
    ``max_iter`` bounds the iterations spent at the final ``eps``.
    Zero-mass rows/columns are removed before solving and restored as zeros.
    """
    cost = np.asarray(cost, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, m = cost.shape
    if a.shape != (n,) or b.shape != (m,):
        raise DimensionError(f"marginals {a.shape}, {b.shape} do not match cost {cost.shape}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if (a < 0).any() or (b < 0).any():
        raise ValueError("marginals must be nonnegative")
    if abs(a.sum() - 1.0) > 1e-9 or abs(b.sum() - 1.0) > 1e-9:
        raise ValueError(f"marginal masses must both equal 1, got {a.sum()} and {b.sum()}")

    ri, ci = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    Cs, la, lb = cost[np.ix_(ri, ci)], np.log(a[ri]), np.log(b[ci])
    f = np.zeros(ri.size)
    g = np.zeros(ci.size)

    eps_seq = [eps]
    if anneal:
        e = max(float(np.ptp(Cs)) if Cs.size else 0.0, eps)
        seq = []
        while e > eps * 1.0001:
            seq.append(e)
            e /= 4.0
        eps_seq = seq + [eps]

    iters, res = 0, np.inf
    for k, e in enumerate(eps_seq):
        final = k == len(eps_seq) - 1
        budget = max_iter if final else 50
        for it in range(budget):
            f = e * la - e * logsumexp((g[None, :] - Cs) / e, axis=1)
            g = e * lb - e * logsumexp((f[:, None] - Cs) / e, axis=0)
            iters += 1
            if final and (it % 10 == 9 or it == budget - 1):
                Pk = np.exp((f[:, None] + g[None, :] - Cs) / e)
                res = _marginal_residual(Pk, a[ri], b[ci])
                if res < tol:
                    break
    Pk = np.exp((f[:, None] + g[None, :] - Cs) / eps)
    res = _marginal_residual(Pk, a[ri], b[ci])
    if res >= tol:
        raise ConvergenceError(f"Sinkhorn did not converge in {max_iter} iterations (residual {res:.3e})", res)
    P = np.zeros((n, m))
    P[np.ix_(ri, ci)] = Pk
    return TransportPlan(P, a, b, iters, res)


def _cost_tensor(X: Tensor, M: np.ndarray) -> Tensor:
    """Differentiable squared-distance matrix ``[n×k]`` between rows of X and M."""
    n, k = X.shape[0], M.shape[0]
    sq = nx.row_sum(nx.square(X)) @ Tensor(np.ones((1, k)))
    cross = X @ Tensor(M.T)
    msq = Tensor(np.ones((n, 1))) @ Tensor((M * M).sum(axis=1)[None, :])
    return sq - cross * 2.0 + msq


def ot_plan(X: np.ndarray, pseudo_labels, centers: ClassCenters, mode: str, eps: float,
            max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Plan over (instance, center row) for instances whose label has a center.

    Returns ``(P, keep)``, where ``keep`` indexes the rows of ``X`` used.
    """
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    rows = np.array([centers.row_of(int(c)) if centers.row_of(int(c)) is not None else -1 for c in labels],
                    dtype=np.int64)
    keep = np.flatnonzero(rows >= 0)
    n, k = keep.size, centers.centers.shape[0]
    if n == 0:
        return np.zeros((0, k)), keep
    a = np.full(n, 1.0 / n)
    if mode == "per_class":
        P = np.zeros((n, k))
        P[np.arange(n), rows[keep]] = a
        return P, keep
    if mode != "joint":
        raise ValueError(f"unknown OT mode {mode!r}")
    b = np.bincount(rows[keep], minlength=k).astype(np.float64) / n
    plan = solve_transport(cost_matrix(X[keep], centers.centers), a, b, eps, max_iter=max_iter, tol=1e-6)
    return plan.P, keep


def ot_loss(target_feats: Tensor, pseudo_labels, confidences, centers: ClassCenters, mode: str = "per_class",
            eps: float = 0.05, tau_conf: float = 0.8, events: list | None = None, max_iter: int = 200) -> Tensor:
    """Transport cost of confident target instances to their source centers.

    Only instances with confidence at least ``tau_conf`` take part, each with
    mass ``1 / n_confident``. In ``per_class`` mode each instance is sent to
    the center of its own pseudo-label. In ``joint`` mode a single plan is
    solved over all confident instances and all centers, with the center
    marginal set by pseudo-label frequency. The plan is held constant under
    differentiation.
    """
    target_feats = nx.as_tensor(target_feats)
    conf = np.asarray(confidences, dtype=np.float64)
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    if target_feats.shape[1] != centers.d_feat:
        raise DimensionError(f"feature width {target_feats.shape[1]} != center width {centers.d_feat}")
    sel = np.flatnonzero(conf >= tau_conf)
    if sel.size:
        P, keep = ot_plan(target_feats.data[sel], labels[sel], centers, mode, eps, max_iter)
        sel = sel[keep]
    if sel.size == 0:
        if events is not None:
            events.append({"event": "ot_skipped", "reason": "no confident instances"})
        return Tensor(0.0)
    C = _cost_tensor(nx.select_rows(target_feats, sel), centers.centers)
    return nx.reduce_sum(nx.mul(Tensor(P), C))
