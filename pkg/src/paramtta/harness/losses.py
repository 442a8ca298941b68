"""KL alignment baseline used by the ``align: kl`` ablation."""
from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..align import ClassCenters
from ..numerics import Tensor

VAR_FLOOR = 1e-6


def gaussian_kl_diag(mu_t: Tensor, var_t: Tensor, mu_s: np.ndarray, var_s: np.ndarray) -> Tensor:
    """``KL(N(mu_t, var_t) || N(mu_s, var_s))`` for diagonal Gaussians, summed over dims."""
    var_s = np.maximum(np.asarray(var_s, dtype=np.float64), VAR_FLOOR).reshape(mu_t.shape)
    inv_s = Tensor(1.0 / var_s)
    diff = mu_t - Tensor(np.asarray(mu_s, dtype=np.float64).reshape(mu_t.shape))
    terms = (Tensor(np.log(var_s)) - nx.log(var_t)) + nx.mul(var_t + nx.square(diff), inv_s) - 1.0
    return nx.reduce_sum(terms) * 0.5


def kl_align_loss(target_feats: Tensor, pseudo_labels, centers: ClassCenters, confidences=None,
                  tau_conf: float = 0.0, events: list | None = None) -> Tensor:
    """Mean over pseudo-labelled classes of the KL from the target batch's
    per-class diagonal Gaussian to the source class Gaussian."""
    if centers.variances is None:
        raise ValueError("class centers carry no variances; recompute them from source features")
    target_feats = nx.as_tensor(target_feats)
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    conf = np.ones(labels.shape) if confidences is None else np.asarray(confidences, dtype=np.float64)
    keep = conf >= tau_conf
    terms = []
    for c in np.unique(labels[keep]):
        row = centers.row_of(int(c))
        if row is None:
            continue
        idx = np.flatnonzero(keep & (labels == c))
        X = nx.select_rows(target_feats, idx)
        mu = nx.col_mean(X)
        centered = X - Tensor(np.ones((idx.size, 1))) @ mu
        var = nx.clamp_min(nx.col_mean(nx.square(centered)), VAR_FLOOR)
        terms.append(gaussian_kl_diag(mu, var, centers.centers[row], centers.variances[row]))
    if not terms:
        if events is not None:
            events.append({"event": "kl_skipped", "reason": "no confident instances"})
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))
