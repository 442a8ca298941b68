"""Desk-scale recognition model with adapter insertion sites.

    h0 = tanh(x @ W_in)
    h_l = tanh(layer_l(h_{l-1}))      l = 1..L, layer_l is an AdapterSite when
                                      l is in ``adapter_layers``
    logits = h_L @ W_head

``h_L`` is the feature space used for class centers and alignment; its batch
mean is the generator's condition vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .adapter import AdapterSite, DisentangledFeatures, adapter_forward
from .numerics import DimensionError, Tensor


@dataclass
class ForwardOutput:
    logits: Tensor
    pooled: np.ndarray
    feats: Tensor
    adapter_feats: list[DisentangledFeatures | None]


class ToyModel:
    def __init__(self, d_in: int = 16, width: int = 32, n_hidden: int = 3, num_classes: int = 4,
                 adapter_layers=(1, 2), r1: int = 4, r2: int = 4, variant: str | None = "dual",
                 rng: np.random.Generator | None = None, adapter_rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        adapter_rng = rng if adapter_rng is None else adapter_rng
        self.d_in, self.width, self.num_classes = d_in, width, num_classes
        self.W_in = nx.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, width)), "W_in")
        self.hidden = [nx.parameter(rng.normal(0.0, 1.0 / np.sqrt(width), (width, width)), f"W_{l + 1}")
                       for l in range(n_hidden)]
        self.W_head = nx.parameter(rng.normal(0.0, 1.0 / np.sqrt(width), (width, num_classes)), "W_head")
        self.variant = variant
        self.adapter_layers = tuple(adapter_layers) if variant else ()
        for l in self.adapter_layers:
            if not 1 <= l <= n_hidden:
                raise ValueError(f"adapter layer {l} outside 1..{n_hidden}")
        self.sites: dict[int, AdapterSite] = {}
        for l in self.adapter_layers:
            self.sites[l] = AdapterSite.init(self.hidden[l - 1].data, r1, r2, adapter_rng, variant)
            # the site shares the layer weight; training updates both views
            self.sites[l].W_b = self.hidden[l - 1]

    # -- parameter groups -----------------------------------------------------
    def base_parameters(self) -> list[Tensor]:
        return [self.W_in, *self.hidden, self.W_head]

    def adapter_parameters(self) -> list[Tensor]:
        return [f for l in self.adapter_layers for f in self.sites[l].factors()]

    def site_list(self) -> list[AdapterSite]:
        return [self.sites[l] for l in self.adapter_layers]

    def freeze_base(self) -> None:
        for p in self.base_parameters():
            p.requires_grad = False

    def unfreeze_base(self) -> None:
        for p in self.base_parameters():
            p.requires_grad = True

    # -- forward --------------------------------------------------------------
    def forward(self, batch) -> ForwardOutput:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"batch shape {x.shape} does not match input width {self.d_in}")
        h = nx.tanh(Tensor(x) @ self.W_in)
        adapter_feats: list[DisentangledFeatures | None] = []
        for l, W in enumerate(self.hidden, start=1):
            if l in self.sites:
                pre, feats = adapter_forward(h, self.sites[l])
                adapter_feats.append(feats)
            else:
                pre = h @ W
            h = nx.tanh(pre)
        logits = h @ self.W_head
        return ForwardOutput(logits, h.data.mean(axis=0), h, adapter_feats)

    __call__ = forward

    def features(self, batch) -> np.ndarray:
        return self.forward(batch).feats.data

    # -- persistence ----------------------------------------------------------
    def to_record(self) -> dict:
        return {
            "version": 1,
            "d_in": self.d_in,
            "width": self.width,
            "num_classes": self.num_classes,
            "variant": self.variant,
            "adapter_layers": list(self.adapter_layers),
            "W_in": nx.tensor_to_record(self.W_in),
            "hidden": [nx.tensor_to_record(w) for w in self.hidden],
            "W_head": nx.tensor_to_record(self.W_head),
            "sites": {str(l): self.sites[l].to_record() for l in self.adapter_layers},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ToyModel":
        m = cls.__new__(cls)
        m.d_in, m.width, m.num_classes = rec["d_in"], rec["width"], rec["num_classes"]
        m.variant = rec["variant"]
        m.adapter_layers = tuple(rec["adapter_layers"])
        m.W_in = nx.tensor_from_record(rec["W_in"], requires_grad=True)
        m.hidden = [nx.tensor_from_record(r, requires_grad=True) for r in rec["hidden"]]
        m.W_head = nx.tensor_from_record(rec["W_head"], requires_grad=True)
        m.sites = {}
        for l in m.adapter_layers:
            site = AdapterSite.from_record(rec["sites"][str(l)])
            site.W_b = m.hidden[l - 1]
            m.sites[l] = site
        return m


def source_loss(logits: Tensor, labels) -> Tensor:
    return nx.cross_entropy(logits, labels)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_with_confidence(logits) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels (ties go to the lowest index) and max softmax probability."""
    p = softmax(logits)
    labels = np.argmax(p, axis=1)
    return labels, p[np.arange(p.shape[0]), labels]
