"""Continual test-time adaptation over an unlabeled stream."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..adapter import hsic, orth_loss
from ..align import ClassCenters, ConvergenceError, ot_loss
from ..model import ToyModel, predict_with_confidence
from ..numerics import NonFiniteError, Tensor
from ..paramgen import GeneratorBundle, ParamVector, generate_parameters
from ..stream import ContinualStream, DomainSpec, make_continual_stream
from .config import ExperimentConfig
from .losses import kl_align_loss
from .train import OfflineArtifacts, accuracy, adapter_regularizer, source_data

log = logging.getLogger(__name__)

LOSS_KEYS = ("L_orth", "L_HSIC", "L_OT", "L_total")


@dataclass
class AdaptState:
    model: ToyModel
    generators: GeneratorBundle | None
    centers: ClassCenters
    config: ExperimentConfig
    rng: np.random.Generator
    events: list = field(default_factory=list)
    step: int = 0


@dataclass
class StepMetrics:
    step: int
    domain: str
    predictions: list[int]
    n_confident: int
    L_orth: float = 0.0
    L_HSIC: float = 0.0
    L_OT: float = 0.0
    L_total: float = 0.0
    updated: bool = False
    regenerated: bool = False
    skipped: bool = False


def init_state(arts: OfflineArtifacts, config: ExperimentConfig) -> AdaptState:
    model = copy.deepcopy(arts.model)
    model.freeze_base()
    return AdaptState(model, arts.generators, arts.centers, config, nx.make_rng(config.seed, "adapt"))


def _alignment(state: AdaptState, feats: Tensor, labels, conf):
    cfg = state.config
    if cfg.ablation.align == "ot":
        a = cfg.align
        return ot_loss(feats, labels, conf, state.centers, a.mode, a.eps, a.tau_conf, state.events, a.max_iter)
    if cfg.ablation.align == "kl":
        return kl_align_loss(feats, labels, state.centers, conf, cfg.align.tau_conf, state.events)
    return None


def _disentangle_parts(out, config: ExperimentConfig) -> tuple[float, float]:
    orth = hs = 0.0
    for f in out.adapter_feats:
        if f is None:
            continue
        orth += orth_loss(f).item()
        hs += hsic(f, config.adapter.kernel, config.adapter.rbf_sigma).item()
    return orth, hs


def adapt_step(features, state: AdaptState, domain: str = "") -> StepMetrics:
    """Predict, take one SGD step on the adapter factors, then regenerate them.

    The step is atomic. If the loss or the regenerated parameters are not
    finite, every site is restored to its entry values and a ``skipped``
    event is logged.
    """
    cfg, model = state.config, state.model
    L = cfg.losses
    state.step += 1
    sites = model.site_list()
    saved = [s.to_vector() for s in sites]

    out = model.forward(features)
    labels, conf = predict_with_confidence(out.logits)
    m = StepMetrics(state.step, domain, labels.tolist(), int(np.sum(conf >= cfg.align.tau_conf)))
    if sites and any(f is not None for f in out.adapter_feats):
        m.L_orth, m.L_HSIC = _disentangle_parts(out, cfg)

    def rollback(reason: str) -> StepMetrics:
        for s, v in zip(sites, saved):
            s.load_vector(v)
        for p in model.adapter_parameters():
            p.grad = None
        m.skipped, m.updated, m.regenerated = True, False, False
        state.events.append({"event": "step_skipped", "step": state.step, "reason": reason})
        return m

    total = None
    try:
        if sites and L.lambda_a:
            reg = adapter_regularizer(out, cfg)
            if reg is not None:
                total = reg * L.lambda_a
        align = _alignment(state, out.feats, labels, conf)
        if align is not None:
            m.L_OT = align.item()
            if sites and L.lambda_ca and align.requires_grad:
                term = align * L.lambda_ca
                total = term if total is None else total + term
    except ConvergenceError as exc:
        return rollback(f"transport solver: {exc}")

    if total is not None and total.requires_grad:
        m.L_total = total.item()
        try:
            total.backward()
        except NonFiniteError as exc:
            return rollback(str(exc))
        params = model.adapter_parameters()
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        if not all(np.all(np.isfinite(p.grad)) for p in params):
            return rollback("non-finite gradient")
        nx.sgd_step(params, cfg.optimizer.lr, cfg.optimizer.weight_decay)
        m.updated = True

    if cfg.ablation.use_generator and sites and state.generators is not None:
        g = cfg.generator
        for i, site in enumerate(sites):
            w_opt = site.to_vector()
            gen = state.generators.sites[i]
            w_gen = generate_parameters(gen, ParamVector(i, w_opt), out.pooled, g.t0_frac, state.rng,
                                        g.deterministic).values
            w_new = g.blend * w_gen + (1.0 - g.blend) * w_opt
            if not np.all(np.isfinite(w_new)):
                return rollback("non-finite generated parameters")
            site.load_vector(w_new)
        m.regenerated = True
    return m


@dataclass
class RunRecord:
    run_id: str
    seed: int
    config: dict
    config_hash: str
    domains: list[dict]
    source_accuracy_before: float
    source_accuracy_after: float
    steps: list[dict]
    events: list[dict]
    wall_clock: float = 0.0

    @property
    def forgetting(self) -> float:
        return self.source_accuracy_before - self.source_accuracy_after

    def shifted_accuracy(self) -> float:
        return float(np.mean([d["accuracy"] for d in self.domains]))

    def domain_accuracy(self) -> dict[str, float]:
        return {d["domain"]: d["accuracy"] for d in self.domains}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def run_label(config: ExperimentConfig) -> str:
    a = config.ablation
    if a.use_adapter == "off":
        return f"direct-s{config.seed}"
    gen = "gen" if a.use_generator else "nogen"
    return f"{a.use_adapter}-{gen}-{a.align}-s{config.seed}"


def build_stream(config: ExperimentConfig) -> ContinualStream:
    _, test = source_data(config)
    s = config.stream
    seq = [DomainSpec(name, name, s.severity, config.seed) for name in s.sequence]
    return make_continual_stream(test, seq, s.batches_per_domain, s.gradual)


def run_continual(config: ExperimentConfig, artifacts: OfflineArtifacts | None = None,
                  ckpt_dir: str | Path | None = None, stream: ContinualStream | None = None,
                  run_id: str | None = None) -> RunRecord:
    """Adapt over the stream domain by domain, then back-test on clean source."""
    if artifacts is None:
        if ckpt_dir is None:
            raise ValueError("need offline artifacts or a checkpoint directory")
        artifacts = OfflineArtifacts.load(ckpt_dir, need_generator=config.ablation.use_generator
                                          and config.ablation.use_adapter != "off")
    t_start = time.perf_counter()
    stream = build_stream(config) if stream is None else stream
    state = init_state(artifacts, config)
    before = accuracy(state.model, stream.source_tail)

    per_domain: dict[str, dict] = {}
    steps = []
    for batch, y in zip(stream.batches, stream.hidden_labels):
        m = adapt_step(batch.features, state, batch.domain)
        # evaluation only: hidden labels never reach adapt_step
        correct = int(np.sum(np.asarray(m.predictions) == y))
        agg = per_domain.setdefault(batch.domain, {"correct": 0, "total": 0, "losses": []})
        agg["correct"] += correct
        agg["total"] += len(y)
        agg["losses"].append([getattr(m, k) for k in LOSS_KEYS])
        steps.append({"step": m.step, "domain": m.domain, **{k: getattr(m, k) for k in LOSS_KEYS},
                      "n_confident": m.n_confident, "skipped": m.skipped})

    domains = []
    for name in stream.domains:
        agg = per_domain[name]
        means = np.mean(agg["losses"], axis=0)
        domains.append({"domain": name, "accuracy": agg["correct"] / agg["total"],
                        **{k: float(v) for k, v in zip(LOSS_KEYS, means)}, "n_steps": len(agg["losses"])})
    after = accuracy(state.model, stream.source_tail)
    return RunRecord(
        run_id=run_id or run_label(config),
        seed=config.seed,
        config=config.to_dict(),
        config_hash=config.hash(),
        domains=domains,
        source_accuracy_before=before,
        source_accuracy_after=after,
        steps=steps,
        events=state.events,
        wall_clock=time.perf_counter() - t_start,
    )
