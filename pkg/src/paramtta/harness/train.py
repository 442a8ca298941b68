"""Offline (source-domain) training of the model, generator and class centers."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..adapter import adapter_loss
from ..align import ClassCenters, compute_class_centers
from ..model import ToyModel, predict_with_confidence, source_loss
from ..paramgen import (
    DiffusionSchedule,
    GeneratorBundle,
    ParamVector,
    SiteGenerator,
    SnapshotCollector,
    fit_autoencoder,
)
from ..stream import LabeledBatch, make_source, stack
from .config import ExperimentConfig

log = logging.getLogger(__name__)

MODEL_FILE = "model.json"
GENERATOR_FILE = "generator.json"
CENTERS_FILE = "centers.json"

_VARIANT = {"dual": "dual", "plain_lora": "plain", "off": None}


@dataclass
class OfflineArtifacts:
    model: ToyModel
    generators: GeneratorBundle | None
    centers: ClassCenters
    metrics: dict = field(default_factory=dict)

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / MODEL_FILE).write_text(json.dumps(self.model.to_record()))
        (out / CENTERS_FILE).write_text(json.dumps(self.centers.to_record()))
        if self.generators is not None:
            (out / GENERATOR_FILE).write_text(json.dumps(self.generators.to_record()))
        (out / "offline_metrics.json").write_text(json.dumps(self.metrics, indent=2))
        return out

    @classmethod
    def load(cls, ckpt_dir: str | Path, need_generator: bool = False) -> "OfflineArtifacts":
        ckpt = Path(ckpt_dir)
        for name in (MODEL_FILE, CENTERS_FILE) + ((GENERATOR_FILE,) if need_generator else ()):
            if not (ckpt / name).is_file():
                raise FileNotFoundError(f"missing checkpoint: {ckpt / name}")
        model = ToyModel.from_record(json.loads((ckpt / MODEL_FILE).read_text()))
        centers = ClassCenters.from_record(json.loads((ckpt / CENTERS_FILE).read_text()))
        gen = None
        if (ckpt / GENERATOR_FILE).is_file():
            gen = GeneratorBundle.from_record(json.loads((ckpt / GENERATOR_FILE).read_text()))
        metrics_path = ckpt / "offline_metrics.json"
        metrics = json.loads(metrics_path.read_text()) if metrics_path.is_file() else {}
        return cls(model, gen, centers, metrics)


def build_model(config: ExperimentConfig) -> ToyModel:
    m, a = config.model, config.adapter
    return ToyModel(
        d_in=m.d_in,
        width=m.width,
        n_hidden=m.n_hidden,
        num_classes=m.num_classes,
        adapter_layers=a.sites,
        r1=a.r1,
        r2=a.r2,
        variant=_VARIANT[config.ablation.use_adapter],
        rng=nx.make_rng(config.seed, "model"),
        adapter_rng=nx.make_rng(config.seed, "adapter"),
    )


def source_data(config: ExperimentConfig):
    o, m = config.offline, config.model
    return make_source(config.seed, o.n_train, o.n_test, m.num_classes, m.d_in,
                       batch_size=config.optimizer.batch_size, scale=o.source_scale)


def accuracy(model: ToyModel, batches: list[LabeledBatch]) -> float:
    X, y = stack(batches)
    pred, _ = predict_with_confidence(model.forward(X).logits)
    return float(np.mean(pred == y))


def adapter_regularizer(out, config: ExperimentConfig):
    """Sum of the per-site disentanglement losses, or ``None`` if inactive."""
    L = config.losses
    feats = [f for f in out.adapter_feats if f is not None]
    if not feats or not (L.lambda_orth or L.lambda_hsic):
        return None
    total = None
    for f in feats:
        term = adapter_loss(f, L.lambda_orth, L.lambda_hsic, config.adapter.kernel, config.adapter.rbf_sigma)
        total = term if total is None else total + term
    return total


def site_vectors(model: ToyModel) -> list[ParamVector]:
    return [ParamVector(i, s.to_vector()) for i, s in enumerate(model.site_list())]


def train_source_model(config: ExperimentConfig, train: list[LabeledBatch]):
    """Phase 1: supervised source training with adapter regularization.

    Returns the model and the snapshot collector filled along the way.
    """
    o, g = config.offline, config.generator
    model = build_model(config)
    X, y = stack(train)
    params = model.base_parameters() + model.adapter_parameters()
    opt = nx.Adam(params, lr=o.lr)
    rng = nx.make_rng(config.seed, "offline", "batches")
    collector = SnapshotCollector(g.snapshot_every, g.warmup)
    curve = []
    for step in range(1, o.steps + 1):
        idx = rng.integers(0, X.shape[0], size=o.batch_size)
        out = model.forward(X[idx])
        loss = source_loss(out.logits, y[idx])
        reg = adapter_regularizer(out, config)
        if reg is not None and config.losses.lambda_a:
            loss = loss + reg * config.losses.lambda_a
        loss.backward()
        opt.step()
        curve.append(loss.item())
        if model.sites:
            collector.observe(step, site_vectors(model), out.pooled)
    return model, collector, curve


def train_generators(config: ExperimentConfig, collector: SnapshotCollector) -> GeneratorBundle:
    """Phase 2: one autoencoder + latent denoiser per site, model frozen."""
    g, o = config.generator, config.offline
    snaps = collector.require()
    schedule = DiffusionSchedule(g.T, g.beta_start, g.beta_end)
    conds = np.stack([s.condition for s in snaps])
    sites = []
    for site_id in range(len(snaps[0].params)):
        W = np.stack([s.params[site_id].values for s in snaps])
        gen = SiteGenerator(site_id, W.shape[1], g.z_dim, conds.shape[1], schedule,
                            rng=nx.make_rng(config.seed, "generator", site_id), hidden=g.hidden)
        fit_rng = nx.make_rng(config.seed, "generator", "fit", site_id)
        fit_autoencoder(gen.ae, W, o.ae_steps, o.ae_lr, fit_rng)
        recon = gen.ae.decode(gen.ae.encode(W))
        gen.recon_error = float(np.mean(np.sum((W - recon) ** 2, axis=1) / W.shape[1]))
        Z = gen.ae.encode(W)
        gen.diffusion.fit(Z, conds, o.diff_steps, o.diff_lr, o.diff_batch_size, fit_rng)
        sites.append(gen)
    return GeneratorBundle(schedule, sites, g.z_dim, g.t0_frac, {"n_snapshots": len(snaps)})


def offline_train(config: ExperimentConfig, out_dir: str | Path | None = None) -> OfflineArtifacts:
    train, test = source_data(config)
    model, collector, curve = train_source_model(config, train)
    model.freeze_base()
    metrics = {
        "source_train_accuracy": accuracy(model, train),
        "source_test_accuracy": accuracy(model, test),
        "final_train_loss": float(np.mean(curve[-50:])),
        "n_snapshots": len(collector.snapshots),
    }
    log.info("phase 1 done: source test accuracy %.4f", metrics["source_test_accuracy"])

    generators = None
    if model.sites:
        generators = train_generators(config, collector)
        metrics["recon_error"] = [gen.recon_error for gen in generators.sites]
        log.info("phase 2 done: recon error %s", metrics["recon_error"])

    X, y = stack(train)
    centers = compute_class_centers(model.features(X), y, config.model.num_classes)
    arts = OfflineArtifacts(model, generators, centers, metrics)
    if out_dir is not None:
        arts.save(out_dir)
    return arts
