"""Conditional latent diffusion over adapter parameters.

Each adapter site gets its own generator. An autoencoder compresses the
flattened site factors to a short latent code. A DDPM-style denoiser is
trained on those codes, conditioned on pooled batch features. At test time
the current parameters are encoded, partially noised, denoised under the
current batch condition and decoded again.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, InvalidStateError, Tensor

MIN_SNAPSHOTS = 64
TIME_EMBED_DIM = 16


@dataclass
class ParamVector:
    site_id: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    @property
    def p(self) -> int:
        return self.values.size


@dataclass
class Snapshot:
    step: int
    params: list[ParamVector]  # one per adapter site
    condition: np.ndarray


# ---------------------------------------------------------------------------
# small dense networks
# ---------------------------------------------------------------------------

class MLP:
    """Fully connected net with tanh hidden activations and a linear output."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, zero_last: bool = False):
        self.sizes = list(sizes)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            if rng is None or (last and zero_last):
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, 1.0 / math.sqrt(max(fan_in, 1)), (fan_in, fan_out))
            self.weights.append(nx.parameter(w))
            self.biases.append(nx.parameter(np.zeros((1, fan_out))))

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def __call__(self, x) -> Tensor:
        h = nx.as_tensor(x)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = nx.bias_add(h @ w, b)
            if i < len(self.weights) - 1:
                h = nx.tanh(h)
        return h

    def infer(self, x: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < len(self.weights) - 1:
                h = np.tanh(h)
        return h

    def to_record(self) -> dict:
        return {
            "sizes": self.sizes,
            "weights": [nx.tensor_to_record(w) for w in self.weights],
            "biases": [nx.tensor_to_record(b) for b in self.biases],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MLP":
        net = cls(rec["sizes"])
        for t, r in zip(net.weights + net.biases, rec["weights"] + rec["biases"]):
            arr = nx.array_from_record(r)
            if arr.shape != t.shape:
                raise DimensionError(f"MLP record shape {arr.shape} != {t.shape}")
            t.data[...] = arr
        return net


class Autoencoder:
    """Parameter autoencoder ``R^p -> R^z -> R^p``.

    Inputs are shifted by ``center`` and divided by the scalar ``scale``
    before encoding (and the reverse after decoding); both are fitted from
    the snapshot set. Defaults (0 and 1) with zero biases map 0 to 0.
    """

    def __init__(self, p: int, z_dim: int, hidden: int = 64, rng: np.random.Generator | None = None):
        if not z_dim < p:
            raise ValueError(f"latent size {z_dim} must be smaller than parameter size {p}")
        self.p, self.z_dim = p, z_dim
        self.encoder = MLP([p, hidden, z_dim], rng)
        self.decoder = MLP([z_dim, hidden, p], rng)
        self.center = np.zeros(p)
        self.scale = 1.0

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def _check(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape[-1] != self.p:
            raise DimensionError(f"parameter vector length {w.shape[-1]} != registered p={self.p}")
        return w

    def encode(self, w) -> np.ndarray:
        w = self._check(w)
        z = self.encoder.infer((w - self.center) / self.scale)
        return z[0] if w.ndim == 1 else z

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.z_dim:
            raise DimensionError(f"latent length {z.shape[-1]} != z_dim={self.z_dim}")
        w = self.decoder.infer(z) * self.scale + self.center
        return w[0] if z.ndim == 1 else w

    def reconstruct(self, w) -> Tensor:
        """Differentiable ``D(E(w))`` for a batch ``[N×p]`` or a single vector."""
        w = np.atleast_2d(self._check(w))
        x = (w - self.center) / self.scale
        out = self.decoder(self.encoder(Tensor(x)))
        return nx.bias_add(out * self.scale, Tensor(self.center[None, :]))

    def to_record(self) -> dict:
        return {
            "p": self.p,
            "z_dim": self.z_dim,
            "encoder": self.encoder.to_record(),
            "decoder": self.decoder.to_record(),
            "center": self.center.tolist(),
            "scale": self.scale,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Autoencoder":
        ae = cls.__new__(cls)
        ae.p, ae.z_dim = rec["p"], rec["z_dim"]
        ae.encoder = MLP.from_record(rec["encoder"])
        ae.decoder = MLP.from_record(rec["decoder"])
        ae.center = np.asarray(rec["center"], dtype=np.float64)
        ae.scale = float(rec["scale"])
        return ae


def recon_loss(ae, w) -> Tensor:
    """``||w - D(E(w))||^2`` summed over entries (and over rows for a batch)."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    return nx.frobenius_norm_sq(nx.sub(Tensor(w), ae.reconstruct(w)))


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

class DiffusionSchedule:
    """Linear variance schedule; steps are indexed ``t = 1..T``."""

    def __init__(self, T: int = 100, beta_start: float | None = None, beta_end: float | None = None):
        if T < 1:
            raise ValueError(f"T must be positive, got {T}")
        # Endpoints default to the 1000-step DDPM range rescaled to T steps.
        factor = 1000.0 / T
        beta_start = 1e-4 * factor if beta_start is None else beta_start
        beta_end = min(0.02 * factor, 0.999) if beta_end is None else beta_end
        self.T = T
        self.betas = np.linspace(beta_start, beta_end, T)
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def _idx(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t - 1

    def beta(self, t: int) -> float:
        return float(self.betas[self._idx(t)])

    def abar(self, t: int) -> float:
        return float(self.alpha_bar[self._idx(t)])

    def posterior_variance(self, t: int) -> float:
        i = self._idx(t)
        prev = self.alpha_bar[i - 1] if i > 0 else 1.0
        return float(self.betas[i] * (1.0 - prev) / (1.0 - self.alpha_bar[i]))

    def to_record(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}

    @classmethod
    def from_record(cls, rec: dict) -> "DiffusionSchedule":
        return cls(rec["T"], rec["beta_start"], rec["beta_end"])


def q_sample(z0, t: int, schedule: DiffusionSchedule, noise) -> np.ndarray:
    """Closed-form forward marginal ``sqrt(abar_t) z0 + sqrt(1 - abar_t) noise``."""
    ab = schedule.abar(t)
    z0 = np.asarray(z0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if z0.shape != noise.shape:
        raise DimensionError(f"noise shape {noise.shape} != latent shape {z0.shape}")
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise


def q_step(z_prev, t: int, schedule: DiffusionSchedule, noise) -> np.ndarray:
    """One forward transition ``z_t ~ N(sqrt(1 - beta_t) z_{t-1}, beta_t I)``."""
    b = schedule.beta(t)
    return math.sqrt(1.0 - b) * np.asarray(z_prev) + math.sqrt(b) * np.asarray(noise)


def time_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; returns ``[len(t) × dim]``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """Noise predictor over ``[z_t, condition, embed(t)]``."""

    def __init__(self, z_dim: int, c_dim: int, hidden: int = 64, rng: np.random.Generator | None = None):
        self.z_dim, self.c_dim = z_dim, c_dim
        self.net = MLP([z_dim + c_dim + TIME_EMBED_DIM, hidden, hidden, z_dim], rng)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def _inputs(self, z_t, cond, t) -> np.ndarray:
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        n = z_t.shape[0]
        if z_t.shape[1] != self.z_dim:
            raise DimensionError(f"latent width {z_t.shape[1]} != z_dim={self.z_dim}")
        cond = np.asarray(cond, dtype=np.float64).reshape(-1, self.c_dim) if self.c_dim else np.zeros((n, 0))
        if cond.shape[0] == 1 and n > 1:
            cond = np.repeat(cond, n, axis=0)
        t = np.broadcast_to(np.asarray(t), (n,))
        return np.concatenate([z_t, cond, time_embedding(t)], axis=1)

    def __call__(self, z_t, cond, t) -> Tensor:
        return self.net(Tensor(self._inputs(z_t, cond, t)))

    def predict(self, z_t, cond, t: int) -> np.ndarray:
        out = self.net.infer(self._inputs(z_t, cond, t))
        return out[0] if np.ndim(z_t) == 1 else out

    def to_record(self) -> dict:
        return {"z_dim": self.z_dim, "c_dim": self.c_dim, "net": self.net.to_record()}

    @classmethod
    def from_record(cls, rec: dict) -> "Denoiser":
        den = cls.__new__(cls)
        den.z_dim, den.c_dim = rec["z_dim"], rec["c_dim"]
        den.net = MLP.from_record(rec["net"])
        return den


def diffusion_loss(denoiser, z0, cond, schedule: DiffusionSchedule, rng: np.random.Generator) -> Tensor:
    """Noise-prediction loss at a uniformly drawn step.

    For a batch ``z0 [N×z]`` every row draws its own step and noise and the
    result is the mean over rows of ``||eps - eps_hat||^2``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    single = z0.ndim == 1
    z0 = np.atleast_2d(z0)
    n = z0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(z0.shape)
    ab = schedule.alpha_bar[t - 1][:, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    eps_hat = denoiser(z_t, cond, t)
    err = nx.frobenius_norm_sq(nx.sub(Tensor(eps), eps_hat))
    return err if single else err * (1.0 / n)


class LatentDiffusion:
    """Denoiser plus schedule plus per-dimension latent standardization."""

    def __init__(self, z_dim: int, c_dim: int, schedule: DiffusionSchedule, hidden: int = 64,
                 rng: np.random.Generator | None = None):
        self.schedule = schedule
        self.denoiser = Denoiser(z_dim, c_dim, hidden, rng)
        self.z_mean = np.zeros(z_dim)
        self.z_std = np.ones(z_dim)
        self.trained = False

    @property
    def z_dim(self) -> int:
        return self.denoiser.z_dim

    def fit(self, Z, C, steps: int, lr: float, batch_size: int, rng: np.random.Generator) -> list[float]:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        C = np.asarray(C, dtype=np.float64).reshape(Z.shape[0], -1)
        self.z_mean = Z.mean(axis=0)
        self.z_std = np.maximum(Z.std(axis=0), 1e-6)
        Zn = (Z - self.z_mean) / self.z_std
        opt = nx.Adam(self.denoiser.parameters(), lr=lr)
        losses = []
        for i in range(steps):
            opt.lr = lr * (1.0 - i / steps)  # linear decay to zero
            idx = rng.integers(0, Zn.shape[0], size=batch_size)
            loss = diffusion_loss(self.denoiser, Zn[idx], C[idx], self.schedule, rng)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        self.trained = True
        return losses

    def sample(self, cond, rng: np.random.Generator, z_init=None, t0: int | None = None,
               deterministic: bool = False, n: int | None = None) -> np.ndarray:
        """Reverse (ancestral) sampling from step ``t0`` down to 1.

        With ``z_init`` the chain starts from ``q_sample(z_init, t0)``
        (anchored generation); otherwise from pure noise at ``t0 = T``.
        ``deterministic`` drops the posterior noise of every reverse step but
        keeps the initial forward noise (drawn from ``rng``).
        """
        if not self.trained:
            raise InvalidStateError("latent diffusion has not been trained")
        sch = self.schedule
        t0 = sch.T if t0 is None else int(t0)
        if z_init is None:
            shape = (n, self.z_dim) if n is not None else (self.z_dim,)
            z = rng.standard_normal(shape)
            if t0 == 0:
                return z * self.z_std + self.z_mean
        else:
            zn = (np.asarray(z_init, dtype=np.float64) - self.z_mean) / self.z_std
            if t0 == 0:
                return np.array(z_init, dtype=np.float64)
            z = q_sample(zn, t0, sch, rng.standard_normal(zn.shape))
        for t in range(t0, 0, -1):
            eps_hat = self.denoiser.predict(z, cond, t)
            b, ab = sch.beta(t), sch.abar(t)
            z = (z - b / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - b)
            if t > 1 and not deterministic:
                z = z + math.sqrt(sch.posterior_variance(t)) * rng.standard_normal(z.shape)
        return z * self.z_std + self.z_mean

    def to_record(self) -> dict:
        return {
            "schedule": self.schedule.to_record(),
            "denoiser": self.denoiser.to_record(),
            "z_mean": self.z_mean.tolist(),
            "z_std": self.z_std.tolist(),
            "trained": self.trained,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LatentDiffusion":
        ld = cls.__new__(cls)
        ld.schedule = DiffusionSchedule.from_record(rec["schedule"])
        ld.denoiser = Denoiser.from_record(rec["denoiser"])
        ld.z_mean = np.asarray(rec["z_mean"], dtype=np.float64)
        ld.z_std = np.asarray(rec["z_std"], dtype=np.float64)
        ld.trained = bool(rec["trained"])
        return ld


# ---------------------------------------------------------------------------
# per-site generator
# ---------------------------------------------------------------------------

def fit_autoencoder(ae: Autoencoder, W, steps: int, lr: float, rng: np.random.Generator,
                    batch_size: int | None = None) -> list[float]:
    """Train on snapshot rows ``W [N×p]``; returns mean per-entry error per step."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    ae.center = W.mean(axis=0)
    ae.scale = max(float((W - ae.center).std()), 1e-8)
    opt = nx.Adam(ae.parameters(), lr=lr)
    curve = []
    for _ in range(steps):
        rows = W if batch_size is None else W[rng.integers(0, W.shape[0], size=batch_size)]
        # optimize the standardized per-entry error; report it in raw units
        loss = recon_loss(ae, rows) * (1.0 / (rows.size * ae.scale**2))
        curve.append(loss.item() * ae.scale**2)
        loss.backward()
        opt.step()
    return curve


class SiteGenerator:
    def __init__(self, site_id: int, p: int, z_dim: int, c_dim: int, schedule: DiffusionSchedule,
                 rng: np.random.Generator | None = None, hidden: int = 64):
        self.site_id = site_id
        self.ae = Autoencoder(p, z_dim, hidden, rng)
        self.diffusion = LatentDiffusion(z_dim, c_dim, schedule, hidden, rng)
        self.recon_error: float | None = None

    @property
    def trained(self) -> bool:
        return self.diffusion.trained

    def encode(self, w: ParamVector) -> np.ndarray:
        self._check_site(w)
        return self.ae.encode(w.values)

    def decode(self, z) -> ParamVector:
        return ParamVector(self.site_id, self.ae.decode(z))

    def _check_site(self, w: ParamVector) -> None:
        if w.site_id != self.site_id:
            raise ValueError(f"site {w.site_id} is not registered with generator for site {self.site_id}")

    def to_record(self) -> dict:
        return {
            "site_id": self.site_id,
            "ae": self.ae.to_record(),
            "diffusion": self.diffusion.to_record(),
            "recon_error": self.recon_error,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SiteGenerator":
        g = cls.__new__(cls)
        g.site_id = rec["site_id"]
        g.ae = Autoencoder.from_record(rec["ae"])
        g.diffusion = LatentDiffusion.from_record(rec["diffusion"])
        g.recon_error = rec.get("recon_error")
        return g


def generate_parameters(gen: SiteGenerator, w_current: ParamVector, cond, t0_frac: float,
                        rng: np.random.Generator, deterministic: bool = False) -> ParamVector:
    """Encode, noise to ``ceil(t0_frac * T)``, denoise under ``cond``, decode."""
    if not gen.trained:
        raise InvalidStateError(f"generator for site {gen.site_id} is untrained")
    if not 0.0 <= t0_frac <= 1.0:
        raise ValueError(f"t0_frac must lie in [0, 1], got {t0_frac}")
    T = gen.diffusion.schedule.T
    t0 = math.ceil(t0_frac * T - 1e-9)
    z0 = gen.encode(w_current)
    z_hat = gen.diffusion.sample(cond, rng, z_init=z0, t0=t0, deterministic=deterministic)
    return gen.decode(z_hat)


class InsufficientSnapshotsError(RuntimeError):
    pass


class SnapshotCollector:
    """Records (params, condition) pairs every ``every_k`` steps after ``warmup``."""

    def __init__(self, every_k: int, warmup: int):
        if every_k < 1:
            raise ValueError("every_k must be positive")
        self.every_k, self.warmup = every_k, warmup
        self.snapshots: list[Snapshot] = []

    def due(self, step: int) -> bool:
        return step > self.warmup and (step - self.warmup) % self.every_k == 0

    def observe(self, step: int, params: list[ParamVector], condition) -> bool:
        if not self.due(step):
            return False
        self.snapshots.append(
            Snapshot(step, [ParamVector(p.site_id, p.values.copy()) for p in params],
                     np.array(condition, dtype=np.float64))
        )
        return True

    def require(self, minimum: int = MIN_SNAPSHOTS) -> list[Snapshot]:
        if len(self.snapshots) < minimum:
            raise InsufficientSnapshotsError(
                f"generator training needs at least {minimum} snapshots, collected {len(self.snapshots)}"
            )
        return self.snapshots


def collect_snapshots(training_run, every_k: int, warmup: int) -> list[Snapshot]:
    """Drive ``training_run``, an iterable of ``(step, params, condition)``."""
    col = SnapshotCollector(every_k, warmup)
    for step, params, cond in training_run:
        col.observe(step, params, cond)
    return col.snapshots


@dataclass
class GeneratorBundle:
    schedule: DiffusionSchedule
    sites: list[SiteGenerator]
    z_dim: int
    t0_frac: float
    meta: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "version": 1,
            "schedule": self.schedule.to_record(),
            "z_dim": self.z_dim,
            "t0_frac": self.t0_frac,
            "sites": [g.to_record() for g in self.sites],
            "meta": self.meta,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GeneratorBundle":
        return cls(
            DiffusionSchedule.from_record(rec["schedule"]),
            [SiteGenerator.from_record(r) for r in rec["sites"]],
            rec["z_dim"],
            rec["t0_frac"],
            rec.get("meta", {}),
        )

    def weights_fingerprint(self) -> np.ndarray:
        parts = []
        for g in self.sites:
            for t in g.ae.parameters() + g.diffusion.denoiser.parameters():
                parts.append(t.data.reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)
