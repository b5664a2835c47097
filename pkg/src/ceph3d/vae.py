"""Variational autoencoder over landmark vectors and the reference-to-latent map.

The full variant encodes all 90 landmarks (270 values) into d=9 latents; the
cranial variant encodes the 46 cranial landmarks (138 values) into 15. A
separate fully connected map sends a small reference vector to the latent
mean of the full configuration, so ``decode(phi(refs))`` completes the set.

Inputs are standardized inside the models with fixed per-coordinate
statistics of the training set; losses are still measured in millimetres.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import AdamState, Dense, DivergenceError, ReLU, Sequential, adam_step, mlp

SIGMA_MIN, SIGMA_MAX = 1e-6, 1e6
PAPER_KL = "paper"
STANDARD_KL = "standard"


def kl_divergence(mu, sigma, variant: str = PAPER_KL) -> float:
    """KL term of the training loss.

    ``paper``: 0.5 * sum(mu^2 + sigma^2 - log(sigma) - 1), exactly as printed
    in the source method (note log sigma, not log sigma^2).
    ``standard``: 0.5 * sum(mu^2 + sigma^2 - log(sigma^2) - 1).
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu.shape != sigma.shape:
        raise ValueError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    log_term = np.log(sigma) if variant == PAPER_KL else 2.0 * np.log(sigma)
    if variant not in (PAPER_KL, STANDARD_KL):
        raise ValueError(f"unknown KL variant {variant!r}")
    return float(0.5 * np.sum(mu ** 2 + sigma ** 2 - log_term - 1.0))


def _kl_grads(mu, sigma, in_range, variant):
    """Gradients of the summed KL w.r.t. mu and log(sigma)."""
    coeff = 0.5 if variant == PAPER_KL else 1.0
    return mu, np.where(in_range, sigma ** 2 - coeff, 0.0)


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, floor: float = 1e-3) -> "Standardizer":
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), floor))

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def invert(self, y):
        return np.asarray(y, dtype=np.float64) * self.scale + self.mean

    def to_json(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["scale"], dtype=np.float64))


@dataclass
class VaeConfig:
    latent_dim: int = 9
    hidden: tuple[int, ...] = (128, 64, 32)
    epochs: int = 45000
    lr: float = 1e-3
    seed: int = 0
    kl: str = PAPER_KL


class VaeModel:
    def __init__(self, input_dim: int, cfg: VaeConfig, standardizer: Standardizer | None = None):
        if cfg.latent_dim >= input_dim:
            raise ValueError("latent dimension must be smaller than the input dimension")
        self.input_dim = int(input_dim)
        self.cfg = cfg
        ss = np.random.SeedSequence([int(cfg.seed), 11]).spawn(4)
        seeds = [int(s.generate_state(1)[0]) for s in ss]
        enc_layers = []
        for w in cfg.hidden:
            enc_layers += [Dense(int(w)), ReLU()]
        self.encoder = Sequential((self.input_dim,), enc_layers, seed=seeds[0])
        h = int(cfg.hidden[-1])
        self.mu_head = Sequential((h,), [Dense(cfg.latent_dim)], seed=seeds[1])
        self.logsig_head = Sequential((h,), [Dense(cfg.latent_dim)], seed=seeds[2])
        self.decoder = mlp([cfg.latent_dim, *reversed(cfg.hidden), self.input_dim], seed=seeds[3])
        self.std = standardizer or Standardizer(np.zeros(self.input_dim), np.ones(self.input_dim))

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    @property
    def nets(self) -> list[Sequential]:
        return [self.encoder, self.mu_head, self.logsig_head, self.decoder]

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets for p in net.params]

    def bump(self):
        for net in self.nets:
            net.bump()

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None] if single else x
        if x2.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} values per vector, got {x2.shape[1]}")
        return x2, single

    def encode_stats(self, x):
        """(mu, sigma) of the latent posterior for landmark vector(s) in mm."""
        x2, single = self._check(x)
        h = self.encoder.predict(self.std.apply(x2))
        mu = self.mu_head.predict(h)
        sigma = np.clip(np.exp(self.logsig_head.predict(h)), SIGMA_MIN, SIGMA_MAX)
        return (mu[0], sigma[0]) if single else (mu, sigma)

    def encode(self, x, noise):
        mu, sigma = self.encode_stats(x)
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape[-1] != self.latent_dim:
            raise ValueError(f"noise must have {self.latent_dim} entries per vector")
        return mu + sigma * noise

    def decode(self, z):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z2 = z[None] if single else z
        if z2.shape[1] != self.latent_dim:
            raise ValueError(f"expected latent of size {self.latent_dim}, got {z2.shape[1]}")
        out = self.std.invert(self.decoder.predict(z2))
        return out[0] if single else out

    # --- training ------------------------------------------------------------

    def loss_and_grads(self, x_mm: np.ndarray, noise: np.ndarray):
        """Mean per-sample loss (squared mm error + KL) and parameter gradients."""
        n = x_mm.shape[0]
        xs = self.std.apply(x_mm)
        h, c_enc = self.encoder.forward(xs)
        mu, c_mu = self.mu_head.forward(h)
        s, c_s = self.logsig_head.forward(h)
        raw = np.exp(np.minimum(s, np.log(SIGMA_MAX) + 1))
        in_range = (raw > SIGMA_MIN) & (raw < SIGMA_MAX)
        sigma = np.clip(raw, SIGMA_MIN, SIGMA_MAX)
        z = mu + sigma * noise
        out, c_dec = self.decoder.forward(z)
        resid = (out - xs) * self.std.scale  # mm
        recon = float(np.sum(resid ** 2))
        kl = kl_divergence(mu, sigma, self.cfg.kl)
        loss = (recon + kl) / n
        g_out = 2.0 * resid * self.std.scale / n
        g_dec, g_z = self.decoder.backward(c_dec, g_out)
        kmu, ks = _kl_grads(mu, sigma, in_range, self.cfg.kl)
        g_mu = g_z + kmu / n
        g_s = np.where(in_range, g_z * noise * sigma, 0.0) + ks / n
        g_muh, gh1 = self.mu_head.backward(c_mu, g_mu)
        g_sh, gh2 = self.logsig_head.backward(c_s, g_s)
        g_enc, _ = self.encoder.backward(c_enc, gh1 + gh2, need_input_grad=False)
        return loss, recon / n, kl / n, g_enc + g_muh + g_sh + g_dec

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "config": asdict(self.cfg), "standardizer": self.std.to_json(),
                "nets": [net.to_bytes().hex() for net in self.nets]}

    @classmethod
    def from_dict(cls, d: dict) -> "VaeModel":
        cfg = d["config"]
        cfg = VaeConfig(**{**cfg, "hidden": tuple(cfg["hidden"])})
        model = cls(d["input_dim"], cfg, Standardizer.from_json(d["standardizer"]))
        for net, blob in zip(model.nets, d["nets"]):
            net.set_params(Sequential.from_bytes(bytes.fromhex(blob)).params)
        return model


@dataclass
class TrainTrace:
    loss: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.loss[0]

    @property
    def final(self) -> float:
        return self.loss[-1]

    def smoothed(self, window: int = 50) -> np.ndarray:
        """Running minimum of a trailing moving average (monotone non-increasing)."""
        a = np.asarray(self.loss)
        if a.size == 0:
            return a
        w = max(1, min(window, a.size))
        c = np.cumsum(np.insert(a, 0, 0.0))
        ma = np.empty_like(a)
        for i in range(a.size):
            lo = max(0, i - w + 1)
            ma[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
        return np.minimum.accumulate(ma)


def _check_finite(loss, stage):
    if not np.isfinite(loss):
        raise DivergenceError(f"{stage}: non-finite loss")


def train_vae(data_mm: np.ndarray, cfg: VaeConfig, log_every: int = 0) -> tuple[VaeModel, TrainTrace]:
    """Full-batch Adam on squared reconstruction error plus KL, fresh noise each epoch."""
    data_mm = np.asarray(data_mm, dtype=np.float64)
    if data_mm.ndim != 2 or data_mm.shape[0] < 2:
        raise ValueError("need a (N >= 2, D) dataset")
    model = VaeModel(data_mm.shape[1], cfg, Standardizer.fit(data_mm))
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 12]))
    state = AdamState(lr=cfg.lr)
    trace = TrainTrace()
    params = model.params()
    for epoch in range(cfg.epochs):
        noise = rng.standard_normal((data_mm.shape[0], cfg.latent_dim))
        loss, recon, kl, grads = model.loss_and_grads(data_mm, noise)
        _check_finite(loss, "vae")
        trace.loss.append(loss)
        adam_step(state, params, grads)
        model.bump()
        if log_every and epoch % log_every == 0:
            print(f"vae epoch {epoch} loss {loss:.4f} recon {recon:.4f} kl {kl:.4f}")
    return model, trace


@dataclass
class PhiConfig:
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 11000
    lr: float = 1e-4
    seed: int = 0


class PhiModel:
    def __init__(self, input_dim: int, latent_dim: int, cfg: PhiConfig, standardizer: Standardizer | None = None):
        self.input_dim = int(input_dim)
        self.latent_dim = int(latent_dim)
        self.cfg = cfg
        seed = int(np.random.SeedSequence([int(cfg.seed), 21]).generate_state(1)[0])
        self.net = mlp([self.input_dim, *cfg.hidden, self.latent_dim], seed=seed)
        self.std = standardizer or Standardizer(np.zeros(self.input_dim), np.ones(self.input_dim))

    def __call__(self, ref):
        ref = np.asarray(ref, dtype=np.float64)
        single = ref.ndim == 1
        r2 = ref[None] if single else ref
        if r2.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} reference values, got {r2.shape[1]}")
        out = self.net.predict(self.std.apply(r2))
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "latent_dim": self.latent_dim, "config": asdict(self.cfg),
                "standardizer": self.std.to_json(), "net": self.net.to_bytes().hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhiModel":
        cfg = d["config"]
        cfg = PhiConfig(**{**cfg, "hidden": tuple(cfg["hidden"])})
        model = cls(d["input_dim"], d["latent_dim"], cfg, Standardizer.from_json(d["standardizer"]))
        model.net.set_params(Sequential.from_bytes(bytes.fromhex(d["net"])).params)
        return model


def train_phi(refs_mm: np.ndarray, full_mm: np.ndarray, vae: VaeModel, cfg: PhiConfig,
              log_every: int = 0) -> tuple[PhiModel, TrainTrace]:
    """Fit phi(refs) to the noise-free latent mean of the full vectors."""
    refs_mm = np.asarray(refs_mm, dtype=np.float64)
    target, _ = vae.encode_stats(full_mm)
    model = PhiModel(refs_mm.shape[1], vae.latent_dim, cfg, Standardizer.fit(refs_mm))
    xs = model.std.apply(refs_mm)
    xs.flags.writeable = False
    state = AdamState(lr=cfg.lr)
    trace = TrainTrace()
    n = refs_mm.shape[0]
    for epoch in range(cfg.epochs):
        y, cache = model.net.forward(xs)
        r = y - target
        loss = float(np.sum(r ** 2)) / n
        _check_finite(loss, "phi")
        trace.loss.append(loss)
        grads, _ = model.net.backward(cache, 2.0 * r / n, need_input_grad=False)
        adam_step(state, model.net.params, grads)
        model.net.bump()
        if log_every and epoch % log_every == 0:
            print(f"phi epoch {epoch} loss {loss:.5f}")
    return model, trace


def estimate_all(vae: VaeModel, phi: PhiModel, ref) -> np.ndarray:
    """Complete landmark vector(s) from reference vector(s): decode(phi(ref))."""
    return vae.decode(phi(ref))


def dataset_hash(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).hexdigest()[:16]


def manifest_for(model, data: np.ndarray, trace: TrainTrace) -> dict:
    cfg = asdict(model.cfg)
    return {
        "latent_dim": int(model.latent_dim),
        "input_dim": int(model.input_dim),
        "dataset_hash": dataset_hash(data),
        "seed": int(cfg["seed"]),
        "hyperparameters": {k: v for k, v in cfg.items() if k != "seed"},
        "loss_initial": trace.initial,
        "loss_final": trace.final,
    }


def save_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True))


def load_json(path: str | Path):
    return json.loads(Path(path).read_text())
