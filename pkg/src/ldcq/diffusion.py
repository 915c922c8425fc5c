"""Conditional latent diffusion prior.

The denoiser predicts the clean latent ``z0`` (not the noise), is trained with
Min-SNR-gamma weights and random condition dropout, and is sampled with
DDPM ancestral steps under classifier-free guidance, optionally followed by
extra denoising passes at ``t = 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError
from .nn import Dense, NetworkSpec, Trainer, make_generator, sinusoidal_embed

DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        # index 0 holds alpha_bar_0 = 1 so that tables can be indexed by t directly
        self._ab = np.concatenate([[1.0], self.alpha_bars])
        self._b = np.concatenate([[0.0], self.betas])
        self._a = np.concatenate([[1.0], self.alphas])

    def alpha_bar(self, t):
        """``alpha_bar_t`` with ``alpha_bar_0 = 1``."""
        return self._ab[t]

    def beta(self, t):
        return self._b[t]

    def alpha(self, t):
        return self._a[t]

    def snr(self, t):
        ab = self._ab[t]
        return ab / (1.0 - ab)

    def posterior_coefs(self, t: int) -> tuple[float, float]:
        """Weights on ``z_t`` and on the ``z0`` estimate in the reverse-step mean."""
        ab_t, ab_prev = self._ab[t], self._ab[t - 1]
        c_zt = math.sqrt(self._a[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
        c_z0 = math.sqrt(ab_prev) * self._b[t] / (1.0 - ab_t)
        return c_zt, c_z0


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> DiffusionSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(T, betas, alphas, np.cumprod(alphas))


def _check_t(sched: DiffusionSchedule, t) -> None:
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ShapeError(f"diffusion step must lie in [1, {sched.T}]")


def forward_noise(sched: DiffusionSchedule, z0, t, eps):
    """Closed-form sample of ``q(z_t | z0)`` for the given noise ``eps``."""
    _check_t(sched, t)
    ab = sched.alpha_bar(np.asarray(t))
    if isinstance(z0, torch.Tensor):
        ab = torch.as_tensor(ab, dtype=z0.dtype)
        if ab.dim() == 1:
            ab = ab.unsqueeze(-1)
        return ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    ab = np.asarray(ab)
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(z0) + np.sqrt(1 - ab) * np.asarray(eps)


def min_snr_weight(sched: DiffusionSchedule, t, gamma_clip: float):
    _check_t(sched, t)
    return np.minimum(sched.snr(np.asarray(t)), gamma_clip)


@dataclass
class GuidanceSpec:
    w: float = 1.5
    extra_steps: int = 10

    def __post_init__(self):
        if self.w < 0 or self.extra_steps < 0:
            raise ConfigError("guidance weight and extra steps must be non-negative")


@dataclass
class PriorTrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 60
    T: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    drop_prob: float = 0.1
    snr_gamma: float = 5.0
    hidden: list = field(default_factory=lambda: [64, 32, 16, 32, 64])
    emb_dim: int = 64
    time_dim: int = 64
    max_grad_norm: float | None = 1.0
    # diffuse centered latents divided by one global std, so the noise
    # schedule sees unit-scale data whatever the encoder's latent scale
    standardize: bool = True
    # z0 estimate = sqrt(ab_t) z_t + sqrt(1 - ab_t) * network output
    skip_estimate: bool = True

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise ConfigError("drop probability must lie in [0, 1)")


class Denoiser(nn.Module):
    """Residual MLP with U-Net style skips between blocks of equal width.

    Every block sees the current activation concatenated with the state and
    time encodings. A missing condition is the all-zero vector. The buffers
    ``z_shift`` and ``z_scale`` map latents to the unit scale the network
    works in; they default to the identity.

    With ``schedule = (T, beta_min, beta_max)`` the z0 estimate is
    ``sqrt(ab_t) z_t + sqrt(1 - ab_t) F``, the linear estimate for unit-scale
    data plus a learned correction, so it tends to the identity as t -> 0.
    Without it the trunk output is the estimate.
    """

    def __init__(self, latent_dim: int, cond_dim: int, hidden=(64, 32, 16, 32, 64),
                 emb_dim: int = 64, time_dim: int = 64, seed: int = 0, dtype: str = "float64",
                 schedule: tuple | list | None = None):
        super().__init__()
        self.hparams = dict(latent_dim=latent_dim, cond_dim=cond_dim, hidden=list(hidden),
                            emb_dim=emb_dim, time_dim=time_dim, seed=seed, dtype=dtype,
                            schedule=None if schedule is None else list(schedule))
        dt = DTYPES[dtype]
        g = make_generator(seed)
        self.latent_dim, self.cond_dim, self.time_dim = latent_dim, cond_dim, time_dim
        self.time_mlp = Dense(NetworkSpec.mlp(time_dim, [emb_dim], emb_dim, "gelu", "gelu"), g, dt)
        self.cond_mlp = Dense(NetworkSpec.mlp(cond_dim, [emb_dim], emb_dim, "gelu", "gelu"), g, dt)
        hidden = list(hidden)
        self.inner = nn.ModuleList()
        self.outer = nn.ModuleList()
        self.proj = nn.ModuleList()
        prev = latent_dim
        for w in hidden:
            self.inner.append(Dense(NetworkSpec.mlp(prev + 2 * emb_dim, [], w, out_act="gelu"), g, dt))
            self.outer.append(Dense(NetworkSpec.mlp(w, [], w), g, dt))
            self.proj.append(nn.Identity() if prev == w else Dense(NetworkSpec.mlp(prev, [], w), g, dt))
            prev = w
        n = len(hidden)
        # block i (second half) receives the output of block n - 1 - i
        self.skips = {i: n - 1 - i for i in range(n // 2 + n % 2, n) if hidden[n - 1 - i] == hidden[i]}
        self.head = Dense(NetworkSpec.mlp(prev, [], latent_dim), g, dt)
        self.register_buffer("z_shift", torch.zeros(latent_dim, dtype=dt))
        self.register_buffer("z_scale", torch.ones((), dtype=dt))
        self._dtype = dt
        self._skip = None
        if schedule is not None:
            ab = np.concatenate([[1.0], make_schedule(*schedule).alpha_bars])
            self._skip = (torch.as_tensor(np.sqrt(ab), dtype=dt), torch.as_tensor(np.sqrt(1 - ab), dtype=dt))

    def estimate(self, z_t: torch.Tensor, out: torch.Tensor, t) -> torch.Tensor:
        """Map the trunk output to the z0 estimate."""
        if self._skip is None:
            return out
        t = torch.as_tensor(t, dtype=torch.long)
        a, b = self._skip[0][t], self._skip[1][t]
        if a.dim():
            a, b = a.unsqueeze(-1), b.unsqueeze(-1)
        return a * z_t + b * out

    def to_unit(self, z) -> torch.Tensor:
        return (torch.as_tensor(z, dtype=self._dtype) - self.z_shift) / self.z_scale

    def from_unit(self, u: torch.Tensor) -> torch.Tensor:
        return u * self.z_scale + self.z_shift

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    def embed_time(self, t) -> torch.Tensor:
        e = sinusoidal_embed(torch.as_tensor(t), self.time_dim).to(self._dtype)
        return self.time_mlp(e)

    def embed_cond(self, cond) -> torch.Tensor:
        return self.cond_mlp(torch.as_tensor(cond, dtype=self._dtype))

    def trunk(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        h = z
        saved = {}
        for i, (inner, outer, proj) in enumerate(zip(self.inner, self.outer, self.proj)):
            h = outer(inner(torch.cat([h, c], dim=-1))) + proj(h)
            if i in self.skips:
                h = h + saved[self.skips[i]]
            saved[i] = h
        return self.head(h)

    def forward(self, z_t, cond, t) -> torch.Tensor:
        z_t = torch.as_tensor(z_t, dtype=self._dtype)
        if z_t.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent width {z_t.shape[-1]} != {self.latent_dim}")
        if cond is None:
            cond = torch.zeros(*z_t.shape[:-1], self.cond_dim, dtype=self._dtype)
        cond = torch.as_tensor(cond, dtype=self._dtype)
        if cond.shape[-1] != self.cond_dim:
            raise ShapeError(f"condition width {cond.shape[-1]} != {self.cond_dim}")
        t = torch.as_tensor(t)
        temb = self.embed_time(t)
        if temb.dim() < z_t.dim():
            temb = temb.expand(*z_t.shape[:-1], temb.shape[-1])
        semb = self.embed_cond(cond)
        if semb.dim() < z_t.dim():
            semb = semb.expand(*z_t.shape[:-1], semb.shape[-1])
        return self.estimate(z_t, self.trunk(z_t, torch.cat([semb, temb], dim=-1)), t)


def denoise_predict(psi: Denoiser, z_t, cond, t) -> torch.Tensor:
    """Estimate of ``z0`` in unit scale; ``cond=None`` is the unconditional (null) branch."""
    return psi(z_t, cond, t)


def diffusion_loss(psi: Denoiser, s0, z0, sched: DiffusionSchedule, config: PriorTrainConfig,
                   generator: torch.Generator | None = None, *, t=None, eps=None,
                   drop=None) -> torch.Tensor:
    """Batch mean of ``min(SNR(t), gamma) * ||z0 - psi(z_t, s0, t)||^2``.

    ``z0`` is taken in the network's unit scale. ``t``, ``eps`` and the
    boolean ``drop`` mask are sampled when not given.
    """
    dt = psi.dtype
    z0 = psi.to_unit(z0)
    s0 = torch.as_tensor(s0, dtype=dt)
    n = z0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (n,), generator=generator)
    t = torch.as_tensor(t, dtype=torch.long)
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=dt)
    if drop is None:
        drop = torch.rand(n, generator=generator) < config.drop_prob
    drop = torch.as_tensor(drop, dtype=torch.bool)
    z_t = forward_noise(sched, z0, t.numpy(), torch.as_tensor(eps, dtype=dt))
    cond = torch.where(drop.unsqueeze(-1), torch.zeros_like(s0), s0)
    pred = psi(z_t, cond, t)
    weight = torch.as_tensor(min_snr_weight(sched, t.numpy(), config.snr_gamma), dtype=dt)
    return (weight * ((z0 - pred) ** 2).sum(-1)).mean()


def train_prior(s0: np.ndarray, z0: np.ndarray, config: PriorTrainConfig, seed: int = 0,
                dtype: str = "float64", log=None) -> tuple[Denoiser, list[float]]:
    """Fit the denoiser to ``(s0, z0)`` pairs; returns it with per-epoch mean losses."""
    if len(s0) == 0:
        raise ConfigError("cannot train a prior on an empty latent dataset")
    g = make_generator(seed)
    psi = Denoiser(z0.shape[1], s0.shape[1], config.hidden, config.emb_dim, config.time_dim,
                   seed=seed, dtype=dtype,
                   schedule=(config.T, config.beta_min, config.beta_max) if config.skip_estimate else None)
    sched = make_schedule(config.T, config.beta_min, config.beta_max)
    trainer = Trainer(psi, config.lr, config.max_grad_norm)
    S = torch.as_tensor(s0, dtype=psi.dtype)
    Z = torch.as_tensor(z0, dtype=psi.dtype)
    if config.standardize and len(Z) > 1:
        psi.z_shift.copy_(Z.mean(0))
        psi.z_scale.copy_((Z - psi.z_shift).std().clamp_min(1e-8))
    curve = []
    for epoch in range(config.epochs):
        perm = torch.randperm(len(S), generator=g)
        losses = []
        for i in range(0, len(S), config.batch_size):
            idx = perm[i:i + config.batch_size]
            loss = diffusion_loss(psi, S[idx], Z[idx], sched, config, g)
            losses.append(trainer.step(loss))
        curve.append(float(np.mean(losses)))
        if log is not None:
            log(epoch, curve[-1])
    psi.eval()
    return psi, curve


@torch.no_grad()
def ddpm_sample(psi: Denoiser, sched: DiffusionSchedule, cond, guidance: GuidanceSpec, n: int,
                generator: torch.Generator) -> torch.Tensor:
    """Ancestral DDPM sampling of ``n`` latents per condition.

    ``cond`` of shape ``(c,)`` returns ``(n, d_z)``; ``(B, c)`` returns
    ``(B, n, d_z)``; ``None`` samples the unconditional branch.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    dt = psi.dtype
    single = False
    if cond is None:
        cond_t = torch.zeros(1, psi.cond_dim, dtype=dt)
        single = True
        w = 0.0
    else:
        cond_t = torch.as_tensor(cond, dtype=dt)
        if cond_t.dim() == 1:
            cond_t, single = cond_t.unsqueeze(0), True
        w = guidance.w
    B = cond_t.shape[0]
    rows = cond_t.repeat_interleave(n, dim=0)
    semb_c = psi.embed_cond(rows)
    semb_u = psi.embed_cond(torch.zeros_like(rows))
    temb_all = psi.embed_time(torch.arange(sched.T + 1))

    def predict(z, t):
        te = temb_all[t].expand(z.shape[0], -1)
        if w == 1.0:
            return psi.estimate(z, psi.trunk(z, torch.cat([semb_c, te], -1)), t)
        if w == 0.0:
            return psi.estimate(z, psi.trunk(z, torch.cat([semb_u, te], -1)), t)
        both = psi.trunk(torch.cat([z, z]), torch.cat([torch.cat([semb_c, semb_u]),
                                                       torch.cat([te, te])], -1))
        zc, zu = psi.estimate(z, both[:len(z)], t), psi.estimate(z, both[len(z):], t)
        return zu + w * (zc - zu)

    z = torch.randn(B * n, psi.latent_dim, generator=generator, dtype=dt)
    for t in range(sched.T, 0, -1):
        zhat = predict(z, t)
        c_zt, c_z0 = sched.posterior_coefs(t)
        z = c_zt * z + c_z0 * zhat
        if t > 1:
            z = z + math.sqrt(sched.beta(t)) * torch.randn(z.shape, generator=generator, dtype=dt)
    c_zt, c_z0 = sched.posterior_coefs(1)
    for _ in range(guidance.extra_steps):
        z = c_zt * z + c_z0 * predict(z, 1)
    z = psi.from_unit(z).reshape(B, n, psi.latent_dim)
    return z[0] if single else z
