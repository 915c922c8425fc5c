"""Skill VAE over H-step (state, action) snippets.

Encoder: stacked bidirectional GRU over ``[s_t, a_t]`` with mean and SoftPlus
std heads. Prior: state-conditioned diagonal Gaussian ``p(z | s0)``. Decoder:
one small MLP per action element, each conditioned on the state, the latent
and the previously produced elements.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import SkillSnippet, SnippetArrays
from .diffusion import DTYPES
from .errors import ConfigError, ShapeError
from .nn import BiGRUEncoder, Dense, NetworkSpec, Trainer, make_generator

MIN_STD = 1e-4
LOG_2PI = math.log(2 * math.pi)


@dataclass
class GaussianHead:
    mean: torch.Tensor
    std: torch.Tensor

    def sample(self, generator: torch.Generator | None = None, eps=None) -> torch.Tensor:
        if eps is None:
            eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return self.mean + self.std * torch.as_tensor(eps, dtype=self.mean.dtype)

    def log_prob(self, x) -> torch.Tensor:
        """Elementwise Gaussian log-density."""
        x = torch.as_tensor(x, dtype=self.mean.dtype)
        return -0.5 * ((x - self.mean) / self.std) ** 2 - torch.log(self.std) - 0.5 * LOG_2PI


def gaussian_kl(q: GaussianHead, p: GaussianHead) -> torch.Tensor:
    """``KL(q || p)`` for diagonal Gaussians, summed over the last axis."""
    var_ratio = (q.std / p.std) ** 2
    mean_term = ((q.mean - p.mean) / p.std) ** 2
    return 0.5 * (var_ratio + mean_term - 1.0 - torch.log(var_ratio)).sum(-1)


@dataclass
class VaeConfig:
    latent_dim: int = 16
    beta: float = 0.05
    lr: float = 5e-5
    batch_size: int = 128
    epochs: int = 30
    hidden: int = 64
    max_grad_norm: float | None = 10.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError("beta must be positive")


def _gauss_heads(n_in: int, hidden: int, n_out: int, g, dt) -> tuple[Dense, Dense]:
    mean = Dense(NetworkSpec.mlp(n_in, [hidden], n_out, "relu", "linear"), g, dt)
    std = Dense(NetworkSpec.mlp(n_in, [hidden], n_out, "relu", "softplus"), g, dt)
    return mean, std


class SkillVAE(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, latent_dim: int = 16, hidden: int = 64,
                 seed: int = 0, dtype: str = "float64", gru_layers: int = 2):
        super().__init__()
        self.hparams = dict(state_dim=state_dim, action_dim=action_dim, latent_dim=latent_dim,
                            hidden=hidden, seed=seed, dtype=dtype, gru_layers=gru_layers)
        dt = DTYPES[dtype]
        g = make_generator(seed)
        self.state_dim, self.action_dim, self.latent_dim = state_dim, action_dim, latent_dim
        self._dtype = dt
        self.encoder = BiGRUEncoder(state_dim + action_dim, hidden, gru_layers, g, dt)
        self.enc_mean, self.enc_std = _gauss_heads(2 * hidden, hidden, latent_dim, g, dt)
        self.prior_trunk = Dense(NetworkSpec.mlp(state_dim, [hidden], hidden, "relu", "relu"), g, dt)
        self.prior_mean, self.prior_std = _gauss_heads(hidden, hidden, latent_dim, g, dt)
        self.dec_trunk = nn.ModuleList()
        self.dec_mean = nn.ModuleList()
        self.dec_std = nn.ModuleList()
        for k in range(action_dim):
            self.dec_trunk.append(Dense(NetworkSpec.mlp(state_dim + latent_dim + k, [hidden], hidden,
                                                        "relu", "relu"), g, dt))
            m, s = _gauss_heads(hidden, hidden, 1, g, dt)
            self.dec_mean.append(m)
            self.dec_std.append(s)

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    def _t(self, x) -> torch.Tensor:
        return torch.as_tensor(x, dtype=self._dtype)

    # encoder -------------------------------------------------------------------
    def posterior(self, states, actions, lengths=None) -> GaussianHead:
        """``states``/``actions`` are ``(B, H, .)``; ``lengths`` marks valid prefixes."""
        x = torch.cat([self._t(states), self._t(actions)], dim=-1)
        if lengths is not None:
            lengths = torch.as_tensor(lengths, dtype=torch.long)
        feat = self.encoder(x, lengths)
        return GaussianHead(self.enc_mean(feat), self.enc_std(feat) + MIN_STD)

    # prior ---------------------------------------------------------------------
    def prior(self, s0) -> GaussianHead:
        h = self.prior_trunk(self._t(s0))
        return GaussianHead(self.prior_mean(h), self.prior_std(h) + MIN_STD)

    # decoder -------------------------------------------------------------------
    def action_head(self, s, z, prefix) -> GaussianHead:
        """Distribution of action element ``prefix.shape[-1]``."""
        s, z, prefix = self._t(s), self._t(z), self._t(prefix)
        k = prefix.shape[-1]
        if k >= self.action_dim:
            raise ShapeError(f"prefix of length {k} leaves no element to decode "
                             f"(action_dim={self.action_dim})")
        h = self.dec_trunk[k](torch.cat([s, z, prefix], dim=-1))
        return GaussianHead(self.dec_mean[k](h), self.dec_std[k](h) + MIN_STD)

    def action_heads(self, s, z, actions) -> GaussianHead:
        """Teacher-forced heads for every element of ``actions``."""
        actions = self._t(actions)
        heads = [self.action_head(s, z, actions[..., :k]) for k in range(self.action_dim)]
        return GaussianHead(torch.cat([h.mean for h in heads], -1),
                            torch.cat([h.std for h in heads], -1))

    @torch.no_grad()
    def decode(self, s, z, generator: torch.Generator | None = None,
               noise_scale: float = 0.0) -> torch.Tensor:
        """Sample a full action element by element; ``noise_scale=0`` gives the means."""
        s, z = self._t(s), self._t(z)
        prefix = torch.zeros(*s.shape[:-1], 0, dtype=self._dtype)
        for _ in range(self.action_dim):
            head = self.action_head(s, z, prefix)
            a = head.mean
            if noise_scale:
                a = a + noise_scale * head.std * torch.randn(a.shape, generator=generator,
                                                            dtype=self._dtype)
            prefix = torch.cat([prefix, a], dim=-1)
        return prefix

    def action_log_prob(self, s, z, actions) -> torch.Tensor:
        """Sum of per-element log-densities of ``actions``."""
        return self.action_heads(s, z, actions).log_prob(actions).sum(-1)


def _snippet_tensors(vae: SkillVAE, snippet: SkillSnippet):
    return vae._t(snippet.states).unsqueeze(0), vae._t(snippet.actions).unsqueeze(0)


def encode_posterior(vae: SkillVAE, snippet: SkillSnippet) -> GaussianHead:
    if not snippet.full:
        raise ShapeError(f"snippet has {snippet.steps_valid} valid steps, expected {snippet.horizon}")
    s, a = _snippet_tensors(vae, snippet)
    with torch.no_grad():
        head = vae.posterior(s, a)
    return GaussianHead(head.mean[0], head.std[0])


def gaussian_prior(vae: SkillVAE, s0) -> GaussianHead:
    with torch.no_grad():
        return vae.prior(s0)


def decode_action(vae: SkillVAE, s, z, prefix) -> GaussianHead:
    with torch.no_grad():
        return vae.action_head(s, z, prefix)


def vae_loss(vae: SkillVAE, states, actions, beta: float,
             generator: torch.Generator | None = None, eps=None,
             lengths=None) -> tuple[torch.Tensor, dict]:
    """Negative ELBO averaged over a batch of snippets ``(B, H, .)``.

    ``lengths`` marks valid prefixes; steps past them are neither encoded nor
    reconstructed.
    """
    states, actions = vae._t(states), vae._t(actions)
    q = vae.posterior(states, actions, lengths)
    z = q.sample(generator, eps)
    p = vae.prior(states[:, 0])
    H = states.shape[1]
    zs = z.unsqueeze(1).expand(-1, H, -1)
    logp = vae.action_log_prob(states, zs, actions)
    if lengths is not None:
        valid = torch.arange(H) < torch.as_tensor(lengths).unsqueeze(-1)
        logp = torch.where(valid, logp, torch.zeros_like(logp))
    recon = -logp.sum(-1)
    kl = gaussian_kl(q, p)
    loss = (recon + beta * kl).mean()
    return loss, {"recon": float(recon.mean().detach()), "kl": float(kl.mean().detach())}


def train_vae(snips: SnippetArrays, config: VaeConfig, seed: int = 0, dtype: str = "float64",
              log=None, partial: bool = False) -> tuple[SkillVAE, list[float]]:
    """Adam on the negative ELBO; returns per-epoch mean losses.

    Only full snippets are used unless ``partial`` is set.
    """
    full = snips.steps_valid == snips.states.shape[1]
    if not full.any():
        raise ConfigError("no full-length snippets to train on")
    keep = np.ones(len(full), bool) if partial else full
    S = torch.as_tensor(snips.states[keep])
    A = torch.as_tensor(snips.actions[keep])
    L = torch.as_tensor(snips.steps_valid[keep])
    vae = SkillVAE(S.shape[-1], A.shape[-1], config.latent_dim, config.hidden, seed, dtype)
    S, A = S.to(vae.dtype), A.to(vae.dtype)
    g = make_generator(seed + 1)
    trainer = Trainer(vae, config.lr, config.max_grad_norm)
    curve = []
    for epoch in range(config.epochs):
        perm = torch.randperm(len(S), generator=g)
        losses = []
        for i in range(0, len(S), config.batch_size):
            idx = perm[i:i + config.batch_size]
            loss, _ = vae_loss(vae, S[idx], A[idx], config.beta, g, lengths=L[idx] if partial else None)
            losses.append(trainer.step(loss))
        curve.append(float(np.mean(losses)))
        if log is not None:
            log(epoch, curve[-1])
    vae.eval()
    return vae, curve


@torch.no_grad()
def encode_snippets(vae: SkillVAE, snips: SnippetArrays, generator: torch.Generator | None = None,
                    sample: bool = True, batch: int = 4096) -> np.ndarray:
    """Posterior samples (or means) for every snippet, partial ones included."""
    out = []
    for i in range(0, len(snips), batch):
        sl = slice(i, i + batch)
        q = vae.posterior(snips.states[sl], snips.actions[sl], snips.steps_valid[sl])
        out.append(q.sample(generator) if sample else q.mean)
    return torch.cat(out).numpy()
