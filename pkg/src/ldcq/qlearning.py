"""Batch-constrained Q-learning over (state, latent skill) pairs.

The bootstrap maximum is taken only over candidate latents drawn from a
generative prior at the next state. With the diffusion prior this is LDCQ;
with the VAE's Gaussian prior it is the BCQ-H baseline.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import EpisodeTrajectory, discounted_returns, slice_snippets, stack_snippets
from .diffusion import DTYPES, DiffusionSchedule, Denoiser, GuidanceSpec, ddpm_sample
from .errors import ConfigError
from .nn import Dense, NetworkSpec, ParameterBundle, Trainer, backprop, make_generator
from .replay import BetaSchedule, PrioritizedBuffer, SkillTransitions
from .vae import SkillVAE, encode_snippets


@dataclass
class LdcqConfig:
    gamma: float = 0.995
    rho: float = 0.995
    batch_size: int = 128
    n_candidates: int = 16
    iterations: int = 2000
    lr: float = 5e-4
    lr_final: float | None = None   # geometric decay from lr to this value over the run
    hidden: list = field(default_factory=lambda: [128, 128, 128, 32])
    per_alpha: float = 0.7
    per_beta_start: float = 0.3
    per_beta_step: float = 0.03
    per_beta_every: int = 3000
    per_eps: float = 1e-3
    swap_mixing: bool = False
    max_grad_norm: float | None = 10.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError("rho must lie in (0, 1]")
        if self.n_candidates < 1:
            raise ConfigError("need at least one candidate latent")
        if self.lr_final is not None and not 0.0 < self.lr_final <= self.lr:
            raise ConfigError("lr_final must lie in (0, lr]")


class QNet(nn.Module):
    """GELU MLP on ``[s, z]`` with LayerNorm before each activation."""

    def __init__(self, state_dim: int, latent_dim: int, hidden=(128, 128, 128, 32), seed: int = 0,
                 dtype: str = "float64"):
        super().__init__()
        self.hparams = dict(state_dim=state_dim, latent_dim=latent_dim, hidden=list(hidden),
                            seed=seed, dtype=dtype)
        self._dtype = DTYPES[dtype]
        self.net = Dense(NetworkSpec.mlp(state_dim + latent_dim, hidden, 1, "gelu", "linear",
                                         layer_norm=True), seed, self._dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    def forward(self, s, z) -> torch.Tensor:
        s = torch.as_tensor(s, dtype=self._dtype)
        z = torch.as_tensor(z, dtype=self._dtype)
        if s.dim() < z.dim():
            s = s.unsqueeze(-2).expand(*z.shape[:-1], s.shape[-1])
        return self.net(torch.cat([s, z], dim=-1)).squeeze(-1)


# candidate generators ---------------------------------------------------------

class DiffusionCandidates:
    """Latents from the diffusion prior ``p_psi(z | s)``."""

    def __init__(self, psi: Denoiser, sched: DiffusionSchedule, guidance: GuidanceSpec):
        self.psi, self.sched, self.guidance = psi, sched, guidance

    def __call__(self, states, n: int, generator: torch.Generator) -> torch.Tensor:
        return ddpm_sample(self.psi, self.sched, torch.as_tensor(states), self.guidance, n, generator)


class GaussianPriorCandidates:
    """Latents from the VAE's state-conditioned Gaussian prior (BCQ-H baseline)."""

    def __init__(self, vae: SkillVAE):
        self.vae = vae

    @torch.no_grad()
    def __call__(self, states, n: int, generator: torch.Generator) -> torch.Tensor:
        head = self.vae.prior(states)
        eps = torch.randn(head.mean.shape[0], n, head.mean.shape[1], generator=generator,
                          dtype=head.mean.dtype)
        return head.mean.unsqueeze(1) + head.std.unsqueeze(1) * eps


class CandidateBank:
    """Candidate latents drawn once per transition at its next state.

    Training then looks candidates up by buffer index instead of re-running
    the sampler every iteration. Terminal rows get zeros (never used).
    """

    def __init__(self, sampler, next_states: np.ndarray, terminal: np.ndarray, n: int,
                 generator: torch.Generator, chunk: int = 512):
        live = np.flatnonzero(~np.asarray(terminal, bool))
        probe = sampler(torch.as_tensor(next_states[live[:1]] if live.size else next_states[:1]),
                        1, generator)
        self.latents = np.zeros((len(next_states), n, probe.shape[-1]), dtype=np.float64)
        for i in range(0, live.size, chunk):
            rows = live[i:i + chunk]
            self.latents[rows] = sampler(torch.as_tensor(next_states[rows]), n, generator).numpy()
        self.n = n

    def __len__(self) -> int:
        return len(self.latents)

    def lookup(self, idx) -> np.ndarray:
        return self.latents[np.asarray(idx)]


# buffer -----------------------------------------------------------------------

def skill_transitions(snips, latents: np.ndarray, gamma: float) -> SkillTransitions:
    return SkillTransitions(
        states=snips.states[:, 0].copy(), latents=np.asarray(latents),
        returns=discounted_returns(snips.rewards, snips.steps_valid, gamma),
        next_states=snips.next_states.copy(), terminal=snips.terminal.copy(),
        steps_valid=snips.steps_valid.copy())


def build_skill_buffer(dataset: list[EpisodeTrajectory], vae: SkillVAE, H: int, gamma: float,
                       stride: int = 1, generator: torch.Generator | None = None,
                       config: LdcqConfig | None = None) -> PrioritizedBuffer:
    """One transition per snippet, latent sampled once from the posterior."""
    if not dataset:
        raise ConfigError("empty dataset")
    cfg = config or LdcqConfig(gamma=gamma)
    snips = stack_snippets(slice_snippets(dataset, H, stride))
    z = encode_snippets(vae, snips, generator, sample=True)
    beta = BetaSchedule(cfg.per_beta_start, cfg.per_beta_step, cfg.per_beta_every)
    return PrioritizedBuffer(skill_transitions(snips, z, gamma), cfg.per_alpha, beta, cfg.per_eps)


# targets and updates -------------------------------------------------------------

def clipped_double_q_target(returns, discounts, terminal, q1_next, q2_next) -> torch.Tensor:
    """``r + [not terminal] * discount * max_i min_j Q_j(s', z_i)``.

    ``q*_next`` have shape ``(B, n)`` (one column per candidate).
    """
    returns = torch.as_tensor(returns)
    best = torch.minimum(torch.as_tensor(q1_next), torch.as_tensor(q2_next)).max(dim=-1).values
    live = ~torch.as_tensor(terminal, dtype=torch.bool)
    boot = torch.where(live, torch.as_tensor(discounts, dtype=best.dtype) * best,
                       torch.zeros_like(best))
    return returns.to(best.dtype) + boot


@torch.no_grad()
def td_target(batch: SkillTransitions, q1_target: QNet, q2_target: QNet, candidates,
              config: LdcqConfig, generator: torch.Generator, banked=None) -> torch.Tensor:
    """Bootstrapped targets; candidates are drawn only for non-terminal rows.

    ``banked`` optionally supplies precomputed candidates ``(B, n, dz)`` per row.
    """
    dt = q1_target.dtype
    y = torch.as_tensor(batch.returns, dtype=dt).clone()
    live = np.flatnonzero(~batch.terminal)
    if live.size:
        s_next = torch.as_tensor(batch.next_states[live], dtype=dt)
        if banked is not None:
            z = torch.as_tensor(banked[live], dtype=dt)
        else:
            z = candidates(s_next, config.n_candidates, generator).to(dt)
        q1 = q1_target(s_next, z)
        q2 = q2_target(s_next, z)
        disc = torch.as_tensor(config.gamma ** batch.steps_valid[live].astype(np.float64), dtype=dt)
        y[live] = clipped_double_q_target(y[live], disc, np.zeros(live.size, bool), q1, q2)
    return y


def q_loss(q: QNet, batch: SkillTransitions, y, weights) -> tuple[torch.Tensor, torch.Tensor]:
    """Importance-weighted mean squared TD error and the per-example residuals."""
    pred = q(batch.states, batch.latents)
    td = torch.as_tensor(y, dtype=pred.dtype) - pred
    w = torch.as_tensor(weights, dtype=pred.dtype)
    return (w * td ** 2).mean(), td.detach()


def q_update(trainers: tuple[Trainer, Trainer], batch: SkillTransitions, y, weights) -> tuple[np.ndarray, float]:
    """One Adam step on each Q-network; returns mean |TD| per example and Q1's loss."""
    tds = []
    loss1 = None
    for tr in trainers:
        loss, td = q_loss(tr.module, batch, y, weights)
        v = tr.step(loss)
        loss1 = v if loss1 is None else loss1
        tds.append(td.abs())
    return torch.stack(tds).mean(0).numpy(), loss1


@torch.no_grad()
def target_soft_update(online: nn.Module, target: nn.Module, rho: float,
                       swap_mixing: bool = False) -> None:
    """``target <- rho * online + (1 - rho) * target`` (weights swapped if ``swap_mixing``)."""
    w_online = (1.0 - rho) if swap_mixing else rho
    for p, pt in zip(online.parameters(), target.parameters()):
        pt.mul_(1.0 - w_online).add_(p, alpha=w_online)


@dataclass
class LdcqResult:
    q1: QNet
    q2: QNet
    q1_target: QNet
    q2_target: QNet
    td_curve: list[float]


def ldcq_train(buffer: PrioritizedBuffer, candidates, config: LdcqConfig, seed: int = 0,
               dtype: str = "float64", log=None, log_every: int = 500) -> LdcqResult:
    """Run ``config.iterations`` rounds of sample / target / update / reprioritize / track.

    ``candidates`` is either a sampler called at every target computation or a
    :class:`CandidateBank` aligned with the buffer.
    """
    bank = candidates if isinstance(candidates, CandidateBank) else None
    if bank is not None and len(bank) != len(buffer):
        raise ConfigError(f"candidate bank has {len(bank)} rows, buffer has {len(buffer)}")
    ds = buffer.data.states.shape[1]
    dz = buffer.data.latents.shape[1]
    q1 = QNet(ds, dz, config.hidden, seed=seed, dtype=dtype)
    q2 = QNet(ds, dz, config.hidden, seed=seed + 1, dtype=dtype)
    q1t, q2t = copy.deepcopy(q1), copy.deepcopy(q2)
    for m in (q1t, q2t):
        m.requires_grad_(False)
    trainers = (Trainer(q1, config.lr, config.max_grad_norm),
                Trainer(q2, config.lr, config.max_grad_norm))
    rng = np.random.default_rng(seed)
    g = make_generator(seed)
    curve = []
    decay = 1.0
    if config.lr_final is not None and config.iterations > 1:
        decay = (config.lr_final / config.lr) ** (1.0 / (config.iterations - 1))
    for it in range(config.iterations):
        for tr in trainers:
            tr.opt.lr = config.lr * decay ** it
        batch, w, idx = buffer.sample(config.batch_size, rng)
        y = td_target(batch, q1t, q2t, candidates, config, g,
                      None if bank is None else bank.lookup(idx))
        td, loss = q_update(trainers, batch, y, w)
        buffer.update(idx, td)
        target_soft_update(q1, q1t, config.rho, config.swap_mixing)
        target_soft_update(q2, q2t, config.rho, config.swap_mixing)
        curve.append(loss)
        if log is not None and (it + 1) % log_every == 0:
            log(it + 1, float(np.mean(curve[-log_every:])))
    for m in (q1, q2):
        m.eval()
    return LdcqResult(q1, q2, q1t, q2t, curve)


def q_gradients(q: QNet, batch: SkillTransitions, y, weights) -> ParameterBundle:
    loss, _ = q_loss(q, batch, y, weights)
    return backprop(loss, ParameterBundle.of(q))
