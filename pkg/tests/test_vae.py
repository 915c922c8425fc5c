import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ldcq.data import EpisodeTrajectory, slice_snippets, stack_snippets
from ldcq.errors import ShapeError
from ldcq.nn import ParameterBundle, finite_difference_check
from ldcq.vae import (GaussianHead, SkillVAE, VaeConfig, decode_action, encode_posterior,
                      encode_snippets, gaussian_kl, gaussian_prior, train_vae, vae_loss)


def _t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@pytest.fixture(scope="module")
def vae():
    return SkillVAE(state_dim=2, action_dim=3, latent_dim=4, hidden=8, seed=0)


def test_log_prob_oracle():
    h = GaussianHead(_t([0.5, -1.0]), _t([2.0, 0.3]))
    x = np.array([1.0, 0.0])
    want = [-0.5 * ((xi - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)
            for xi, m, s in zip(x, [0.5, -1.0], [2.0, 0.3])]
    np.testing.assert_allclose(h.log_prob(x).numpy(), want, rtol=1e-12)


def test_kl_closed_form():
    q = GaussianHead(_t([0.3, -0.2]), _t([0.5, 1.5]))
    p = GaussianHead(_t([0.0, 1.0]), _t([1.0, 2.0]))
    want = sum(math.log(ps / qs) + (qs ** 2 + (qm - pm) ** 2) / (2 * ps ** 2) - 0.5
               for qm, qs, pm, ps in zip([0.3, -0.2], [0.5, 1.5], [0.0, 1.0], [1.0, 2.0]))
    assert float(gaussian_kl(q, p)) == pytest.approx(want, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.05, 3), st.floats(-3, 3), st.floats(0.05, 3)),
                min_size=1, max_size=4))
def test_kl_nonnegative_and_zero_on_self(rows):
    qm, qs, pm, ps = (np.array(c) for c in zip(*rows))
    q, p = GaussianHead(_t(qm), _t(qs)), GaussianHead(_t(pm), _t(ps))
    assert float(gaussian_kl(q, p)) >= -1e-12
    assert float(gaussian_kl(q, q)) == pytest.approx(0.0, abs=1e-12)


def test_kl_monte_carlo():
    q = GaussianHead(_t([0.3, -0.2]), _t([0.5, 1.5]))
    p = GaussianHead(_t([0.0, 1.0]), _t([1.0, 2.0]))
    g = torch.Generator().manual_seed(0)
    x = q.sample(g, torch.randn(200_000, 2, generator=g, dtype=torch.float64))
    mc = (q.log_prob(x) - p.log_prob(x)).sum(-1)
    assert abs(float(mc.mean()) - float(gaussian_kl(q, p))) < 4 * float(mc.std()) / math.sqrt(len(x))


def test_shapes_and_positive_std(vae):
    s, a = torch.zeros(5, 6, 2, dtype=torch.float64), torch.zeros(5, 6, 3, dtype=torch.float64)
    q = vae.posterior(s, a)
    assert q.mean.shape == (5, 4) and bool((q.std > 0).all())
    p = vae.prior(s[:, 0])
    assert p.mean.shape == (5, 4) and bool((p.std > 0).all())


def test_decoder_is_autoregressive(vae):
    s, z = _t([[0.1, 0.2]]), _t([[0.3, -0.1, 0.0, 0.5]])
    h1 = vae.action_head(s, z, _t([[0.0]]))
    h2 = vae.action_head(s, z, _t([[0.9]]))
    assert not torch.equal(h1.mean, h2.mean)
    with pytest.raises(ShapeError):
        vae.action_head(s, z, torch.zeros(1, 3, dtype=torch.float64))


def test_decode_means_follow_chain(vae):
    s, z = _t([[0.1, 0.2]]), _t([[0.3, -0.1, 0.0, 0.5]])
    a = vae.decode(s, z)
    prefix = torch.zeros(1, 0, dtype=torch.float64)
    for k in range(3):
        m = decode_action(vae, s, z, prefix).mean
        assert float(m) == pytest.approx(float(a[0, k]), abs=1e-12)
        prefix = torch.cat([prefix, m], -1)


def test_teacher_forced_heads_match_single(vae):
    s, z, a = _t([[0.1, 0.2]]), _t([[0.3, -0.1, 0.0, 0.5]]), _t([[0.4, -0.2, 0.7]])
    heads = vae.action_heads(s, z, a)
    for k in range(3):
        h = vae.action_head(s, z, a[:, :k])
        assert float(h.mean.detach()) == pytest.approx(float(heads.mean[0, k].detach()))


def test_vae_loss_gradients_finite_difference():
    vae = SkillVAE(2, 2, latent_dim=3, hidden=5, seed=1)
    rng = np.random.default_rng(0)
    s, a = _t(rng.normal(size=(3, 4, 2))), _t(rng.normal(size=(3, 4, 2)))
    eps = _t(rng.normal(size=(3, 3)))
    params = ParameterBundle.of(vae)
    err = finite_difference_check(lambda: vae_loss(vae, s, a, 0.05, eps=eps)[0], params,
                                  max_entries=6)
    assert err < 1e-4


def _toy_dataset(n=40, H=4):
    rng = np.random.default_rng(0)
    eps = []
    for i in range(n):
        sign = 1.0 if i % 2 else -1.0
        a = np.full((H * 2, 1), 0.5 * sign) + 0.01 * rng.normal(size=(H * 2, 1))
        s = np.concatenate([[[0.0]], np.cumsum(a, 0)])
        eps.append(EpisodeTrajectory(s, a, np.zeros(H * 2), timeout=True))
    return eps


def test_train_vae_fits_bimodal_actions():
    snips = stack_snippets(slice_snippets(_toy_dataset(), 4, 4))
    vae, curve = train_vae(snips, VaeConfig(latent_dim=2, hidden=16, lr=3e-3, batch_size=32, epochs=60), seed=0)
    assert curve[-1] < curve[0]
    z = encode_snippets(vae, snips, sample=False)
    a = vae.decode(snips.states[:, 0], z).numpy()[:, 0]
    assert np.mean(np.abs(a - snips.actions[:, 0, 0])) < 0.1


def test_encode_posterior_rejects_partial(vae):
    ep = EpisodeTrajectory(np.zeros((6, 2)), np.zeros((5, 3)), np.zeros(5), timeout=True)
    snips = slice_snippets([ep], 3, 1)
    assert encode_posterior(vae, snips[0]).mean.shape == (4,)
    with pytest.raises(ShapeError):
        encode_posterior(vae, snips[-1])


def test_partial_snippets_encode_their_valid_prefix(vae):
    rng = np.random.default_rng(3)
    ep = EpisodeTrajectory(rng.normal(size=(6, 2)), rng.normal(size=(5, 3)), np.zeros(5), timeout=True)
    arr = stack_snippets(slice_snippets([ep], 3, 1))
    means = encode_snippets(vae, arr, sample=False)
    last = arr.steps_valid[-1]
    with torch.no_grad():
        direct = vae.posterior(arr.states[-1:, :last], arr.actions[-1:, :last]).mean.numpy()
    np.testing.assert_allclose(means[-1], direct[0], atol=1e-10)


def test_gaussian_prior_no_grad(vae):
    p = gaussian_prior(vae, np.zeros((1, 2)))
    assert not p.mean.requires_grad


def test_masked_loss_ignores_padding(vae):
    rng = np.random.default_rng(5)
    s, a, eps = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 4))
    lengths = np.array([3, 2])
    base = vae_loss(vae, s, a, 0.05, eps=eps, lengths=lengths)[0].item()
    a2, s2 = a.copy(), s.copy()
    a2[1, 2] += 5.0
    s2[1, 2] -= 5.0
    assert vae_loss(vae, s2, a2, 0.05, eps=eps, lengths=lengths)[0].item() == pytest.approx(base, abs=1e-12)
    # full lengths reproduce the unmasked loss
    full = vae_loss(vae, s, a, 0.05, eps=eps, lengths=np.array([3, 3]))[0].item()
    assert full == pytest.approx(vae_loss(vae, s, a, 0.05, eps=eps)[0].item(), abs=1e-12)


def test_train_vae_partial_uses_tail_windows():
    snips = stack_snippets(slice_snippets(_toy_dataset(), 4, 3))
    assert (snips.steps_valid < 4).any()
    cfg = VaeConfig(latent_dim=2, hidden=8, lr=3e-3, batch_size=16, epochs=2)
    _, only_full = train_vae(snips, cfg, seed=0)
    _, with_tail = train_vae(snips, cfg, seed=0, partial=True)
    assert only_full != with_tail and np.isfinite(with_tail).all()
