import logging

import numpy as np
import pytest

from dsegan import tensor as T
from dsegan.adversarial import (
    DiscriminatorParams,
    LossConfig,
    MatchHead,
    ca_loss,
    contrastive_from_similarity,
    d_loss,
    d_loss_terms,
    discriminate,
    g_loss,
    g_loss_terms,
    ma_gp,
    match_head_loss,
    match_loss,
)
from dsegan.optim import Adam
from dsegan.gradcheck import check_gradients
from dsegan.tensor import ShapeError, Tensor
from dsegan.verify import TwoParamDisc


def rand(rng, *shape, grad=False):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=grad)


def small_disc(seed=0, res=8, D_t=4):
    return DiscriminatorParams.init(np.random.default_rng(seed), res, D_t, base=4, max_ch=8)


def small_head(D, seed=0, D_t=4):
    return MatchHead.init(np.random.default_rng(seed), D.channels, D_t)


def const_disc(value_fn):
    def disc(x, s):
        return Tensor._wrap(np.full(x.shape[0], value_fn(x, s), dtype=np.float32))

    return disc


# ---------------------------------------------------------------- discriminator


def test_zero_weights_output_zero():
    D = small_disc()
    for p in D.parameters():
        p.data[:] = 0
    rng = np.random.default_rng(1)
    np.testing.assert_array_equal(discriminate(rand(rng, 3, 8, 8, 3), rand(rng, 3, 4), D).data, 0.0)


def test_one_scalar_per_pair():
    D = small_disc()
    rng = np.random.default_rng(2)
    assert discriminate(rand(rng, 1, 8, 8, 3), rand(rng, 1, 4), D).shape == (1,)
    assert discriminate(rand(rng, 5, 8, 8, 3), rand(rng, 5, 4), D).shape == (5,)


def test_gradient_probe_image_and_sentence():
    D = small_disc()
    rng = np.random.default_rng(3)
    x, s = rand(rng, 2, 8, 8, 3, grad=True), rand(rng, 2, 4, grad=True)
    gx, gs = T.grad(T.sum_(D(x, s)), [x, s])
    assert np.abs(gx.data).max() > 0 and np.abs(gs.data).max() > 0


def test_resolution_mismatch():
    with pytest.raises(ShapeError):
        small_disc()(Tensor(np.zeros((1, 16, 16, 3))), Tensor(np.zeros((1, 4))))
    with pytest.raises(ValueError):
        DiscriminatorParams.init(np.random.default_rng(0), 12, 4)


# ---------------------------------------------------------------- d_loss


def _batch(rng, B=3, R=4, D_t=4):
    return rand(rng, B, R, R, 3), rand(rng, B, R, R, 3), rand(rng, B, D_t), rand(rng, B, D_t)


def test_margin_saturated_loss_is_zero():
    rng = np.random.default_rng(4)
    real, fake, s, s_mis = _batch(rng)

    def value(x, sent):
        return 1.0 if np.array_equal(x.data, real.data) and np.array_equal(sent.data, s.data) else -1.0

    terms = d_loss_terms(real, fake, s, s_mis, const_disc(value), LossConfig())
    assert {k: v.item() for k, v in terms.items()} == {"total": 0, "real": 0, "fake": 0, "mismatched": 0, "gp": 0}


def test_linear_disc_penalty_closed_form():
    rng = np.random.default_rng(5)
    real, fake, s, s_mis = _batch(rng, R=4)
    cfg = LossConfig()

    def linear(x, sent):
        return T.sum_(T.reshape(x, (x.shape[0], -1)), axis=1)

    gp = d_loss_terms(real, fake, s, s_mis, linear, cfg)["gp"].item()
    want = 2.0 * np.sqrt(4 * 4 * 3) ** 6
    assert abs(gp - want) / want <= 1e-4


def test_mismatched_term_arithmetic():
    rng = np.random.default_rng(6)
    real, fake, s, s_mis = _batch(rng)
    terms = d_loss_terms(real, fake, s, s_mis, const_disc(lambda x, s: 1.0), LossConfig())
    assert terms["mismatched"].item() == 1.0
    assert terms["fake"].item() == 1.0
    assert terms["real"].item() == 0.0
    assert terms["total"].item() == 2.0


def test_hinge_saturation_real_term():
    rng = np.random.default_rng(7)
    real, fake, s, s_mis = _batch(rng)
    for v in (1.0, 3.0, 50.0):
        assert d_loss_terms(real, fake, s, s_mis, const_disc(lambda x, s, v=v: v), LossConfig())["real"].item() == 0.0
    assert d_loss_terms(real, fake, s, s_mis, const_disc(lambda x, s: 0.5), LossConfig())["real"].item() == 0.5


def test_d_loss_finite_and_penalty_nonnegative_on_network():
    rng = np.random.default_rng(8)
    D = small_disc()
    real, fake, s, s_mis = _batch(rng, R=8)
    terms = d_loss_terms(real, fake, s, s_mis, D, LossConfig())
    assert np.isfinite(terms["total"].item()) and terms["gp"].item() >= 0
    assert d_loss(real, fake, s, s_mis, D, LossConfig()).item() == pytest.approx(terms["total"].item(), rel=1e-6)


def test_shared_trunk_matches_generic_path():
    rng = np.random.default_rng(9)
    D = small_disc()
    real, fake, s, s_mis = _batch(rng, R=8)
    cfg = LossConfig()
    a = d_loss_terms(real, fake, s, s_mis, D, cfg)
    b = d_loss_terms(real, fake, s, s_mis, lambda x, t: D(x, t), cfg)
    for k in a:
        assert a[k].item() == pytest.approx(b[k].item(), rel=1e-5)


def test_penalty_two_param_second_order():
    rng = np.random.default_rng(10)
    disc = TwoParamDisc(0.9, 0.4)
    x, s = rand(rng, 2, 2, 2, 3, grad=True), rand(rng, 2, 3, grad=True)
    reports = check_gradients(lambda: ma_gp(disc(x, s), x, s, LossConfig()), {"a": disc.a, "b": disc.b})
    assert all(r.ok for r in reports), reports


def test_penalty_two_param_closed_form():
    with T.precision(np.float64):
        rng = np.random.default_rng(11)
        a, b = 0.9, 0.4
        disc = TwoParamDisc(a, b)
        x, s = rand(rng, 2, 2, 2, 3, grad=True), rand(rng, 2, 3, grad=True)
        got = ma_gp(disc(x, s), x, s, LossConfig(p=2, lambda_MA=1)).item()
    xb, sb = x.data.reshape(2, -1), s.data
    fx, fs = np.tanh(xb).sum(1), np.tanh(b * sb).sum(1)
    gx = a * (1 - np.tanh(xb) ** 2) * fs[:, None]
    gs = a * fx[:, None] * b * (1 - np.tanh(b * sb) ** 2)
    want = np.mean((np.linalg.norm(gx, axis=1) + np.linalg.norm(gs, axis=1)) ** 2)
    assert got == pytest.approx(want, rel=1e-9)


def test_penalty_gradient_through_network_weights():
    rng = np.random.default_rng(12)
    D = DiscriminatorParams.init(rng, 4, 3, base=3, max_ch=3)
    x, s = rand(rng, 2, 4, 4, 3, grad=True), rand(rng, 2, 3, grad=True)
    cfg = LossConfig(p=2)
    params = {k: v for k, v in D.named_parameters() if k.startswith(("fuse", "out", "stem.weight"))}
    reports = check_gradients(lambda: ma_gp(D(x, s), x, s, cfg), params, max_coords=8)
    assert all(r.ok for r in reports), reports


# ---------------------------------------------------------------- generator-side losses


def test_ca_loss_closed_forms():
    assert ca_loss(Tensor(np.zeros(3)), Tensor(np.zeros(3))).item() == 0.0
    assert ca_loss(Tensor([1.0]), Tensor([0.0])).item() == 0.5


def test_ca_loss_monte_carlo():
    rng = np.random.default_rng(13)
    mu = rng.uniform(-1, 1, 3)
    logvar = rng.uniform(-1, 1, 3)
    sd = np.exp(logvar / 2)
    x = mu + sd * rng.standard_normal((1_000_000, 3))
    log_q = -0.5 * (((x - mu) / sd) ** 2 + logvar + np.log(2 * np.pi))
    log_p = -0.5 * (x**2 + np.log(2 * np.pi))
    mc = float((log_q - log_p).sum(1).mean())
    got = ca_loss(Tensor(mu), Tensor(logvar)).item()
    assert abs(got - mc) / mc <= 0.01
    assert got >= 0


def test_ca_loss_batch_is_mean_of_sums():
    rng = np.random.default_rng(14)
    mu, lv = rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (4, 3))
    want = np.mean(0.5 * (mu**2 + np.exp(lv) - lv - 1).sum(1))
    assert ca_loss(Tensor(mu), Tensor(lv)).item() == pytest.approx(want, rel=1e-6)


def test_g_loss_weights_off_is_pure_adversarial():
    rng = np.random.default_rng(15)
    fake, s = rand(rng, 3, 8, 8, 3), rand(rng, 3, 4)
    mu, lv = rand(rng, 3, 5), rand(rng, 3, 5)
    D = small_disc()
    cfg = LossConfig(lambda1=0, lambda2=0)
    got = g_loss(fake, s, mu, lv, Tensor(7.0), D, cfg).item()
    assert got == pytest.approx(-D(fake, s).data.mean(), rel=1e-6)


def test_g_loss_defaults():
    cfg = LossConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.p, cfg.lambda_MA) == (1.0, 0.1, 6.0, 2.0)


def test_g_loss_composition():
    rng = np.random.default_rng(16)
    fake, s = rand(rng, 3, 8, 8, 3), rand(rng, 3, 4)
    mu, lv = rand(rng, 3, 5), rand(rng, 3, 5)
    D = small_disc()
    m = Tensor(0.37)
    cfg = LossConfig(lambda1=0.7, lambda2=0.3)
    adv = -float(D(fake, s).data.mean())
    kl = float(np.mean(0.5 * (mu.data**2 + np.exp(lv.data) - lv.data - 1).sum(1)))
    terms = g_loss_terms(fake, s, mu, lv, m, D, cfg)
    assert terms["total"].item() == pytest.approx(adv + 0.7 * kl + 0.3 * 0.37, rel=1e-5)
    assert terms["adv"].item() == pytest.approx(adv, rel=1e-5)


def test_lossconfig_rejects_negative_weights():
    with pytest.raises(ValueError):
        LossConfig(lambda2=-1)


# ---------------------------------------------------------------- matching loss


def test_contrastive_perfect_alignment_limit():
    sim = Tensor(np.eye(4) * 10.0)
    assert contrastive_from_similarity(sim, 0.1).item() < 1e-6


def test_match_loss_batch_one_returns_zero(caplog):
    rng = np.random.default_rng(17)
    with caplog.at_level(logging.WARNING):
        D = small_disc()
        out = match_loss(rand(rng, 1, 8, 8, 3), rand(rng, 1, 4), small_head(D).encoder(D))
    assert out.item() == 0.0 and "at least 2" in caplog.text


def test_contrastive_matches_hand_computation():
    rng = np.random.default_rng(18)
    sim = rng.uniform(-1, 1, (4, 4))
    logits = sim / 0.1
    rows = -np.mean([logits[i, i] - np.log(np.exp(logits[i]).sum()) for i in range(4)])
    cols = -np.mean([logits[i, i] - np.log(np.exp(logits[:, i]).sum()) for i in range(4)])
    assert contrastive_from_similarity(Tensor(sim), 0.1).item() == pytest.approx((rows + cols) / 2, rel=1e-5)


def test_match_loss_uses_cosine_similarity():
    rng = np.random.default_rng(19)
    imgs, sents = rand(rng, 4, 8, 8, 3), rand(rng, 4, 4)
    D = small_disc()
    head = small_head(D)
    e = D.encode(imgs).data.astype(np.float64) @ head.weight.data
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    t = sents.data / np.linalg.norm(sents.data, axis=1, keepdims=True)
    want = contrastive_from_similarity(Tensor(e @ t.T), 0.1).item()
    assert match_loss(imgs, sents, head.encoder(D)).item() == pytest.approx(want, rel=1e-4)


def test_match_loss_reaches_generator_only_when_frozen():
    rng = np.random.default_rng(20)
    D = small_disc()
    head = small_head(D)
    imgs, sents = rand(rng, 3, 8, 8, 3, grad=True), rand(rng, 3, 4)
    with T.frozen(D.parameters() + head.parameters()):
        match_loss(imgs, sents, head.encoder(D)).backward()
    assert imgs.grad is not None
    assert all(p.grad is None for p in D.parameters() + head.parameters())


def test_match_head_fit_touches_only_the_head():
    rng = np.random.default_rng(21)
    D = small_disc()
    head = small_head(D)
    real, sents = rand(rng, 4, 8, 8, 3, grad=True), rand(rng, 4, 4, grad=True)
    match_head_loss(real, sents, D, head).backward()
    assert head.weight.grad is not None and np.any(head.weight.grad.data != 0)
    assert real.grad is None and sents.grad is None
    assert all(p.grad is None for p in D.parameters())


def test_match_head_fit_learns_real_pairs():
    rng = np.random.default_rng(22)
    D = small_disc()
    head = small_head(D)
    real, sents = rand(rng, 6, 8, 8, 3), rand(rng, 6, 4)
    opt = Adam(dict(head.named_parameters()), 1e-2)
    first = match_head_loss(real, sents, D, head).item()
    for _ in range(200):
        opt.zero_grad()
        match_head_loss(real, sents, D, head).backward()
        opt.step()
    assert match_head_loss(real, sents, D, head).item() < 0.5 * first
