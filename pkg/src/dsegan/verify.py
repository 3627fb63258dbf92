"""Invariant suite shared by ``dsegan verify`` and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adversarial import DiscriminatorParams, LossConfig, ca_loss, d_loss_terms, ma_gp
from .config import DEFAULT_GRANULARITY, RunConfig, tiny_config
from .dse import DseParams, TextFeatures, build_masks, dse_forward, recompose_masked, recompose_naive, route_elements, aggregate_features, GranularitySchedule
from .gradcheck import check_gradients
from .sama import CaParams, GeneratorParams, ca_augment, generator_forward
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    return wrapper


def _rand(rng, *shape):
    return Tensor(rng.uniform(-1, 1, shape))


def random_dse_instance(rng, L_t: int, K_agg: int, D_t: int, H, D_img: int = 8, L_img: int = 10):
    p = DseParams.init(rng, D_img, D_t, H, K_agg, L_t)
    words = _rand(rng, L_t, D_t)
    text = TextFeatures(words, _rand(rng, D_t))
    img = _rand(rng, L_img, D_img)
    return p, text, img


@_timed
def check_masked_equivalence(instances: int = 100, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        L_t = int(rng.integers(1, 9))
        K_agg = int(rng.choice([1, 4]))
        D_t = int(rng.choice([16, 32]))
        pool = np.array([1, 2, 4, 8, 16])
        H = tuple(pool[rng.random(5) < 0.5].tolist()) or (int(rng.choice(pool)),)
        p, text, img = random_dse_instance(rng, L_t, K_agg, D_t, H)
        with T.no_grad():
            agg = aggregate_features(img, p)
            gated, _ = route_elements(text, agg, p)
            a, pa = recompose_naive(gated, text.words, agg, p)
            b, pb = recompose_masked(gated, text.words, agg, p)
        worst = max(worst, float(np.abs(a.data - b.data).max()), float(np.abs(pa.data - pb.data).max()))
    return CheckResult("masked == naive re-composition", worst <= tol, f"max abs diff {worst:.2e} over {instances} instances (tol {tol:g})")


def _grad_result(name, reports) -> CheckResult:
    bad = [r for r in reports if not r.ok]
    worst = max((r.max_rel_err for r in reports if r.checked), default=0.0)
    checked = sum(r.checked for r in reports)
    detail = f"{len(reports)} tensors, {checked} coords, worst rel err {worst:.1e}"
    if bad:
        detail += "; failing: " + ", ".join(r.name for r in bad)
    return CheckResult(name, not bad, detail)


@_timed
def check_grad_dse(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    p, text, img = random_dse_instance(rng, 3, 2, 8, (1, 2, 4), D_img=6, L_img=5)
    w = _rand(rng, 3, 8)

    def f():
        out, _ = dse_forward(text, img, p)
        return T.sum_(out.words * w)

    params = dict(p.named_parameters())
    params.update({"words": text.words, "image": img})
    return _grad_result("gradients: dse_forward", check_gradients(f, params, seed=seed))


@_timed
def check_grad_ca(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    p = CaParams.init(rng, 6, 5)
    s = _rand(rng, 6)
    noise = Tensor(rng.standard_normal(5))

    def f():
        s_aug, _, _ = ca_augment(s, p, noise)
        return T.sum_(s_aug)

    return _grad_result("gradients: ca_augment", check_gradients(f, dict(p.named_parameters()), constants={"noise": noise}))


def tiny_generator(seed: int = 0, L_t: int = 3):
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    G = GeneratorParams.init(rng, cfg.stages, cfg.D_t, cfg.granularity, cfg.K_agg, L_t)
    text = TextFeatures(Tensor(rng.uniform(-1, 1, (2, L_t, cfg.D_t)), requires_grad=True), Tensor(rng.uniform(-1, 1, (2, cfg.D_t)), requires_grad=True))
    z = Tensor(rng.standard_normal((2, cfg.stages.D_z)))
    noise = Tensor(rng.standard_normal((2, cfg.stages.D_ca)))
    return cfg, G, text, z, noise


@_timed
def check_grad_generator(seed: int = 0, coords: int = 6) -> CheckResult:
    cfg, G, text, z, noise = tiny_generator(seed)
    rng = np.random.default_rng(seed + 1)
    w = Tensor(rng.uniform(-1, 1, (2, cfg.resolution, cfg.resolution, 3)))

    def f():
        out = generator_forward(z, text, G, noise)
        return T.sum_(out.image * w)

    params = dict(G.named_parameters())
    params.update({"text.words": text.words, "text.sentence": text.sentence})
    reports = check_gradients(f, params, max_coords=coords, seed=seed, constants={"z": z, "noise": noise})
    return _grad_result("gradients: generator_forward (tiny)", reports)


@_timed
def check_grad_discriminator(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    D = DiscriminatorParams.init(rng, 8, 8, base=4, max_ch=8)
    x = Tensor(rng.uniform(-1, 1, (2, 8, 8, 3)), requires_grad=True)
    s = Tensor(rng.uniform(-1, 1, (2, 8)), requires_grad=True)
    w = Tensor(np.array([0.7, -1.3]))

    def f():
        return T.sum_(D(x, s) * w)

    params = dict(D.named_parameters())
    params.update({"image": x, "sentence": s})
    return _grad_result("gradients: discriminate", check_gradients(f, params, seed=seed))


class TwoParamDisc:
    """``a * sum(tanh(x)) * sum(tanh(b * s))``: smooth, with mixed second derivatives."""

    def __init__(self, a: float, b: float):
        self.a = Tensor(np.array([a]), requires_grad=True)
        self.b = Tensor(np.array([b]), requires_grad=True)

    def __call__(self, x: Tensor, s: Tensor) -> Tensor:
        B = x.shape[0]
        fx = T.sum_(T.tanh(T.reshape(x, (B, -1))), axis=1)
        fs = T.sum_(T.tanh(s * self.b), axis=1)
        return T.reshape(self.a, ()) * fx * fs


@_timed
def check_grad_magp(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    disc = TwoParamDisc(0.8, -0.6)
    x = Tensor(rng.uniform(-1, 1, (3, 2, 2, 3)), requires_grad=True)
    s = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    cfg = LossConfig(p=2.0)

    def f():
        return ma_gp(disc(x, s), x, s, cfg)

    reports = check_gradients(f, {"a": disc.a, "b": disc.b}, constants={"x": x, "s": s})
    return _grad_result("gradients: MA-GP double backward (2-param D)", reports)


@_timed
def check_loss_identities() -> CheckResult:
    cfg = LossConfig()
    B, R = 3, 2
    rng = np.random.default_rng(0)
    real = Tensor(rng.uniform(-1, 1, (B, R, R, 3)))
    fake = Tensor(rng.uniform(-1, 1, (B, R, R, 3)))
    s = Tensor(rng.uniform(-1, 1, (B, 4)))
    s_mis = Tensor(rng.uniform(-1, 1, (B, 4)))

    def const_disc(x, sent):
        # +1 on real matched pairs, -1 on fake or mismatched ones
        matched_real = np.array_equal(x.data, real.data) and not np.array_equal(sent.data, s_mis.data)
        return T.Tensor._wrap(np.full(B, 1.0 if matched_real else -1.0, dtype=np.float32))

    saturated = d_loss_terms(real, fake, s, s_mis, const_disc, cfg)["total"].item()
    kl0 = ca_loss(Tensor(np.zeros(4)), Tensor(np.zeros(4))).item()
    kl1 = ca_loss(Tensor(np.array([1.0])), Tensor(np.array([0.0]))).item()

    def linear_disc(x, sent):
        return T.sum_(T.reshape(x, (x.shape[0], -1)), axis=1)

    gp = d_loss_terms(real, fake, s, s_mis, linear_disc, cfg)["gp"].item()
    analytic = cfg.lambda_MA * np.sqrt(R * R * 3) ** cfg.p
    gp_rel = abs(gp - analytic) / analytic
    ok = saturated == 0.0 and kl0 == 0.0 and abs(kl1 - 0.5) <= 1e-7 and gp_rel <= 1e-4
    detail = f"saturated d_loss={saturated:g}, KL(0,0)={kl0:g}, KL(mu=1)={kl1:.7f}, linear MA-GP {gp:.4f} vs {analytic:.4f} (rel {gp_rel:.1e})"
    return CheckResult("loss identities", ok, detail)


@_timed
def check_routing_invariants(passes: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    gate_ok = probs_ok = True
    worst_sum = 0.0
    with T.no_grad():
        for _ in range(passes):
            L_t = int(rng.integers(1, 9))
            p, text, img = random_dse_instance(rng, L_t, int(rng.choice([1, 4])), 16, (1, 2, 4, 8, 16))
            p.alpha.data = p.alpha.data * rng.uniform(0.1, 3.0)
            out, trace = dse_forward(text, img, p)
            a = float(p.alpha.data[0])
            gate_ok &= bool(np.all(trace.element_gate >= 0) and np.all(trace.element_gate <= a))
            dev = abs(float(trace.subspace_probs.astype(np.float64).sum()) - 1.0)
            worst_sum = max(worst_sum, dev)
            probs_ok &= bool(np.all(trace.subspace_probs >= 0)) and dev <= 1e-6
        p, text, img = random_dse_instance(rng, 8, 4, 16, (1, 2, 4, 8, 16))
        p.W_v.data = np.zeros_like(p.W_v.data)
        out, _ = dse_forward(text, img, p)
        identity = bool(np.array_equal(out.words.data, text.words.data))
    ok = gate_ok and probs_ok and identity
    detail = f"gates in [0, alpha]: {gate_ok}; probs on simplex (worst |sum-1|={worst_sum:.1e}): {probs_ok}; W_v=0 identity: {identity}"
    return CheckResult("routing invariants", ok, detail)


@_timed
def check_default_structure() -> CheckResult:
    cfg = RunConfig()
    s = GranularitySchedule(DEFAULT_GRANULARITY, 256)
    m = build_masks(s, 8, cfg.K_agg)
    partition = bool(
        np.array_equal(m.M_Q.data.sum(axis=0), np.ones((8, s.D_sum)))
        and np.array_equal(m.M_V.data.sum(axis=0), np.ones((cfg.K_agg, s.h_sum)))
    )
    o, l = cfg.optimizer, cfg.loss
    defaults = (
        l.p == 6 and l.lambda_MA == 2 and l.lambda1 == 1 and l.lambda2 == 0.1 and cfg.K_agg == 4
        and o.lr_G == 1e-4 and o.lr_D == 4e-4 and (o.beta1, o.beta2) == (0.0, 0.99)
        and cfg.D_t == 256 and cfg.granularity == DEFAULT_GRANULARITY
    )
    # D_sum = 1 + 2 + ... + 128 = 2**8 - 1 for the default list
    ok = s.D_sum == 255 and s.h_sum == 510 and partition and defaults
    return CheckResult("default structure", ok, f"D_sum={s.D_sum}, h_sum={s.h_sum}, masks partition={partition}, defaults match={defaults}")


def run_all(quick: bool = False) -> list[CheckResult]:
    n = 20 if quick else 100
    return [
        check_masked_equivalence(n),
        check_grad_dse(),
        check_grad_ca(),
        check_grad_generator(),
        check_grad_discriminator(),
        check_grad_magp(),
        check_loss_identities(),
        check_routing_invariants(100 if quick else 1000),
        check_default_structure(),
    ]
