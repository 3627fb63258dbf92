"""One-way conditional discriminator and the generator/discriminator objectives."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import Params, uniform_init
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    lambda_MA: float = 2.0
    p: float = 6.0
    lambda1: float = 1.0
    lambda2: float = 0.1
    match: str = "contrastive"  # or "none"
    temperature: float = 0.1

    def __post_init__(self):
        for name in ("lambda_MA", "p", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.match not in ("contrastive", "none"):
            raise ValueError(f"unknown matching loss {self.match!r}")


@dataclass
class Conv(Params):
    weight: Tensor  # [k, k, C_in, C_out]
    bias: Tensor
    stride: int = 1
    pad: int = 0

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0) -> "Conv":
        fan_in = k * k * c_in
        return cls(uniform_init(rng, (k, k, c_in, c_out), fan_in), uniform_init(rng, (c_out,), fan_in), stride, pad)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


@dataclass
class DiscriminatorParams(Params):
    """Conv trunk down to 4x4, sentence fused on channels, two convs to a scalar."""

    stem: Conv
    downs: list
    fuse: Conv
    out: Conv
    resolution: int = 64
    slope: float = 0.2

    @classmethod
    def init(cls, rng, resolution: int, D_t: int, base: int = 16, max_ch: int = 64) -> "DiscriminatorParams":
        n_down = int(np.log2(resolution // 4)) if resolution >= 4 else -1
        if n_down < 0 or 4 * 2**n_down != resolution:
            raise ValueError(f"resolution must be 4 * 2^k, got {resolution}")
        chans = [base]
        downs = []
        for _ in range(n_down):
            c_out = min(chans[-1] * 2, max_ch)
            downs.append(Conv.init(rng, chans[-1], c_out, 4, stride=2, pad=1))
            chans.append(c_out)
        c = chans[-1]
        return cls(
            Conv.init(rng, 3, base, 3, 1, 1),
            downs,
            Conv.init(rng, c + D_t, c, 3, 1, 1),
            Conv.init(rng, c, 1, 4, 1, 0),
            resolution,
        )

    def features(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1:] != (self.resolution, self.resolution, 3):
            raise ShapeError(f"discriminator expects [B, {self.resolution}, {self.resolution}, 3], got {image.shape}")
        h = T.leaky_relu(self.stem(image), self.slope)
        for conv in self.downs:
            h = T.leaky_relu(conv(h), self.slope)
        return h  # [B, 4, 4, C]

    def head(self, feats: Tensor, sentence: Tensor) -> Tensor:
        B, H, W, _ = feats.shape
        s = T.broadcast_to(T.reshape(sentence, (B, 1, 1, sentence.shape[-1])), (B, H, W, sentence.shape[-1]))
        h = T.leaky_relu(self.fuse(T.concat([feats, s], axis=-1)), self.slope)
        return T.reshape(self.out(h), (B,))

    @property
    def channels(self) -> int:
        return self.out.weight.shape[2]

    def encode(self, image: Tensor) -> Tensor:
        """Trunk features average-pooled over the 4x4 grid, ``[B, C]``."""
        return T.mean(self.features(image), axis=(1, 2))

    def __call__(self, image: Tensor, sentence: Tensor) -> Tensor:
        return self.head(self.features(image), sentence)


def discriminate(image: Tensor, sentence: Tensor, p: DiscriminatorParams) -> Tensor:
    """Decision per (image, sentence) pair, shape ``[B]``."""
    return p(image, sentence)


Disc = Callable[[Tensor, Tensor], Tensor]


def _leaf(x: Tensor) -> Tensor:
    t = x.detach()
    t.requires_grad = True
    return t


def ma_gp(d_real: Tensor, real: Tensor, sentence: Tensor, cfg: LossConfig) -> Tensor:
    """``lambda * mean((|dD/dx| + |dD/ds|)^p)`` with a differentiable gradient graph."""
    B = real.shape[0]
    gx, gs = T.grad(T.sum_(d_real), [real, sentence], create_graph=True)
    norm = T.l2norm(T.reshape(gx, (B, -1)), axis=1) + T.l2norm(T.reshape(gs, (B, -1)), axis=1)
    return T.mean(T.power(norm, cfg.p)) * cfg.lambda_MA


def d_loss_terms(real: Tensor, fake: Tensor, sentence: Tensor, mismatched: Tensor, disc: Disc, cfg: LossConfig) -> dict:
    """Hinge terms on matched/fake/mismatched pairs plus the penalty at real matched pairs."""
    x, s = _leaf(real), _leaf(sentence)
    fake = fake.detach()
    mismatched = mismatched.detach()
    if hasattr(disc, "features"):
        real_feats = disc.features(x)
        d_real = disc.head(real_feats, s)
        d_mis = disc.head(real_feats, mismatched)
        d_fake = disc(fake, s.detach())
    else:
        d_real = disc(x, s)
        d_mis = disc(x, mismatched)
        d_fake = disc(fake, s.detach())
    real_term = T.mean(T.relu(1.0 - d_real))
    fake_term = T.mean(T.relu(1.0 + d_fake)) * 0.5
    mis_term = T.mean(T.relu(1.0 + d_mis)) * 0.5
    gp = ma_gp(d_real, x, s, cfg)
    total = real_term + fake_term + mis_term + gp
    return {"total": total, "real": real_term, "fake": fake_term, "mismatched": mis_term, "gp": gp}


def d_loss(real, fake, sentence, mismatched, disc: Disc, cfg: LossConfig) -> Tensor:
    return d_loss_terms(real, fake, sentence, mismatched, disc, cfg)["total"]


def ca_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over dims, averaged over the batch."""
    kl = (mu * mu + T.exp(logvar) - logvar - 1.0) * 0.5
    per_sample = T.sum_(kl, axis=-1)
    return T.mean(per_sample) if per_sample.ndim else per_sample


def contrastive_from_similarity(sim: Tensor, temperature: float = 0.1) -> Tensor:
    """Symmetric cross-entropy with the diagonal as targets, rows and columns averaged."""
    B = sim.shape[0]
    logits = sim * (1.0 / temperature)
    eye = T.Tensor._wrap(np.eye(B, dtype=sim.data.dtype))
    rows = -T.mean(T.sum_(T.log_softmax(logits, axis=1) * eye, axis=1))
    cols = -T.mean(T.sum_(T.log_softmax(logits, axis=0) * eye, axis=0))
    return (rows + cols) * 0.5


def match_loss(fake_images: Tensor, sentences: Tensor, encoder: Callable[[Tensor], Tensor], temperature: float = 0.1) -> Tensor:
    """Contrastive image/sentence matching; a stand-in for a pretrained matching model."""
    B = fake_images.shape[0]
    if B < 2:
        log.warning("matching loss needs a batch of at least 2; returning 0")
        return T.Tensor._wrap(np.zeros((), dtype=fake_images.data.dtype))
    img = encoder(fake_images)
    img = img / T.reshape(T.l2norm(img, axis=1) + 1e-8, (B, 1))
    txt = sentences / T.reshape(T.l2norm(sentences, axis=1) + 1e-8, (B, 1))
    return contrastive_from_similarity(img @ T.swapaxes(txt, 0, 1), temperature)


@dataclass
class MatchHead(Params):
    """Linear map from pooled discriminator-trunk features into text space.

    Together with the trunk this is the image side of the matching loss. It is
    fitted on real matched pairs only (``match_head_loss``), and the generator
    reads it frozen.
    """

    weight: Tensor  # [C, D_t]

    @classmethod
    def init(cls, rng, channels: int, D_t: int) -> "MatchHead":
        return cls(Tensor(rng.normal(0, 1.0 / np.sqrt(channels), (channels, D_t)), requires_grad=True))

    def __call__(self, pooled: Tensor) -> Tensor:
        return pooled @ self.weight

    def encoder(self, disc: "DiscriminatorParams") -> Callable[[Tensor], Tensor]:
        return lambda image: self(disc.encode(image))


def match_head_loss(real: Tensor, sentences: Tensor, disc: "DiscriminatorParams", head: MatchHead, temperature: float = 0.1) -> Tensor:
    """Contrastive loss of the head on real pairs; trunk and sentences are held fixed."""
    with T.no_grad():
        pooled = disc.encode(real).data
    return match_loss(Tensor._wrap(pooled), sentences.detach(), head, temperature)


def g_loss_terms(
    fake: Tensor,
    sentence: Tensor,
    mu: Tensor,
    logvar: Tensor,
    match_value: Tensor | None,
    disc: Disc,
    cfg: LossConfig,
) -> dict:
    adv = -T.mean(disc(fake, sentence))
    kl = ca_loss(mu, logvar)
    total = adv + kl * cfg.lambda1
    if match_value is not None and cfg.lambda2:
        total = total + match_value * cfg.lambda2
    if match_value is None:
        match_value = T.Tensor._wrap(np.zeros((), dtype=fake.data.dtype))
    return {"total": total, "adv": adv, "ca": kl, "match": match_value}


def g_loss(fake, sentence, mu, logvar, match_value, disc: Disc, cfg: LossConfig) -> Tensor:
    return g_loss_terms(fake, sentence, mu, logvar, match_value, disc, cfg)["total"]
