"""Single-adversary multi-stage generator.

Stage 0 maps noise and the augmented sentence to a coarse token grid. Each
later stage re-composes the words with a DSE module, lets image tokens
cross-attend to them, refines with transformer blocks and doubles the grid.
Every stage emits an RGB residual; the final image is their learnable
weighted sum after nearest-neighbour upsampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dse import DseParams, RoutingTrace, TextFeatures, dse_forward
from .nn import (
    LayerNorm,
    Linear,
    MultiHeadAttention,
    Params,
    TransformerBlock,
    derived,
    heads_for,
    uniform_init,
)
from .tensor import ShapeError, Tensor

LOGVAR_CLAMP = 10.0


@dataclass(frozen=True)
class StageConfig:
    num_stages: int = 4
    base_grid: int = 8
    base_dim: int = 64
    blocks: int = 1
    D_z: int = 100
    D_ca: int = 128
    attn_window: int = 16

    def __post_init__(self):
        if self.num_stages < 1:
            raise ValueError("need at least one stage")

    @property
    def M(self) -> int:
        return self.num_stages - 1

    def grid(self, i: int) -> int:
        return self.base_grid * 2**i

    def tokens(self, i: int) -> int:
        return self.grid(i) ** 2

    def dim(self, i: int) -> int:
        d = self.base_dim
        for _ in range(i):
            d = max(16, d // 2)
        return d

    @property
    def resolution(self) -> int:
        return self.grid(self.M)


@dataclass
class StageOutput:
    features: Tensor  # [B, L_i, D_i]
    rgb: Tensor  # [B, g_i, g_i, 3], tanh-bounded


@dataclass
class CaParams(Params):
    W_mu: Tensor
    W_logvar: Tensor

    @classmethod
    def init(cls, rng, D_t: int, D_ca: int) -> "CaParams":
        return cls(uniform_init(rng, (D_t, D_ca), D_t), uniform_init(rng, (D_t, D_ca), D_t))


def ca_augment(sentence: Tensor, p: CaParams, noise) -> tuple[Tensor, Tensor, Tensor]:
    """Reparameterized resample of the sentence vector; returns (s_aug, mu, logvar)."""
    s = sentence if sentence.ndim >= 2 else T.reshape(sentence, (1, -1))
    mu = s @ p.W_mu
    logvar = T.clamp(s @ p.W_logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    noise = T._const(noise, mu)
    s_aug = mu + T.exp(logvar * 0.5) * noise
    if sentence.ndim == 1:
        s_aug, mu, logvar = (T.reshape(x, (-1,)) for x in (s_aug, mu, logvar))
    return s_aug, mu, logvar


@dataclass
class InitialStageParams(Params):
    fc: Linear
    pos: Tensor
    blocks: list
    rgb: Linear

    @classmethod
    def init(cls, rng, cfg: StageConfig) -> "InitialStageParams":
        L0, D0 = cfg.tokens(0), cfg.dim(0)
        return cls(
            Linear.init(rng, cfg.D_z + cfg.D_ca, L0 * D0),
            Tensor(rng.normal(0, 0.02, (L0, D0)), requires_grad=True),
            [TransformerBlock.init(rng, D0, heads_for(D0), cfg.attn_window) for _ in range(cfg.blocks)],
            Linear.init(rng, D0, 3),
        )


def _rgb(features: Tensor, head: Linear, grid: int) -> Tensor:
    B = features.shape[0]
    return T.reshape(T.tanh(head(features)), (B, grid, grid, 3))


def initial_stage(z: Tensor, s_aug: Tensor, p: InitialStageParams, cfg: StageConfig) -> StageOutput:
    if z.shape[-1] != cfg.D_z or s_aug.shape[-1] != cfg.D_ca:
        raise ShapeError(f"initial stage expects z dim {cfg.D_z} and s_aug dim {cfg.D_ca}")
    B = z.shape[0]
    L0, D0, g0 = cfg.tokens(0), cfg.dim(0), cfg.grid(0)
    h = T.reshape(p.fc(T.concat([z, s_aug], axis=-1)), (B, L0, D0)) + p.pos
    for blk in p.blocks:
        h = blk(h, g0)
    return StageOutput(h, _rgb(h, p.rgb, g0))


@dataclass
class SubGeneratorParams(Params):
    ln_cross: LayerNorm
    cross: MultiHeadAttention
    blocks: list
    up: Linear
    pos: Tensor
    rgb: Linear

    @classmethod
    def init(cls, rng, cfg: StageConfig, i: int, D_t: int) -> "SubGeneratorParams":
        d_prev, d = cfg.dim(i - 1), cfg.dim(i)
        return cls(
            LayerNorm.init(d_prev),
            MultiHeadAttention.init(rng, d_prev, D_t, d_prev, heads_for(d_prev)),
            [TransformerBlock.init(rng, d_prev, heads_for(d_prev), cfg.attn_window) for _ in range(cfg.blocks)],
            Linear.init(rng, d_prev, d),
            Tensor(rng.normal(0, 0.02, (cfg.tokens(i), d)), requires_grad=True),
            Linear.init(rng, d, 3),
        )


def sub_generator(prev: Tensor, words: TextFeatures, p: SubGeneratorParams, grid_prev: int) -> StageOutput:
    """Cross-attend to words, refine, then 2x nearest upsample with channel projection."""
    if prev.shape[-1] != p.ln_cross.gain.shape[0]:
        raise ShapeError(f"previous features have dim {prev.shape[-1]}, stage expects {p.ln_cross.gain.shape[0]}")
    B, L, D = prev.shape
    if L != grid_prev * grid_prev:
        raise ShapeError(f"{L} tokens do not form a {grid_prev}x{grid_prev} grid")
    h = prev + p.cross(p.ln_cross(prev), words.words)
    for blk in p.blocks:
        h = blk(h, grid_prev)
    grid = 2 * grid_prev
    up = T.upsample_nearest(T.reshape(h, (B, grid_prev, grid_prev, D)), 2)
    feats = p.up(T.reshape(up, (B, grid * grid, D))) + p.pos
    return StageOutput(feats, _rgb(feats, p.rgb, grid))


@dataclass
class IntegrationWeights(Params):
    alphas: Tensor

    @classmethod
    def init(cls, num_stages: int) -> "IntegrationWeights":
        return cls(Tensor(np.full(num_stages, 1.0 / num_stages), requires_grad=True))


def integrate_rgb(stage_rgbs: list[Tensor], w: IntegrationWeights) -> Tensor:
    if len(stage_rgbs) != w.alphas.shape[0]:
        raise ShapeError(f"{len(stage_rgbs)} stage images but {w.alphas.shape[0]} weights")
    res = stage_rgbs[-1].shape[1]
    total = None
    for i, x in enumerate(stage_rgbs):
        term = T.upsample_nearest(x, res // x.shape[1]) * w.alphas[i]
        total = term if total is None else total + term
    return total


def weighted_stage_images(stage_rgbs: list[Tensor], w: IntegrationWeights) -> list[Tensor]:
    """The individual ``alpha_i * up(x_i)`` summands, for export."""
    res = stage_rgbs[-1].shape[1]
    return [T.upsample_nearest(x, res // x.shape[1]) * w.alphas[i] for i, x in enumerate(stage_rgbs)]


@dataclass
class GeneratorParams(Params):
    ca: CaParams
    initial: InitialStageParams
    dse: list
    stages: list
    integration: IntegrationWeights
    config: StageConfig = derived()

    @classmethod
    def init(
        cls,
        rng,
        cfg: StageConfig,
        D_t: int,
        H,
        K_agg: int = 4,
        L_t: int = 8,
        element_routing: bool = True,
        subspace_routing: str = "soft",
    ) -> "GeneratorParams":
        return cls(
            ca=CaParams.init(rng, D_t, cfg.D_ca),
            initial=InitialStageParams.init(rng, cfg),
            dse=[
                DseParams.init(rng, cfg.dim(i - 1), D_t, H, K_agg, L_t, element_routing, subspace_routing)
                for i in range(1, cfg.num_stages)
            ],
            stages=[SubGeneratorParams.init(rng, cfg, i, D_t) for i in range(1, cfg.num_stages)],
            integration=IntegrationWeights.init(cfg.num_stages),
            config=cfg,
        )


@dataclass
class GeneratorOutput:
    image: Tensor  # [B, R, R, 3]
    stages: list
    traces: list
    mu: Tensor
    logvar: Tensor
    words: list = field(default_factory=list)  # T_0 .. T_M


def generator_forward(
    z: Tensor,
    text: TextFeatures,
    G: GeneratorParams,
    ca_noise,
    gumbel: list | None = None,
    static_text: bool = False,
) -> GeneratorOutput:
    """Run all stages; ``static_text`` skips re-composition so every stage sees the original words."""
    cfg = G.config
    s_aug, mu, logvar = ca_augment(text.sentence, G.ca, ca_noise)
    out = initial_stage(z, s_aug, G.initial, cfg)
    stages, traces, words = [out], [], [text.words]
    current = text
    for i in range(1, cfg.num_stages):
        if not static_text:
            g = gumbel[i - 1] if gumbel is not None else None
            current, trace = dse_forward(current, out.features, G.dse[i - 1], stage_index=i, gumbel=g)
            traces.append(trace)
        words.append(current.words)
        out = sub_generator(out.features, current, G.stages[i - 1], cfg.grid(i - 1))
        stages.append(out)
    image = integrate_rgb([s.rgb for s in stages], G.integration)
    return GeneratorOutput(image, stages, traces, mu, logvar, words)
