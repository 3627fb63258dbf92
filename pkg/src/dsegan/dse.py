"""Dynamic semantic evolution: re-composing word features from the previous stage's image.

Three steps per stage: softmax-weighted pooling of image tokens into a few
text-space vectors, a per-word gate deciding which words get re-composed,
and attention over multi-granularity subspaces that scales each subspace of
each gated word by a factor in (-1, 1), mixed by a router over granularities.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Params, derived, uniform_init
from .tensor import ShapeError, Tensor

SUBSPACE_ROUTING_MODES = ("soft", "hard", "fixed")


@dataclass
class TextFeatures:
    words: Tensor  # [..., L_t, D_t]
    sentence: Tensor  # [..., D_t]

    @property
    def L_t(self) -> int:
        return self.words.shape[-2]

    @property
    def D_t(self) -> int:
        return self.words.shape[-1]


@dataclass(frozen=True)
class GranularitySchedule:
    H: tuple[int, ...]
    D_t: int

    def __post_init__(self):
        H = tuple(int(h) for h in self.H)
        object.__setattr__(self, "H", H)
        if not H:
            raise ValueError("granularity schedule is empty")
        if len(set(H)) != len(H):
            raise ValueError(f"subspace counts must be distinct, got {H}")
        bad = [h for h in H if h <= 0 or self.D_t % h]
        if bad:
            raise ValueError(f"subspace counts {bad} do not divide D_t={self.D_t}")

    @property
    def N(self) -> int:
        return len(self.H)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.D_t // h for h in self.H)

    @property
    def D_sum(self) -> int:
        return sum(self.dims)

    @property
    def h_sum(self) -> int:
        return sum(self.H)

    def dim_offsets(self) -> list[int]:
        return [0, *np.cumsum(self.dims).tolist()]

    def h_offsets(self) -> list[int]:
        return [0, *np.cumsum(self.H).tolist()]


@dataclass
class AdjacencyMasks:
    M_Q: Tensor  # [N, L_t, D_sum]
    M_V: Tensor  # [N, K_agg, h_sum]


def build_masks(schedule: GranularitySchedule, L_t: int, K_agg: int) -> AdjacencyMasks:
    N = schedule.N
    mq = np.zeros((N, L_t, schedule.D_sum))
    mv = np.zeros((N, K_agg, schedule.h_sum))
    qo, ho = schedule.dim_offsets(), schedule.h_offsets()
    for j in range(N):
        mq[j, :, qo[j] : qo[j + 1]] = 1.0
        mv[j, :, ho[j] : ho[j + 1]] = 1.0
    return AdjacencyMasks(Tensor(mq), Tensor(mv))


def expansion_matrix(schedule: GranularitySchedule) -> np.ndarray:
    """``[h_sum, D_t]`` 0/1 matrix copying each subspace factor over its ``D_t / h`` dims."""
    E = np.zeros((schedule.h_sum, schedule.D_t))
    row = 0
    for h, d in zip(schedule.H, schedule.dims):
        for k in range(h):
            E[row + k, k * d : (k + 1) * d] = 1.0
        row += h
    return E


@dataclass
class DseParams(Params):
    W_a: Tensor  # [D_img, K_agg]
    W_c: Tensor  # [D_img, D_t]
    W_e: Tensor  # [1, 2 D_t]
    alpha: Tensor  # [1]
    W_q: Tensor  # [D_t, D_sum]
    W_k: Tensor  # [D_t, D_sum]
    W_v: Tensor  # [D_t, h_sum]
    W_r: Tensor  # [D_t, N]
    schedule: GranularitySchedule = derived()
    masks: AdjacencyMasks = derived()
    K_agg: int = derived(default=4)
    element_routing: bool = derived(default=True)
    subspace_routing: str = derived(default="soft")
    expand: Tensor | None = derived(default=None)

    def __post_init__(self):
        if self.subspace_routing not in SUBSPACE_ROUTING_MODES:
            raise ValueError(f"subspace_routing must be one of {SUBSPACE_ROUTING_MODES}")
        if self.expand is None:
            self.expand = Tensor(expansion_matrix(self.schedule))

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        D_img: int,
        D_t: int,
        H,
        K_agg: int = 4,
        L_t: int = 8,
        element_routing: bool = True,
        subspace_routing: str = "soft",
    ) -> "DseParams":
        s = GranularitySchedule(tuple(H), D_t)
        return cls(
            W_a=uniform_init(rng, (D_img, K_agg), D_img),
            W_c=uniform_init(rng, (D_img, D_t), D_img),
            W_e=uniform_init(rng, (1, 2 * D_t), 2 * D_t),
            alpha=Tensor(np.ones(1), requires_grad=True),
            W_q=uniform_init(rng, (D_t, s.D_sum), D_t),
            W_k=uniform_init(rng, (D_t, s.D_sum), D_t),
            W_v=uniform_init(rng, (D_t, s.h_sum), D_t),
            W_r=uniform_init(rng, (D_t, s.N), D_t),
            schedule=s,
            masks=build_masks(s, L_t, K_agg),
            K_agg=K_agg,
            element_routing=element_routing,
            subspace_routing=subspace_routing,
        )

    def masks_for(self, L_t: int) -> AdjacencyMasks:
        if self.masks.M_Q.shape[1] != L_t or self.masks.M_V.shape[1] != self.K_agg:
            self.masks = build_masks(self.schedule, L_t, self.K_agg)
        return self.masks


@dataclass
class RoutingTrace:
    element_gate: np.ndarray  # [..., L_t]
    subspace_probs: np.ndarray  # [..., N]
    stage_index: int

    def records(self) -> list[dict]:
        """One wire-format object per sample: ``{stage, gate, subspace_probs}``."""
        gates = self.element_gate.reshape(-1, self.element_gate.shape[-1])
        probs = self.subspace_probs.reshape(-1, self.subspace_probs.shape[-1])
        return [
            {"stage": self.stage_index, "gate": g.tolist(), "subspace_probs": p.tolist()}
            for g, p in zip(gates, probs)
        ]

    def to_json(self) -> str:
        return "\n".join(json.dumps(r) for r in self.records())


def aggregate_features(img: Tensor, p: DseParams) -> Tensor:
    """Pool ``[..., L_img, D_img]`` image tokens into ``[..., K_agg, D_t]`` text-space vectors."""
    if img.shape[-1] != p.W_a.shape[0]:
        raise ShapeError(f"image feature dim {img.shape[-1]} != W_a rows {p.W_a.shape[0]}")
    weights = T.softmax(img @ p.W_a, axis=-2)  # convex weights over positions, per aggregated vector
    projected = img @ p.W_c
    return T.swapaxes(weights, -1, -2) @ projected


def route_elements(t: TextFeatures, agg: Tensor, p: DseParams) -> tuple[Tensor, Tensor]:
    """Gate each word by ``max(0, alpha * tanh(W_e [word ; context]))``; returns (gated words, gate)."""
    words = t.words
    if words.shape[-1] != agg.shape[-1] or 2 * words.shape[-1] != p.W_e.shape[1]:
        raise ShapeError(f"word dim {words.shape[-1]} inconsistent with agg {agg.shape} / W_e {p.W_e.shape}")
    if not p.element_routing:
        gate = T.broadcast_to(T.relu(p.alpha), words.shape[:-1] + (1,))
        return words * gate, T.reshape(gate, words.shape[:-1])
    corr = words @ T.swapaxes(agg, -1, -2)  # [..., L_t, K]
    weights = T.softmax(T.mean(corr, axis=-2, keepdims=True), axis=-1)  # [..., 1, K]
    context = T.broadcast_to(weights @ agg, words.shape)
    pre = T.concat([words, context], axis=-1) @ T.swapaxes(p.W_e, 0, 1)  # [..., L_t, 1]
    gate = T.relu_clip(pre, p.alpha)
    return words * gate, T.reshape(gate, words.shape[:-1])


def _route(scores: Tensor, p: DseParams, gumbel: np.ndarray | None) -> Tensor:
    if p.subspace_routing == "fixed":
        onehot = np.zeros(scores.shape, dtype=scores.data.dtype)
        onehot[..., 0] = 1.0
        return T.Tensor._wrap(onehot)
    if p.subspace_routing == "hard":
        if gumbel is None:
            raise ValueError("hard subspace routing needs Gumbel noise")
        soft = T.softmax(scores + T._const(gumbel, scores), -1)
        hard = np.zeros(soft.shape, dtype=soft.data.dtype)
        np.put_along_axis(hard, soft.data.argmax(-1)[..., None], 1.0, axis=-1)
        # straight-through: forward one-hot, backward through the relaxed sample
        return soft + T.Tensor._wrap(hard - soft.data)
    return T.softmax(scores, -1)


def recompose_naive(
    gated: Tensor, prev_words: Tensor, agg: Tensor, p: DseParams, gumbel: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Per-granularity loop: split words into ``h_j`` subspaces and rescale each by attention output."""
    s = p.schedule
    if gated.shape[-1] != s.D_t:
        raise ShapeError(f"word dim {gated.shape[-1]} != schedule D_t {s.D_t}")
    qo, ho = s.dim_offsets(), s.h_offsets()
    L_t, D_t = gated.shape[-2], gated.shape[-1]
    lead = gated.shape[:-2]
    deltas, scores = [], []
    for j, (h, d) in enumerate(zip(s.H, s.dims)):
        Wq = p.W_q[:, qo[j] : qo[j + 1]]
        Wk = p.W_k[:, qo[j] : qo[j + 1]]
        Wv = p.W_v[:, ho[j] : ho[j + 1]]
        Wr = p.W_r[:, j : j + 1]
        Q, K = gated @ Wq, agg @ Wk
        O = T.tanh(T.attention(Q, K, agg @ Wv))  # [..., L_t, h]
        split = T.reshape(gated, lead + (L_t, h, d))
        deltas.append(T.reshape(split * T.reshape(O, lead + (L_t, h, 1)), lead + (L_t, D_t)))
        R = T.attention(Q, K, agg @ Wr)  # [..., L_t, 1]
        scores.append(T.mean(R, axis=(-2, -1), keepdims=False))
    probs = _route(T.stack(scores, axis=-1), p, gumbel)  # [..., N]
    out = prev_words
    for j, delta in enumerate(deltas):
        out = out + delta * T.reshape(probs[..., j], lead + (1, 1))
    return out, probs


def recompose_masked(
    gated: Tensor, prev_words: Tensor, agg: Tensor, p: DseParams, gumbel: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """All granularities in one batched attention, separated by block masks on queries and values."""
    s = p.schedule
    if gated.shape[-1] != s.D_t:
        raise ShapeError(f"word dim {gated.shape[-1]} != schedule D_t {s.D_t}")
    L_t = gated.shape[-2]
    masks = p.masks_for(L_t)
    N = s.N
    Q = T.reshape(gated @ p.W_q, gated.shape[:-2] + (1, L_t, s.D_sum)) * masks.M_Q  # [..., N, L_t, D_sum]
    K = T.reshape(agg @ p.W_k, agg.shape[:-2] + (1, agg.shape[-2], s.D_sum))
    V = T.reshape(agg @ p.W_v, agg.shape[:-2] + (1, agg.shape[-2], s.h_sum)) * masks.M_V
    Rv = T.reshape(agg @ p.W_r, agg.shape[:-2] + (1, agg.shape[-2], N))
    A = T.softmax(Q @ T.swapaxes(K, -1, -2), axis=-1)  # [..., N, L_t, K]
    O = T.tanh(T.sum_(A @ V, axis=-3))  # [..., L_t, h_sum]; blocks never overlap
    R = A @ Rv  # [..., N, L_t, N]; slice j routes granularity j
    diag = T.Tensor._wrap(np.eye(N, dtype=R.data.dtype)[:, None, :])
    scores = T.mean(T.sum_(R * diag, axis=-1), axis=-1)  # [..., N]
    probs = _route(scores, p, gumbel)
    col_weight = T.reshape(probs, probs.shape[:-1] + (1, N)) @ masks.M_V[:, 0, :]  # [..., 1, h_sum]
    weighted = O * col_weight
    return prev_words + gated * (weighted @ p.expand), probs


def dse_forward(
    t: TextFeatures,
    img: Tensor,
    p: DseParams,
    stage_index: int = 0,
    gumbel: np.ndarray | None = None,
) -> tuple[TextFeatures, RoutingTrace]:
    agg = aggregate_features(img, p)
    gated, gate = route_elements(t, agg, p)
    words, probs = recompose_masked(gated, t.words, agg, p, gumbel)
    trace = RoutingTrace(gate.data.copy(), probs.data.copy(), stage_index)
    return TextFeatures(words, t.sentence), trace
