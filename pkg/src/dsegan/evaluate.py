"""Attribute-level evaluation of a trained toy generator."""
from __future__ import annotations

import numpy as np

from .toyworld import ToyCaption, attribute_accuracy, sample_captions, to_uint8
from .train import generate

# caption/noise seed for evaluation, disjoint from anything the trainer draws
HELDOUT_SEED = 20_241_014


def accuracy_rates(images, captions: list[ToyCaption]) -> dict:
    results = [attribute_accuracy(img, c) for img, c in zip(images, captions)]
    n = max(1, len(results))
    return {
        "color": sum(c for c, _ in results) / n,
        "position": sum(p for _, p in results) / n,
        "n": len(results),
    }


def noise_color_baseline(n: int = 1000, seed: int = 0, resolution: int = 64) -> float:
    """Monte-Carlo color_ok rate of uniform-noise images against random captions."""
    rng = np.random.default_rng(seed)
    caps = sample_captions(seed, n)
    hits = 0
    for c in caps:
        img = rng.integers(0, 256, (resolution, resolution, 3), dtype=np.uint8)
        hits += attribute_accuracy(img, c)[0]
    return hits / n


def generated_images(encoder, G, captions: list[ToyCaption], seed: int) -> np.ndarray:
    outs = generate(encoder, G, captions, seed)
    return np.concatenate([to_uint8(o.image.data) for o in outs])


def evaluate_generator(encoder, G, n: int = 200, seed: int = HELDOUT_SEED) -> dict:
    captions = sample_captions(seed, n)
    return accuracy_rates(generated_images(encoder, G, captions, seed), captions)


def gate_stage_variation(encoder, G, captions: list[ToyCaption], seed: int = HELDOUT_SEED) -> float:
    """Max over (sample, word) of the std of the element gate across DSE stages."""
    outs = generate(encoder, G, captions, seed)
    per_chunk = []
    for o in outs:
        if not o.traces:
            return 0.0
        gates = np.stack([t.element_gate for t in o.traces])  # [stages, B, L_t]
        per_chunk.append(gates.std(axis=0).max())
    return float(max(per_chunk))
