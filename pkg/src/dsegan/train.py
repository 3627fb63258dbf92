"""Alternating discriminator/generator training on the toy world."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .adversarial import DiscriminatorParams, MatchHead, d_loss_terms, g_loss_terms, match_head_loss, match_loss
from .config import RunConfig
from .optim import Adam
from .sama import GeneratorParams, generator_forward
from .tensor import Tensor
from .toyworld import MAX_LEN, ToyCaption, ToyTextEncoder, all_captions, render, to_unit

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.dseg"
METRICS_NAME = "metrics.jsonl"


def build_models(cfg: RunConfig):
    """Deterministically initialise (encoder, generator, discriminator) from the config seed."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
    encoder = ToyTextEncoder.init(rng, cfg.D_t)
    G = GeneratorParams.init(
        rng,
        cfg.stages,
        cfg.D_t,
        cfg.granularity,
        cfg.K_agg,
        MAX_LEN,
        cfg.element_routing,
        cfg.subspace_routing,
    )
    D = DiscriminatorParams.init(rng, cfg.resolution, cfg.D_t, cfg.disc_base, cfg.disc_max)
    return encoder, G, D


def derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 2:
        return np.zeros(n, dtype=int)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def gumbel_noise(rng: np.random.Generator, cfg: RunConfig, batch: int):
    if cfg.subspace_routing != "hard":
        return None
    N = len(cfg.granularity)
    return [-np.log(-np.log(rng.uniform(1e-10, 1.0, (batch, N)))) for _ in range(cfg.stages.M)]


class Trainer:
    def __init__(self, cfg: RunConfig, out_dir=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir or cfg.out)
        self.encoder, self.G, self.D = build_models(cfg)
        streams = np.random.SeedSequence(cfg.seed).spawn(3)
        self.rng = np.random.default_rng(streams[1])
        self.match_head = MatchHead.init(np.random.default_rng(streams[2]), self.D.channels, cfg.D_t)
        g_params = {**dict(self.encoder.named_parameters("encoder.")), **dict(self.G.named_parameters("G."))}
        d_params = dict(self.D.named_parameters("D."))
        betas = (cfg.optimizer.beta1, cfg.optimizer.beta2)
        self.opt_G = Adam(g_params, cfg.optimizer.lr_G, betas)
        self.opt_D = Adam(d_params, cfg.optimizer.lr_D, betas)
        self.opt_M = Adam(dict(self.match_head.named_parameters("M.")), cfg.optimizer.lr_D, betas)
        self.captions = all_captions()
        self.images = np.stack([to_unit(render(c, cfg.resolution)) for c in self.captions])
        self.step = 0

    # ------------------------------------------------------------ checkpoints

    def state_tensors(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder.named_tensors("encoder."))
        out.update(self.G.named_tensors("G."))
        out.update(self.D.named_tensors("D."))
        out.update(self.match_head.named_tensors("M."))
        out.update(self.opt_G.state_tensors("opt_G"))
        out.update(self.opt_D.state_tensors("opt_D"))
        out.update(self.opt_M.state_tensors("opt_M"))
        return out

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        return ckpt_io.Checkpoint(self.cfg.to_dict(), self.state_tensors(), self.step, self.rng.bit_generator.state)

    def save(self, path=None) -> Path:
        path = Path(path or self.out_dir / CHECKPOINT_NAME)
        ckpt_io.save(path, self.to_checkpoint())
        return path

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, cfg: RunConfig | None = None, out_dir=None) -> "Trainer":
        cfg = cfg or RunConfig.from_dict(ck.config)
        tr = cls(cfg, out_dir)
        tr.encoder.load_state_dict(ck.tensors, "encoder.")
        tr.G.load_state_dict(ck.tensors, "G.")
        tr.D.load_state_dict(ck.tensors, "D.")
        tr.match_head.load_state_dict(ck.tensors, "M.")
        tr.opt_G.load_state_tensors("opt_G", ck.tensors)
        tr.opt_D.load_state_tensors("opt_D", ck.tensors)
        tr.opt_M.load_state_tensors("opt_M", ck.tensors)
        tr.step = ck.step
        tr.rng.bit_generator.state = ck.rng_state
        return tr

    # ------------------------------------------------------------ one step

    def train_step(self) -> dict:
        cfg, rng = self.cfg, self.rng
        B = cfg.batch_size
        idx = rng.integers(0, len(self.captions), B)
        perm = derangement(rng, B)
        z = rng.standard_normal((B, cfg.stages.D_z)).astype(np.float32)
        ca_noise = rng.standard_normal((B, cfg.stages.D_ca)).astype(np.float32)
        gumbel = gumbel_noise(rng, cfg, B)
        caps = [self.captions[i] for i in idx]
        real = Tensor._wrap(self.images[idx])
        t0 = time.perf_counter()

        with T.tape_scope():
            text = self.encoder.encode(caps)
            out = generator_forward(Tensor._wrap(z), text, self.G, ca_noise, gumbel)
            sentence = text.sentence.detach()
            if B >= 2:
                mismatched = Tensor._wrap(sentence.data[perm])
            else:
                other = self.encoder.encode([self.captions[(idx[0] + 1) % len(self.captions)]])
                mismatched = other.sentence.detach()

            with T.tape_scope():
                d_terms = d_loss_terms(real, out.image, sentence, mismatched, self.D, cfg.loss)
                self.opt_D.zero_grad()
                d_terms["total"].backward()
                d_norm = self.opt_D.grad_norm()
                self.opt_D.step()

            match = head_fit = None
            use_match = cfg.loss.match == "contrastive" and cfg.loss.lambda2 > 0
            if use_match and B >= 2:
                with T.tape_scope():
                    head_fit = match_head_loss(real, sentence, self.D, self.match_head, cfg.loss.temperature)
                    self.opt_M.zero_grad()
                    head_fit.backward()
                    self.opt_M.step()

            with T.frozen(self.D.parameters() + self.match_head.parameters()):
                if use_match:
                    encoder = self.match_head.encoder(self.D)
                    match = match_loss(out.image, text.sentence, encoder, cfg.loss.temperature)
                g_terms = g_loss_terms(out.image, sentence, out.mu, out.logvar, match, self.D, cfg.loss)
            self.opt_G.zero_grad()
            g_terms["total"].backward()
            g_norm = self.opt_G.grad_norm()
            self.opt_G.step()

        self.step += 1
        return {
            "step": self.step,
            "d_loss": d_terms["total"].item(),
            "g_loss": g_terms["total"].item(),
            "ca_loss": g_terms["ca"].item(),
            "gp": d_terms["gp"].item(),
            "d_real": d_terms["real"].item(),
            "d_fake": d_terms["fake"].item(),
            "d_mismatched": d_terms["mismatched"].item(),
            "g_adv": g_terms["adv"].item(),
            "match": g_terms["match"].item(),
            "match_real": head_fit.item() if head_fit is not None else 0.0,
            "grad_norms": {"D": d_norm, "G": g_norm},
            "ablation": {"element_routing": cfg.element_routing, "subspace_routing": cfg.subspace_routing},
            "seconds": round(time.perf_counter() - t0, 4),
        }

    # ------------------------------------------------------------ loop

    def run(self, steps: int | None = None, progress: bool = False) -> list[dict]:
        """Train up to ``steps`` total steps, appending metrics and checkpointing periodically.

        A non-finite value aborts the run; the last checkpoint on disk is left
        untouched and the error propagates.
        """
        target = self.cfg.steps if steps is None else steps
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "config.json").write_text(self.cfg.to_json())
        records = []
        with open(self.out_dir / METRICS_NAME, "a") as fh:
            while self.step < target:
                rec = self.train_step()
                for key in ("d_loss", "g_loss"):
                    if not np.isfinite(rec[key]):
                        raise T.NonFiniteError(key)
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
                records.append(rec)
                if progress and (self.step % 50 == 0 or self.step == 1):
                    log.info(
                        "step %d d=%.3f g=%.3f gp=%.4f (%.2fs)",
                        rec["step"], rec["d_loss"], rec["g_loss"], rec["gp"], rec["seconds"],
                    )
                if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save()
        self.save()
        return records


def generate(encoder, G, captions: list[ToyCaption], seed: int, batch: int = 16):
    """Generator outputs for ``captions`` with noise drawn from ``seed``; returns GeneratorOutput per chunk."""
    cfg = G.config
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((len(captions), cfg.D_z)).astype(np.float32)
    noise = rng.standard_normal((len(captions), cfg.D_ca)).astype(np.float32)
    routing = G.dse[0].subspace_routing if G.dse else "soft"
    N = G.dse[0].schedule.N if G.dse else 1
    gumbel = (
        [-np.log(-np.log(rng.uniform(1e-10, 1.0, (len(captions), N)))) for _ in G.dse]
        if routing == "hard"
        else None
    )
    outs = []
    with T.no_grad():
        for lo in range(0, len(captions), batch):
            hi = lo + batch
            text = encoder.encode(captions[lo:hi])
            g = [x[lo:hi] for x in gumbel] if gumbel is not None else None
            outs.append(generator_forward(Tensor._wrap(z[lo:hi]), text, G, noise[lo:hi], g))
    return outs
