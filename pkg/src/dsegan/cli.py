"""``dsegan`` command line: train, generate, inspect, verify.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import RunConfig, tiny_config, toy_config
from .ppm import write_ppm
from .sama import weighted_stage_images
from .tensor import NonFiniteError
from .toyworld import UnknownTokenError, parse_caption, to_uint8
from .train import CHECKPOINT_NAME, Trainer, build_models, generate
from . import verify as verify_mod

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

PRESETS = {"default": RunConfig, "toy": toy_config, "tiny": tiny_config}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _checkpoint_path(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_NAME
    if not p.is_file():
        raise UsageError(f"no checkpoint at {p}")
    return p


def load_models(path: str):
    ck = ckpt_io.load(_checkpoint_path(path))
    cfg = RunConfig.from_dict(ck.config)
    encoder, G, _ = build_models(cfg)
    encoder.load_state_dict(ck.tensors, "encoder.")
    G.load_state_dict(ck.tensors, "G.")
    return cfg, encoder, G


def _train_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else PRESETS[args.preset]()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.steps is not None:
        changes["steps"] = args.steps
    if args.out is not None:
        changes["out"] = args.out
    if args.no_element_routing:
        changes["element_routing"] = False
    if args.subspace_routing is not None:
        changes["subspace_routing"] = args.subspace_routing
    return cfg.replace(**changes)


def cmd_train(args) -> int:
    if args.resume:
        ck = ckpt_io.load(_checkpoint_path(args.resume))
        cfg = RunConfig.from_dict(ck.config)
        changes = {k: v for k, v in (("steps", args.steps), ("out", args.out)) if v is not None}
        cfg = cfg.replace(**changes)
        trainer = Trainer.from_checkpoint(ck, cfg)
    else:
        cfg = _train_config(args)
        trainer = Trainer(cfg)
    trainer.run(progress=not args.quiet)
    print(json.dumps({"out": str(trainer.out_dir), "step": trainer.step}))
    return EXIT_OK


def _captions(args):
    if not args.caption:
        raise UsageError("at least one --caption is required")
    return [parse_caption(c) for c in args.caption]


def cmd_generate(args) -> int:
    captions = _captions(args)
    cfg, encoder, G = load_models(args.checkpoint)
    out_dir = Path(args.out or "generated")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    k = 0
    for chunk in generate(encoder, G, captions, args.seed):
        stage_imgs = [s.data for s in weighted_stage_images([st.rgb for st in chunk.stages], G.integration)]
        for b in range(chunk.image.shape[0]):
            stem = f"{k:03d}_" + "_".join(captions[k].tokens)
            paths = [out_dir / f"{stem}.ppm"] + [out_dir / f"{stem}_stage{i}.ppm" for i in range(len(stage_imgs))]
            write_ppm(paths[0], to_uint8(chunk.image.data[b]))
            for i, img in enumerate(stage_imgs):
                write_ppm(paths[i + 1], to_uint8(img[b]))
            written += [str(p) for p in paths]
            k += 1
    for p in written:
        print(p)
    return EXIT_OK


def cmd_inspect(args) -> int:
    captions = _captions(args)
    _, encoder, G = load_models(args.checkpoint)
    for chunk in generate(encoder, G, captions, args.seed):
        records = [t.records() for t in chunk.traces]  # [stage][sample]
        for b in range(chunk.image.shape[0]):
            for stage in records:
                print(json.dumps(stage[b]))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify_mod.run_all(quick=args.quick)
    width = max(len(r.name) for r in results)
    print(f"{'check':{width}s}  result  seconds  detail")
    for r in results:
        print(f"{r.name:{width}s}  {'PASS' if r.passed else 'FAIL':6s}  {r.seconds:7.1f}  {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsegan", description="Text-to-image GAN with dynamic word re-composition on a toy world.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tr = sub.add_parser("train", help="train (or resume) a model")
    tr.add_argument("--config", help="JSON run config")
    tr.add_argument("--preset", choices=sorted(PRESETS), default="toy", help="used when --config is absent")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--steps", type=int, help="total step count to train up to")
    tr.add_argument("--out", help="run directory")
    tr.add_argument("--resume", metavar="CKPT", help="checkpoint file or run directory")
    tr.add_argument("--no-element-routing", action="store_true", help="ablation: gate fixed at alpha")
    tr.add_argument("--subspace-routing", choices=("soft", "hard", "fixed"), help="ablation/variant of the subspace router")
    tr.add_argument("-q", "--quiet", action="store_true")
    tr.set_defaults(func=cmd_train)

    for name, func, doc in (
        ("generate", cmd_generate, "write final and per-stage PPM images for captions"),
        ("inspect", cmd_inspect, "print per-stage routing traces as JSON lines"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--checkpoint", "--resume", dest="checkpoint", required=True, metavar="CKPT")
        p.add_argument("--caption", action="append", help="caption text; repeatable")
        p.add_argument("--seed", type=int, default=0)
        if name == "generate":
            p.add_argument("--out", help="output directory (default ./generated)")
        p.set_defaults(func=func)

    vf = sub.add_parser("verify", help="run the invariant suite")
    vf.add_argument("--quick", action="store_true", help="fewer randomized instances")
    vf.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, UnknownTokenError, ckpt_io.CheckpointError) as exc:
        print(f"dsegan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"dsegan: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"dsegan: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
