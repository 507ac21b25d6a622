"""Command-line entry point: ``reflectsep {synth,train,separate,eval,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error (missing/invalid files,
checkpoint problems), 3 numerical failure (non-finite loss, failed gradient
check). ``REFLECTSEP_SEED``, when set, overrides ``--seed`` (and the ``seed``
key of a training config).
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, imaging, networks, synthesis, training
from .checkpoint import CheckpointError
from .synthesis import ImageSet

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SEED_ENV = "REFLECTSEP_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(args_seed):
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return args_seed
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _load_model(ckpt, variant=None):
    state = training.load_checkpoint(ckpt)
    model = state.model
    if variant is not None and model.variant is not networks.Variant.parse(variant):
        raise CheckpointError(f"variant mismatch: checkpoint {ckpt} holds "
                              f"{model.variant.value}, requested {variant}")
    return model


def cmd_synth(args):
    rng = np.random.default_rng(_seed(args.seed))
    pairs = synthesis.build_batch(ImageSet.from_dir(args.t_dir), ImageSet.from_dir(args.r_dir),
                                  synthesis.SynthModelKind.parse(args.kinds), args.n, rng,
                                  out_size=args.size)
    manifest = synthesis.export_corpus(pairs, args.out)
    print(f"wrote {len(pairs)} pairs and {manifest}")
    return EXIT_OK


def cmd_train(args):
    config = training.load_config(args.config)
    env = os.environ.get(SEED_ENV)
    if env:
        config.seed = _seed(config.seed)
    state = training.fit(config)
    print(f"trained {config.variant.value} to step {state.step}")
    return EXIT_OK


def _separate_inputs(path):
    path = Path(path)
    if path.is_dir():
        files = sorted((p for p in path.iterdir() if p.suffix.lower() in synthesis.IMAGE_SUFFIXES),
                       key=lambda p: p.name)
        if not files:
            raise ValueError(f"no PNG/JPEG images in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return [path]


def cmd_separate(args):
    model = _load_model(args.ckpt, args.variant)
    sep = evaluation.as_separator(model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    s = model.image_size
    tags = {"t_hat": "t", "r_hat": "r", "mask": "mask", "g_mt": "mt", "g_mr": "mr"}
    for f in _separate_inputs(args.input):
        y = imaging.resize_bilinear(imaging.load_image(f), s, s)
        out = sep(y[None])
        for key, tag in tags.items():
            if key in out:
                imaging.save_image(out[key][0], out_dir / f"{f.stem}_{tag}.png")
        print(f"separated {f.name}")
    return EXIT_OK


def cmd_eval(args):
    model = _load_model(args.ckpt, args.variant)
    seed = _seed(args.seed)
    grid = evaluation.evaluate(model, args.t_dir, args.r_dir, args.kinds, args.n, seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "grid.tsv").write_text(grid.to_tsv())
    table = grid.to_table()
    (out_dir / "grid.txt").write_text(table)
    if args.panels:
        kind = synthesis.sorted_kinds(synthesis.SynthModelKind.parse(args.kinds))[0]
        pairs = evaluation.held_out_pairs(ImageSet.from_dir(args.t_dir),
                                          ImageSet.from_dir(args.r_dir), kind, args.panels,
                                          seed, model.image_size)
        evaluation.dump_panels(model, pairs, out_dir / "panels")
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args):
    report = training.grad_check(args.variant, args.loss, args.tol, args.coords, _seed(args.seed))
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} variant={report.variant.value} loss={report.loss_kind} "
          f"coords={report.n_coords} max_rel_err={report.max_rel_err:.3e} tol={args.tol:g}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser():
    p = _Parser(prog="reflectsep",
                description="Generative single-image reflection separation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="synthesize an observed-image corpus")
    s.add_argument("--t-dir", required=True, help="directory of transmission-scene images")
    s.add_argument("--r-dir", required=True, help="directory of reflection-scene images")
    s.add_argument("--kinds", default="all",
                   help="comma list of linear,blur,ghost,clip,clip_noblur or 'all' (default: all)")
    s.add_argument("--n", type=int, default=100, help="number of pairs (default: 100)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    s.add_argument("--size", type=int, default=imaging.TRAIN_SIZE,
                   help="output side in pixels (default: 128)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a separator from a config file")
    t.add_argument("--config", required=True,
                   help=f"key = value config file; keys: {', '.join(training.CONFIG_KEYS)}")
    t.set_defaults(func=cmd_train)

    sp = sub.add_parser("separate", help="separate images with a trained checkpoint")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--input", required=True, help="image file or directory of images")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--variant", default=None,
                    help="expected variant (b1, b2, b3, mask); mismatch is an error")
    sp.set_defaults(func=cmd_separate)

    e = sub.add_parser("eval", help="PSNR/SSIM grid on held-out synthesized pairs")
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--t-dir", required=True, help="held-out transmission-scene images")
    e.add_argument("--r-dir", required=True, help="held-out reflection-scene images")
    e.add_argument("--kinds", default="all", help="synthesis models to evaluate (default: all)")
    e.add_argument("--n", type=int, default=50, help="pairs per model (default: 50)")
    e.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    e.add_argument("--out", required=True, help="output directory for grid.tsv/grid.txt")
    e.add_argument("--panels", type=int, default=0,
                   help="also dump this many qualitative panels (default: 0)")
    e.add_argument("--variant", default=None,
                   help="expected variant (b1, b2, b3, mask); mismatch is an error")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check on a reduced model")
    g.add_argument("--variant", required=True, choices=[v.value for v in networks.Variant],
                   help="architecture variant")
    g.add_argument("--loss", default="full", choices=training.LOSS_KINDS,
                   help="loss to check (default: full)")
    g.add_argument("--tol", type=float, default=1e-3,
                   help="max relative error (default: 1e-3)")
    g.add_argument("--coords", type=int, default=64,
                   help="parameter coordinates sampled (default: 64)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"reflectsep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.NonFiniteLossError as exc:
        print(f"reflectsep: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"reflectsep: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
