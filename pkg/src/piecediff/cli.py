"""Command line entry point: generate | train | solve | eval | bench | ablate.

Every subcommand accepts ``--config file.yaml`` plus trailing ``key.sub=value``
overrides. Exit codes: 0 ok, 2 config error, 3 divergence, 4 I/O error.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import load_config, save_config
from .errors import ConfigError, DatasetFormatError, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4


def _cfg(args):
    return load_config(args.config, args.overrides)


def cmd_generate(args):
    from .data import generate_fragments, generate_puzzle, shuffle_instance, synth_image, with_missing, write_dataset

    rng = np.random.default_rng(args.seed)
    out = []
    for i in range(args.count):
        seed = int(rng.integers(2 ** 31))
        if args.task == "puzzle2d":
            n = args.n or 3
            img = synth_image(n * args.patch, seed, portrait=(i % 3 == 0))
            inst = generate_puzzle(img, n, rotate=args.rotate, seed=seed)
        else:
            kind = ("box", "cylinder", "sphere", "composite")[i % 4]
            inst = generate_fragments(kind, args.n or 3, seed)
        inst = shuffle_instance(inst, seed)
        if args.missing:
            inst = with_missing(inst, args.missing, seed)
        out.append(inst)
    write_dataset(args.out, out)
    print(f"wrote {len(out)} {args.task} instances to {args.out}")


def _dataset(args, cfg):
    from .data import fragment_corpus, puzzle_corpus, read_dataset

    if getattr(args, "data", None):
        return read_dataset(args.data)
    d = cfg.data
    if cfg.task == "puzzle2d":
        return puzzle_corpus(d.num_images, d.sizes, d.image_size, rotate=d.rotate, seed=d.seed)
    return fragment_corpus(d.num_objects, d.pieces, seed=d.seed)


def cmd_train(args):
    from .checkpoint import save_checkpoint
    from .train import train

    cfg = _cfg(args)
    data = _dataset(args, cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    state = train(data, cfg)
    path = args.checkpoint or os.path.join(cfg.out_dir, "model.ckpt")
    save_checkpoint(path, state.model, cfg, state.step, state.epoch, state.rng, state.optimizer)
    save_config(cfg, os.path.join(cfg.out_dir, "config.yaml"))
    with open(os.path.join(cfg.out_dir, "history.json"), "w") as fh:
        json.dump(state.history, fh)
    print(f"trained {state.epoch} epochs, final loss {state.history[-1]['loss']:.5f}; checkpoint {path}")


def _load_model(args, cfg):
    from .checkpoint import load_checkpoint

    model, _, _, _ = load_checkpoint(args.checkpoint, cfg)
    model.eval()
    return model


def cmd_solve(args):
    from .data import read_dataset
    from .sampler import solve

    cfg = _cfg(args)
    model = _load_model(args, cfg)
    data = read_dataset(args.data)
    sols = []
    for i, inst in enumerate(data):
        s = solve(inst, model, cfg, seed=args.seed + i)
        sols.append({"translations": s.translations.tolist(), "rotations": s.rotations.tolist(),
                     "present": s.present.tolist(), "degenerate": s.degenerate.tolist()})
    text = json.dumps(sols, allow_nan=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)


def cmd_eval(args):
    from .evaluate import evaluate

    cfg = _cfg(args)
    model = _load_model(args, cfg)
    data = _dataset(args, cfg)
    report = evaluate(data, model, cfg, missing=args.missing)
    out = args.out or os.path.join(cfg.out_dir, "report.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    report.to_json(out)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "instances"}, indent=1))


def cmd_bench(args):
    from .bench import bench

    cfg = _cfg(args)
    model = _load_model(args, cfg) if args.checkpoint else None
    bench(cfg, args.sizes, args.out or os.path.join(cfg.out_dir, "bench"), model=model)


def cmd_ablate(args):
    from .ablation import VARIANTS_2D, VARIANTS_3D, ablate, prune_variants

    cfg = _cfg(args)
    data = _dataset(args, cfg)
    if args.prune_sweep:
        variants = prune_variants()
    else:
        variants = VARIANTS_2D if cfg.task == "puzzle2d" else VARIANTS_3D
        if args.only:
            variants = {k: v for k, v in variants.items() if k in args.only}
    ablate(data, cfg, variants, out_dir=args.out or os.path.join(cfg.out_dir, "ablation"))


def build_parser():
    p = argparse.ArgumentParser(prog="piecediff", description="Diffusion-based puzzle and fragment assembly")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("overrides", nargs="*", help="dotted key=value overrides, e.g. optim.lr=1e-3")
        sp.set_defaults(func=fn)
        return sp

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--task", choices=("puzzle2d", "frag3d"), default="puzzle2d")
    g.add_argument("--n", "--pieces", dest="n", type=int, default=None,
                   help="grid side (2D) or fragment count (3D)")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--rotate", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--missing", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--patch", type=int, default=16, help="patch side in pixels (2D)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = add("train", cmd_train, "train a model")
    t.add_argument("--data", help="dataset directory (default: generate from config)")
    t.add_argument("--checkpoint", help="output checkpoint path")

    s = add("solve", cmd_solve, "assemble instances of a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    e = add("eval", cmd_eval, "evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--missing", type=float, default=None)
    e.add_argument("--out")

    b = add("bench", cmd_bench, "time dense vs sparse solves over puzzle sizes")
    b.add_argument("--checkpoint")
    b.add_argument("--sizes", type=int, nargs="+")
    b.add_argument("--out")

    a = add("ablate", cmd_ablate, "retrain and evaluate ablation variants")
    a.add_argument("--data")
    a.add_argument("--only", nargs="+")
    a.add_argument("--prune-sweep", action="store_true")
    a.add_argument("--out")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "generate":
        args.config, args.overrides = None, []
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DatasetFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
