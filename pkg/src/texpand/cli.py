"""Command-line entry point: ``texpand <command> ...``.

Success prints one JSON line describing the outputs; failure prints one JSON
line ``{"error": kind, "message": ...}`` to stderr and exits with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from . import imagecore, synthesis
from .errors import TexpandError
from .extractor import convert_torchvision_vgg19, make_random_extractor
from .generator import feature_difference, visualize_features
from .trainer import checkpoint_hash, load_config, load_generator, resolve_checkpoint, train


def _seed_all(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def cmd_train(args):
    config = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if overrides:
        config = config.replace(**overrides)
    ckpt = train(config, resume_from=args.resume)
    final = resolve_checkpoint(config.output_dir)
    return {"checkpoint": final, "iteration": ckpt.iteration}


def cmd_expand(args):
    rng = _seed_all(args.seed)
    net = load_generator(args.checkpoint)
    img = imagecore.load_image(args.input)
    out = synthesis.expand_repeated(
        net, img, args.cycles, crop_policy=args.crop_policy, rng=rng, pixel_budget=args.pixel_budget
    )
    imagecore.save_image(out, args.output)
    return {"output": args.output, "size": list(out.shape[1:])}


def cmd_diversify(args):
    rng = _seed_all(args.seed)
    net = load_generator(args.checkpoint)
    img = imagecore.load_image(args.input)
    params = {}
    if args.mode == "crop":
        params["size"] = tuple(args.crop_size)
    elif args.mode == "shuffle":
        params["grid"] = tuple(args.grid)
    else:
        params.update(amplitude=args.amplitude, octaves=args.octaves, persistence=args.persistence)
        if args.noise_seed is not None:
            params["seed"] = args.noise_seed
    out = synthesis.diversify(net, img, args.mode, params, rng)
    imagecore.save_image(out, args.output)
    return {"output": args.output, "size": list(out.shape[1:]), "mode": args.mode}


def cmd_transfer(args):
    _seed_all(args.seed)
    net = load_generator(args.checkpoint)
    guide = imagecore.load_image(args.guide, allow_grayscale=True)
    out = synthesis.transfer(net, guide)
    imagecore.save_image(out, args.output)
    return {"output": args.output, "size": list(out.shape[1:])}


def cmd_stress(args):
    rng = _seed_all(args.seed)
    before = checkpoint_hash(args.checkpoint)
    net = load_generator(args.checkpoint)
    img = imagecore.load_image(args.input)
    cycles = synthesis.stress_test(net, img, args.cycles, rng)
    os.makedirs(args.output_dir, exist_ok=True)
    outputs = []
    for i, cycle in enumerate(cycles, 1):
        path = os.path.join(args.output_dir, f"cycle_{i}.png")
        imagecore.save_image(cycle.expanded, path)
        outputs.append({"path": path, "size": list(cycle.expanded.shape[1:]), "crop_offset": list(cycle.offset)})
    after = checkpoint_hash(args.checkpoint)
    return {"cycles": outputs, "checkpoint_unchanged": before == after}


def cmd_features(args):
    _seed_all(args.seed)
    net = load_generator(args.checkpoint)
    img = imagecore.load_image(args.input)
    vis = visualize_features(net, img, args.layer, args.channel)
    imagecore.save_image(vis, args.output)
    result = {"output": args.output, "size": list(vis.shape[1:])}
    if len(net.resblocks) >= 6:
        result["resblock_5_vs_6"] = feature_difference(net, img, "resblock_5", "resblock_6")
    return result


def cmd_noise(args):
    field = imagecore.perlin(args.height, args.width, args.seed, args.octaves, args.persistence, args.cell_size)
    imagecore.save_image(field.as_image(), args.output)
    return {"output": args.output, "size": [args.height, args.width]}


def cmd_extractor(args):
    if args.source == "random":
        sha = make_random_extractor(args.out, seed=args.seed, width_divisor=args.width_divisor)
    else:
        sha = convert_torchvision_vgg19(args.out, args.weights)
    return {"output": args.out, "sha256": sha}


def build_parser():
    parser = argparse.ArgumentParser(prog="texpand", description="Adversarial texture expansion")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None if name == "train" else 0)
        return p

    p = command("train", cmd_train, "train a generator on one exemplar")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint file or run directory to continue from")
    p.add_argument("--output-dir")

    p = command("expand", cmd_expand, "double an image (optionally repeatedly)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--cycles", type=int, default=1)
    p.add_argument("--crop-policy", choices=("none", "recrop"), default="none")
    p.add_argument("--pixel-budget", type=int, default=synthesis.DEFAULT_PIXEL_BUDGET)

    p = command("diversify", cmd_diversify, "expand a cropped, shuffled or noised exemplar")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=("crop", "shuffle", "noise"), required=True)
    p.add_argument("--crop-size", type=int, nargs=2, default=(256, 256), metavar=("ROWS", "COLS"))
    p.add_argument("--grid", type=int, nargs=2, default=(4, 4), metavar=("ROWS", "COLS"))
    p.add_argument("--amplitude", type=float, default=0.1)
    p.add_argument("--noise-seed", type=int)
    p.add_argument("--octaves", type=int, default=4)
    p.add_argument("--persistence", type=float, default=0.5)

    p = command("transfer", cmd_transfer, "expand a guiding image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--guide", required=True)
    p.add_argument("--output", required=True)

    p = command("stress", cmd_stress, "repeated expand-and-recrop cycles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--cycles", type=int, default=4)

    p = command("features", cmd_features, "render an intermediate generator feature map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--channel", type=int)

    p = command("noise", cmd_noise, "write a Perlin noise image (e.g. as a transfer guide)")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--octaves", type=int, default=4)
    p.add_argument("--persistence", type=float, default=0.5)
    p.add_argument("--cell-size", type=float)

    p = command("extractor", cmd_extractor, "create a style-loss extractor archive")
    p.add_argument("source", choices=("convert", "random"))
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="local torchvision vgg19 .pth (convert only)")
    p.add_argument("--width-divisor", type=int, default=1)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = args.func(args)
    except TexpandError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        kind = "value" if isinstance(exc, ValueError) else "key" if isinstance(exc, KeyError) else "os"
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": kind, "message": str(msg)}), file=sys.stderr)
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
