"""Command-line interface.

Subcommands: train (both phases per config), bootstrap (adversarially train
the teacher, or a natural baseline with --natural), eval (checkpoint +
configured attack list -> report), saliency (export saliency images), delta
(original / perturbed / perturbation triptychs), plot (per-k accuracy
curves). Externally generated adversarial datasets can be scored by loading
them as a CIFAR-style archive and running `eval` with an empty attack list.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import torch

from . import harness, metrics
from .attacks import apply_attack, delta_image
from .config import load_config
from .data import load_dataset
from .errors import SalignError
from .models import load_classifier, save_model
from .saliency import render_image, render_signed_map, saliency_true_class, save_png
from .trainer import bootstrap_teacher


def _load_config(args):
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, f"runs/{Path(args.config).stem}")
    report = harness.run_experiment(config, out, resume=args.resume)
    print(metrics.format_report_text(report))
    print(f"report written to {out}")
    return 0


def cmd_bootstrap(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, f"runs/{Path(args.config).stem}")
    train_data = load_dataset(config, "train")
    if args.natural:
        attack = dataclasses.replace(config.bootstrap_attack, epsilon=0)
        path = out / "natural.pt"
        tag = "natural"
    else:
        attack = config.bootstrap_attack
        path = Path(config.teacher_checkpoint)
        tag = "bootstrap"
    model = bootstrap_teacher(config, train_data, attack=attack, tag=tag, ckpt_path=path)
    save_model(model, path)
    test_data = load_dataset(config, "test").subset(config.eval_subset_size)
    clean = metrics.accuracy(model, test_data)
    print(f"{tag} model written to {path} (clean accuracy {clean:.2f}%)")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, f"runs/{Path(args.config).stem}-eval")
    model = load_classifier(args.checkpoint)
    test_data = load_dataset(config, "test").subset(config.eval_subset_size)
    probe = load_dataset(config, "test").subset(min(config.probe_size, config.test_size)).images
    report = metrics.evaluate_model(model, test_data, config.eval_attacks, probe=probe,
                                    checkpoint_id=model.parameter_digest()[:16],
                                    config_hash=config.config_hash,
                                    batch_size=config.batch_size)
    metrics.emit_report(report, out)
    print(metrics.format_report_text(report))
    return 0


def cmd_saliency(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, f"runs/{Path(args.config).stem}-saliency")
    model = load_classifier(args.checkpoint)
    model.eval()
    test_data = load_dataset(config, "test")
    x = test_data.images[:args.num]
    y = test_data.labels[:args.num]
    maps = saliency_true_class(model, x, y)
    for i in range(x.shape[0]):
        save_png(render_image(x[i]), out / f"image_{i:03d}.png")
        save_png(render_signed_map(maps.values[i]), out / f"saliency_{i:03d}.png")
    print(f"wrote {x.shape[0]} image/saliency pairs to {out}")
    return 0


def cmd_delta(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, f"runs/{Path(args.config).stem}-delta")
    model = load_classifier(args.checkpoint)
    model.eval()
    if not config.eval_attacks:
        raise SalignError("config has no eval_attacks to draw the attack from")
    spec = config.eval_attacks[0]
    if args.attack:
        matches = [a for a in config.eval_attacks if a.label == args.attack]
        if not matches:
            raise SalignError(
                f"attack {args.attack!r} not in config eval_attacks "
                f"{[a.label for a in config.eval_attacks]}"
            )
        spec = matches[0]
    test_data = load_dataset(config, "test")
    x = test_data.images[:args.num]
    y = test_data.labels[:args.num]
    x_adv = apply_attack(model, x, y, spec)
    deltas = delta_image(x, x_adv, spec.epsilon)
    for i in range(x.shape[0]):
        panels = [render_image(x[i]), render_image(x_adv[i]), render_image(deltas[i])]
        gap = np.full((panels[0].shape[0], 2, panels[0].shape[2]), 255, dtype=np.uint8)
        strip = np.concatenate([panels[0], gap, panels[1], gap, panels[2]], axis=1)
        save_png(strip, out / f"delta_{spec.label}_{i:03d}.png")
    print(f"wrote {x.shape[0]} {spec.label} triptychs to {out}")
    return 0


def cmd_plot(args) -> int:
    out = _out_dir(args, Path(args.curves).parent)
    dest = out / "curves.png"
    harness.plot_curves(args.curves, dest)
    print(f"plot written to {dest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salign",
                                     description="Saliency-alignment robust training")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="YAML config path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("train", help="run both training phases per the config")
    common(p)
    p.add_argument("--resume", default=None, help="training checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bootstrap", help="adversarially train the teacher checkpoint")
    common(p)
    p.add_argument("--natural", action="store_true",
                   help="train the natural (epsilon=0) baseline instead")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("eval", help="evaluate a checkpoint against the configured attacks")
    common(p)
    p.add_argument("--checkpoint", required=True, help="classifier checkpoint to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="export saliency images for test examples")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--num", type=int, default=8, help="number of test images")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("delta", help="export original/perturbed/delta triptychs")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", default=None, help="attack label, e.g. pgd-20 (default: first)")
    p.add_argument("--num", type=int, default=8)
    p.set_defaults(func=cmd_delta)

    p = sub.add_parser("plot", help="plot per-k accuracy curves from curves.csv")
    p.add_argument("--curves", required=True, help="curves.csv produced by train")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SalignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
