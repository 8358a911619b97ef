"""Command-line entry point: train, segment, evaluate, synth, gradcheck.

Exit codes partition cleanly: 0 success, 1 runtime failure, 2 usage/config
error. All diagnostics go to stderr; every command is deterministic given
--seed (SEGAN_SEED serves as a fallback when no seed is passed).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import training as TR
from .config import CommandConfig, ConfigKeyError
from .model import ChannelPlan, ConfigError, build_discriminator, build_generator
from .weights import load_weights, read_weights, save_weights

ABLATIONS = ("msfrb", "am", "gan", "bce", "mae")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a dataset directory")
    p_train.add_argument("--data", required=True, help="directory of image/gt/mask triples")
    p_train.add_argument("--out", required=True, help="output weight file")
    p_train.add_argument("--config", help="key=value config file")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--ablate", action="append", default=[], choices=ABLATIONS,
                         help="disable a feature or loss term (repeatable; ablating "
                              "msfrb also drops am, which lives on its branch road)")
    p_train.add_argument("--rounds", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--batch-size", type=int, dest="batch_size")
    p_train.add_argument("--augment", action="store_true", default=None,
                         help="expand the training set with 8 dihedral variants")
    p_train.add_argument("--downsample", type=int)
    p_train.add_argument("--log", help="also write round lines to this file")
    p_train.set_defaults(func=_cmd_train)

    p_seg = sub.add_parser("segment", help="write a vessel probability map for one image")
    p_seg.add_argument("--weights", required=True)
    p_seg.add_argument("--image", required=True, help="input P6 image")
    p_seg.add_argument("--out", required=True, help="output P5 probability map")
    p_seg.add_argument("--binary", action="store_true",
                       help="also write the Otsu-thresholded map next to --out")
    p_seg.set_defaults(func=_cmd_segment)

    p_eval = sub.add_parser("evaluate", help="print pooled metrics over a dataset")
    p_eval.add_argument("--weights", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--verbose", action="store_true",
                        help="also print per-image macro averages")
    p_eval.add_argument("--workers", type=int)
    p_eval.add_argument("--downsample", type=int)
    p_eval.set_defaults(func=_cmd_evaluate)

    p_synth = sub.add_parser("synth", help="emit synthetic image/gt/mask triples")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--count", type=int)
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--config", help="key=value config file")
    p_synth.add_argument("--width", type=int)
    p_synth.add_argument("--height", type=int)
    p_synth.add_argument("--workers", type=int)
    p_synth.set_defaults(func=_cmd_synth)

    p_grad = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p_grad.set_defaults(func=_cmd_gradcheck)
    return parser


def _load_config(args, flag_keys: dict[str, str]) -> CommandConfig:
    cfg = CommandConfig()
    if getattr(args, "config", None):
        cfg.load_file(args.config)
    flags = {}
    for attr, key in flag_keys.items():
        flags[key] = getattr(args, attr, None)
    cfg.apply_flags(flags)
    if cfg.sources["seed"] == "default" and "SEGAN_SEED" in os.environ:
        cfg.set("seed", os.environ["SEGAN_SEED"], source="SEGAN_SEED")
    return cfg


def _plan_from_config(cfg: CommandConfig, ablations: list[str]) -> ChannelPlan:
    plan = ChannelPlan(
        stage_channels=list(cfg["stage_channels"]),
        squeeze_k=cfg["squeeze_k"],
        conv_kernel=cfg["conv_kernel"],
        enable_msfrb="msfrb" not in ablations,
        enable_am="am" not in ablations and "msfrb" not in ablations,
    )
    plan.validate()
    return plan


def _collate(samples: list[D.Sample]) -> list[TR.BatchSample]:
    target_w = D.next_multiple_of_16(max(s.image.width for s in samples))
    target_h = D.next_multiple_of_16(max(s.image.height for s in samples))
    out = []
    for s in samples:
        image, _ = D.pad_to(s.image.pixels, target_w, target_h)
        gt, _ = D.pad_to(s.gt.pixels, target_w, target_h)
        mask, _ = D.pad_to(s.mask.mask, target_w, target_h)
        out.append(TR.BatchSample(
            fundus=TR.Tensor(image[None]),
            vessel=TR.Tensor(gt[None]),
            mask=mask[None, None],
        ))
    return out


def _cmd_train(args) -> int:
    cfg = _load_config(args, {
        "seed": "seed", "rounds": "rounds", "lr": "lr", "batch_size": "batch_size",
        "augment": "augment", "downsample": "downsample",
    })
    ablations = list(args.ablate)
    plan = _plan_from_config(cfg, ablations)
    flags = TR.LossFlags(
        use_gan_loss="gan" not in ablations,
        use_bce="bce" not in ablations,
        use_mae="mae" not in ablations,
    )
    config = TR.TrainConfig(
        lr=cfg["lr"], batch_size=cfg["batch_size"], rounds=cfg["rounds"],
        average_last=min(cfg["average_last"], cfg["rounds"]), seed=cfg["seed"],
        clamp_eps=cfg["clamp_eps"],
        loss_weights=TR.LossWeights(cfg["alpha"], cfg["beta"], cfg["gamma"]),
        flags=flags,
    )
    config.validate()

    samples = D.load_dataset(args.data, downsample=cfg["downsample"])
    if cfg["augment"]:
        expanded = []
        for s in samples:
            expanded.extend(D.augment_dihedral(s.image, s.gt, s.mask))
        samples = expanded
    dataset = _collate(samples)

    g = build_generator(plan, cfg["seed"])
    d = build_discriminator(plan, cfg["seed"] + 1) if flags.use_gan_loss else None

    log_file = open(args.log, "w") if args.log else None
    try:
        def emit(line: str) -> None:
            print(line)
            if log_file:
                log_file.write(line + "\n")

        _, history = TR.train(g, d, dataset, config, log=emit)
    finally:
        if log_file:
            log_file.close()
    save_weights(g, args.out)
    summary = TR.summarize(history, config.average_last)
    for line in summary.lines(prefix="final_"):
        print(line)
    print(f"weights written to {args.out}", file=sys.stderr)
    return 0


def _generator_from_file(path: str):
    plan, _ = read_weights(path)
    if plan.input_channels != 3:
        raise ConfigError(
            f"{path}: expected generator weights (3 input channels), "
            f"found {plan.input_channels}")
    g = build_generator(plan, 0)
    load_weights(g, path)
    return g


def _cmd_segment(args) -> int:
    g = _generator_from_file(args.weights)
    image = D.load_pnm(Path(args.image).read_bytes())
    if image.channels != 3:
        raise ValueError(f"{args.image}: segment expects a 3-channel P6 image")
    probs = M.predict_probabilities(g, image)
    save_pnm_path = Path(args.out)
    D.save_pnm(D.Image(probs[None]), save_pnm_path)
    if args.binary:
        threshold = M.otsu_threshold(probs, np.ones_like(probs, dtype=bool))
        binary = M.binarize(probs, threshold).astype(np.float64)
        binary_path = save_pnm_path.with_suffix(".binary.pgm")
        D.save_pnm(D.Image(binary[None]), binary_path)
        print(f"binary map written to {binary_path}", file=sys.stderr)
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args, {"workers": "workers", "downsample": "downsample"})
    g = _generator_from_file(args.weights)
    dataset = D.load_dataset(args.data, downsample=cfg["downsample"])
    pooled, per_image = M.evaluate(g, dataset, verbose=True, workers=cfg["workers"])
    for line in pooled.lines():
        print(line)
    if args.verbose:
        for line in M.macro_average(per_image).lines(prefix="macro_"):
            print(line)
    return 0


def _cmd_synth(args) -> int:
    cfg = _load_config(args, {
        "seed": "seed", "count": "count", "width": "width", "height": "height",
        "workers": "workers",
    })
    specs = [
        D.SynthSpec(
            seed=cfg["seed"] + i, width=cfg["width"], height=cfg["height"],
            branch_count=cfg["branch_count"], thickness_min=cfg["thickness_min"],
            thickness_max=cfg["thickness_max"], contrast=cfg["contrast"],
            noise_sigma=cfg["noise_sigma"], blur_radius=cfg["blur_radius"],
        )
        for i in range(cfg["count"])
    ]
    if cfg["workers"] > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            triples = list(pool.map(D.synth_generate, specs))
    else:
        triples = [D.synth_generate(s) for s in specs]
    for i, (image, gt, mask) in enumerate(triples):
        D.save_sample(D.Sample(image, gt, mask), args.out, prefix=f"{i:03d}_")
    print(f"wrote {3 * len(triples)} files to {args.out}", file=sys.stderr)
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all()
    failures = 0
    for r in results:
        print(r.line())
        failures += not r.ok
    if failures:
        print(f"{failures} gradient checks failed", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed", file=sys.stderr)
    return 0


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return args.func(args)
    except (ConfigKeyError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures: I/O, parsing, shape errors
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
