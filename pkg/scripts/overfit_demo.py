"""Overfit a small generator/discriminator pair on 4 synthetic 64x64 images.

Trains with the default hyperparameters (lr 2e-4, batch 2, loss weights
0.08/1.1/0.5), measures the training-set BCE at step 10, and stops as soon as
the targets hold or the step cap is hit:

    bce_final <= 0.5 * bce_step10,  pooled Se >= 0.85,  pooled Acc >= 0.95

Prints one `key=value` line per result so harnesses can parse the outcome.
Run with OPENBLAS_NUM_THREADS=1 to pin the arithmetic to a single core.

Usage:
    python scripts/overfit_demo.py [--steps 2000] [--seed 0] [--ablate bce --ablate mae]
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from segan.data import Sample, SynthSpec, synth_generate
from segan.metrics import ConfusionCounts, binarize, compute_metrics, confusion, otsu_threshold
from segan.model import ChannelPlan, build_discriminator, build_generator
from segan.optim import AdamState
from segan.training import LossFlags, TrainConfig, from_sample, stack, train_step

CHECK_EVERY = 50


def training_bce(g, batches, clamp_eps: float = 1e-7) -> float:
    total = 0.0
    for b in batches:
        p = np.clip(g.forward(b.fundus, mode="eval").data, clamp_eps, 1 - clamp_eps)
        y = b.vessel.data
        total += float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).mean())
    return total / len(batches)


def pooled_training_metrics(g, batches):
    counts = ConfusionCounts()
    for b in batches:
        probs = g.forward(b.fundus, mode="eval").data[0, 0]
        mask = b.mask[0, 0]
        pred = binarize(probs, otsu_threshold(probs, mask))
        counts = counts + confusion(pred, b.vessel.data[0, 0], mask)
    return compute_metrics(counts)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=2000, help="generator step cap")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--images", type=int, default=4)
    parser.add_argument("--ablate", action="append", default=[],
                        choices=("gan", "bce", "mae"))
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args()

    t_start = time.time()
    batches = [
        from_sample(Sample(*synth_generate(SynthSpec(seed=100 + i))))
        for i in range(args.images)
    ]
    flags = LossFlags(
        use_gan_loss="gan" not in args.ablate,
        use_bce="bce" not in args.ablate,
        use_mae="mae" not in args.ablate,
    )
    config = TrainConfig(seed=args.seed, flags=flags)
    plan = ChannelPlan()
    g = build_generator(plan, args.seed)
    d = build_discriminator(plan, args.seed + 1) if flags.use_gan_loss else None
    adam_g = AdamState.for_params(g.params(), lr=config.lr)
    adam_d = AdamState.for_params(d.params(), lr=config.lr) if d else None

    rng = np.random.default_rng(config.seed)
    step = 0
    bce10 = None
    met_at = None
    final_bce = None
    report = None
    while step < args.steps:
        order = rng.permutation(len(batches))
        for s in range(0, len(order), config.batch_size):
            chunk = stack([batches[i] for i in order[s:s + config.batch_size]])
            d_val, g_val = train_step(g, d, chunk, adam_g, adam_d, config)
            step += 1
            if step == 10:
                bce10 = training_bce(g, batches)
            if step >= args.steps:
                break
        if step % CHECK_EVERY == 0 or step >= args.steps:
            final_bce = training_bce(g, batches)
            report = pooled_training_metrics(g, batches)
            if not args.quiet:
                print(f"# step {step}: d_loss={d_val:.4f} g_loss={g_val:.4f} "
                      f"bce={final_bce:.4f} se={report.se:.4f} acc={report.acc:.4f}",
                      file=sys.stderr)
            if (bce10 is not None and final_bce <= 0.5 * bce10
                    and report.se is not None and report.se >= 0.85
                    and report.acc is not None and report.acc >= 0.95):
                met_at = step
                break

    elapsed = time.time() - t_start
    print(f"steps={step}")
    print(f"bce_step10={bce10:.6f}")
    print(f"bce_final={final_bce:.6f}")
    print(f"se={report.se:.6f}" if report.se is not None else "se=NA")
    print(f"acc={report.acc:.6f}" if report.acc is not None else "acc=NA")
    print(f"targets_met={'yes' if met_at else 'no'}")
    print(f"met_at_step={met_at if met_at else -1}")
    print(f"elapsed_seconds={elapsed:.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
