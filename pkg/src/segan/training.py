"""Composite adversarial + segmentation objective and the alternating
discriminator/generator training schedule.

One round is a full pass over the training images. Each step runs one
discriminator update on (real, detached-fake) pairs followed by one generator
update on the weighted three-term loss; gradients are zeroed between phases so
the two parameter sets never leak into each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics as M
from . import tensor as T
from .model import ConfigError, Discriminator, Generator
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward


@dataclass
class LossWeights:
    """Mixing weights for the adversarial / BCE / MAE terms."""

    alpha: float = 0.08
    beta: float = 1.1
    gamma: float = 0.5

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError(f"loss weights must be nonnegative: {self}")


@dataclass
class LossFlags:
    """Ablation switches for the three loss terms."""

    use_gan_loss: bool = True
    use_bce: bool = True
    use_mae: bool = True

    def validate(self) -> None:
        if not (self.use_gan_loss or self.use_bce or self.use_mae):
            raise ConfigError("all loss terms disabled: nothing to optimize")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 2
    rounds: int = 10
    average_last: int = 5
    seed: int = 0
    clamp_eps: float = 1e-7
    loss_weights: LossWeights = field(default_factory=LossWeights)
    flags: LossFlags = field(default_factory=LossFlags)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be positive, got {self.rounds}")
        if not 1 <= self.average_last <= self.rounds:
            raise ConfigError(
                f"average_last={self.average_last} must lie in [1, rounds={self.rounds}]")
        self.loss_weights.validate()
        self.flags.validate()


@dataclass
class BatchSample:
    """Aligned training tensors: image in [0,1], binary vessel map, FOV mask."""

    fundus: Tensor
    vessel: Tensor
    mask: np.ndarray

    def __post_init__(self):
        n, c, h, w = self.fundus.shape
        if self.vessel.shape != (n, 1, h, w):
            raise ConfigError(
                f"vessel shape {self.vessel.shape} does not match fundus {self.fundus.shape}")
        if self.mask.shape != (n, 1, h, w):
            raise ConfigError(
                f"mask shape {self.mask.shape} does not match fundus {self.fundus.shape}")
        v = self.vessel.data
        if not np.isin(v, (0.0, 1.0)).all():
            raise ConfigError("vessel map must be binary")
        if (v[~self.mask.astype(bool)] != 0).any():
            raise ConfigError("vessel-positive pixels must lie inside the mask")


def from_sample(sample) -> BatchSample:
    """Lift a data_pipeline Sample (already sized to a multiple of 16)."""
    return BatchSample(
        fundus=Tensor(sample.image.pixels[None]),
        vessel=Tensor(sample.gt.pixels[None]),
        mask=sample.mask.mask[None, None].astype(bool),
    )


def stack(batch: Sequence[BatchSample]) -> BatchSample:
    if len(batch) == 1:
        return batch[0]
    return BatchSample(
        fundus=Tensor(np.concatenate([b.fundus.data for b in batch])),
        vessel=Tensor(np.concatenate([b.vessel.data for b in batch])),
        mask=np.concatenate([b.mask for b in batch]),
    )


# ---------------------------------------------------------------------------
# losses


def _const_like(t: Tensor, value: float) -> Tensor:
    return Tensor(np.full(t.shape, value))


def d_loss(d: Discriminator, fundus: Tensor, vessel: Tensor, fake_map: Tensor,
           clamp_eps: float = 1e-7, mode: str = "train") -> Tensor:
    """BCE(D(real pair), 1) + BCE(D(fake pair), 0), averaged per pixel.

    `fake_map` must be detached: the discriminator phase may not propagate
    into the generator.
    """
    if fake_map.requires_grad or fake_map.node_id is not None:
        raise T.GradError("d_loss: fake_map must be detached from the generator tape")
    real_score = d.forward(fundus, vessel, mode=mode)
    fake_score = d.forward(fundus, fake_map, mode=mode)
    loss_real = T.bce_loss(real_score, _const_like(real_score, 1.0), clamp_eps)
    loss_fake = T.bce_loss(fake_score, _const_like(fake_score, 0.0), clamp_eps)
    return T.elementwise_add(loss_real, loss_fake)


def g_loss(g: Generator, d: Optional[Discriminator], fundus: Tensor, vessel: Tensor,
           weights: LossWeights, flags: LossFlags, clamp_eps: float = 1e-7,
           mode: str = "train", probs: Optional[Tensor] = None) -> Tensor:
    """Weighted sum alpha*adversarial + beta*BCE + gamma*MAE.

    The adversarial term is the non-saturating form (minimize -log D on the
    fake pair). Pass `probs` to reuse a generator forward already recorded on
    the active tape.
    """
    flags.validate()
    weights.validate()
    if probs is None:
        probs = g.forward(fundus, mode=mode)
    terms = []
    if flags.use_gan_loss:
        if d is None:
            raise ConfigError("g_loss: adversarial term enabled but no discriminator given")
        fooled = d.forward(fundus, probs, mode=mode)
        adv = T.bce_loss(fooled, _const_like(fooled, 1.0), clamp_eps)
        terms.append(T.scale(adv, weights.alpha))
    if flags.use_bce:
        terms.append(T.scale(T.bce_loss(probs, vessel, clamp_eps), weights.beta))
    if flags.use_mae:
        terms.append(T.scale(T.mae_loss(probs, vessel), weights.gamma))
    total = terms[0]
    for term in terms[1:]:
        total = T.elementwise_add(total, term)
    return total


# ---------------------------------------------------------------------------
# steps and rounds


def train_step(g: Generator, d: Optional[Discriminator], batch: BatchSample,
               adam_g: AdamState, adam_d: Optional[AdamState],
               config: TrainConfig) -> tuple[float, float]:
    """One discriminator update then one generator update on the same batch.

    With the adversarial term ablated the discriminator is never evaluated.
    Returns (d_loss value, g_loss value); the d value is 0.0 when skipped.
    """
    flags = config.flags
    tape_g = Tape()
    with tape_g:
        probs = g.forward(batch.fundus, mode="train")

    d_value = 0.0
    if flags.use_gan_loss:
        if d is None or adam_d is None:
            raise ConfigError("train_step: adversarial term enabled but no discriminator")
        with Tape() as tape_d:
            dl = d_loss(d, batch.fundus, batch.vessel, probs.detach(), config.clamp_eps)
        backward(tape_d, dl)
        adam_step(d.params(), adam_d)
        d.zero_grads()
        g.zero_grads()
        d_value = dl.item()

    with tape_g:
        gl = g_loss(g, d, batch.fundus, batch.vessel, config.loss_weights, flags,
                    config.clamp_eps, probs=probs)
    backward(tape_g, gl)
    adam_step(g.params(), adam_g)
    g.zero_grads()
    if d is not None:
        d.zero_grads()  # the adversarial term deposits gradients in D
    return d_value, gl.item()


@dataclass
class RoundRecord:
    round: int
    d_loss: float
    g_loss: float
    metrics: M.MetricsReport

    def line(self) -> str:
        def fmt(v):
            return "NA" if v is None else f"{v:.6f}"

        m = self.metrics
        return (f"round={self.round} d_loss={self.d_loss:.6f} g_loss={self.g_loss:.6f} "
                f"se={fmt(m.se)} sp={fmt(m.sp)} acc={fmt(m.acc)} auc={fmt(m.auc)}")


def train(g: Generator, d: Optional[Discriminator], dataset: Sequence[BatchSample],
          config: TrainConfig,
          log: Optional[Callable[[str], None]] = None) -> tuple[Generator, list[RoundRecord]]:
    """Round-based loop with seeded shuffling and a held-out round metric.

    The last sample is held out for the per-round metrics; with a single
    sample it is both trained on and measured (desk-scale degenerate case).
    """
    config.validate()
    if not len(dataset):
        raise ConfigError("train: empty dataset")
    train_set = list(dataset[:-1]) if len(dataset) > 1 else list(dataset)
    holdout = dataset[-1]

    adam_g = AdamState.for_params(g.params(), lr=config.lr)
    adam_d = None
    if config.flags.use_gan_loss:
        if d is None:
            raise ConfigError("train: adversarial term enabled but no discriminator")
        adam_d = AdamState.for_params(d.params(), lr=config.lr)

    rng = np.random.default_rng(config.seed)
    history: list[RoundRecord] = []
    for round_idx in range(1, config.rounds + 1):
        order = rng.permutation(len(train_set))
        d_vals, g_vals = [], []
        for start in range(0, len(order), config.batch_size):
            chunk = [train_set[i] for i in order[start:start + config.batch_size]]
            dv, gv = train_step(g, d, stack(chunk), adam_g, adam_d, config)
            d_vals.append(dv)
            g_vals.append(gv)
        report = _holdout_metrics(g, holdout)
        record = RoundRecord(round_idx, float(np.mean(d_vals)), float(np.mean(g_vals)), report)
        history.append(record)
        if log is not None:
            log(record.line())
    return g, history


def _holdout_metrics(g: Generator, holdout: BatchSample) -> M.MetricsReport:
    probs = g.forward(holdout.fundus, mode="eval").data
    reports = []
    for i in range(probs.shape[0]):
        reports.append(M.evaluate_arrays(probs[i, 0], holdout.vessel.data[i, 0],
                                         holdout.mask[i, 0]))
    return reports[0] if len(reports) == 1 else M.macro_average(reports)


def summarize(history: Sequence[RoundRecord], average_last: int) -> M.MetricsReport:
    """Arithmetic mean of the final `average_last` rounds' metrics."""
    if not 1 <= average_last <= len(history):
        raise ConfigError(
            f"average_last={average_last} must lie in [1, {len(history)}]")
    return M.macro_average([r.metrics for r in history[-average_last:]])
