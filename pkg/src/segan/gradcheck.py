"""Central finite-difference checks for every differentiable primitive.

The checks evaluate forward passes only, so they are independent of the
backward implementations they vet. Each case projects the op output onto a
fixed random vector to get a scalar, computes analytic gradients via the tape,
and compares against (f(x+h) - f(x-h)) / 2h elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import BnState, Tape, Tensor, backward


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_err <= self.tol

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return f"{status:4s} {self.name:34s} rel_err={self.rel_err:.3e} tol={self.tol:.0e}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_difference(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of f w.r.t. every element of arr (mutated in place
    and restored)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_op(name: str, forward: Callable[[Sequence[Tensor]], Tensor],
             inputs: Sequence[Tensor], wrt: Sequence[int], tol: float,
             h: float = 1e-5, rng: np.random.Generator | None = None) -> list[CheckResult]:
    """Gradient-check `forward` w.r.t. the chosen inputs.

    The scalar objective is sum(output * P) for a fixed random projection P,
    which exercises non-uniform output gradients.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = forward(inputs)
        if out.size == 1:
            proj = None
            loss = out
        else:
            proj = Tensor(rng.standard_normal(out.shape))
            loss = T.reduce_sum(T.elementwise_mul(out, proj))
        backward(tape, loss)
    analytic = [inputs[i].grad.copy() for i in wrt]

    def objective() -> float:
        o = forward(inputs)
        if proj is None:
            return o.item()
        return float((o.data * proj.data).sum())

    results = []
    for j, i in enumerate(wrt):
        numeric = finite_difference(objective, inputs[i].data, h=h)
        results.append(CheckResult(f"{name}/input{i}", relative_error(analytic[j], numeric), tol))
    return results


def _tensor(rng, shape, lo=-1.0, hi=1.0, grad=True) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=grad)


def primitive_checks(seed: int = 20240) -> list[CheckResult]:
    """The per-op finite-difference suite on seeded random inputs."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    x = _tensor(rng, (2, 3, 5, 5))
    w = _tensor(rng, (4, 3, 3, 3))
    b = _tensor(rng, (4,))
    results += check_op("conv2d(s1,p1)", lambda t: T.conv2d(t[0], t[1], t[2], 1, 1),
                        [x, w, b], [0, 1, 2], tol=1e-4, rng=rng)
    x2 = _tensor(rng, (1, 2, 6, 6))
    w2 = _tensor(rng, (3, 2, 2, 2))
    b2 = _tensor(rng, (3,))
    results += check_op("conv2d(s2,p0)", lambda t: T.conv2d(t[0], t[1], t[2], 2, 0),
                        [x2, w2, b2], [0, 1, 2], tol=1e-4, rng=rng)

    # distinct values keep the pooling argmax away from ties under the probe step
    base = rng.permutation(2 * 3 * 4 * 4).astype(np.float64).reshape(2, 3, 4, 4)
    xp = Tensor(base + rng.uniform(-0.2, 0.2, base.shape), requires_grad=True)
    results += check_op("maxpool2x", lambda t: T.maxpool2x(t[0]), [xp], [0], tol=1e-4, rng=rng)

    xu = _tensor(rng, (2, 2, 3, 3))
    results += check_op("upsample_nearest2x", lambda t: T.upsample_nearest2x(t[0]),
                        [xu, ], [0], tol=1e-6, rng=rng)

    xb = _tensor(rng, (3, 4, 5, 5))
    gamma = _tensor(rng, (4,), 0.5, 1.5)
    beta = _tensor(rng, (4,), -0.5, 0.5)
    state = BnState.for_channels(4)
    results += check_op("batchnorm2d(train)",
                        lambda t: T.batchnorm2d(t[0], t[1], t[2], state, "train"),
                        [xb, gamma, beta], [0, 1, 2], tol=1e-4, rng=rng)
    eval_state = BnState(rng.uniform(-0.3, 0.3, 4), rng.uniform(0.5, 1.5, 4))
    results += check_op("batchnorm2d(eval)",
                        lambda t: T.batchnorm2d(t[0], t[1], t[2], eval_state, "eval"),
                        [xb, gamma, beta], [0, 1, 2], tol=1e-4, rng=rng)

    # keep relu inputs away from the kink at 0
    xr = Tensor(np.where(rng.uniform(-1, 1, (2, 3, 4, 4)) >= 0, 1.0, -1.0)
                * rng.uniform(0.2, 1.0, (2, 3, 4, 4)), requires_grad=True)
    results += check_op("relu", lambda t: T.activation(t[0], "relu"), [xr], [0], tol=1e-6, rng=rng)
    xs = _tensor(rng, (2, 3, 4, 4), -3.0, 3.0)
    results += check_op("sigmoid", lambda t: T.activation(t[0], "sigmoid"),
                        [xs, ], [0], tol=1e-6, rng=rng)

    a = _tensor(rng, (2, 2, 3, 3))
    c = _tensor(rng, (2, 2, 3, 3))
    results += check_op("elementwise_add", lambda t: T.elementwise_add(t[0], t[1]),
                        [a, c], [0, 1], tol=1e-6, rng=rng)
    results += check_op("elementwise_mul", lambda t: T.elementwise_mul(t[0], t[1]),
                        [a, c], [0, 1], tol=1e-4, rng=rng)

    parts = [_tensor(rng, (2, ci, 3, 3)) for ci in (1, 2, 3)]
    results += check_op("concat_channels", lambda t: T.concat_channels(list(t)),
                        parts, [0, 1, 2], tol=1e-6, rng=rng)

    xc = _tensor(rng, (2, 4, 3, 3))
    ac = _tensor(rng, (4,), 0.1, 2.0)
    results += check_op("channel_scale(C)", lambda t: T.channel_scale(t[0], t[1]),
                        [xc, ac], [0, 1], tol=1e-6, rng=rng)
    an = _tensor(rng, (2, 4), 0.1, 2.0)
    results += check_op("channel_scale(NC)", lambda t: T.channel_scale(t[0], t[1]),
                        [xc, an], [0, 1], tol=1e-6, rng=rng)

    xg = _tensor(rng, (2, 6, 3, 3))
    results += check_op("channel_group_sum", lambda t: T.channel_group_sum(t[0], 3),
                        [xg, ], [0], tol=1e-6, rng=rng)
    results += check_op("global_avg_pool", lambda t: T.global_avg_pool(t[0]),
                        [xg, ], [0], tol=1e-6, rng=rng)

    p = _tensor(rng, (2, 1, 4, 4), 0.05, 0.95)
    y = Tensor((rng.uniform(0, 1, (2, 1, 4, 4)) > 0.5).astype(np.float64))
    results += check_op("bce_loss", lambda t: T.bce_loss(t[0], y, 1e-7),
                        [p, ], [0], tol=1e-5, rng=rng)
    # ties would make |.| non-differentiable; random reals never tie here
    results += check_op("mae_loss", lambda t: T.mae_loss(t[0], y), [p], [0], tol=1e-6, rng=rng)

    return results


def end_to_end_checks(seed: int = 77, size: int = 16, n_coords: int = 24) -> list[CheckResult]:
    """Finite-difference the composite generator objective at a small resolution.

    Checks the gradient of the full three-term loss w.r.t. the input image and
    a sampled subset of generator/discriminator parameter coordinates.
    """
    from .model import ChannelPlan, build_discriminator, build_generator
    from .training import LossFlags, LossWeights, g_loss

    rng = np.random.default_rng(seed)
    plan = ChannelPlan(stage_channels=[4, 8, 16, 32, 64])
    g = build_generator(plan, seed)
    d = build_discriminator(plan, seed + 1)
    # batch of 2: the bottleneck sits at 1x1 spatial, and train-mode batchnorm
    # needs at least two values per channel
    image = Tensor(rng.uniform(0, 1, (2, 3, size, size)), requires_grad=True)
    vessel = Tensor((rng.uniform(0, 1, (2, 1, size, size)) > 0.8).astype(np.float64))
    weights = LossWeights()
    flags = LossFlags()

    def objective() -> float:
        return g_loss(g, d, image, vessel, weights, flags, mode="train").item()

    with Tape() as tape:
        loss = g_loss(g, d, image, vessel, weights, flags, mode="train")
        backward(tape, loss)

    # h=1e-5 leaves the linear regime here: the 1x1-bottleneck batch statistics
    # over two samples curve the loss sharply, so probe closer in
    h = 3e-8
    results = []
    numeric_img = np.zeros(4)
    analytic_img = np.zeros(4)
    flat = image.data.reshape(-1)
    coords = rng.choice(flat.size, size=4, replace=False)
    for j, ci in enumerate(coords):
        analytic_img[j] = image.grad.reshape(-1)[ci]
        numeric_img[j] = _fd_coord(objective, flat, ci, h=h)
    results.append(CheckResult("g_loss/d(input image)",
                               relative_error(analytic_img, numeric_img), 1e-3))

    params = g.params() + d.params()
    picks = rng.choice(len(params), size=min(n_coords, len(params)), replace=False)
    analytic = np.zeros(len(picks))
    numeric = np.zeros(len(picks))
    for j, pi in enumerate(picks):
        p = params[pi]
        ci = int(rng.integers(p.size))
        analytic[j] = 0.0 if p.grad is None else p.grad.reshape(-1)[ci]
        numeric[j] = _fd_coord(objective, p.data.reshape(-1), ci, h=h)
    results.append(CheckResult("g_loss/d(sampled parameters)",
                               relative_error(analytic, numeric), 1e-3))
    return results


def _fd_coord(f: Callable[[], float], flat: np.ndarray, i: int, h: float = 1e-5) -> float:
    orig = flat[i]
    flat[i] = orig + h
    fp = f()
    flat[i] = orig - h
    fm = f()
    flat[i] = orig
    return (fp - fm) / (2.0 * h)


def run_all(seed: int = 20240) -> list[CheckResult]:
    return primitive_checks(seed) + end_to_end_checks()
