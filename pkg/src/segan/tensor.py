"""Minimal deterministic reverse-mode autodiff on flat float64 numpy buffers.

Tensors are rank 1..4 (rank 4 read as N,C,H,W). Forward ops record onto the
innermost active Tape; backward() replays the records once, in reverse, and
accumulates total derivatives into every requires_grad tensor it reaches.
Everything runs in double precision so finite-difference checks have headroom.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# sigmoid saturates to exactly 0.0/1.0 in f64 beyond |x| ~ 37/745; clamp to the
# nearest representable interior values so outputs stay strictly inside (0, 1)
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Raised when an op's shape preconditions are violated."""


class GradError(RuntimeError):
    """Raised on autodiff contract violations (non-scalar loss, missing grad)."""


class Tensor:
    """Rank 1..4 f64 array with an optional gradient buffer and tape handle."""

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 4:
            raise ShapeError(f"tensor rank must be 1..4, got {arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GradError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        """View of the same buffer, cut off from any tape."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node_id = None
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps d(loss)/d(output) to per-input gradients (None for non-diff inputs)
    backward: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Tape:
    """Single-writer record of one forward pass, in topological order."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def record(self, op, inputs, output, backward) -> None:
        output.node_id = len(self.records)
        self.records.append(TapeRecord(op, tuple(inputs), output, backward))

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.records)


_ACTIVE: list[Tape] = []


def _tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _make_output(data: np.ndarray, inputs: Sequence[Tensor]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out.node_id = None
    return out


def _finish(op: str, inputs: Sequence[Tensor], out: Tensor, backward) -> Tensor:
    tape = _tape()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, backward)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad of every requires_grad tensor reachable from `loss`.

    Gradients accumulate additively across fan-out and across repeated calls;
    zero the buffers between calls for fresh derivatives.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None or loss.node_id >= len(tape.records) \
            or tape.records[loss.node_id].output is not loss:
        raise GradError("loss was not produced on this tape")

    def on_this_tape(t: Tensor) -> bool:
        nid = t.node_id
        return nid is not None and nid < len(tape.records) and tape.records[nid].output is t

    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for record in reversed(tape.records[: loss.node_id + 1]):
        out_id = record.output.node_id
        g_out = pending.pop(out_id, None)
        if g_out is None:
            continue
        if record.output.requires_grad:
            record.output.accumulate_grad(g_out)
        for tensor, g_in in zip(record.inputs, record.backward(g_out)):
            if g_in is None:
                continue
            if on_this_tape(tensor) and tensor.node_id < out_id:
                slot = pending.get(tensor.node_id)
                if slot is None:
                    pending[tensor.node_id] = g_in.copy()
                else:
                    slot += g_in
            elif tensor.requires_grad:
                tensor.accumulate_grad(g_in)


# ---------------------------------------------------------------------------
# convolution


def _require_rank(x: Tensor, rank: int, name: str, op: str) -> None:
    if x.data.ndim != rank:
        raise ShapeError(f"{op}: {name} must be rank {rank}, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Padded input (N,C,Hp,Wp) -> contiguous (C*kh*kw, N*Ho*Wo) patch matrix."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(s1, s2, s3, s0, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(c * kh * kw, n * ho * wo)


def _col2im(gcols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    gx = np.zeros((n, c, hp, wp))
    g6 = gcols.reshape(c, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g6[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(gx)


def _corr(x: np.ndarray, w: np.ndarray, stride: int, pad: int,
          bias: np.ndarray | None = None) -> np.ndarray:
    """Raw cross-correlation on arrays (no tape); shared by forward and the
    stride-1 input-gradient path. Returns a fresh C-contiguous (N,Co,Ho,Wo)."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    flat = (w.reshape(co, ci * kh * kw) @ cols).reshape(co, n, ho, wo)
    out = np.empty((n, co, ho, wo))
    if bias is None:
        np.copyto(out, flat.transpose(1, 0, 2, 3))
    else:
        np.add(flat.transpose(1, 0, 2, 3), bias.reshape(1, co, 1, 1), out=out)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; differentiable w.r.t. x, w, b."""
    _require_rank(x, 4, "x", "conv2d")
    _require_rank(w, 4, "w", "conv2d")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci}")
    if b.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ShapeError(
            f"conv2d: spatial dims {h}x{wd} with pad {pad}, kernel {kh}x{kw} "
            f"not divisible by stride {stride}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    wmat = w.data.reshape(co, ci * kh * kw)
    out_flat = (wmat @ cols).reshape(co, n, ho, wo)  # (co, n*ho*wo)
    out_data = np.empty((n, co, ho, wo))
    np.add(out_flat.transpose(1, 0, 2, 3), b.data.reshape(1, co, 1, 1), out=out_data)
    out = _make_output(out_data, (x, w, b))

    xshape = x.shape

    def bwd(g: np.ndarray):
        gflat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
        gw = (gflat @ cols.T).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
        if stride == 1 and kh == kw and kh - 1 - pad >= 0:
            # full correlation with the flipped kernel: one BLAS gemm instead
            # of a python scatter loop
            w_flip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _corr(g, w_flip, 1, kh - 1 - pad)
        else:
            gx = _col2im(wmat.T @ gflat, xshape, kh, kw, stride, pad)
        return gx, gw, gb

    return _finish("conv2d", (x, w, b), out, bwd)


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool2x(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first
    maximizer in row-major window order."""
    _require_rank(x, 4, "x", "maxpool2x")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x: H and W must be even, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(windows).reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    out = _make_output(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], (x,))

    def bwd(g: np.ndarray):
        gwin = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return _finish("maxpool2x", (x,), out, bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Each pixel replicated into a 2x2 block."""
    _require_rank(x, 4, "x", "upsample_nearest2x")
    n, c, h, w = x.shape
    out = _make_output(np.ascontiguousarray(x.data.repeat(2, axis=2).repeat(2, axis=3)), (x,))

    def bwd(g: np.ndarray):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _finish("upsample_nearest2x", (x,), out, bwd)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BnState:
    """Running statistics for one batchnorm layer (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def for_channels(cls, c: int, momentum: float = 0.9, eps: float = 1e-5) -> "BnState":
        return cls(np.zeros(c), np.ones(c), momentum, eps)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BnState, mode: str) -> Tensor:
    """Per-channel batch normalization over N,H,W.

    Train mode normalizes with batch statistics (biased variance) and folds
    them into the running stats; eval mode normalizes with the running stats.
    Differentiable through the batch statistics.
    """
    _require_rank(x, 4, "x", "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: gamma {gamma.shape} / beta {beta.shape} must both be ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")

    eps = state.eps
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError(f"batchnorm2d: train mode needs N*H*W >= 2, got {m}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xc = x.data - mean.reshape(1, c, 1, 1)
    xhat = xc * inv_std.reshape(1, c, 1, 1)
    out = _make_output(gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1), (x, gamma, beta))

    if mode == "train":
        m = n * h * w

        def bwd(g: np.ndarray):
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            # backprop through batch mean/var
            sum_gxhat = gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            sum_gxhat_xhat = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gxhat - sum_gxhat - xhat * sum_gxhat_xhat)
            return gx, ggamma, gbeta
    else:

        def bwd(g: np.ndarray):
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            gx = g * (gamma.data * inv_std).reshape(1, c, 1, 1)
            return gx, ggamma, gbeta

    return _finish("batchnorm2d", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# elementwise


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu or sigmoid; sigmoid outputs stay strictly in (0, 1)."""
    if kind == "relu":
        out = _make_output(np.maximum(x.data, 0.0), (x,))
        mask = x.data > 0

        def bwd(g: np.ndarray):
            return (g * mask,)
    elif kind == "sigmoid":
        with np.errstate(over="ignore"):
            s = np.clip(1.0 / (1.0 + np.exp(-x.data)), _SIG_LO, _SIG_HI)
        out = _make_output(s, (x,))

        def bwd(g: np.ndarray):
            return (g * s * (1.0 - s),)
    else:
        raise ValueError(f"activation: unknown kind {kind!r}")
    return _finish(f"activation[{kind}]", (x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def elementwise_add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"elementwise_add: shapes differ, {x.shape} vs {y.shape}")
    out = _make_output(x.data + y.data, (x, y))

    def bwd(g: np.ndarray):
        return g, g

    return _finish("elementwise_add", (x, y), out, bwd)


def elementwise_mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"elementwise_mul: shapes differ, {x.shape} vs {y.shape}")
    out = _make_output(x.data * y.data, (x, y))

    def bwd(g: np.ndarray):
        return g * y.data, g * x.data

    return _finish("elementwise_mul", (x, y), out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    c = float(c)
    out = _make_output(x.data * c, (x,))

    def bwd(g: np.ndarray):
        return (g * c,)

    return _finish("scale", (x,), out, bwd)


def reduce_sum(x: Tensor) -> Tensor:
    out = _make_output(np.array([x.data.sum()]), (x,))

    def bwd(g: np.ndarray):
        return (np.full_like(x.data, g[0]),)

    return _finish("reduce_sum", (x,), out, bwd)


# ---------------------------------------------------------------------------
# channel algebra


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, order preserved."""
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    first = xs[0]
    _require_rank(first, 4, "xs[0]", "concat_channels")
    for i, t in enumerate(xs[1:], start=1):
        _require_rank(t, 4, f"xs[{i}]", "concat_channels")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: xs[{i}] has N,H,W {t.shape[0]},{t.shape[2]},{t.shape[3]}"
                f" but xs[0] has {first.shape[0]},{first.shape[2]},{first.shape[3]}")
    offsets = np.cumsum([0] + [t.shape[1] for t in xs])
    out = _make_output(np.concatenate([t.data for t in xs], axis=1), tuple(xs))

    def bwd(g: np.ndarray):
        # channel slices are views; gradient consumers copy before accumulating
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(xs)))

    return _finish("concat_channels", tuple(xs), out, bwd)


def channel_scale(x: Tensor, a: Tensor) -> Tensor:
    """Multiply each channel plane by a scalar weight.

    `a` is either (C,) shared across the batch or (N, C) per sample.
    """
    _require_rank(x, 4, "x", "channel_scale")
    n, c, h, w = x.shape
    if a.shape == (c,):
        af = a.data.reshape(1, c, 1, 1)
        per_sample = False
    elif a.shape == (n, c):
        af = a.data.reshape(n, c, 1, 1)
        per_sample = True
    else:
        raise ShapeError(f"channel_scale: weights shape {a.shape} must be ({c},) or ({n}, {c})")
    out = _make_output(x.data * af, (x, a))

    def bwd(g: np.ndarray):
        gx = g * af
        if per_sample:
            ga = (g * x.data).sum(axis=(2, 3))
        else:
            ga = (g * x.data).sum(axis=(0, 2, 3))
        return gx, ga

    return _finish("channel_scale", (x, a), out, bwd)


def channel_group_sum(x: Tensor, k: int) -> Tensor:
    """Squeeze the channel axis by summing each contiguous group of k channels."""
    _require_rank(x, 4, "x", "channel_group_sum")
    n, c, h, w = x.shape
    if k < 1 or c % k:
        raise ShapeError(f"channel_group_sum: C={c} not divisible by k={k}")
    out = _make_output(x.data.reshape(n, c // k, k, h, w).sum(axis=2), (x,))

    def bwd(g: np.ndarray):
        gx = np.broadcast_to(g[:, :, None], (n, c // k, k, h, w)).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return _finish("channel_group_sum", (x,), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (N,C,H,W) -> (N,C)."""
    _require_rank(x, 4, "x", "global_avg_pool")
    n, c, h, w = x.shape
    out = _make_output(x.data.mean(axis=(2, 3)), (x,))

    def bwd(g: np.ndarray):
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w))
        return (np.ascontiguousarray(gx),)

    return _finish("global_avg_pool", (x,), out, bwd)


# ---------------------------------------------------------------------------
# losses


def bce_loss(p: Tensor, y: Tensor, clamp_eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with predictions clamped away from {0, 1}."""
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss: shapes differ, {p.shape} vs {y.shape}")
    if not 0.0 < clamp_eps < 0.5:
        raise ValueError(f"bce_loss: clamp_eps must be in (0, 0.5), got {clamp_eps}")
    pc = np.clip(p.data, clamp_eps, 1.0 - clamp_eps)
    val = -(y.data * np.log(pc) + (1.0 - y.data) * np.log1p(-pc)).mean()
    out = _make_output(np.array([val]), (p, y))
    m = p.data.size
    interior = (p.data >= clamp_eps) & (p.data <= 1.0 - clamp_eps)

    def bwd(g: np.ndarray):
        gp = g[0] / m * np.where(interior, -y.data / pc + (1.0 - y.data) / (1.0 - pc), 0.0)
        return gp, None

    return _finish("bce_loss", (p, y), out, bwd)


def mae_loss(p: Tensor, y: Tensor) -> Tensor:
    """Mean absolute error; subgradient sign(p - y), zero at ties."""
    if p.shape != y.shape:
        raise ShapeError(f"mae_loss: shapes differ, {p.shape} vs {y.shape}")
    diff = p.data - y.data
    out = _make_output(np.array([np.abs(diff).mean()]), (p, y))
    m = p.data.size

    def bwd(g: np.ndarray):
        return g[0] / m * np.sign(diff), None

    return _finish("mae_loss", (p, y), out, bwd)
