"""Mirrored U-Net generator/discriminator pair.

The generator decoder runs multi-scale refine blocks: a convolutional main
road over the fused features plus a convolution-free branch road that squeezes
channel groups, optionally reweighted by parameter-free channel attention.
The discriminator is the same encoder with a plain skip-concat decoder and
judges (image, vessel map) pairs per pixel.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import BnState, Tensor


class ConfigError(ValueError):
    """Raised when a plan or run configuration violates its constraints."""


N_STAGES = 5
POOLS = N_STAGES - 1           # stage 5 is the bottleneck, no pool after it
SPATIAL_DIVISOR = 2 ** POOLS   # inputs must divide by 16


@dataclass
class ChannelPlan:
    """Per-stage channel counts and the feature switches (the ablation surface)."""

    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    squeeze_k: int = 4
    input_channels: int = 3
    enable_msfrb: bool = True
    enable_am: bool = True
    conv_kernel: int = 3

    def validate(self) -> None:
        cs = self.stage_channels
        if len(cs) != N_STAGES:
            raise ConfigError(f"plan needs {N_STAGES} stage channels, got {len(cs)}")
        if any(c <= 0 for c in cs):
            raise ConfigError(f"stage channels must be positive: {cs}")
        if any(b <= a for a, b in zip(cs, cs[1:])):
            raise ConfigError(f"stage channels must be strictly increasing: {cs}")
        if self.squeeze_k < 1:
            raise ConfigError(f"squeeze_k must be positive, got {self.squeeze_k}")
        if any(c % self.squeeze_k for c in cs):
            raise ConfigError(
                f"every stage channel count must be divisible by squeeze_k="
                f"{self.squeeze_k}: {cs}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd and positive, got {self.conv_kernel}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be positive, got {self.input_channels}")
        if self.enable_am and not self.enable_msfrb:
            raise ConfigError("enable_am requires enable_msfrb (attention lives on the "
                              "refine block's branch road)")
        if self.enable_msfrb:
            for s in range(2, N_STAGES + 1):
                branch = 2 * cs[s - 1] // self.squeeze_k
                if branch != cs[s - 2]:
                    raise ConfigError(
                        f"stage {s}: branch road width 2*C_s/k = {branch} must equal "
                        f"main road width C_(s-1) = {cs[s - 2]} (bad squeeze_k)")

    def for_discriminator(self) -> "ChannelPlan":
        """Same stage template, 4 input channels (image + map), plain decoder."""
        return replace(self, input_channels=self.input_channels + 1,
                       enable_msfrb=False, enable_am=False)


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, pad: int | None = None):
        fan_in = c_in * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        self.w = Tensor(rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        self.kernel = kernel

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self):
        return [self.w, self.b]

    def state(self):
        return [("w", self.w.data), ("b", self.b.data)]

    def manifest(self):
        k = self.kernel
        return [(f"conv{k}x{k}", self.w.shape[1], self.w.shape[0])]


class BatchNorm2d:
    def __init__(self, c: int):
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.bn_state = BnState.for_channels(c)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.bn_state, mode)

    def params(self):
        return [self.gamma, self.beta]

    def state(self):
        return [("gamma", self.gamma.data), ("beta", self.beta.data),
                ("running_mean", self.bn_state.running_mean),
                ("running_var", self.bn_state.running_var)]

    def manifest(self):
        return [("bn", self.gamma.size, self.gamma.size)]


class ConvBnRelu:
    """Conv -> BatchNorm -> ReLU, the stage workhorse."""

    def __init__(self, rng, c_in, c_out, kernel):
        self.conv = Conv2d(rng, c_in, c_out, kernel)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return T.relu(self.bn.forward(self.conv.forward(x), mode))

    def params(self):
        return self.conv.params() + self.bn.params()

    def children(self):
        return [("conv", self.conv), ("bn", self.bn)]

    def manifest(self):
        return self.conv.manifest() + self.bn.manifest() + [("relu", 0, 0)]


class EncoderStage:
    """Two conv-BN-ReLU rounds; pooling is applied by the owner between stages."""

    def __init__(self, rng, c_in, c_out, kernel):
        self.block1 = ConvBnRelu(rng, c_in, c_out, kernel)
        self.block2 = ConvBnRelu(rng, c_out, c_out, kernel)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return self.block2.forward(self.block1.forward(x, mode), mode)

    def params(self):
        return self.block1.params() + self.block2.params()

    def children(self):
        return [("block1", self.block1), ("block2", self.block2)]

    def manifest(self):
        return self.block1.manifest() + self.block2.manifest()


def attention_forward(branch: Tensor) -> Tensor:
    """Parameter-free channel attention: scale each plane by the sigmoid of
    its global average; weights land strictly inside (0, 1)."""
    weights = T.sigmoid(T.global_avg_pool(branch))
    return T.channel_scale(branch, weights)


class MsfrbBlock:
    """Decoder refine block for stage s.

    Main road convolves the fusion of (projected full-resolution features,
    projected decoder features, encoder skip); branch road squeezes the same
    unconvolved features by adjacent-channel group sums, so fine detail
    survives the merge. Their sum is upsampled to feed stage s-1.
    """

    def __init__(self, rng, plan: ChannelPlan, s: int):
        cs = plan.stage_channels
        c_s, c_prev, c_1 = cs[s - 1], cs[s - 2], cs[0]
        k = plan.conv_kernel
        self.s = s
        self.squeeze_k = plan.squeeze_k
        self.am_enabled = plan.enable_am
        self.conv_u = Conv2d(rng, c_s, c_s, k)
        r = 2 ** (s - 1)
        self.conv_1d = Conv2d(rng, c_1, c_s, r, stride=r, pad=0)
        self.main1 = ConvBnRelu(rng, 3 * c_s, c_prev, k)
        self.main2 = ConvBnRelu(rng, c_prev, c_prev, k)

    def forward(self, x_s_u: Tensor, x_s_d: Tensor, x_1_d: Tensor, mode: str,
                force_unit_attention: bool = False) -> Tensor:
        if x_s_u.shape != x_s_d.shape:
            raise ConfigError(
                f"refine block {self.s}: decoder features {x_s_u.shape} and encoder "
                f"features {x_s_d.shape} must share a shape")
        xu = self.conv_u.forward(x_s_u)
        x1 = self.conv_1d.forward(x_1_d)
        fused = T.concat_channels([x1, xu, x_s_d])
        main = self.main2.forward(self.main1.forward(fused, mode), mode)
        branch = T.concat_channels([
            T.channel_group_sum(xu, self.squeeze_k),
            T.channel_group_sum(x_s_d, self.squeeze_k),
        ])
        if branch.shape[1] != main.shape[1]:
            raise ConfigError(
                f"refine block {self.s}: branch width {branch.shape[1]} != main "
                f"width {main.shape[1]} (bad squeeze_k)")
        if self.am_enabled and not force_unit_attention:
            branch = attention_forward(branch)
        return T.upsample_nearest2x(T.elementwise_add(main, branch))

    def params(self):
        return (self.conv_u.params() + self.conv_1d.params()
                + self.main1.params() + self.main2.params())

    def children(self):
        return [("conv_u", self.conv_u), ("conv_1d", self.conv_1d),
                ("main1", self.main1), ("main2", self.main2)]

    def manifest(self):
        out = self.conv_u.manifest() + self.conv_1d.manifest()
        out += [("concat", 0, 0)]
        out += self.main1.manifest() + self.main2.manifest()
        out += [("group_sum", 0, 0), ("concat", 0, 0)]
        if self.am_enabled:
            out += [("attention", 0, 0)]
        out += [("add", 0, 0), ("upsample2x", 0, 0)]
        return out


class PlainDecoderStage:
    """Classic skip-concat decoder stage: upsample, project to C_(s-1),
    concatenate the encoder skip, then two conv-BN-ReLU rounds."""

    def __init__(self, rng, plan: ChannelPlan, s: int):
        cs = plan.stage_channels
        c_s, c_prev = cs[s - 1], cs[s - 2]
        k = plan.conv_kernel
        self.s = s
        self.up_conv = Conv2d(rng, c_s, c_prev, k)
        self.main1 = ConvBnRelu(rng, 2 * c_prev, c_prev, k)
        self.main2 = ConvBnRelu(rng, c_prev, c_prev, k)

    def forward(self, x_s_u: Tensor, skip: Tensor, mode: str) -> Tensor:
        up = self.up_conv.forward(T.upsample_nearest2x(x_s_u))
        merged = T.concat_channels([up, skip])
        return self.main2.forward(self.main1.forward(merged, mode), mode)

    def params(self):
        return self.up_conv.params() + self.main1.params() + self.main2.params()

    def children(self):
        return [("up_conv", self.up_conv), ("main1", self.main1), ("main2", self.main2)]

    def manifest(self):
        return ([("upsample2x", 0, 0)] + self.up_conv.manifest() + [("concat", 0, 0)]
                + self.main1.manifest() + self.main2.manifest())


# ---------------------------------------------------------------------------
# models


class _UNet:
    """Shared encoder/decoder skeleton; G and D differ in decoder flavor."""

    def __init__(self, plan: ChannelPlan, seed: int):
        plan.validate()
        rng = np.random.default_rng(seed)
        cs = plan.stage_channels
        k = plan.conv_kernel
        self.plan = plan
        self.forward_count = 0
        self.encoder = []
        c_in = plan.input_channels
        for c_out in cs:
            self.encoder.append(EncoderStage(rng, c_in, c_out, k))
            c_in = c_out
        if plan.enable_msfrb:
            self.decoder = [MsfrbBlock(rng, plan, s) for s in range(N_STAGES, 1, -1)]
        else:
            self.decoder = [PlainDecoderStage(rng, plan, s) for s in range(N_STAGES, 1, -1)]
        self.head = Conv2d(rng, cs[0], 1, 1, pad=0)

    def _check_spatial(self, x: Tensor, what: str) -> None:
        if x.data.ndim != 4:
            raise T.ShapeError(f"{what} must be rank 4 (N,C,H,W), got {x.shape}")
        n, c, h, w = x.shape
        if c != self.plan.input_channels:
            raise T.ShapeError(
                f"{what} has {c} channels, model expects {self.plan.input_channels}")
        if h % SPATIAL_DIVISOR or w % SPATIAL_DIVISOR:
            raise T.ShapeError(
                f"{what} spatial dims {h}x{w} must be divisible by {SPATIAL_DIVISOR}")

    def _unet_forward(self, x: Tensor, mode: str, force_unit_attention: bool = False) -> Tensor:
        self.forward_count += 1
        skips = []
        h = x
        for i, stage in enumerate(self.encoder):
            if i > 0:
                h = T.maxpool2x(h)
            h = stage.forward(h, mode)
            skips.append(h)
        up = skips[-1]  # decoder bootstrap: deepest encoder features
        if self.plan.enable_msfrb:
            x_1_d = skips[0]
            for block in self.decoder:
                up = block.forward(up, skips[block.s - 1], x_1_d, mode,
                                   force_unit_attention=force_unit_attention)
        else:
            for stage in self.decoder:
                up = stage.forward(up, skips[stage.s - 2], mode)
        return T.sigmoid(self.head.forward(up))

    # -- parameter plumbing

    def _modules(self):
        mods = [(f"enc{i + 1}", stage) for i, stage in enumerate(self.encoder)]
        mods += [(f"dec{block.s}", block) for block in self.decoder]
        mods.append(("head", self.head))
        return mods

    def params(self) -> list[Tensor]:
        out = []
        for _, mod in self._modules():
            out.extend(mod.params())
        return out

    def named_state(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()

        def visit(prefix, mod):
            if hasattr(mod, "children"):
                for name, child in mod.children():
                    visit(f"{prefix}.{name}", child)
            else:
                for name, arr in mod.state():
                    out[f"{prefix}.{name}"] = arr

        for name, mod in self._modules():
            visit(name, mod)
        return out

    def load_state(self, tensors: "OrderedDict[str, np.ndarray]") -> None:
        state = self.named_state()
        if list(tensors.keys()) != list(state.keys()):
            missing = set(state) - set(tensors)
            extra = set(tensors) - set(state)
            raise ConfigError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        lookup = self._state_slots()
        for name, arr in tensors.items():
            if arr.shape != state[name].shape:
                raise ConfigError(
                    f"state tensor {name!r} has shape {arr.shape}, expected {state[name].shape}")
            lookup[name](np.ascontiguousarray(arr, dtype=np.float64))

    def _state_slots(self):
        slots = {}

        def visit(prefix, mod):
            if hasattr(mod, "children"):
                for name, child in mod.children():
                    visit(f"{prefix}.{name}", child)
            elif isinstance(mod, Conv2d):
                slots[f"{prefix}.w"] = lambda a, m=mod: setattr(m.w, "data", a)
                slots[f"{prefix}.b"] = lambda a, m=mod: setattr(m.b, "data", a)
            elif isinstance(mod, BatchNorm2d):
                slots[f"{prefix}.gamma"] = lambda a, m=mod: setattr(m.gamma, "data", a)
                slots[f"{prefix}.beta"] = lambda a, m=mod: setattr(m.beta, "data", a)
                slots[f"{prefix}.running_mean"] = lambda a, m=mod: setattr(m.bn_state, "running_mean", a)
                slots[f"{prefix}.running_var"] = lambda a, m=mod: setattr(m.bn_state, "running_var", a)

        for name, mod in self._modules():
            visit(name, mod)
        return slots

    def manifest(self) -> list[tuple]:
        out = []
        for name, mod in self._modules():
            for entry in mod.manifest():
                out.append((name, *entry))
        return out

    def encoder_manifest(self) -> list[tuple]:
        return [e for e in self.manifest() if e[0].startswith("enc")]

    def decoder_manifest(self) -> list[tuple]:
        return [e for e in self.manifest() if e[0].startswith("dec")]

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()


class Generator(_UNet):
    """Fundus image (N,3,H,W) -> vessel probability map (N,1,H,W) in (0,1)."""

    def forward(self, image: Tensor, mode: str = "train",
                force_unit_attention: bool = False) -> Tensor:
        self._check_spatial(image, "generator input")
        return self._unet_forward(image, mode, force_unit_attention=force_unit_attention)


class Discriminator(_UNet):
    """(image, vessel map) pair -> per-pixel probability-of-real map in (0,1)."""

    def forward(self, image: Tensor, vmap: Tensor, mode: str = "train") -> Tensor:
        if image.data.ndim != 4 or vmap.data.ndim != 4:
            raise T.ShapeError("discriminator inputs must be rank 4")
        if vmap.shape != (image.shape[0], 1, image.shape[2], image.shape[3]):
            raise T.ShapeError(
                f"vessel map shape {vmap.shape} does not match image {image.shape}")
        pair = T.concat_channels([image, vmap])
        self._check_spatial(pair, "discriminator input")
        return self._unet_forward(pair, mode)


def build_generator(plan: ChannelPlan, seed: int) -> Generator:
    """He-uniform weights drawn deterministically from the seed."""
    return Generator(plan, seed)


def build_discriminator(plan: ChannelPlan, seed: int) -> Discriminator:
    """Discriminator over image+map pairs, mirrored from the generator plan."""
    return Discriminator(plan.for_discriminator(), seed)


def count_parameters(model: _UNet) -> int:
    """Total trainable element count (conv weights/biases, BN gamma/beta)."""
    return sum(p.size for p in model.params())


def generator_forward(g: Generator, image: Tensor, mode: str = "train") -> Tensor:
    return g.forward(image, mode)


def discriminator_forward(d: Discriminator, image: Tensor, vmap: Tensor,
                          mode: str = "train") -> Tensor:
    return d.forward(image, vmap, mode)
