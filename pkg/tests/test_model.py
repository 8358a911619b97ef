"""Generator/discriminator assembly: shapes, ranges, attention, manifests."""

import dataclasses
import math

import numpy as np
import pytest

from segan import tensor as T
from segan.model import (ChannelPlan, ConfigError, attention_forward, build_discriminator,
                         build_generator, count_parameters)
from segan.tensor import ShapeError, Tape, Tensor, backward

SMALL = ChannelPlan(stage_channels=[4, 8, 16, 32, 64])


def test_default_plan_builds():
    g = build_generator(ChannelPlan(), 0)
    assert g.plan.stage_channels == [16, 32, 64, 128, 256]


def test_plan_validation_errors():
    with pytest.raises(ConfigError, match="strictly increasing"):
        ChannelPlan(stage_channels=[16, 16, 64, 128, 256]).validate()
    with pytest.raises(ConfigError, match="divisible"):
        ChannelPlan(stage_channels=[18, 32, 64, 128, 256]).validate()
    with pytest.raises(ConfigError, match="branch road"):
        ChannelPlan(stage_channels=[4, 8, 24, 32, 64]).validate()
    with pytest.raises(ConfigError, match="5 stage channels"):
        ChannelPlan(stage_channels=[16, 32, 64]).validate()


def test_am_without_msfrb_rejected_at_build_time():
    plan = dataclasses.replace(SMALL, enable_msfrb=False, enable_am=True)
    with pytest.raises(ConfigError, match="enable_am"):
        build_generator(plan, 0)


def test_same_seed_bit_identical_parameters():
    a = build_generator(SMALL, 123)
    b = build_generator(SMALL, 123)
    for pa, pb in zip(a.params(), b.params()):
        assert np.array_equal(pa.data, pb.data)
    c = build_generator(SMALL, 124)
    assert any(not np.array_equal(pa.data, pc.data)
               for pa, pc in zip(a.params(), c.params()))


def test_generator_shape_and_range():
    g = build_generator(SMALL, 0)
    rng = np.random.default_rng(0)
    out = g.forward(Tensor(rng.uniform(0, 1, (1, 3, 64, 64))), mode="train")
    assert out.shape == (1, 1, 64, 64)
    assert (out.data > 0.0).all() and (out.data < 1.0).all()
    out = g.forward(Tensor(rng.uniform(0, 1, (2, 3, 32, 48))), mode="train")
    assert out.shape == (2, 1, 32, 48)


def test_generator_rejects_indivisible_dims():
    g = build_generator(SMALL, 0)
    with pytest.raises(ShapeError, match="16"):
        g.forward(Tensor(np.zeros((1, 3, 60, 64))), mode="eval")


def test_discriminator_shape_and_range():
    d = build_discriminator(SMALL, 1)
    rng = np.random.default_rng(1)
    image = Tensor(rng.uniform(0, 1, (1, 3, 64, 64)))
    vmap = Tensor(rng.uniform(0, 1, (1, 1, 64, 64)))
    out = d.forward(image, vmap, mode="train")
    assert out.shape == (1, 1, 64, 64)
    assert (out.data > 0.0).all() and (out.data < 1.0).all()
    batched = d.forward(Tensor(rng.uniform(0, 1, (2, 3, 32, 32))),
                        Tensor(rng.uniform(0, 1, (2, 1, 32, 32))), mode="train")
    assert batched.shape == (2, 1, 32, 32)


def test_discriminator_gradient_reaches_both_input_slices():
    d = build_discriminator(SMALL, 2)
    rng = np.random.default_rng(2)
    image = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)), requires_grad=True)
    vmap = Tensor(rng.uniform(0, 1, (1, 1, 16, 16)), requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(d.forward(image, vmap, mode="eval"))
    backward(tape, loss)
    assert np.abs(image.grad).max() > 0
    assert np.abs(vmap.grad).max() > 0


# -- refine block shape table ------------------------------------------------


def test_msfrb_shape_table_default_plan():
    g = build_generator(ChannelPlan(), 0)
    rng = np.random.default_rng(3)
    cases = {
        5: ((1, 256, 4, 4), (1, 128, 8, 8)),
        4: ((1, 128, 8, 8), (1, 64, 16, 16)),
        3: ((1, 64, 16, 16), (1, 32, 32, 32)),
        2: ((1, 32, 32, 32), (1, 16, 64, 64)),
    }
    x1 = Tensor(rng.uniform(size=(1, 16, 64, 64)))
    for block in g.decoder:
        in_shape, out_shape = cases[block.s]
        xu = Tensor(rng.uniform(size=in_shape))
        xd = Tensor(rng.uniform(size=in_shape))
        out = block.forward(xu, xd, x1, mode="train")
        assert out.shape == out_shape, f"stage {block.s}"


def test_msfrb_unit_attention_matches_am_off():
    plan_on = dataclasses.replace(SMALL)
    plan_off = dataclasses.replace(SMALL, enable_am=False)
    g_on = build_generator(plan_on, 7)
    g_off = build_generator(plan_off, 7)
    rng = np.random.default_rng(7)
    x = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)))
    out_forced = g_on.forward(x, mode="eval", force_unit_attention=True)
    out_off = g_off.forward(x, mode="eval")
    assert np.array_equal(out_forced.data, out_off.data)


def test_attention_on_zero_branch():
    branch = Tensor(np.zeros((1, 4, 3, 3)))
    out = attention_forward(branch)
    assert np.array_equal(out.data, np.zeros((1, 4, 3, 3)))
    weights = T.sigmoid(T.global_avg_pool(branch))
    assert np.allclose(weights.data, 0.5)


def test_attention_weights_in_open_interval():
    rng = np.random.default_rng(8)
    branch = Tensor(rng.normal(0, 5, (2, 6, 4, 4)))
    weights = T.sigmoid(T.global_avg_pool(branch))
    assert (weights.data > 0.0).all() and (weights.data < 1.0).all()


def test_attention_scales_high_mean_channel_near_one():
    plane = np.concatenate([np.full((1, 1, 4, 4), 10.0), np.zeros((1, 1, 4, 4))], axis=1)
    out = attention_forward(Tensor(plane))
    factor = 1.0 / (1.0 + math.exp(-10.0))
    assert abs(out.data[0, 0, 0, 0] - 10.0 * factor) < 1e-12
    assert abs(factor - 0.99995) < 1e-5


def test_attention_has_no_trainable_parameters():
    on = count_parameters(build_generator(SMALL, 0))
    off = count_parameters(build_generator(dataclasses.replace(SMALL, enable_am=False), 0))
    assert on == off


# -- parameter accounting -----------------------------------------------------


def test_single_conv_parameter_arithmetic():
    from segan.model import Conv2d
    conv = Conv2d(np.random.default_rng(0), 16, 32, 3)
    assert conv.w.size + conv.b.size == 16 * 32 * 9 + 32 == 4640


def test_msfrb_generator_heavier_than_plain():
    plan = ChannelPlan()
    full = count_parameters(build_generator(plan, 0))
    plain = count_parameters(build_generator(
        dataclasses.replace(plan, enable_msfrb=False, enable_am=False), 0))
    assert full > plain


def test_count_parameters_excludes_running_stats():
    g = build_generator(SMALL, 0)
    named = g.named_state()
    trainable = sum(v.size for k, v in named.items() if "running_" not in k)
    assert count_parameters(g) == trainable


# -- symmetric equilibrium ----------------------------------------------------


def _strip_channels(manifest):
    return [(stage, kind) for stage, kind, *_ in manifest]


def test_generator_and_discriminator_share_encoder_template():
    g = build_generator(SMALL, 0)
    d = build_discriminator(SMALL, 1)
    assert _strip_channels(g.encoder_manifest()) == _strip_channels(d.encoder_manifest())
    # encoders differ only in the first conv's input channels (3 vs 4)
    g_entries = g.encoder_manifest()
    d_entries = d.encoder_manifest()
    diffs = [(a, b) for a, b in zip(g_entries, d_entries) if a != b]
    assert len(diffs) == 1
    (ga, da) = diffs[0]
    assert ga[2] == 3 and da[2] == 4


def test_plain_generator_decoder_matches_discriminator_decoder():
    g_plain = build_generator(
        dataclasses.replace(SMALL, enable_msfrb=False, enable_am=False), 0)
    d = build_discriminator(SMALL, 1)
    assert g_plain.decoder_manifest() == d.decoder_manifest()


def test_forward_count_instrumentation():
    d = build_discriminator(SMALL, 0)
    assert d.forward_count == 0
    rng = np.random.default_rng(0)
    d.forward(Tensor(rng.uniform(0, 1, (1, 3, 16, 16))),
              Tensor(rng.uniform(0, 1, (1, 1, 16, 16))), mode="eval")
    assert d.forward_count == 1
