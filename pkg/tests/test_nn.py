from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfmnet import ops
from dfmnet.errors import InvalidConfig, ShapeMismatch
from dfmnet.nn import (
    PPM,
    BConv,
    ChannelAttention,
    DSConv,
    InvertedResidual,
    IrbConfig,
    Sequential,
    bconv,
    channel_attention,
    dsconv3x3,
    irb,
    irb_stage,
    ppm,
)
from dfmnet.tensor import DTYPE, Tensor, no_grad


def rng(seed=0):
    return np.random.default_rng(seed)


def conv_weight_count(module) -> int:
    return sum(t.data.size for n, t in module.named_parameters() if n.endswith(".w") and t.ndim == 4)


def closed_form_params(module) -> int:
    """Stored-tensor count implied by each layer's hyperparameters."""
    from dfmnet.nn import BatchNorm2d, Conv2d, Linear

    total = 0
    for _, m in _walk(module):
        if isinstance(m, Conv2d):
            o, ci, k, _ = m.w.shape
            total += o * ci * k * k + (o if hasattr(m, "b") else 0)
        elif isinstance(m, BatchNorm2d):
            total += 4 * m.gamma.shape[0]
        elif isinstance(m, Linear):
            fo, fi = m.w.shape
            total += fo * fi + fo
    return total


def _walk(module, prefix=""):
    yield prefix, module
    for name, child in module.children():
        yield from _walk(child, f"{prefix}{name}.")


# -- BConv ----------------------------------------------------------------------


def test_bconv_identity_configuration():
    block = BConv(4, 4, 1).eval()
    block.conv.w.data[...] = np.eye(4, dtype=DTYPE).reshape(4, 4, 1, 1)
    block.bn.eps = 0.0
    x = rng().uniform(0, 2, (2, 4, 5, 5)).astype(DTYPE)
    assert np.array_equal(bconv(Tensor(x), block).data, x)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 1e3))
def test_sigmoid_bconv_output_in_open_unit_interval(seed, scale):
    block = BConv(3, 2, 3, activation="sigmoid", rng=rng(seed)).eval()
    x = Tensor(rng(seed + 1).standard_normal((1, 3, 6, 6)) * scale)
    with no_grad():
        y = block(x).data
    assert np.all((y > 0) & (y < 1))


def test_bconv_keeps_feature_dimensions():
    block = BConv(16, 16, 1)
    with no_grad():
        assert block(Tensor(np.zeros((1, 16, 128, 128)))).shape == (1, 16, 128, 128)
    assert BConv(3, 5, 3)(Tensor(np.zeros((1, 3, 7, 9)))).shape == (1, 5, 7, 9)


def test_bconv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        BConv(4, 4, 1)(Tensor(np.zeros((1, 3, 4, 4))))
    with pytest.raises(InvalidConfig):
        BConv(4, 4, 1, activation="gelu")


# -- DSConv ---------------------------------------------------------------------


def test_dsconv_parameter_count():
    block = DSConv(320, 16)
    assert conv_weight_count(block) == 9 * 320 + 320 * 16 == 8000
    assert block.num_elements() == closed_form_params(block)


def test_dsconv_zero_input_gives_constant_map():
    block = DSConv(4, 3).eval()
    block.bn.beta.data[...] = [0.5, -0.5, 0.25]
    with no_grad():
        y = dsconv3x3(Tensor(np.zeros((1, 4, 6, 5))), block).data
    assert y.shape == (1, 3, 6, 5)
    for c, v in enumerate([0.5, 0.0, 0.25]):
        assert np.all(y[0, c] == DTYPE(v))


# -- IRB ------------------------------------------------------------------------


def test_irb_config_validation():
    for bad in [(0, 16, 1, 1), (1, 0, 1, 1), (1, 16, 0, 1), (1, 16, 1, 3)]:
        with pytest.raises(InvalidConfig):
            IrbConfig(*bad)


def test_irb_first_row_shape():
    cfg = IrbConfig(3, 16, 1, 2)
    stage = irb_stage(1, cfg)
    with no_grad():
        assert irb(Tensor(np.zeros((1, 1, 256, 256))), cfg, stage).shape == (1, 16, 128, 128)


def test_irb_last_row_shape():
    cfg = IrbConfig(2, 320, 1, 1)
    stage = irb_stage(96, cfg)
    with no_grad():
        assert irb(Tensor(np.zeros((1, 96, 16, 16))), cfg, stage).shape == (1, 320, 16, 16)


def test_irb_zero_projection_is_residual_identity():
    block = InvertedResidual(8, 8, 1, 3, rng=rng())
    assert block.residual
    block.project.conv.w.data[...] = 0
    x = rng(1).standard_normal((2, 8, 5, 5)).astype(DTYPE)
    with no_grad():
        assert np.array_equal(block(Tensor(x)).data, x)


def test_irb_residual_only_when_shapes_match():
    assert not InvertedResidual(8, 8, 2, 3).residual
    assert not InvertedResidual(8, 16, 1, 3).residual
    stage = irb_stage(8, IrbConfig(2, 16, 3, 2))
    assert [b.residual for b in stage] == [False, True, True]


def test_irb_stage_length_must_match_config():
    with pytest.raises(InvalidConfig):
        irb(Tensor(np.zeros((1, 8, 4, 4))), IrbConfig(2, 8, 2, 1), irb_stage(8, IrbConfig(2, 8, 1, 1)))


def test_irb_projection_has_no_activation():
    block = InvertedResidual(4, 6, 1, 2, rng=rng(2)).eval()
    with no_grad():
        y = block(Tensor(rng(3).standard_normal((1, 4, 6, 6)))).data
    assert (y < 0).any()


# -- channel attention ----------------------------------------------------------


def test_channel_attention_saturated_gate_is_identity():
    block = ChannelAttention(16)
    block.fc2.b.data[...] = 100.0
    x = rng().standard_normal((2, 16, 4, 4)).astype(DTYPE)
    # a saturated gate is the largest float32 below 1, so y is within one ulp of x
    y = channel_attention(Tensor(x), block).data
    assert np.all(np.abs(y - x) <= np.spacing(np.abs(x)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_channel_attention_gate_range(seed):
    block = ChannelAttention(16, rng=rng(seed))
    s = block.gate(Tensor(rng(seed + 1).standard_normal((2, 16, 3, 3)))).data
    assert s.shape == (2, 16)
    assert np.all((s > 0) & (s < 1))


def test_channel_attention_reduction_width():
    block = ChannelAttention(16, 4)
    assert block.fc1.w.shape == (4, 16)
    assert block.fc2.w.shape == (16, 4)
    assert block.num_elements() == closed_form_params(block) == 16 * 4 + 4 + 4 * 16 + 16


def test_channel_attention_rank_check():
    with pytest.raises(ShapeMismatch):
        ChannelAttention(4)(Tensor(np.zeros((4, 4))))


# -- PPM ------------------------------------------------------------------------


def test_ppm_output_shape():
    with no_grad():
        assert ppm(Tensor(np.zeros((1, 320, 16, 16))), PPM()).shape == (1, 320, 16, 16)


def test_ppm_constant_input_constant_per_channel():
    block = PPM(8, 4, cout=6, rng=rng()).eval()
    x = np.broadcast_to(rng(1).standard_normal((1, 8, 1, 1)), (1, 8, 12, 12)).astype(DTYPE)
    with no_grad():
        y = block(Tensor(x)).data
    np.testing.assert_allclose(y, y[:, :, :1, :1] * np.ones_like(y), rtol=1e-5, atol=1e-6)


def test_ppm_bin1_branch_is_global_average_broadcast():
    x = Tensor(rng(2).standard_normal((1, 8, 6, 6)))
    pooled = ops.adaptive_avg_pool(x, 1)
    up = ops.resize_bilinear(pooled, (6, 6)).data
    gap = ops.global_avg_pool(x).data
    np.testing.assert_allclose(up, np.broadcast_to(gap, up.shape), rtol=1e-5, atol=1e-6)


def test_ppm_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        PPM(8, 4, cout=8)(Tensor(np.zeros((1, 6, 6, 6))))


# -- module plumbing ------------------------------------------------------------


def test_tensor_names_unique_and_bn_complete():
    block = Sequential([BConv(3, 4, 3), DSConv(4, 4), InvertedResidual(4, 4, 1, 2)])
    names = [n for n, _ in block.named_tensors()]
    assert len(names) == len(set(names))
    for prefix in {n.rsplit(".", 1)[0] for n in names if n.endswith(".gamma")}:
        for leaf in ("gamma", "beta", "running_mean", "running_var"):
            assert f"{prefix}.{leaf}" in names


@pytest.mark.parametrize(
    "make",
    [
        lambda: BConv(5, 7, 3),
        lambda: DSConv(12, 16),
        lambda: InvertedResidual(8, 8, 1, 6),
        lambda: irb_stage(16, IrbConfig(3, 24, 3, 2)),
        lambda: ChannelAttention(16),
        lambda: PPM(),
    ],
)
def test_stored_tensors_match_closed_form(make):
    block = make()
    assert block.num_elements() == closed_form_params(block)


def test_state_dict_round_trip():
    a, b = BConv(3, 4, 3, rng=rng(0)), BConv(3, 4, 3, rng=rng(1))
    b.load_state_dict(a.state_dict())
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb
        assert np.array_equal(getattr(ta, "data", ta), getattr(tb, "data", tb))


def test_training_updates_running_var_nonnegative():
    block = BConv(3, 4, 3)
    for seed in range(3):
        block(Tensor(rng(seed).standard_normal((2, 3, 5, 5))))
    assert np.all(block.bn.running_var >= 0)
