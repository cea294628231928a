from __future__ import annotations

import numpy as np
import pytest

from dfmnet.decoder import ENCODER_CHANNELS, Decoder, GroupedFeatures, fullfuse, prefuse
from dfmnet.errors import ShapeMismatch
from dfmnet.model import DFMNet
from dfmnet.tensor import Tensor, no_grad

EXTENTS = (128, 64, 32, 16, 16, 16)


def encoder_features(n=1, seed=0, scale=1.0, extents=EXTENTS):
    r = np.random.default_rng(seed)
    return [Tensor(r.uniform(0, scale, (n, c, e, e))) for c, e in zip(ENCODER_CHANNELS, extents)]


@pytest.fixture(scope="module")
def decoder():
    return Decoder(rng=np.random.default_rng(0)).eval()


def test_grouped_extents(decoder):
    with no_grad():
        g = prefuse(encoder_features(), decoder)
    assert g.cf_low.shape == (1, 16, 128, 128)
    assert g.cf_high.shape == (1, 16, 16, 16)


def test_zero_inputs_give_zero_groups(decoder):
    with no_grad():
        g = decoder.prefuse(encoder_features(scale=0.0))
    assert np.all(g.cf_low.data == 0) and np.all(g.cf_high.data == 0)


def test_fullfuse_shape_and_range(decoder):
    with no_grad():
        s = fullfuse(prefuse(encoder_features(2, seed=1), decoder), decoder).data
    assert s.shape == (2, 1, 256, 256)
    assert np.all((s > 0) & (s < 1))


def test_head_concatenates_to_32_channels(decoder):
    assert decoder.head_ds1.dw.w.shape == (32, 1, 3, 3)
    assert decoder.head_ds1.pw.w.shape == (16, 32, 1, 1)
    assert decoder.head_ds2.pw.w.shape == (16, 16, 1, 1)
    assert decoder.head_out.w.shape == (1, 16, 3, 3)


def test_summation_order_does_not_change_output(decoder):
    feats = encoder_features(seed=2)
    with no_grad():
        ref = decoder.prefuse(feats)
        for low in [(2, 0, 1), (1, 2, 0)]:
            for high in [(5, 3, 4), (4, 5, 3)]:
                g = decoder.prefuse(feats, low, high)
                # float addition is not associative; reorderings agree to rounding
                np.testing.assert_allclose(g.cf_low.data, ref.cf_low.data, rtol=1e-6, atol=1e-6)
                np.testing.assert_allclose(g.cf_high.data, ref.cf_high.data, rtol=1e-6, atol=1e-6)


def test_commuted_pairs_are_bit_exact(decoder):
    feats = encoder_features(seed=3)
    with no_grad():
        a = decoder.fullfuse(decoder.prefuse(feats, (1, 0, 2), (4, 3, 5)))
        b = decoder.fullfuse(decoder.prefuse(feats, (0, 1, 2), (3, 4, 5)))
    assert np.array_equal(a.data, b.data)


def test_parameter_count_independent_of_batch(decoder):
    before = decoder.num_elements()
    with no_grad():
        decoder(encoder_features(3, seed=4))
    assert decoder.num_elements() == before


def test_decoder_share_of_model_bytes():
    model = DFMNet()
    assert model.decoder.num_elements() <= 0.10 * model.num_elements()


def test_shape_errors(decoder):
    feats = encoder_features()
    with pytest.raises(ShapeMismatch):
        decoder.prefuse(feats[:5])
    with pytest.raises(ShapeMismatch):
        decoder.prefuse(feats[:1] + [feats[0]] + feats[2:])
    with pytest.raises(ShapeMismatch):
        decoder.prefuse(encoder_features(extents=(128, 64, 32, 16, 16, 8)))
    with no_grad():
        g = decoder.prefuse(feats)
    with pytest.raises(ShapeMismatch):
        decoder.fullfuse(GroupedFeatures(g.cf_low, Tensor(np.zeros((1, 16, 8, 8)))))
