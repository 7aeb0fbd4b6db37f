from dataclasses import replace

import numpy as np
import pytest

from camsnet import ShapeError, Tensor
from camsnet.aggregators import (CSIF, MCA, MSA, UNIDIRECTIONAL, AggregatorConfig, count_shared_vs_unshared,
                                 from_channel_sequence, from_sequence, to_channel_sequence, to_sequence)
from camsnet.blocks import LIFMConfig, lifm_count
from camsnet.params import ParamStore

from conftest import f64

CHANNEL = AggregatorConfig("channel", 4, 6, height=4, width=4)
SPATIAL = replace(CHANNEL, kind="spatial")


def build(cls, cfg, seed=0):
    store = ParamStore(seed=seed, dtype=np.float64)
    return store, cls(store, "agg", cfg)


def zero_lifm(store):
    for name, t in store.items():
        if ".lifm" in name:
            t.data[...] = 0.0


def test_sequence_round_trips(rng):
    x = f64(rng.standard_normal((2, 3, 4, 5)))
    s = to_sequence(x)
    assert s.shape == (2, 20, 3)
    np.testing.assert_array_equal(s.data[1, 7], x.data[1, :, 1, 2])   # position 7 = row 1, col 2
    np.testing.assert_array_equal(from_sequence(s, 4, 5).data, x.data)
    c = to_channel_sequence(x)
    assert c.shape == (2, 3, 20)
    np.testing.assert_array_equal(from_channel_sequence(c, 4, 5).data, x.data)
    with pytest.raises(ShapeError):
        from_sequence(s, 5, 5)


def test_mca_with_zeroed_lifm_is_a_per_position_linear(rng):
    store, mca = build(MCA, CHANNEL)
    zero_lifm(store)
    x = rng.standard_normal((2, 4, 4, 4))
    w, b = mca.residual.weight.data, mca.residual.bias.data
    expect = np.einsum("bchw,cd->bdhw", x, w) + b[None, :, None, None]
    np.testing.assert_allclose(mca(f64(x)).data, expect, atol=1e-12)


def test_msa_with_zeroed_lifm_closed_form(rng):
    store, msa = build(MSA, SPATIAL)
    zero_lifm(store)
    x = rng.standard_normal((2, 4, 4, 4))
    ws, bs = msa.residual.weight.data, msa.residual.bias.data
    wc, bc = msa.w_ci.weight.data, msa.w_ci.bias.data
    t = (x.reshape(2, 4, 16) @ ws + bs).reshape(2, 4, 4, 4)
    expect = np.einsum("bchw,cd->bdhw", t, wc) + bc[None, :, None, None]
    np.testing.assert_allclose(msa(f64(x)).data, expect, atol=1e-12)


def test_shared_vs_unshared_delta_is_one_lifm():
    lifm = sum(lifm_count(LIFMConfig.build(32, 64)).values())
    assert lifm == 9_184
    shared, unshared = count_shared_vs_unshared(AggregatorConfig("channel", 32, 64))
    assert unshared - shared == lifm
    cfg = AggregatorConfig("spatial", 8, 12, height=4, width=4)
    shared, unshared = count_shared_vs_unshared(cfg)
    assert unshared - shared == sum(lifm_count(LIFMConfig.build(16, 16)).values())


def test_unidirectional_has_no_sharing_delta():
    shared, unshared = count_shared_vs_unshared(replace(CHANNEL, scan_mode=UNIDIRECTIONAL))
    assert shared == unshared


def test_bidirectional_shared_mca_commutes_with_reversal(rng):
    # out(s) = L(s) + flip L(flip s) + W s, so reversing the sequence reverses the output;
    # a row-major sequence reversal is a 180-degree image rotation
    x = rng.standard_normal((1, 4, 4, 4))
    rot = lambda a: a[..., ::-1, ::-1]
    _, mca = build(MCA, CHANNEL, seed=3)
    np.testing.assert_allclose(mca(f64(rot(x).copy())).data, rot(mca(f64(x)).data), atol=1e-12)
    _, uni = build(MCA, replace(CHANNEL, scan_mode=UNIDIRECTIONAL), seed=3)
    assert not np.allclose(uni(f64(rot(x).copy())).data, rot(uni(f64(x)).data), atol=1e-6)


def test_scan_mode_changes_output(rng):
    x = f64(rng.standard_normal((1, 4, 4, 4)))
    _, bi = build(MCA, CHANNEL, seed=1)
    _, uni = build(MCA, replace(CHANNEL, scan_mode=UNIDIRECTIONAL), seed=1)
    assert not np.allclose(bi(x).data, uni(x).data)


def test_csif_inference_is_the_sum_of_branches(rng):
    store, csif = build(CSIF, CHANNEL)
    x = f64(rng.standard_normal((2, 4, 4, 4)))
    np.testing.assert_allclose(csif(x).data, csif.mca(x).data + csif.msa(x).data, atol=1e-12)


def test_csif_dropout_is_seeded(rng):
    x = f64(rng.standard_normal((2, 4, 4, 4)))
    a = build(CSIF, CHANNEL, seed=4)[1](x, training=True).data
    b = build(CSIF, CHANNEL, seed=4)[1](x, training=True).data
    c = build(CSIF, CHANNEL, seed=5)[1](x, training=True).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    _, csif = build(CSIF, replace(CHANNEL, dropout_p=0.0))
    np.testing.assert_array_equal(csif(x, training=True).data, csif(x).data)


def test_gradients_reach_every_parameter(rng):
    store, csif = build(CSIF, CHANNEL)
    x = f64(rng.standard_normal((1, 4, 4, 4)))
    (csif(x) * Tensor(rng.standard_normal((1, 6, 4, 4)))).sum().backward()
    missing = [n for n, t in store.items() if t.grad is None]
    assert missing == []


def test_shape_errors(rng):
    _, msa = build(MSA, SPATIAL)
    with pytest.raises(ShapeError, match="4x4"):
        msa(f64(np.zeros((1, 4, 2, 8))))
    _, mca = build(MCA, CHANNEL)
    with pytest.raises(ShapeError):
        mca(f64(np.zeros((1, 5, 4, 4))))
    with pytest.raises(ValueError, match="H and W"):
        AggregatorConfig("spatial", 4, 4)
    with pytest.raises(ValueError):
        AggregatorConfig("channel", 4, 4, dropout_p=1.0)


def test_residual_both_directions_doubles_the_residual(rng):
    store, mca = build(MCA, replace(CHANNEL, residual_both_directions=True))
    zero_lifm(store)
    x = rng.standard_normal((1, 4, 4, 4))
    w, b = mca.residual.weight.data, mca.residual.bias.data
    expect = 2 * (np.einsum("bchw,cd->bdhw", x, w) + b[None, :, None, None])
    np.testing.assert_allclose(mca(f64(x)).data, expect, atol=1e-12)
