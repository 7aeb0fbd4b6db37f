from dataclasses import replace

import numpy as np
import pytest

from camsnet import ShapeError, Tensor, no_grad
from camsnet.checks import GRADCHECK_NET
from camsnet.gradcheck import directional_check
from camsnet.metrics import dice_loss
from camsnet.network import (FULL_CONFIG, TINY_CONFIG, CAMSNet, NetworkConfig, analytic_stage_counts,
                             load_checkpoint, network_param_report, pos_embed, save_checkpoint,
                             sinusoidal_table, stage_plan)


@pytest.fixture(scope="module")
def tiny():
    return CAMSNet(TINY_CONFIG, seed=0)


def test_output_shape_and_normalisation(tiny, rng):
    x = rng.standard_normal((2, 1, 32, 32)).astype(np.float32)
    with no_grad():
        p = tiny(x).data
    assert p.shape == (2, 5, 32, 32)
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


def test_batch_rows_are_independent(tiny, rng):
    x = rng.standard_normal((3, 1, 32, 32)).astype(np.float32)
    with no_grad():
        both = tiny(x).data
        one = tiny(x[1:2]).data
    np.testing.assert_allclose(both[1:2], one, atol=1e-6)


def test_stage_plan_placement():
    plan = {p.name: p for p in stage_plan(FULL_CONFIG)}
    assert [p.kind for p in plan.values()] == ["mca", "mca", "mca", "csif", "csif", "csif", "mca", "mca", "mca"]
    assert (plan["enc1"].c_in, plan["enc1"].c_out, plan["enc1"].height) == (64, 64, 128)
    assert (plan["bottleneck"].c_in, plan["bottleneck"].c_out, plan["bottleneck"].height) == (512, 1024, 8)
    assert (plan["dec1"].c_in, plan["dec1"].c_out, plan["dec1"].skip) == (1024, 512, "enc4")
    assert plan["dec4"].height == 128


def test_built_count_matches_closed_form():
    net = CAMSNet(TINY_CONFIG)
    rep = network_param_report(TINY_CONFIG, net)
    assert rep.stages == analytic_stage_counts(TINY_CONFIG)
    assert rep.total == net.store.total_count == 14_859


def test_full_config_total_frozen():
    rep = network_param_report(FULL_CONFIG, target_m=18.56, sweep=(128, 256))
    assert rep.total == 16_073_989
    assert rep.resolution_sweep[256] == rep.total
    assert rep.resolution_sweep[128] < rep.total     # MSA widths shrink with the input
    assert "total" in rep.to_text()


def test_head_delta_when_doubling_classes():
    a = sum(analytic_stage_counts(TINY_CONFIG).values())
    b = sum(analytic_stage_counts(replace(TINY_CONFIG, num_classes=10)).values())
    assert b - a == 5 * (4 + 1)


def test_sinusoidal_table():
    t = sinusoidal_table(6, 8)
    np.testing.assert_array_equal(t[0], [0, 1, 0, 1, 0, 1, 0, 1])
    p, k = 4, 1
    np.testing.assert_allclose(t[p, 2 * k], np.sin(p / 10000 ** (2 * k / 8)))
    np.testing.assert_allclose(t[p, 2 * k + 1], np.cos(p / 10000 ** (2 * k / 8)))
    with pytest.raises(ValueError):
        sinusoidal_table(4, 3)


def test_pos_embed_is_row_major():
    out = pos_embed(Tensor(np.zeros((1, 4, 2, 3)))).data
    np.testing.assert_allclose(out[0, :, 1, 2], sinusoidal_table(6, 4)[5], atol=1e-7)


def test_patch_embed_of_constant_image(tiny):
    out = tiny.embed(Tensor(np.full((1, 1, 32, 32), 2.0, np.float32))).data
    w, b = tiny.embed.proj.weight.data, tiny.embed.proj.bias.data
    np.testing.assert_allclose(out[0, :, 3, 5], 2.0 * w.sum(axis=0) + b, rtol=1e-6)
    assert np.allclose(out, out[:, :, :1, :1])


def test_encoder_skip_reaches_the_output(rng):
    net = CAMSNet(TINY_CONFIG, seed=1, dtype=np.float64)
    x = rng.standard_normal((1, 1, 32, 32))
    base = net(x).data
    stage = net.stages["enc2"]
    stage.residual.weight.data = np.zeros_like(stage.residual.weight.data)
    assert not np.allclose(net(x).data, base)


def test_ablations_change_count_and_output(rng):
    x = rng.standard_normal((1, 1, 32, 32))
    base = CAMSNet(TINY_CONFIG, seed=0, dtype=np.float64)
    no_msa = CAMSNet(replace(TINY_CONFIG, msa_on=False), seed=0, dtype=np.float64)
    assert no_msa.store.total_count < base.store.total_count
    assert not np.allclose(no_msa(x).data, base(x).data)
    unshared = CAMSNet(replace(TINY_CONFIG, share_weights=False), seed=0)
    assert unshared.store.total_count > base.store.total_count


def test_pos_embed_changes_translation_response(rng):
    x = rng.standard_normal((1, 1, 32, 32))
    shifted = np.roll(x, 4, axis=3)
    outs = []
    for flag in (True, False):
        net = CAMSNet(replace(TINY_CONFIG, use_pos_embed=flag), seed=0, dtype=np.float64)
        outs.append(net(shifted).data - np.roll(net(x).data, 4, axis=3))
    assert not np.allclose(outs[0], outs[1])


def test_config_validation():
    with pytest.raises(ValueError, match="divisible by 32"):
        NetworkConfig(height=48, width=48)
    with pytest.raises(ValueError, match="mirror"):
        NetworkConfig(decoder_channels=(512, 256, 128, 32))
    with pytest.raises(ValueError, match="increasing"):
        NetworkConfig(encoder_channels=(64, 64, 128, 256, 512), decoder_channels=(256, 128, 64, 64))
    assert NetworkConfig.from_dict(TINY_CONFIG.to_dict()) == TINY_CONFIG
    with pytest.raises(ValueError, match="unknown"):
        NetworkConfig.from_dict({"depth": 3})


def test_wrong_input_size_is_reported(tiny):
    with pytest.raises(ShapeError, match="32x32"):
        tiny(np.zeros((1, 1, 64, 64), np.float32))
    with pytest.raises(ShapeError):
        tiny(np.zeros((1, 2, 32, 32), np.float32))


def test_e1_identity_drops_the_first_stage():
    cfg = replace(TINY_CONFIG, e1_identity=True)
    assert analytic_stage_counts(cfg)["enc1"] == 0
    net = CAMSNet(cfg)
    assert net.store.total_count == sum(analytic_stage_counts(cfg).values())
    assert net(np.zeros((1, 1, 32, 32), np.float32)).shape == (1, 5, 32, 32)


def test_checkpoint_round_trip(tmp_path, rng):
    net = CAMSNet(TINY_CONFIG, seed=7)
    save_checkpoint(net, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck", TINY_CONFIG)
    x = rng.standard_normal((1, 1, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(back(x).data, net(x).data)
    with pytest.raises(ValueError, match="differs"):
        load_checkpoint(tmp_path / "ck", replace(TINY_CONFIG, num_classes=4))


@pytest.mark.slow
def test_network_gradient_along_random_directions():
    # every parameter moves at once along a unit direction, so the comparison
    # is free of the round-off floor that near-zero groups hit entry by entry
    cfg = GRADCHECK_NET
    for seed in range(2):
        net = CAMSNet(cfg, seed=seed, dtype=np.float64)
        r = np.random.default_rng(seed)
        img = r.standard_normal((1, 1, cfg.height, cfg.width))
        target = r.integers(0, cfg.num_classes, size=(1, cfg.height, cfg.width))
        analytic, numeric = directional_check(lambda: dice_loss(net(img), target), dict(net.store.items()),
                                              seed=seed)
        assert abs(analytic - numeric) < 1e-4 * abs(analytic)
