import numpy as np
import pytest

from gtvseg import ops
from gtvseg.autograd import GradTape, Tensor, backward, grad_check
from gtvseg.errors import ShapeError
from gtvseg.nn import (
    NetworkConfig,
    architecture_summary,
    attention_module,
    block_layout,
    init_params,
    param_shapes,
    pe_block,
    unet_forward,
)

TINY = NetworkConfig(base_channels=(2, 4, 4, 4), patch_shape=(4, 8, 8))


def test_default_layout_counts():
    s = architecture_summary(init_params(NetworkConfig(), 0))
    assert len(s["conv_blocks"]) == 9
    assert len(s["pe_blocks"]) == 8 and "enc1" not in s["pe_blocks"]
    assert s["attention_modules"] == ["bottom", "dec1", "dec2", "dec3", "dec4"]
    assert s["downsamplings"] == 3
    assert s["blocks_with_3x3x3"] == ["bottom"]


def test_iso_mode_uses_cubic_kernels_everywhere():
    cfg = NetworkConfig(base_channels=(8, 16, 32, 64), kernel_mode="iso_3d")
    s = architecture_summary(init_params(cfg, 0))
    assert len(s["blocks_with_3x3x3"]) == 9


def test_param_shapes_follow_channel_plan():
    shapes = param_shapes(NetworkConfig(base_channels=(8, 16, 32, 64)))
    assert shapes["enc1.conv1.weight"] == (8, 1, 1, 3, 3)
    assert shapes["bottom.conv1.weight"] == (64, 64, 3, 3, 3)
    assert shapes["dec1.conv1.weight"] == (64, 128, 1, 3, 3)
    assert shapes["dec2.up.weight"] == (64, 32, 1, 2, 2)
    assert shapes["enc2.pe.fc1.weight"] == (4, 8, 1, 1, 1)
    assert shapes["head.weight"] == (2, 8, 1, 1, 1)


def test_layout_is_encoder_bottom_decoder():
    names = [b["name"] for b in block_layout(NetworkConfig())]
    assert names == ["enc1", "enc2", "enc3", "enc4", "bottom", "dec1", "dec2", "dec3", "dec4"]


def test_init_is_seeded():
    a, b = init_params(TINY, 3), init_params(TINY, 3)
    c = init_params(TINY, 4)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.tensors)
    assert not np.array_equal(a["enc1.conv1.weight"].data, c["enc1.conv1.weight"].data)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(base_channels=(8, 16, 32))
    with pytest.raises(ValueError):
        NetworkConfig(base_channels=(6, 16, 32, 64), pe_reduction=4)
    with pytest.raises(ValueError):
        NetworkConfig(kernel_mode="2d")


def test_forward_outputs_probabilities():
    p = init_params(TINY, 0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 4, 8, 8)))
    out = unet_forward(x, p, mode="eval").data
    assert out.shape == (2, 2, 4, 8, 8)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_forward_rejects_indivisible_plane():
    p = init_params(TINY, 0)
    with pytest.raises(ShapeError, match="divisible"):
        unet_forward(Tensor(np.zeros((1, 1, 4, 12, 8))), p)
    with pytest.raises(ShapeError):
        unet_forward(Tensor(np.zeros((1, 1, 4, 16, 16))), p, check_patch_shape=True)


def test_eval_mode_leaves_running_stats():
    p = init_params(TINY, 0)
    before = p["enc1.bn1.running_mean"].data.copy()
    x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 4, 8, 8)) + 3)
    unet_forward(x, p, mode="eval")
    assert np.array_equal(p["enc1.bn1.running_mean"].data, before)
    unet_forward(x, p, mode="train")
    assert not np.array_equal(p["enc1.bn1.running_mean"].data, before)


def test_attention_with_zero_weights_scales_by_one_and_a_half():
    p = init_params(TINY, 0)
    for k in p.tensors:
        if ".am." in k:
            p[k].data[...] = 0
    x = Tensor(np.random.default_rng(2).standard_normal((1, 8, 2, 4, 4)))
    out, alpha = attention_module(x, p, "dec2.am")
    np.testing.assert_allclose(alpha.data, 0.5)
    np.testing.assert_allclose(out.data, 1.5 * x.data, rtol=1e-6)


def test_attention_maps_collected():
    p = init_params(TINY, 0)
    maps = []
    unet_forward(Tensor(np.zeros((1, 1, 4, 8, 8))), p, mode="eval", attention_maps=maps)
    assert [n for n, _ in maps] == ["bottom", "dec1", "dec2", "dec3", "dec4"]
    assert all(a.shape[1] == 1 for _, a in maps)


def test_pe_gate_in_unit_interval_and_shape():
    p = init_params(TINY, 0)
    x = Tensor(np.random.default_rng(3).standard_normal((2, 2, 4, 8, 8)))
    out, gate = pe_block(x, p, "enc2.pe", return_gate=True)
    assert gate.shape == x.shape and out.shape == x.shape
    assert (gate.data > 0).all() and (gate.data < 1).all()


def test_pe_block_gradients():
    p = init_params(TINY, 0).astype(np.float64)
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((1, 2, 2, 4, 4)))
    r = Tensor(rng.standard_normal(x.shape))
    w = p["enc2.pe.fc1.weight"]
    f = lambda x, w: ops.sum(ops.mul(pe_block(x, p, "enc2.pe"), r))
    assert grad_check(f, [x, w]) < 1e-5


def test_full_network_backward_reaches_every_trainable_tensor():
    p = init_params(TINY, 0)
    x = Tensor(np.random.default_rng(5).standard_normal((2, 1, 4, 8, 8)))
    with GradTape() as tape:
        out = unet_forward(x, p, mode="train")
        loss = ops.sum(ops.mul(out, Tensor(np.random.default_rng(6).standard_normal(out.shape))))
    backward(loss, tape)
    missing = [k for k, t in p.trainable().items() if t.grad is None]
    assert not missing
    assert all(t.grad is None for k, t in p.tensors.items() if "running" in k)
