import numpy as np
import pytest

from escnet import esresnet as er
from escnet.esresnet import ModelConfig
from escnet.nn import Tensor, no_grad, precision
from escnet.nn.tensor import ShapeError

SMALL = dict(width_scale=0.125, freq_bins=32)


def small_input(n=2, t=24, seed=0):
    return np.random.default_rng(seed).normal(-15, 8, size=(n, 3, 32, t)).astype(np.float32)


def count_by_hand(num_classes):
    # layer by layer for ResNet-50: stem, then (planes, blocks) per stage
    total = 3 * 64 * 49 + 128
    inplanes = 64
    for planes, blocks in [(64, 3), (128, 4), (256, 6), (512, 3)]:
        for b in range(blocks):
            cin = inplanes if b == 0 else planes * 4
            total += cin * planes + 2 * planes
            total += planes * planes * 9 + 2 * planes
            total += planes * planes * 4 + 2 * planes * 4
            if b == 0:
                total += cin * planes * 4 + 2 * planes * 4
        inplanes = planes * 4
    return total + 2048 * num_classes + num_classes


@pytest.mark.parametrize("classes, expected", [(1000, 25_557_032), (50, 23_610_482)])
def test_parameter_counts(classes, expected):
    assert count_by_hand(classes) == expected
    cfg = ModelConfig(num_classes=classes)
    assert er.parameter_count(cfg) == expected
    assert er.build(cfg).num_parameters() == expected


def test_attention_parameter_count_matches_built_model():
    for cfg in [ModelConfig(50, attention=True), ModelConfig(4, attention=True, layers=(3, 4), **SMALL)]:
        assert er.build(cfg).num_parameters() == er.parameter_count(cfg)


def test_torchvision_style_names():
    names = list(er.build(ModelConfig(10, **SMALL)).state_dict())
    for n in ["conv1.weight", "bn1.running_var", "layer1.0.downsample.0.weight", "layer4.2.bn3.bias",
              "fc.weight", "fc.bias"]:
        assert n in names
    assert "layer2.1.downsample.0.weight" not in names


def test_attention_block_kernels_alternate():
    m = er.build(ModelConfig(4, attention=True, **SMALL))
    kernels = [a.conv.depthwise.shape[2:] for a in m.attentions]
    assert kernels == [(7, 1), (1, 7), (7, 1), (1, 7), (1, 1)]
    assert m.att_joint is m.att5


def test_shape_trace_on_full_clip():
    cfg = ModelConfig(50, width_scale=0.125, attention=True)
    m = er.build(cfg)
    x = Tensor(np.zeros((1, 3, 341, 391), dtype=np.float32))
    with no_grad():
        h = m.stem(x)
        assert h.shape == (1, 8, 86, 98)
        sizes = []
        for layer in m.stages:
            h = layer(h)
            sizes.append(h.shape[1:])
    assert sizes == [(32, 86, 98), (64, 43, 49), (128, 22, 25), (256, 11, 13)]
    with no_grad():
        assert m(x).shape == (1, 50)


def test_attention_with_unit_masks_reduces_to_plain_network():
    x = Tensor(small_input())
    plain = er.build(ModelConfig(5, **SMALL), seed=3)
    att = er.build(ModelConfig(5, attention=True, **SMALL), seed=3)
    for k, v in plain.state_dict().items():
        np.testing.assert_array_equal(att.state_dict()[k], v)
    with no_grad():
        np.testing.assert_allclose(att(x, mask_override=1.0).data, plain(x).data, atol=1e-6)
        assert not np.allclose(att(x).data, plain(x).data, atol=1e-3)


def test_zero_masks_silence_the_embedding():
    att = er.build(ModelConfig(5, attention=True, **SMALL))
    with no_grad():
        e = att.embed(Tensor(small_input()), mask_override=0.0)
    assert np.all(e.data == 0)


def test_masks_lie_in_unit_interval():
    att = er.build(ModelConfig(5, attention=True, **SMALL))
    x = Tensor(small_input())
    with no_grad():
        h = att.stem(x)
        m = att.attentions[0](h)
    assert m.shape == att.layer1(h).shape
    assert np.all((m.data > 0) & (m.data < 1))


def test_stereo_symmetry_and_mono_doubling():
    m = er.build(ModelConfig(6, **SMALL)).eval()
    x, y = small_input(1, seed=1)[0], small_input(1, seed=2)[0]
    with no_grad():
        assert np.array_equal(er.forward_stereo(x, y, m).data, er.forward_stereo(y, x, m).data)
        e2 = er.stereo_embedding(x, x, m).data
        e1 = m.embed(Tensor(x[None])).data
    np.testing.assert_allclose(e2, 2 * e1, atol=1e-6)


def test_forward_clips_fuses_channels():
    m = er.build(ModelConfig(6, **SMALL)).eval()
    x, y = small_input(2, seed=4)
    with no_grad():
        batched = m.forward_clips([np.stack([x, y]), x[None]]).data
        ref_stereo = er.forward_stereo(x, y, m).data
        ref_mono = er.forward_mono(x, m).data
    np.testing.assert_allclose(batched[0], ref_stereo[0], rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(batched[1], ref_mono[0], rtol=1e-5, atol=1e-5)


def test_stereo_shape_mismatch():
    m = er.build(ModelConfig(6, **SMALL))
    with pytest.raises(ShapeError):
        er.forward_stereo(small_input(1)[0], small_input(1, t=30)[0], m)


def test_input_shape_checked():
    m = er.build(ModelConfig(6, **SMALL))
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((1, 3, 33, 24), dtype=np.float32)))


def test_config_validation():
    with pytest.raises(er.ConfigError):
        ModelConfig(0)
    with pytest.raises(er.ConfigError):
        ModelConfig(3, width_scale=0.001)
    with pytest.raises(er.ConfigError):
        ModelConfig(3, layers=(3, 4, 6, 3, 2))


def test_same_seed_same_weights():
    a = er.build(ModelConfig(4, **SMALL), seed=7).state_dict()
    b = er.build(ModelConfig(4, **SMALL), seed=7).state_dict()
    c = er.build(ModelConfig(4, **SMALL), seed=8).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["conv1.weight"], c["conv1.weight"])


def test_weight_round_trip_bit_exact(tmp_path):
    m = er.build(ModelConfig(5, attention=True, **SMALL), seed=1)
    m.bn1.running_mean[:] = np.linspace(-1, 1, len(m.bn1.running_mean))
    path = tmp_path / "w.esrw"
    er.save_weights(m, path)
    back = er.load_model(path, ModelConfig(5, attention=True, **SMALL), seed=99)
    for k, v in m.state_dict().items():
        assert np.array_equal(back.state_dict()[k], v), k


def test_head_replaced_when_class_count_differs(tmp_path):
    src = er.build(ModelConfig(1000, **SMALL), seed=1)
    path = tmp_path / "w.esrw"
    er.save_weights(src, path)
    cfg = ModelConfig(50, **SMALL)
    state = er.load_weights(path, cfg, seed=5)
    fresh = er.build(cfg, seed=5).state_dict()
    assert state["fc.weight"].shape == (50, cfg.embedding_size)
    np.testing.assert_array_equal(state["fc.weight"], fresh["fc.weight"])
    np.testing.assert_array_equal(state["conv1.weight"], src.state_dict()["conv1.weight"])


def test_missing_and_mismatched_tensors(tmp_path):
    store = er.build(ModelConfig(5, **SMALL)).state_dict()
    del store["layer2.0.conv1.weight"]
    er.save_weights(store, tmp_path / "a")
    with pytest.raises(er.WeightLoadError, match="layer2.0.conv1.weight"):
        er.load_weights(tmp_path / "a", ModelConfig(5, **SMALL))
    er.save_weights(er.build(ModelConfig(5, width_scale=0.25, freq_bins=32)), tmp_path / "b")
    with pytest.raises(er.WeightLoadError, match="shape mismatch"):
        er.load_weights(tmp_path / "b", ModelConfig(5, **SMALL))


def test_corrupt_weight_files(tmp_path):
    path = tmp_path / "w"
    er.save_weights({"a": np.ones((2, 3)), "b": np.zeros(4)}, path)
    good = path.read_bytes()
    for bad, match in [(b"XXXX" + good[4:], "magic"), (good[:-3], "truncated"), (good + b"\0", "trailing")]:
        path.write_bytes(bad)
        with pytest.raises(er.WeightFormatError, match=match):
            er.read_weight_file(path)
    er.save_weights({"a": np.ones(2)}, path)
    one = path.read_bytes()
    # two copies of the same record under a count of 2
    path.write_bytes(one[:4] + b"\x01\x00\x02\x00\x00\x00" + one[10:] + one[10:])
    with pytest.raises(er.WeightFormatError, match="duplicate"):
        er.read_weight_file(path)


def test_backward_reaches_every_parameter():
    from escnet.nn import functional as F
    with precision(np.float64):
        m = er.build(ModelConfig(3, attention=True, **SMALL))
        loss = F.softmax_cross_entropy(m(Tensor(small_input().astype(np.float64))), [0, 2])
        loss.backward()
    assert all(p.grad is not None and p.grad.shape == p.shape for p in m.parameters())
