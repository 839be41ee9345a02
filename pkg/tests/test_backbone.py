import numpy as np
import pytest

from cathseg import autograd as ag
from cathseg.autograd import DimensionError, Tensor
from cathseg.backbone import Backbone, BackboneConfig, ChannelReducer, flatten_tokens, unflatten_tokens
from cathseg.model import ModelConfig, TemporalSegmenter


@pytest.fixture(scope="module")
def backbone():
    return Backbone(BackboneConfig(), np.random.default_rng(0))


@pytest.mark.parametrize("size", [32, 64, 128, 320])
def test_pyramid_shapes(backbone, size):
    levels = backbone.extract_features(np.zeros((1, size, size), np.float32) + 0.5)
    assert [lv.shape for lv in levels] == [(w, size // 2 ** k, size // 2 ** k)
                                           for k, w in enumerate((8, 16, 32, 64), start=1)]


def test_rectangular_input(backbone):
    levels = backbone.extract_features(np.ones((1, 32, 48), np.float32))
    assert levels[-1].shape == (64, 2, 3)


@pytest.mark.parametrize("shape", [(1, 30, 32), (1, 64, 72)])
def test_indivisible_input_rejected(backbone, shape):
    with pytest.raises(DimensionError, match="divisible"):
        backbone.extract_features(np.zeros(shape, np.float32))


def test_zero_image_gives_zero_pyramid(backbone):
    for lv in backbone.extract_features(np.zeros((1, 64, 64), np.float32)):
        assert not lv.data.any()


def test_weights_are_deterministic_and_named():
    a = Backbone(BackboneConfig(), np.random.default_rng(5))
    b = Backbone(BackboneConfig(), np.random.default_rng(5))
    sa, sb = a.state_dict(), b.state_dict()
    assert list(sa) == list(sb)
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    assert "stage1/conv1/weight" in sa and "stage4/norm2/bias" in sa


def test_reducer_identity_and_zero(backbone, rng):
    pyr = backbone.extract_features(rng.random((1, 32, 32)).astype(np.float32))
    red = ChannelReducer((8, 16, 32, 64), (8, 16, 32, 64))
    red.set_identity()
    for a, b in zip(pyr, red.reduce_channels(pyr)):
        np.testing.assert_allclose(b.data, a.data, rtol=1e-6, atol=1e-7)
    for conv in red.levels.values():
        conv.weight.data[:] = 0
    assert all(not lv.data.any() for lv in red.reduce_channels(pyr))


def test_reducer_widths(backbone, rng):
    pyr = backbone.extract_features(rng.random((1, 64, 64)).astype(np.float32))
    out = ChannelReducer((8, 16, 32, 64), (4, 8, 12, 16)).reduce_channels(pyr)
    assert [o.shape for o in out] == [(4, 32, 32), (8, 16, 16), (12, 8, 8), (16, 4, 4)]
    with pytest.raises(DimensionError):
        ChannelReducer((8, 16, 32, 64), (4, 8, 12, 16)).reduce_channels(pyr[::-1])


def test_flatten_examples():
    one = Tensor(np.arange(5.0).reshape(5, 1, 1))
    np.testing.assert_array_equal(flatten_tokens(one).data, [[0, 1, 2, 3, 4]])
    m = np.arange(3 * 4 * 4.0).reshape(3, 4, 4)
    tok = flatten_tokens(Tensor(m)).data
    np.testing.assert_array_equal(tok[5], m[:, 1, 1])
    for i in range(16):
        np.testing.assert_array_equal(tok[i], m[:, i // 4, i % 4])
    np.testing.assert_array_equal(unflatten_tokens(Tensor(tok), 4, 4).data, m)


def test_unflatten_rejects_wrong_count():
    with pytest.raises(DimensionError):
        unflatten_tokens(Tensor(np.zeros((15, 2))), 4, 4)


def test_branches_share_weights_bitwise(rng):
    model = TemporalSegmenter(ModelConfig(), 0)
    img = rng.random((64, 64)).astype(np.float32)
    other = rng.random((64, 64)).astype(np.float32)
    feats = model.features(np.stack([img, other, img]))
    assert feats[0].tokens.data.tobytes() == feats[2].tokens.data.tobytes()
    for a, b in zip(feats[0].skips, feats[2].skips):
        assert a.data.tobytes() == b.data.tobytes()
    single = model.features(img)[0]
    np.testing.assert_allclose(single.tokens.data, feats[0].tokens.data, rtol=1e-5, atol=1e-5)


def test_backbone_grads_reach_every_stage(rng):
    bb = Backbone(BackboneConfig((4, 4, 8, 8)), np.random.default_rng(1))
    levels = bb.extract_features(rng.random((1, 16, 16)).astype(np.float32))
    ag.backward(ag.sum(ag.mul(levels[-1], levels[-1])))
    assert all(p.grad is not None and p.grad.shape == p.shape for p in bb.parameters())
