import numpy as np
import pytest

from cmformer import ndtensor as nd
from cmformer import pixelnet
from cmformer.ndtensor import DimensionError, Tensor
from cmformer.segmodel import ModelConfig, init_params

from . import oracles as O


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop(stride, pad):
    rng = np.random.default_rng(stride + pad)
    x, w, b = rng.standard_normal((6, 8, 2)), rng.standard_normal((3, 3, 2, 4)), rng.standard_normal(4)
    got = nd.conv2d(Tensor(x[None]), Tensor(w), Tensor(b), stride=stride, pad=pad).data[0]
    np.testing.assert_allclose(got, O.conv2d_loop(x, w, b, stride, pad), atol=1e-12)


def test_upsample_nearest_example():
    f = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    up = nd.upsample_nearest(Tensor(f), 2).data[0, :, :, 0]
    np.testing.assert_array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


@pytest.fixture(scope="module")
def params():
    return init_params(ModelConfig(width=16), seed=0)


def test_pyramid_shapes(params):
    img = np.random.default_rng(0).uniform(size=(2, 64, 96, 3))
    pyr = pixelnet.encode(img, params)
    for s in pixelnet.STRIDES:
        assert pyr[s].shape == (2, 64 // s, 96 // s, 16)
    decoded, mf = pixelnet.decode_multiscale(pyr, params)
    assert mf.shape == (2, 16, 24, 16)
    assert sorted(decoded.levels) == [8, 16, 32]
    assert decoded[8].shape == pyr[8].shape


def test_unbatched_image_gets_a_batch_axis(params):
    pyr = pixelnet.encode(np.zeros((32, 32, 3)), params)
    assert pyr[32].shape == (1, 1, 1, 16)


def test_bad_input_size_raises(params):
    with pytest.raises(DimensionError):
        pixelnet.encode(np.zeros((48, 64, 3)), params)


def test_decoder_is_top_down_sum(params):
    rng = np.random.default_rng(2)
    levels = {s: rng.standard_normal((1, 64 // s, 64 // s, 16)) for s in pixelnet.STRIDES}
    pyr = pixelnet.FeaturePyramid({s: Tensor(v) for s, v in levels.items()}, (64, 64))
    p = {k: v.data for k, v in params.items()}
    y = None
    for s in (32, 16, 8, 4):
        lat = O.linear(levels[s], p[f"pix.lat{s}.w"], p[f"pix.lat{s}.b"])
        y = lat if y is None else y.repeat(2, axis=1).repeat(2, axis=2) + lat
    ref = O.linear(y, p["pix.mask.w"], p["pix.mask.b"])
    np.testing.assert_allclose(pixelnet.pixel_decode(pyr, params).data, ref, atol=1e-12)
