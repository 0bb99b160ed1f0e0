import numpy as np
import pytest

from hscat import metrics
from hscat.bitstream import Bitstream, ModelMismatchError
from hscat.codec import CompressionModel, compress, decompress, forward_train
from hscat.coder import CorruptStreamError
from hscat.config import LAMBDAS, ModelConfig, lambda_index
from hscat.data import synthetic_images
from hscat.engine import Tensor


@pytest.fixture(scope="module")
def model():
    m = CompressionModel(ModelConfig.tiny())
    m.lam = 0.0130
    return m


@pytest.fixture(scope="module")
def image():
    return synthetic_images(1, 64, seed=3)[0]


def test_lambda_set():
    assert LAMBDAS == (0.0025, 0.0035, 0.0067, 0.0130, 0.0250, 0.0500)
    assert lambda_index(0.0130) == 3 and lambda_index(0.777) == 255


def test_bitstream_header_layout():
    bs = Bitstream(b"12345678", 768, 512, 2, b"zz", [b"a", b"", b"bcd"])
    raw = bs.to_bytes()
    assert raw[:4] == b"HSCB" and raw[4] == 1 and raw[5:13] == b"12345678"
    assert int.from_bytes(raw[13:15], "little") == 768
    assert int.from_bytes(raw[15:17], "little") == 512
    assert raw[17] == 2
    assert len(raw) == len(bs) == 18 + 4 * 4 + 2 + 1 + 0 + 3
    assert sum(bs.breakdown().values()) == len(raw)
    assert Bitstream.from_bytes(raw) == bs


@pytest.mark.parametrize("mutate", [
    lambda r: r[:10],
    lambda r: b"XXXX" + r[4:],
    lambda r: r[:4] + b"\x09" + r[5:],
    lambda r: r[:18] + (10_000).to_bytes(4, "little") + r[22:],
    lambda r: r[:-1],
    lambda r: r[:18],
])
def test_bitstream_rejects_corruption(mutate):
    raw = Bitstream(b"12345678", 64, 64, 0, b"zz", [b"abc"]).to_bytes()
    with pytest.raises(CorruptStreamError):
        Bitstream.from_bytes(mutate(raw))


def test_forward_train_objective(model, image):
    x = Tensor(image[None])
    out = forward_train(model, x, 0.0, np.random.default_rng(0))
    assert out.loss.item() == pytest.approx(out.bpp.item())
    lam = 0.05
    out = forward_train(model, x, lam, np.random.default_rng(0))
    assert out.loss.item() == pytest.approx(out.bpp.item() + lam * out.mse.item() * 255 ** 2, rel=1e-6)


def test_forward_train_perfect_reconstruction_costs_rate_only(model, image):
    class Identity(CompressionModel):
        pass
    m = Identity(ModelConfig.tiny())
    m.g_s = lambda y, clamp=False: Tensor(image[None])  # noqa: E731
    out = forward_train(m, Tensor(image[None]), 0.05, np.random.default_rng(0))
    assert out.mse.item() == 0.0
    assert out.loss.item() == pytest.approx(out.bpp.item())


def test_round_trip_latents_bit_exact(model, image):
    res = compress(image, model)
    raw = res.to_bytes()
    dec = decompress(raw, model)
    np.testing.assert_array_equal(dec.latents.y_hat, res.latents.y_hat)
    np.testing.assert_array_equal(dec.latents.z_hat, res.latents.z_hat)
    assert dec.image.shape == image.shape
    assert dec.image.min() >= 0 and dec.image.max() <= 1


def test_compress_deterministic_and_header_echo(model, image):
    a = compress(image, model).to_bytes()
    b = compress(image, model).to_bytes()
    assert a == b
    bs = Bitstream.from_bytes(a)
    assert (bs.height, bs.width, bs.lambda_index) == (64, 64, 3)
    assert len(bs.y_payloads) == len(model.config.chunks)


def test_in_process_and_serialised_decode_agree(model, image):
    res = compress(image, model)
    a = decompress(res.bitstream, model).image
    b = decompress(res.to_bytes(), model).image
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("h,w", [(50, 70), (16, 16), (64, 17), (1, 1)])
def test_padding_transparency(model, h, w):
    img = np.random.default_rng(h * w).uniform(0, 1, (h, w, 3)).astype(np.float32)
    res = compress(img, model)
    dec = decompress(res.to_bytes(), model)
    assert dec.image.shape == (h, w, 3)
    np.testing.assert_array_equal(dec.latents.y_hat, res.latents.y_hat)


def test_actual_size_tracks_estimate(model, image):
    res = compress(image, model)
    actual_bits = 8 * len(res.to_bytes())
    assert actual_bits <= res.estimated_bits * 1.02 + 128 * 8


def test_wrong_model_rejected_before_decoding(model, image):
    other = CompressionModel(ModelConfig.tiny(seed=1))
    raw = compress(image, model).to_bytes()
    with pytest.raises(ModelMismatchError):
        decompress(raw, other)


def test_model_id_tracks_weights():
    a = CompressionModel(ModelConfig.tiny())
    b = CompressionModel(ModelConfig.tiny())
    assert a.model_id() == b.model_id()
    b.prior.loc.data[0] += 1e-3
    assert a.model_id() != b.model_id()


def test_oversize_and_bad_shape_rejected(model):
    with pytest.raises(ValueError, match="cap"):
        compress(np.zeros((64, 64, 3), np.float32), model, max_pixels=100)
    with pytest.raises(ValueError):
        compress(np.zeros((64, 64), np.float32), model)


def test_truncated_payload_raises(model, image):
    raw = compress(image, model).to_bytes()
    bs = Bitstream.from_bytes(raw)
    bs.y_payloads[-1] = bs.y_payloads[-1][:1]
    with pytest.raises(CorruptStreamError):
        decompress(bs.to_bytes(), model)


def test_bpp_metric(model, image):
    assert metrics.bpp(b"x" * 1000, 100, 100) == pytest.approx(0.8)
    raw = compress(image, model).to_bytes()
    bs = Bitstream.from_bytes(raw)
    shares = [metrics.bpp(n, 64, 64) for n in bs.breakdown().values()]
    assert sum(shares) == pytest.approx(metrics.bpp(raw, 64, 64))


def test_kodak_extent_needs_no_padding():
    cfg = ModelConfig()
    assert cfg.padded_size(768, 512) == (768, 512)
    assert cfg.padded_size(512, 768) == (512, 768)
