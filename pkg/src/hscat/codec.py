"""The full model and the encode/decode/train entry points.

Coding order is fixed: ẑ first under the factorized prior, then the latent
chunks in schedule order.  Each chunk's (mu, sigma) depend only on the
hyper features and the chunks before it, so the decoder can rebuild every
table before it reads the chunk's symbols.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import coder
from .bitstream import Bitstream, ModelMismatchError
from .config import ModelConfig, lambda_index
from .engine import Module, NonFiniteError, Tensor, no_grad, ops
from .entropy import (ChannelContext, EntropyParameters, FactorizedPrior, HyperAnalysis,
                      HyperSynthesis, LatentPack, floor_probability, gaussian_uniform_likelihood,
                      quantize, rate_estimate, round_half_away)
from .transforms import AnalysisTransform, SynthesisTransform

DEFAULT_MAX_PIXELS = 4096 * 4096


class CompressionModel(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(config.seed) if rng is None else rng
        m = config.latent_channels
        self.config = config
        self.g_a = AnalysisTransform(config, rng)
        self.g_s = SynthesisTransform(config, rng)
        self.h_a = HyperAnalysis(m, config.hyper_channels, rng)
        self.h_s = HyperSynthesis(config.hyper_channels, m, rng)
        self.prior = FactorizedPrior(config.hyper_channels)
        self.context = ChannelContext(config.chunks, config.context_channels, rng)
        self.epm = EntropyParameters(config.chunks, config.context_channels, 2 * m,
                                     config.epm_hidden, rng)
        self.lam: float | None = None
        self.assign_names()

    def model_id(self) -> bytes:
        """8-byte digest of the configuration and every parameter value."""
        h = hashlib.sha256(self.config.digest())
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.digest()[:8]

    def chunk_params(self, decoded: list[Tensor], hyper: Tensor, index: int):
        b, h, w, _ = hyper.shape
        ctx = self.context(decoded, (b, h, w))
        return self.epm(ctx, hyper, index)


@dataclass
class TrainOutput:
    loss: Tensor
    bpp: Tensor
    mse: Tensor
    x_hat: Tensor

    @property
    def distortion(self) -> float:
        return self.mse.item() * 255.0 ** 2


def forward_train(model: CompressionModel, x: Tensor, lam: float, rng: np.random.Generator) -> TrainOutput:
    """L = R + lam * D with R in bits per pixel and D the MSE on the 0..255 scale."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    b, h, w, _ = x.shape
    y = model.g_a(x)
    z = model.h_a(y)
    z_tilde = quantize(z, mode="noise", rng=rng)
    p_z = model.prior.likelihood(z_tilde)
    hyper = model.h_s(z_tilde, y.shape[1:3])
    decoded, p_y = [], []
    for i, y_chunk in enumerate(ops.split(y, model.config.chunks)):
        params = model.chunk_params(decoded, hyper, i)
        y_tilde = quantize(y_chunk, mode="noise", rng=rng)
        p_y.append(gaussian_uniform_likelihood(y_tilde, params.mu, params.sigma))
        decoded.append(y_tilde)
    y_hat = decoded[0] if len(decoded) == 1 else ops.concat(decoded, axis=-1)
    x_hat = model.g_s(y_hat)
    bits = rate_estimate([floor_probability(p) for p in p_y], [floor_probability(p_z)])
    bpp = ops.scale(bits, 1.0 / (b * h * w))
    mse = ops.mean(ops.square(ops.sub(x_hat, x)))
    loss = ops.add(bpp, ops.scale(mse, lam * 255.0 ** 2))
    return TrainOutput(loss, bpp, mse, x_hat)


# ----------------------------------------------------------------------------
# coding


@dataclass
class CompressResult:
    bitstream: Bitstream
    latents: LatentPack
    estimated_bits: float

    def to_bytes(self) -> bytes:
        return self.bitstream.to_bytes()


def _pad_image(image: np.ndarray, hp: int, wp: int) -> np.ndarray:
    h, w = image.shape[:2]
    return np.pad(image, ((0, hp - h), (0, wp - w), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")


def _hyper_shape(yh: int, yw: int) -> tuple[int, int]:
    return -(-(-(-yh // 2)) // 2), -(-(-(-yw // 2)) // 2)


def _prior_tables(model: CompressionModel) -> tuple[list[coder.QuantizedCDF], np.ndarray]:
    loc = model.prior.loc.data.astype(np.float64)
    shift = round_half_away(loc)
    return coder.build_logistic_cdfs(loc - shift, model.prior.scale()), shift.astype(np.int64)


def _dequantize(symbols: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return symbols.astype(mu.dtype) + mu


def _bits(p: np.ndarray) -> float:
    return float(-np.log2(np.maximum(p.astype(np.float64), 1e-9)).sum())


def compress(image: np.ndarray, model: CompressionModel, lam: float | None = None,
             max_pixels: int = DEFAULT_MAX_PIXELS) -> CompressResult:
    """Encode an (H, W, 3) image with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h * w > max_pixels:
        raise ValueError(f"image of {h}x{w} pixels exceeds the {max_pixels}-pixel cap")
    cfg = model.config
    hp, wp = cfg.padded_size(h, w)
    x = Tensor(_pad_image(image, hp, wp)[None])
    lam = model.lam if lam is None else lam

    with no_grad():
        y = model.g_a(x)
        z = model.h_a(y)
        if not (np.all(np.isfinite(y.data)) and np.all(np.isfinite(z.data))):
            raise NonFiniteError("non-finite latents")
        z_hat = round_half_away(z.data).astype(z.dtype)
        tables, shift = _prior_tables(model)
        z_sym = (z_hat.astype(np.int64) - shift).reshape(-1, z_hat.shape[-1])
        n_pos = z_sym.shape[0]
        z_payload = coder.range_encode(z_sym.ravel(), tables * n_pos)
        est = _bits(model.prior.likelihood(Tensor(z_hat)).data)

        hyper = model.h_s(Tensor(z_hat), y.shape[1:3])
        decoded, payloads, start = [], [], 0
        for i, width in enumerate(cfg.chunks):
            params = model.chunk_params(decoded, hyper, i)
            mu, sigma = params.mu.data, params.sigma.data
            sym = round_half_away(y.data[..., start:start + width] - mu)
            y_hat = _dequantize(sym, mu)
            cdfs = coder.build_gaussian_cdfs(sigma.ravel())
            payloads.append(coder.range_encode(sym.ravel().astype(np.int64), cdfs))
            est += _bits(gaussian_uniform_likelihood(Tensor(y_hat), params.mu, params.sigma).data)
            decoded.append(Tensor(y_hat))
            start += width

    bs = Bitstream(model.model_id(), h, w, lambda_index(lam), z_payload, payloads)
    y_all = np.concatenate([t.data for t in decoded], axis=-1)
    return CompressResult(bs, LatentPack(y_all, z_hat), est)


@dataclass
class DecompressResult:
    image: np.ndarray
    latents: LatentPack


def decompress(stream: bytes | Bitstream, model: CompressionModel) -> DecompressResult:
    bs = stream if isinstance(stream, Bitstream) else Bitstream.from_bytes(stream)
    if bs.model_id != model.model_id():
        raise ModelMismatchError(f"stream was written by model {bs.model_id.hex()}, "
                                 f"loaded model is {model.model_id().hex()}")
    cfg = model.config
    if len(bs.y_payloads) != len(cfg.chunks):
        raise coder.CorruptStreamError(f"stream has {len(bs.y_payloads)} latent segments, "
                                       f"model expects {len(cfg.chunks)}")
    hp, wp = cfg.padded_size(bs.height, bs.width)
    yh, yw = hp // 16, wp // 16
    zh, zw = _hyper_shape(yh, yw)
    n_hyper = cfg.hyper_channels

    with no_grad():
        tables, shift = _prior_tables(model)
        z_sym = np.asarray(coder.range_decode(bs.z_payload, tables * (zh * zw)), dtype=np.int64)
        z_hat = (z_sym.reshape(zh * zw, n_hyper) + shift).reshape(1, zh, zw, n_hyper).astype(np.float32)
        hyper = model.h_s(Tensor(z_hat), (yh, yw))
        decoded = []
        for i, (width, payload) in enumerate(zip(cfg.chunks, bs.y_payloads)):
            params = model.chunk_params(decoded, hyper, i)
            mu, sigma = params.mu.data, params.sigma.data
            cdfs = coder.build_gaussian_cdfs(sigma.ravel())
            sym = np.asarray(coder.range_decode(payload, cdfs), dtype=np.int64).reshape(mu.shape)
            decoded.append(Tensor(_dequantize(sym, mu)))
        y_hat = np.concatenate([t.data for t in decoded], axis=-1)
        x_hat = model.g_s(Tensor(y_hat), clamp=True).data[0, :bs.height, :bs.width, :]
    return DecompressResult(x_hat, LatentPack(y_hat, z_hat))


def estimate_rate(image: np.ndarray, model: CompressionModel) -> float:
    """Model-estimated bits per pixel under round-mode quantization."""
    res = compress(image, model)
    h, w = np.asarray(image).shape[:2]
    return res.estimated_bits / (h * w)
