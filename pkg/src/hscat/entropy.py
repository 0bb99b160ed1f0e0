"""Hyperprior, channel-conditional context and the likelihoods behind the rate term."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import Conv2d, ConvTranspose2d, Module, Parameter, ShapeError, Tensor, ops

SIGMA_MIN = 0.04
PROB_FLOOR = 1e-9
_LN2 = math.log(2.0)


@dataclass
class EntropyParams:
    mu: Tensor
    sigma: Tensor


@dataclass
class LatentPack:
    y_hat: np.ndarray
    z_hat: np.ndarray

    @property
    def latent_shape(self) -> tuple:
        return self.y_hat.shape

    @property
    def hyper_shape(self) -> tuple:
        return self.z_hat.shape


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize(y: Tensor, mu: Tensor | np.ndarray | float | None = None, mode: str = "round",
             rng: np.random.Generator | None = None) -> Tensor:
    """Noise proxy (training) or mean-shifted rounding (coding).

    ``noise``: y + u with u ~ U(-1/2, 1/2) drawn from ``rng``; gradients pass
    straight through.  ``round``: round(y - mu) + mu, not differentiable.
    """
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs a seeded generator")
        u = rng.uniform(-0.5, 0.5, size=y.shape).astype(y.dtype)
        return ops.add(y, Tensor(u))
    if mode == "round":
        m = 0.0 if mu is None else (mu.data if isinstance(mu, Tensor) else np.asarray(mu, dtype=y.dtype))
        return Tensor((round_half_away(y.data - m) + m).astype(y.dtype))
    raise ValueError(f"unknown quantization mode {mode!r}")


def gaussian_uniform_likelihood(y_hat: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Mass of N(mu, sigma^2) convolved with U(-1/2, 1/2) at ``y_hat``.

    Evaluated on the lower tail (|y_hat - mu|) so far-tail mass does not
    cancel to zero.  No floor is applied here.
    """
    v = ops.absolute(ops.sub(y_hat, mu))
    upper = ops.normal_cdf(ops.div(ops.sub(0.5, v), sigma))
    lower = ops.normal_cdf(ops.div(ops.scale(ops.add(v, 0.5), -1.0), sigma))
    return ops.sub(upper, lower)


def floor_probability(p: Tensor) -> Tensor:
    return ops.maximum(p, PROB_FLOOR)


def rate_estimate(likelihoods_y, likelihoods_z=()) -> Tensor:
    """Total information content in bits, sum of -log2 p over every element."""
    tensors = []
    for group in (likelihoods_y, likelihoods_z):
        tensors.extend([group] if isinstance(group, Tensor) else list(group))
    total = None
    for p in tensors:
        if np.any(p.data <= 0) or np.any(p.data > 1):
            raise ValueError("likelihoods must lie in (0, 1]")
        term = ops.sum(ops.log(p))
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ValueError("no likelihoods given")
    return ops.scale(total, -1.0 / _LN2)


class HyperAnalysis(Module):
    """y (B,h,w,M) -> z (B,ceil(h/4),ceil(w/4),N)."""

    def __init__(self, latent: int, hyper: int, rng: np.random.Generator):
        self.conv1 = Conv2d(latent, hyper, 3, rng, stride=2)
        self.conv2 = Conv2d(hyper, hyper, 3, rng, stride=2)

    def __call__(self, y: Tensor) -> Tensor:
        return self.conv2(ops.gelu(self.conv1(y)))


class HyperSynthesis(Module):
    """ẑ -> conditioning features with 2M channels at the latent resolution."""

    def __init__(self, hyper: int, latent: int, rng: np.random.Generator):
        self.deconv1 = ConvTranspose2d(hyper, hyper, 3, rng, stride=2)
        self.deconv2 = ConvTranspose2d(hyper, 2 * latent, 3, rng, stride=2)

    def __call__(self, z_hat: Tensor, latent_hw: tuple[int, int]) -> Tensor:
        h, w = latent_hw
        mid = (-(-h // 2), -(-w // 2))
        if (-(-mid[0] // 2), -(-mid[1] // 2)) != z_hat.shape[1:3]:
            raise ShapeError(f"hyper-latent {z_hat.shape[1:3]} does not match latent extents {h}x{w}")
        t = ops.conv_transpose2d(z_hat, self.deconv1.weight, 2, out_size=mid)
        t = ops.gelu(ops.add(t, self.deconv1.bias))
        t = ops.conv_transpose2d(t, self.deconv2.weight, 2, out_size=(h, w))
        return ops.add(t, self.deconv2.bias)


class FactorizedPrior(Module):
    """Per-channel logistic density convolved with U(-1/2, 1/2) for ẑ."""

    def __init__(self, channels: int):
        self.loc = Parameter(np.zeros(channels, np.float32))
        self.log_scale = Parameter(np.zeros(channels, np.float32))

    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale.data.astype(np.float64))

    def likelihood(self, z_hat: Tensor) -> Tensor:
        scale = ops.exp(self.log_scale)
        v = ops.absolute(ops.sub(z_hat, self.loc))
        upper = ops.sigmoid(ops.div(ops.sub(0.5, v), scale))
        lower = ops.sigmoid(ops.div(ops.scale(ops.add(v, 0.5), -1.0), scale))
        return ops.sub(upper, lower)


class _ContextNet(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(ops.gelu(self.conv1(x)))


class ChannelContext(Module):
    """Features for chunk i computed from the already decoded chunks 0..i-1 only."""

    def __init__(self, chunks: Sequence[int], channels: int, rng: np.random.Generator):
        self.chunks = tuple(chunks)
        self.initial = Parameter(np.zeros((1, 1, 1, channels), np.float32))
        self.nets = [_ContextNet(sum(self.chunks[:i]), channels, rng) for i in range(1, len(self.chunks))]

    def __call__(self, decoded: Sequence[Tensor], spatial: tuple[int, int, int]) -> Tensor:
        i = len(decoded)
        if i >= len(self.chunks):
            raise ValueError(f"all {len(self.chunks)} chunks already decoded")
        widths = tuple(t.shape[-1] for t in decoded)
        if widths != self.chunks[:i]:
            raise ValueError(f"decoded chunk widths {widths} are not a prefix of the schedule {self.chunks}")
        b, h, w = spatial
        if i == 0:
            return ops.broadcast_to(self.initial, (b, h, w, self.initial.shape[-1]))
        x = decoded[0] if i == 1 else ops.concat(list(decoded), axis=-1)
        return self.nets[i - 1](x)


class _ParamNet(Module):
    def __init__(self, cin: int, hidden: int, cout: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, hidden, 1, rng)
        self.conv2 = Conv2d(hidden, cout, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(ops.gelu(self.conv1(x)))


class EntropyParameters(Module):
    def __init__(self, chunks: Sequence[int], context: int, hyper_features: int, hidden: int,
                 rng: np.random.Generator):
        self.chunks = tuple(chunks)
        self.nets = [_ParamNet(context + hyper_features, hidden, 2 * c, rng) for c in self.chunks]

    def __call__(self, context: Tensor, hyper: Tensor, index: int) -> EntropyParams:
        if context.shape[:3] != hyper.shape[:3]:
            raise ShapeError(f"context {context.shape} and hyper features {hyper.shape} disagree spatially")
        out = self.nets[index](ops.concat([context, hyper], axis=-1))
        width = self.chunks[index]
        mu, raw = ops.split(out, [width, width])
        sigma = ops.add(ops.softplus(raw), SIGMA_MIN)
        return EntropyParams(mu, sigma)
