"""Analysis and synthesis transforms built from hybrid spatial-channel attention blocks.

A block (:class:`HSCATB`) chains three residual sub-layers:

* :class:`SaSA` - spatial attention with a high-frequency path (multi-head
  attention inside each 2s x 2s window) and a low-frequency path (every token
  queries the average-pooled window summaries of the whole map);
* :class:`CaSA` - squeeze-style channel gating;
* :class:`MLGFFN` - a feed-forward layer mixing depthwise-conv local branches
  with a parameter-free pooled global branch.
"""

from __future__ import annotations

import math

import numpy as np

from .config import ModelConfig, StageConfig
from .engine import Conv2d, ConvTranspose2d, LayerNorm, Linear, Module, ShapeError, Tensor, ops


def num_heads(channels: int, head_dim: int) -> int:
    heads = max(1, channels // head_dim)
    while channels % heads:
        heads -= 1
    return heads


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                        return_weights: bool = False):
    """Scaled dot-product attention.  q: (N, Tq, C), k and v: (N, Tk, C)."""
    n, tq, c = q.shape
    tk = k.shape[1]
    hd = c // heads
    qh = ops.transpose(ops.reshape(q, (n, tq, heads, hd)), (0, 2, 1, 3))
    kh = ops.transpose(ops.reshape(k, (n, tk, heads, hd)), (0, 2, 3, 1))
    vh = ops.transpose(ops.reshape(v, (n, tk, heads, hd)), (0, 2, 1, 3))
    logits = ops.scale(ops.matmul(qh, kh), 1.0 / math.sqrt(hd))
    weights = ops.softmax(logits, axis=-1)
    out = ops.transpose(ops.matmul(weights, vh), (0, 2, 1, 3))
    out = ops.reshape(out, (n, tq, c))
    return (out, weights) if return_weights else out


class SaSA(Module):
    def __init__(self, stage: StageConfig, rng: np.random.Generator):
        self.stage = stage
        c = stage.channels
        c1, c2 = stage.split()
        self.high_channels, self.low_channels = c1, c2
        self.heads_h = num_heads(c1, stage.head_dim) if c1 else 0
        self.heads_l = num_heads(c2, stage.head_dim) if c2 else 0
        if c1:
            self.wq_h = Linear(c, c1, rng, bias=False)
            self.wk_h = Linear(c, c1, rng, bias=False)
            self.wv_h = Linear(c, c1, rng, bias=False)
            self.w_h = Linear(c1, c1, rng, bias=False)
        if c2:
            self.wq_l = Linear(c, c2, rng, bias=False)
            self.wk_l = Linear(c, c2, rng, bias=False)
            self.wv_l = Linear(c, c2, rng, bias=False)
            self.w_l = Linear(c2, c2, rng, bias=False)

    def window(self, f: Tensor) -> int:
        _, h, w, _ = f.shape
        win = self.stage.window(h, w)
        if h % win or w % win:
            raise ShapeError(f"feature map {h}x{w} is not divisible into {win}x{win} attention windows")
        return win

    def high_path(self, f: Tensor) -> Tensor:
        """Window-local attention; returns (B, H, W, C1) before the output projection."""
        _, h, w, _ = f.shape
        win = self.window(f)
        q = ops.window_partition(self.wq_h(f), win)
        k = ops.window_partition(self.wk_h(f), win)
        v = ops.window_partition(self.wv_h(f), win)
        out = multihead_attention(q, k, v, self.heads_h)
        return ops.window_merge(out, win, h, w)

    def low_path(self, f: Tensor, return_weights: bool = False):
        """Full-resolution queries against one pooled key/value token per window."""
        b, h, w, _ = f.shape
        win = self.window(f)
        c2 = self.low_channels
        pooled = ops.global_avg_pool(f, win)
        q = ops.reshape(self.wq_l(f), (b, h * w, c2))
        k = ops.reshape(self.wk_l(pooled), (b, -1, c2))
        v = ops.reshape(self.wv_l(pooled), (b, -1, c2))
        out, weights = multihead_attention(q, k, v, self.heads_l, return_weights=True)
        out = ops.reshape(out, (b, h, w, c2))
        return (out, weights) if return_weights else out

    def __call__(self, f: Tensor) -> Tensor:
        outs = []
        if self.high_channels:
            outs.append(self.w_h(self.high_path(f)))
        if self.low_channels:
            outs.append(self.w_l(self.low_path(f)))
        return outs[0] if len(outs) == 1 else ops.concat(outs, axis=-1)


class CaSA(Module):
    def __init__(self, channels: int, shrink: int, rng: np.random.Generator):
        if channels % shrink:
            raise ValueError(f"channels {channels} not divisible by shrink factor {shrink}")
        self.w1 = Linear(channels, channels // shrink, rng, bias=False)
        self.w2 = Linear(channels // shrink, channels, rng, bias=False)

    def gate(self, f: Tensor) -> Tensor:
        return ops.sigmoid(self.w2(ops.relu(self.w1(ops.global_avg_pool(f)))))

    def __call__(self, f: Tensor) -> Tensor:
        return ops.mul(f, self.gate(f))


class MLGFFN(Module):
    """Feed-forward sub-layer with its own pre-norm and residual.

    ``variant`` selects the ablations: ``mlgffn_no_local`` sends every channel
    through the pooled branch, ``mlgffn_no_global`` sends every channel
    through the depthwise branches, ``plain_ffn`` is a 4x expansion MLP.
    """

    def __init__(self, channels: int, rng: np.random.Generator, variant: str = "mlgffn"):
        self.variant = variant
        self.channels = channels
        self.norm = LayerNorm(channels)
        if variant == "plain_ffn":
            self.fc1 = Linear(channels, 4 * channels, rng)
            self.fc2 = Linear(4 * channels, channels, rng)
            return
        local = {"mlgffn": channels // 2, "mlgffn_no_global": channels, "mlgffn_no_local": 0}[variant]
        if variant == "mlgffn" and channels % 4:
            raise ValueError(f"MLGFFN needs channels divisible by 4, got {channels}")
        if local % 2:
            raise ValueError(f"local branch width {local} must be even")
        self.local_channels = local
        if local:
            q3, q5 = local // 2, local - local // 2
            self.pw3 = Conv2d(q3, q3, 1, rng)
            self.dw3 = Conv2d(q3, q3, 3, rng, groups=q3)
            self.pw5 = Conv2d(q5, q5, 1, rng)
            self.dw5 = Conv2d(q5, q5, 5, rng, groups=q5)

    def _local(self, x: Tensor) -> Tensor:
        a, b = ops.split(x, [self.local_channels // 2, self.local_channels - self.local_channels // 2])
        u = self.dw3(self.pw3(a))
        v = self.dw5(self.pw5(b))
        return ops.concat([ops.mul(ops.gelu(u), u), ops.mul(ops.gelu(v), v)], axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        xn = self.norm(x)
        if self.variant == "plain_ffn":
            body = self.fc2(ops.gelu(self.fc1(xn)))
        elif self.local_channels == 0:
            body = ops.mul(ops.gelu(ops.global_avg_pool(xn)), xn)
        elif self.local_channels == self.channels:
            body = self._local(xn)
        else:
            xl, xg = ops.split(xn, [self.local_channels, self.channels - self.local_channels])
            glob = ops.mul(ops.gelu(ops.global_avg_pool(xg)), xg)
            body = ops.concat([glob, self._local(xl)], axis=-1)
        return ops.add(x, body)


class HSCATB(Module):
    def __init__(self, stage: StageConfig, rng: np.random.Generator):
        c = stage.channels
        self.casa_enabled = stage.casa_enabled
        self.norm1 = LayerNorm(c)
        self.sasa = SaSA(stage, rng)
        if stage.casa_enabled:
            self.norm2 = LayerNorm(c)
            self.casa = CaSA(c, stage.casa_shrink, rng)
        self.ffn = MLGFFN(c, rng, stage.ffn_variant)

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.add(x, self.sasa(self.norm1(x)))
        if self.casa_enabled:
            y = ops.add(y, self.casa(self.norm2(y)))
        return self.ffn(y)


class Downsample(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, cout, 3, rng, stride=2)

    def __call__(self, x: Tensor) -> Tensor:
        _, h, w, _ = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"downsample needs even extents, got {h}x{w}")
        return ops.gelu(self.conv(x))


class Upsample(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, activation: bool = True):
        # the image-space layer starts near zero so early reconstructions are not wild
        self.deconv = ConvTranspose2d(cin, cout, 3, rng, stride=2, gain=1.0 if activation else 0.1)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        out = self.deconv(x)
        return ops.gelu(out) if self.activation else out


class _Stage(Module):
    def __init__(self, stage: StageConfig, rng: np.random.Generator):
        self.blocks = [HSCATB(stage, rng) for _ in range(stage.num_blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def check_analysis_input(config: ModelConfig, h: int, w: int) -> None:
    ok = h % 16 == 0 and w % 16 == 0
    hs, ws = h, w
    for i in range(4):
        if not ok:
            break
        hs, ws = hs // 2, ws // 2
        win = config.stage(i).window(hs, ws)
        ok = hs % win == 0 and ws % win == 0
    if not ok:
        ph, pw = config.padded_size(h, w)
        raise ShapeError(f"input {h}x{w} does not fit the analysis transform "
                         f"(needs multiples of 16 and whole attention windows); pad to {ph}x{pw}")


class AnalysisTransform(Module):
    """x (B,H,W,3) -> y (B,H/16,W/16,M)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        widths = (3,) + config.widths
        self.down = [Downsample(widths[i], widths[i + 1], rng) for i in range(4)]
        self.stages = [_Stage(config.stage(i), rng) for i in range(4)]

    def __call__(self, x: Tensor) -> Tensor:
        check_analysis_input(self.config, x.shape[1], x.shape[2])
        for down, stage in zip(self.down, self.stages):
            x = stage(down(x))
        return x


class SynthesisTransform(Module):
    """ŷ (B,h,w,M) -> x̂ (B,16h,16w,3); ``clamp`` is for evaluation only."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        widths = config.widths[::-1] + (3,)
        self.stages = [_Stage(config.stage(3 - i), rng) for i in range(4)]
        self.up = [Upsample(widths[i], widths[i + 1], rng, activation=i < 3) for i in range(4)]

    def __call__(self, y: Tensor, clamp: bool = False) -> Tensor:
        for stage, up in zip(self.stages, self.up):
            y = up(stage(y))
        if clamp:
            return Tensor(np.clip(y.data, 0.0, 1.0))
        return y
