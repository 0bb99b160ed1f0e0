"""Architecture hyperparameters."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

FFN_VARIANTS = ("mlgffn", "mlgffn_no_local", "mlgffn_no_global", "plain_ffn")

# Lagrange multipliers used for the rate points; the index into this tuple is
# what the bitstream header carries.
LAMBDAS = (0.0025, 0.0035, 0.0067, 0.0130, 0.0250, 0.0500)


def lambda_index(lam: float | None) -> int:
    if lam is None:
        return 255
    for i, v in enumerate(LAMBDAS):
        if abs(v - lam) < 1e-9:
            return i
    return 255


@dataclass(frozen=True)
class StageConfig:
    channels: int
    num_blocks: int
    window_base: int = 4
    head_dim: int = 20
    high_fraction: float = 0.5
    casa_shrink: int = 4
    lf_enabled: bool = True
    hf_enabled: bool = True
    casa_enabled: bool = True
    ffn_variant: str = "mlgffn"

    def __post_init__(self):
        if not (self.lf_enabled or self.hf_enabled):
            raise ValueError("at least one of the low/high frequency attention paths must be enabled")
        if self.ffn_variant not in FFN_VARIANTS:
            raise ValueError(f"unknown ffn_variant {self.ffn_variant!r}; expected one of {FFN_VARIANTS}")

    def window(self, h: int, w: int) -> int:
        """Token window edge: 2s, shrunk to the map when the map is smaller."""
        return min(2 * self.window_base, h, w)

    def split(self) -> tuple[int, int]:
        """Channel budget (high, low); a disabled path hands its share to the other."""
        if not self.hf_enabled:
            return 0, self.channels
        if not self.lf_enabled:
            return self.channels, 0
        c1 = int(round(self.channels * self.high_fraction))
        return c1, self.channels - c1


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 40
    latent_channels: int = 320
    blocks: tuple = (1, 1, 2, 2)
    window_base: int = 4
    head_dim: int = 20
    high_fraction: float = 0.5
    casa_shrink: int = 4
    hyper_channels: int = 192
    context_channels: int = 128
    epm_hidden: int = 256
    chunks: tuple = (16, 16, 32, 64, 192)
    lf_enabled: bool = True
    hf_enabled: bool = True
    casa_enabled: bool = True
    ffn_variant: str = "mlgffn"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "chunks", tuple(int(c) for c in self.chunks))
        if len(self.blocks) != 4:
            raise ValueError("blocks must list four stage depths")
        if sum(self.chunks) != self.latent_channels or any(c <= 0 for c in self.chunks):
            raise ValueError(f"chunk sizes {self.chunks} must be positive and sum to {self.latent_channels}")
        if not (self.lf_enabled or self.hf_enabled):
            raise ValueError("at least one of lf_enabled/hf_enabled must be true")
        if self.ffn_variant not in FFN_VARIANTS:
            raise ValueError(f"unknown ffn_variant {self.ffn_variant!r}")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale model used by the toy experiments and tests."""
        base = dict(channels=8, latent_channels=16, blocks=(1, 1, 1, 1), hyper_channels=16,
                    context_channels=16, epm_hidden=32, chunks=(4, 4, 8))
        base.update(overrides)
        return cls(**base)

    @property
    def widths(self) -> tuple[int, int, int, int]:
        c = self.channels
        return (c, 2 * c, 4 * c, self.latent_channels)

    def stage(self, index: int) -> StageConfig:
        return StageConfig(
            channels=self.widths[index], num_blocks=self.blocks[index],
            window_base=self.window_base, head_dim=self.head_dim,
            high_fraction=self.high_fraction, casa_shrink=self.casa_shrink,
            lf_enabled=self.lf_enabled, hf_enabled=self.hf_enabled,
            casa_enabled=self.casa_enabled, ffn_variant=self.ffn_variant)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["blocks"] = list(self.blocks)
        d["chunks"] = list(self.chunks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    def padded_size(self, h: int, w: int) -> tuple[int, int]:
        """Smallest-area extents >= (h, w) that the transforms and hyperprior accept."""
        h0, w0 = max(64, -(-h // 64) * 64), max(64, -(-w // 64) * 64)
        best = None
        for hp in range(h0, h0 + 1024 + 1, 64):
            for wp in range(w0, w0 + 1024 + 1, 64):
                if self.accepts(hp, wp) and (best is None or hp * wp < best[0] * best[1]):
                    best = (hp, wp)
                    break
        if best is None:
            raise ValueError(f"no padded size found for {h}x{w}")
        return best

    def accepts(self, h: int, w: int) -> bool:
        if h % 64 or w % 64:
            return False
        hs, ws = h, w
        for i in range(4):
            hs, ws = hs // 2, ws // 2
            win = self.stage(i).window(hs, ws)
            if hs % win or ws % win:
                return False
        return True
