"""Rate-distortion training loop: Adam, the step schedule, logging and resumable state."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .codec import CompressionModel, forward_train
from .config import ModelConfig
from .data import crop_batches
from .engine import NonFiniteError, Parameter, Tensor, backward, no_grad

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "loss", "bpp", "mse", "psnr", "lr")


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; ``dump`` names the offending tensors."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0035
    batch_size: int = 4
    crop: int = 64
    steps: int = 2000
    lr_base: float = 1e-4
    lr_final: float = 1e-5
    decay_fraction: float = 0.125
    seed: int = 0
    checkpoint_every: int = 0
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig.tiny)

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.crop <= 0 or self.crop % 64:
            raise ValueError(f"crop size must be a positive multiple of 64, got {self.crop}")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be >= 1")
        if not 0.0 <= self.decay_fraction <= 1.0:
            raise ValueError("decay_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = d.pop("model", None)
        model = ModelConfig.from_dict(model) if isinstance(model, dict) else (model or ModelConfig.tiny())
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(model=model, **d)


def lr_schedule(step: int, total_steps: int, base: float = 1e-4, final: float = 1e-5,
                decay_fraction: float = 0.125) -> float:
    """Constant ``base`` until the last ``decay_fraction`` of steps, then linear to ``final``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    knee = total_steps * (1.0 - decay_fraction)
    if step <= knee or total_steps == 0:
        return base
    t = (step - knee) / (total_steps - knee)
    return base + (final - base) * t


class Adam:
    """Adam with per-parameter moments kept in the parameter's dtype."""

    def __init__(self, params: dict[str, Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        for k, p in self.params.items():
            p.data, self.m[k], self.v[k] = adam_step(p.data, p.grad, self.m[k], self.v[k], self.t, lr,
                                                     self.beta1, self.beta2, self.eps)


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new (param, m, v). ``t`` counts from 1."""
    if param.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    dt = param.dtype
    m = (beta1 * m + (1.0 - beta1) * grad).astype(dt)
    v = (beta2 * v + (1.0 - beta2) * grad * grad).astype(dt)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return (param - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(dt), m, v


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


class Trainer:
    """Owns the model, optimizer, data order and noise stream for one run.

    One seeded generator drives both crop selection and quantization noise,
    so a run is replayable from (config, images, step, generator state).
    """

    def __init__(self, config: TrainConfig, images: list[np.ndarray],
                 model: CompressionModel | None = None):
        self.config = config
        self.images = images
        self.model = model if model is not None else CompressionModel(config.model)
        self.model.lam = config.lam
        self.optim = Adam(dict(self.model.named_parameters()))
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.history: list[dict] = []

    @classmethod
    def resume(cls, ckpt: Checkpoint, images: list[np.ndarray]) -> "Trainer":
        if ckpt.train_config is None:
            raise ValueError("checkpoint carries no training state")
        config = TrainConfig.from_dict(ckpt.train_config)
        tr = cls(config, images, ckpt.build_model())
        tr.step = ckpt.step
        tr.optim.t = ckpt.adam_t
        for k in tr.optim.m:
            if k in ckpt.adam_m:
                tr.optim.m[k] = ckpt.adam_m[k].astype(tr.optim.m[k].dtype)
                tr.optim.v[k] = ckpt.adam_v[k].astype(tr.optim.v[k].dtype)
        if ckpt.rng_state is not None:
            tr.rng = _rng_from_state(ckpt.rng_state)
        return tr

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_model(self.model, step=self.step, train_config=self.config.to_dict(),
                                     adam_t=self.optim.t,
                                     adam_m={k: a.copy() for k, a in self.optim.m.items()},
                                     adam_v={k: a.copy() for k, a in self.optim.v.items()},
                                     rng_state=_rng_state(self.rng))

    def _next_batch(self) -> np.ndarray:
        # a fresh one-batch stream so the generator is the only carried state
        return next(crop_batches(self.images, self.config.crop, self.config.batch_size, self.rng))

    def train_step(self) -> dict:
        cfg = self.config
        lr = lr_schedule(self.step, cfg.steps, cfg.lr_base, cfg.lr_final, cfg.decay_fraction)
        batch = self._next_batch()
        self.model.zero_grad()
        try:
            out = forward_train(self.model, Tensor(batch), cfg.lam, self.rng)
            if not math.isfinite(out.loss.item()):
                raise NonFiniteError("loss")
            backward(out.loss)
        except NonFiniteError as e:
            dump = self.diagnostics()
            raise TrainingDiverged(f"non-finite values at step {self.step} ({e}); "
                                   f"offending tensors: {sorted(dump)[:8]}", dump) from e
        bad = [k for k, p in self.optim.params.items() if not np.all(np.isfinite(p.grad))]
        if bad:
            raise TrainingDiverged(f"non-finite gradients at step {self.step} in {bad[:8]}", self.diagnostics())
        self.optim.step(lr)
        self.step += 1
        mse = out.mse.item()
        row = {"step": self.step, "loss": out.loss.item(), "bpp": out.bpp.item(),
               "mse": mse * 255.0 ** 2, "psnr": 10.0 * math.log10(1.0 / mse) if mse > 0 else math.inf,
               "lr": lr}
        self.history.append(row)
        return row

    def diagnostics(self) -> dict:
        """Summaries of every parameter or gradient holding NaN/Inf."""
        dump = {}
        for k, p in self.optim.params.items():
            for what, arr in (("value", p.data), ("grad", p.grad)):
                bad = ~np.isfinite(arr)
                if bad.any():
                    dump[f"{k}.{what}"] = {"shape": list(arr.shape), "nonfinite": int(bad.sum()),
                                           "max_abs_finite": float(np.abs(arr[~bad]).max()) if (~bad).any() else None}
        return dump

    def run(self, steps: int | None = None, log_path=None, checkpoint_path=None) -> Checkpoint:
        """Train until ``steps`` total steps (default: the configured count)."""
        target = self.config.steps if steps is None else steps
        every = self.config.checkpoint_every
        writer, fh = None, None
        if log_path is not None:
            new = not Path(log_path).exists() or self.step == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(LOG_HEADER)
        try:
            while self.step < target:
                row = self.train_step()
                if writer is not None:
                    writer.writerow([row["step"]] + [f"{row[k]:.6g}" for k in LOG_HEADER[1:]])
                if checkpoint_path is not None and every and self.step % every == 0:
                    self.checkpoint().save(checkpoint_path)
                    log.info("step %d: loss %.4f, checkpoint written", self.step, row["loss"])
        finally:
            if fh is not None:
                fh.close()
        ckpt = self.checkpoint()
        if checkpoint_path is not None:
            ckpt.save(checkpoint_path)
        return ckpt


def train(config: TrainConfig, images: list[np.ndarray], log_path=None, checkpoint_path=None) -> Checkpoint:
    return Trainer(config, images).run(log_path=log_path, checkpoint_path=checkpoint_path)


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average; entry i averages values[max(0, i-window+1) : i+1]."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def evaluate_objective(model: CompressionModel, images: list[np.ndarray], lam: float,
                       seeds: tuple[int, ...] = (0, 1, 2, 3)) -> float:
    """Training objective on whole images, averaged over a few fixed noise draws."""
    x = Tensor(np.stack(images))
    with no_grad():
        vals = [forward_train(model, x, lam, np.random.default_rng(s)).loss.item() for s in seeds]
    return float(np.mean(vals))
