"""Denoising score-matching training with per-epoch surface resampling."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import DenoiserConfig, DenoiserModel, loss_weight, precond

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 200
    iters_per_epoch: int = 64
    batch_size: int = 4096
    points_per_epoch: int = 2**18
    p_mean: float = -1.2
    p_std: float = 1.2
    lr: float = 1e-3
    lr_decay_iters: int = 0  # 0: constant; else lr / sqrt(max(step / decay, 1))
    lr_final_frac: float = 1.0  # linear ramp of lr to this fraction over the last 10% of steps
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_points: int = 20000
    eval_steps: int = 32

    def __post_init__(self):
        for name in ("iters_per_epoch", "batch_size", "points_per_epoch", "eval_points", "eval_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "checkpoint_every", "eval_every", "lr_decay_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.p_std > 0:
            raise ValueError("p_std must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_final_frac <= 1:
            raise ValueError("lr_final_frac must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, step: int) -> float:
        lr = self.lr
        if self.lr_decay_iters:
            lr /= math.sqrt(max(step / self.lr_decay_iters, 1.0))
        total = self.epochs * self.iters_per_epoch
        ramp_start = int(0.9 * total)
        if self.lr_final_frac < 1 and total and step >= ramp_start:
            frac = (step - ramp_start) / max(total - ramp_start, 1)
            lr *= 1.0 - (1.0 - self.lr_final_frac) * frac
        return lr


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    chamfer: float | None
    seconds: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def write_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "chamfer", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.loss), "" if r.chamfer is None else repr(r.chamfer), f"{r.seconds:.3f}"])


def sample_sigma(batch: int, rng: np.random.Generator, p_mean: float = -1.2, p_std: float = 1.2) -> np.ndarray:
    """Log-normal noise levels ``exp(p_mean + p_std * z)``."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return np.exp(p_mean + p_std * rng.standard_normal(batch))


def denoising_loss(model: DenoiserModel, x: np.ndarray, sigma: np.ndarray, noise: np.ndarray,
                   accumulate: bool = True) -> float:
    """Weighted denoising loss for fixed (sigma, noise); adds its gradient into ``model.grads``.

    loss = mean_b lambda(sigma_b) * |D(x_b + sigma_b n_b, sigma_b) - x_b|^2
    """
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.d_in:
        raise ValueError(f"batch must be (B, {cfg.d_in}), got {x.shape}")
    sig = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    y = x + sig * noise
    c_skip, c_out, c_in, c_noise = precond(sig, cfg.sigma_data)
    weight = loss_weight(sig, cfg.sigma_data) / len(x)
    dtype = model.params.dtype
    resid = (c_skip * y - x).astype(dtype)
    with ad.Tape() as tape:
        p = model.tensors(requires_grad=accumulate)
        f = model.raw((c_in * y).astype(dtype), c_noise, p)
        err = ad.add(ad.mul(f, c_out.astype(dtype)), resid)
        loss = ad.sum_all(ad.mul(ad.sum_rows(ad.square(err)), weight.astype(dtype)))
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss {value}")
    if accumulate:
        ad.backward(tape, loss)
    return value


def training_loss(model: DenoiserModel, x_clean: np.ndarray, rng: np.random.Generator,
                  p_mean: float = -1.2, p_std: float = 1.2) -> float:
    """Draw sigma and noise, return the loss and populate ``model.grads``."""
    sigma = sample_sigma(len(x_clean), rng, p_mean, p_std)
    noise = rng.standard_normal(np.shape(x_clean))
    return denoising_loss(model, x_clean, sigma, noise)


def epoch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, 0x5A3])


def train(mesh, dcfg: DenoiserConfig, tcfg: TrainConfig, *,
          eval_fn: Callable[[DenoiserModel], float] | None = None,
          checkpoint_fn: Callable[[DenoiserModel, int, float | None], None] | None = None,
          callback: Callable[[int, DenoiserModel, EpochRecord], None] | None = None,
          ) -> tuple[DenoiserModel, TrainReport]:
    """Train a denoiser on a (normalized) mesh.

    Each epoch draws a fresh set of ``points_per_epoch`` surface samples with
    an epoch-dependent seed and runs ``iters_per_epoch`` minibatches over it.
    ``eval_fn`` (every ``eval_every`` epochs) returns a Chamfer value for the
    report; ``checkpoint_fn`` is called every ``checkpoint_every`` epochs.
    """
    from .geometry import sample_surface

    model = DenoiserModel(dcfg, seed=tcfg.seed)
    report = TrainReport()
    if tcfg.epochs == 0:
        return model, report
    state = ad.AdamState(model.n_params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.adam_eps)
    step = 0
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        ss = epoch_seed(tcfg.seed, epoch)
        data_ss, batch_ss = ss.spawn(2)
        data = sample_surface(mesh, tcfg.points_per_epoch, seed=data_ss)
        if data.shape[1] != dcfg.d_in:
            raise ValueError(f"mesh yields {data.shape[1]}-channel points, model expects {dcfg.d_in}")
        rng = np.random.default_rng(batch_ss)
        order = rng.permutation(len(data))
        total = 0.0
        pos = 0
        for _ in range(tcfg.iters_per_epoch):
            if pos + tcfg.batch_size > len(order):
                order = rng.permutation(len(data))
                pos = 0
            idx = order[pos:pos + tcfg.batch_size]
            pos += tcfg.batch_size
            model.grads.fill(0)
            total += training_loss(model, data[idx], rng, tcfg.p_mean, tcfg.p_std)
            ad.adam_step(state, model.params, model.grads, lr=tcfg.lr_at(step))
            model.renormalize()
            step += 1
        chamfer = None
        if eval_fn is not None and tcfg.eval_every and ((epoch + 1) % tcfg.eval_every == 0 or epoch + 1 == tcfg.epochs):
            chamfer = float(eval_fn(model))
        rec = EpochRecord(epoch, total / tcfg.iters_per_epoch, chamfer, time.perf_counter() - t0)
        report.records.append(rec)
        log.info("epoch %d loss %.5f chamfer %s (%.1fs)", epoch, rec.loss, chamfer, rec.seconds)
        if checkpoint_fn is not None and tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
            checkpoint_fn(model, epoch, chamfer)
        if callback is not None:
            callback(epoch, model, rec)
    return model, report
