"""Vector-field baseline: a coordinate MLP regressing the displacement to the closest surface point.

Sampling is a one-shot projection ``p + v(p)`` of Gaussian points.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import position_features
from .geometry import Mesh, TriangleBVH, closest_points
from .training import DivergenceError, EpochRecord, TrainConfig, TrainReport

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VFConfig:
    width: int = 512
    depth: int = 6  # hidden layers
    d_in: int = 3
    fourier_bands: int = 0

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be positive")
        if self.d_in != 3:
            raise ValueError("the vector-field baseline works on xyz points only")
        if self.fourier_bands < 0:
            raise ValueError("fourier_bands must be nonnegative")

    @property
    def n_features(self) -> int:
        return self.d_in * (2 * self.fourier_bands + 1)

    def to_dict(self) -> dict:
        return asdict(self)


def vf_layout(cfg: VFConfig) -> dict[str, tuple[int, int]]:
    dims = [cfg.n_features] + [cfg.width] * cfg.depth + [cfg.d_in]
    layout = {}
    for i in range(len(dims) - 1):
        layout[f"layer{i}.weight"] = (dims[i + 1], dims[i])
        layout[f"layer{i}.bias"] = (1, dims[i + 1])
    return layout


def vf_param_count(cfg: VFConfig) -> int:
    return sum(int(np.prod(s)) for s in vf_layout(cfg).values())


def matched_config(n_params: int, depth: int = 6, fourier_bands: int = 0) -> VFConfig:
    """Widest-fitting config whose parameter count is closest to ``n_params``."""
    f = 3 * (2 * fourier_bands + 1)
    # (depth-1) w^2 + (f + depth + 3) w + 3 = n
    a, b, c = depth - 1, f + depth + 3, 3 - n_params
    w = (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a) if a else -c / b
    best = min((max(1, int(w) + k) for k in (-1, 0, 1, 2)),
               key=lambda w_: abs(vf_param_count(VFConfig(w_, depth, 3, fourier_bands)) - n_params))
    return VFConfig(best, depth, 3, fourier_bands)


class VectorFieldModel:
    kind = "vector_field"

    def __init__(self, config: VFConfig, params: np.ndarray | None = None, seed: int = 0, dtype=np.float32):
        self.config = config
        self.layout = vf_layout(config)
        self.offsets = {}
        off = 0
        for name, shape in self.layout.items():
            n = int(np.prod(shape))
            self.offsets[name] = (off, n)
            off += n
        self.n_params = off
        if params is None:
            rng = np.random.default_rng(seed)
            flat = np.zeros(off)
            for name, shape in self.layout.items():
                if name.endswith("weight"):
                    o, n = self.offsets[name]
                    flat[o:o + n] = rng.standard_normal(n) / np.sqrt(shape[1])
            params = flat.astype(dtype)
        else:
            params = np.array(params, dtype=dtype)
            if params.shape != (off,):
                raise ValueError(f"expected {off} parameters, got {params.shape}")
        self.params = params
        self.grads = np.zeros_like(params)

    def segment(self, name: str, buf: np.ndarray | None = None) -> np.ndarray:
        off, n = self.offsets[name]
        buf = self.params if buf is None else buf
        return buf[off:off + n].reshape(self.layout[name])

    def param_count(self) -> int:
        return self.n_params

    def astype(self, dtype) -> "VectorFieldModel":
        return VectorFieldModel(self.config, self.params.astype(dtype), dtype=dtype)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        out = {}
        for name in self.layout:
            grad = self.segment(name, self.grads) if requires_grad else None
            out[name] = Tensor(self.segment(name), requires_grad=requires_grad, grad=grad, name=name)
        return out

    def forward(self, p: np.ndarray, params: dict | None = None) -> Tensor:
        params = params or self.tensors()
        feats = position_features(np.asarray(p, dtype=np.float64), self.config.fourier_bands)
        h = Tensor(feats.astype(self.params.dtype))
        n_layers = self.config.depth + 1
        for i in range(n_layers):
            h = ad.add(ad.matmul(h, params[f"layer{i}.weight"], transpose_b=True), params[f"layer{i}.bias"])
            if i < n_layers - 1:
                h = ad.silu(h)
        return h

    def predict(self, p: np.ndarray, chunk: int = 65536) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        out = np.empty_like(p)
        params = self.tensors()
        for s in range(0, len(p), chunk):
            out[s:s + chunk] = self.forward(p[s:s + chunk], params).value
        return out

    __call__ = predict


def make_vf_dataset(mesh: Mesh, n: int, seed=0, bvh: TriangleBVH | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian query points and their displacement to the closest surface point."""
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((n, 3))
    if n == 0:
        return p, p.copy()
    c, _ = closest_points(p, mesh, bvh)
    return p, c - p


def vf_loss(model: VectorFieldModel, p: np.ndarray, v: np.ndarray, accumulate: bool = True) -> float:
    """Mean squared displacement error; adds its gradient into ``model.grads``."""
    with ad.Tape() as tape:
        pred = model.forward(p, model.tensors(requires_grad=accumulate))
        err = ad.sub(pred, Tensor(np.asarray(v, dtype=model.params.dtype)))
        loss = ad.mean_all(ad.sum_rows(ad.square(err)))
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite vector-field loss {value}")
    if accumulate:
        ad.backward(tape, loss)
    return value


def train_vf(mesh: Mesh, vcfg: VFConfig, tcfg: TrainConfig, callback=None) -> tuple[VectorFieldModel, TrainReport]:
    """L2 regression on a fresh set of (p, v) pairs each epoch."""
    model = VectorFieldModel(vcfg, seed=tcfg.seed)
    report = TrainReport()
    if tcfg.epochs == 0:
        return model, report
    bvh = TriangleBVH(mesh)
    state = ad.AdamState(model.n_params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.adam_eps)
    step = 0
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        data_ss, batch_ss = np.random.SeedSequence([tcfg.seed, epoch, 0x7F]).spawn(2)
        p, v = make_vf_dataset(mesh, tcfg.points_per_epoch, data_ss, bvh)
        rng = np.random.default_rng(batch_ss)
        order = rng.permutation(len(p))
        total, pos = 0.0, 0
        for _ in range(tcfg.iters_per_epoch):
            if pos + tcfg.batch_size > len(order):
                order = rng.permutation(len(p))
                pos = 0
            idx = order[pos:pos + tcfg.batch_size]
            pos += tcfg.batch_size
            model.grads.fill(0)
            total += vf_loss(model, p[idx], v[idx])
            ad.adam_step(state, model.params, model.grads, lr=tcfg.lr_at(step))
            step += 1
        rec = EpochRecord(epoch, total / tcfg.iters_per_epoch, None, time.perf_counter() - t0)
        report.records.append(rec)
        log.info("vf epoch %d loss %.6f (%.1fs)", epoch, rec.loss, rec.seconds)
        if callback is not None:
            callback(epoch, model, rec)
    return model, report


def sample_vf(field, n: int, seed=0, iterations: int = 1) -> np.ndarray:
    """Project ``n`` Gaussian points with ``p <- p + v(p)``; ``field`` is any callable p -> v."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    p = np.random.default_rng(seed).standard_normal((n, 3))
    for _ in range(iterations):
        if n:
            p = p + field(p)
    return p
