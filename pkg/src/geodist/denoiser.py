"""Magnitude-preserving point denoiser with EDM preconditioning.

The raw network ``F`` maps a (scaled) point and a noise level to a residual;
:meth:`DenoiserModel.denoise` wraps it as

    D(x, sigma) = c_skip * x + c_out * F(c_in * x, ln(sigma) / 4)

All parameters live in one flat vector; named segments are views into it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MP_SILU_DIVISOR = 0.596
MP_SUM_T = 0.3
NORM_EPS = 1e-4


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 64
    n_blocks: int = 4
    d_in: int = 3
    fourier_bands: int = 8
    sigma_data: float = 1.0

    def __post_init__(self):
        if self.channels < 8:
            raise ValueError(f"channels must be >= 8, got {self.channels}")
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.d_in not in (3, 6):
            raise ValueError(f"d_in must be 3 or 6, got {self.d_in}")
        if self.fourier_bands < 1:
            raise ValueError("fourier_bands must be positive")
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def denoiser_layout(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    """Ordered segment name -> shape.  Weight matrices end in ``mp_linear``."""
    C = cfg.channels
    layout = {
        "input_proj.mp_linear": (C, cfg.d_in * (2 * cfg.fourier_bands + 1)),
        "noise_fourier.freqs": (1, C),
        "noise_fourier.phases": (1, C),
        "noise_embed.mp_linear": (C, C),
    }
    for i in range(cfg.n_blocks):
        layout[f"block{i}.emb_mp_linear"] = (C, C)
        layout[f"block{i}.x_pre_mp_linear"] = (C, C)
        layout[f"block{i}.x_post_mp_linear"] = (C, C)
        layout[f"block{i}.emb_gain"] = (1, 1)
    layout["final.emb_mp_linear"] = (C, C)
    layout["final.x_pre_mp_linear"] = (C, C)
    layout["final.x_post_mp_linear"] = (cfg.d_in, C)
    layout["final.emb_gain"] = (1, 1)
    layout["final.out_gain"] = (1, 1)
    return layout


def param_count(cfg: DenoiserConfig) -> int:
    return int(sum(np.prod(s) for s in denoiser_layout(cfg).values()))


# --------------------------------------------------------------------------
# magnitude-preserving building blocks


def mp_silu(x: Tensor) -> Tensor:
    return ad.silu(x, gain=1.0 / MP_SILU_DIVISOR)


def mp_sum(a: Tensor, b: Tensor, t: float = MP_SUM_T) -> Tensor:
    den = np.sqrt((1 - t) ** 2 + t**2)
    return ad.lerp(a, b, (1 - t) / den, t / den)


def mp_linear(x: Tensor, weight: Tensor, gain: Tensor | float | None = None) -> Tensor:
    """``x @ normalize(W).T * gain`` with unit-L2 rows.

    Unit rows make the output variance match the input variance for
    uncorrelated unit-variance features, whatever the fan-in.
    """
    w = ad.normalize_rows(weight, eps=NORM_EPS, rms=False)
    out = ad.matmul(x, w, transpose_b=True)
    if gain is None:
        return out
    if isinstance(gain, Tensor):
        return ad.mul(out, gain)
    return ad.scale(out, gain)


def position_features(x: np.ndarray, bands: int) -> np.ndarray:
    """Raw coordinates followed by ``sin/cos(2^k pi x)`` for ``k < bands``."""
    x = np.asarray(x)
    freqs = (2.0 ** np.arange(bands)) * np.pi
    arg = (x[:, :, None] * freqs).reshape(x.shape[0], -1)
    return np.concatenate([x, np.sin(arg), np.cos(arg)], axis=1)


def embed_position(x: np.ndarray, p: dict, bands: int) -> Tensor:
    feats = position_features(x, bands).astype(p["input_proj.mp_linear"].value.dtype)
    return mp_linear(Tensor(feats), p["input_proj.mp_linear"])


def embed_noise(c_noise: np.ndarray, p: dict) -> Tensor:
    """Fourier features of ``c_noise`` (column), projected and activated."""
    freqs, phases = p["noise_fourier.freqs"], p["noise_fourier.phases"]
    c = Tensor(np.asarray(c_noise, dtype=freqs.value.dtype).reshape(-1, 1))
    arg = ad.add(ad.mul(c, freqs), phases)
    four = ad.scale(ad.cos(ad.scale(arg, 2 * np.pi)), np.sqrt(2.0))
    return mp_silu(mp_linear(four, p["noise_embed.mp_linear"]))


def middle_block(x: Tensor, emb: Tensor, p: dict, prefix: str) -> Tensor:
    if x.cols != emb.cols:
        raise ValueError(f"block width mismatch: {x.shape} vs {emb.shape}")
    c = ad.add_scalar(mp_linear(emb, p[prefix + ".emb_mp_linear"], p[prefix + ".emb_gain"]), 1.0)
    x = ad.normalize_rows(x, eps=NORM_EPS)
    res = mp_linear(mp_silu(x), p[prefix + ".x_pre_mp_linear"])
    res = mp_silu(ad.mul(res, c))
    res = mp_linear(res, p[prefix + ".x_post_mp_linear"])
    return mp_sum(x, res, MP_SUM_T)


def final_block(x: Tensor, emb: Tensor, p: dict) -> Tensor:
    c = ad.add_scalar(mp_linear(emb, p["final.emb_mp_linear"], p["final.emb_gain"]), 1.0)
    x = mp_linear(mp_silu(ad.normalize_rows(x, eps=NORM_EPS)), p["final.x_pre_mp_linear"])
    x = mp_silu(ad.mul(x, c))
    return mp_linear(x, p["final.x_post_mp_linear"], p["final.out_gain"])


def precond(sigma, sigma_data: float):
    """(c_skip, c_out, c_in, c_noise) for noise level(s) ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    sd2 = sigma_data**2
    c_skip = sd2 / (sigma**2 + sd2)
    c_out = sigma * sigma_data / np.sqrt(sigma**2 + sd2)
    c_in = 1.0 / np.sqrt(sigma**2 + sd2)
    c_noise = np.log(sigma) / 4
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data: float):
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


class DenoiserModel:
    """Denoiser parameters plus the forward pass.

    ``params`` is a flat vector (float32 unless converted with
    :meth:`astype`); ``grads`` is a same-shape buffer that traced forward
    passes accumulate into.
    """

    kind = "denoiser"

    def __init__(self, config: DenoiserConfig, params: np.ndarray | None = None, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.layout = denoiser_layout(config)
        self.offsets: dict[str, tuple[int, int]] = {}
        off = 0
        for name, shape in self.layout.items():
            n = int(np.prod(shape))
            self.offsets[name] = (off, n)
            off += n
        self.n_params = off
        if params is None:
            params = self._init_params(seed, dtype)
        params = np.ascontiguousarray(params)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params
        self.grads = np.zeros_like(params)

    @property
    def weight_segments(self) -> list[str]:
        return [n for n in self.layout if n.endswith("mp_linear")]

    def segment(self, name: str, buf: np.ndarray | None = None) -> np.ndarray:
        off, n = self.offsets[name]
        buf = self.params if buf is None else buf
        return buf[off:off + n].reshape(self.layout[name])

    def segments(self) -> dict[str, np.ndarray]:
        return {name: self.segment(name) for name in self.layout}

    def _init_params(self, seed: int, dtype) -> np.ndarray:
        rng = np.random.default_rng(seed)
        flat = np.empty(self.n_params, dtype=np.float64)
        for name, shape in self.layout.items():
            off, n = self.offsets[name]
            if name.endswith("mp_linear") or name == "noise_fourier.freqs":
                vals = rng.standard_normal(shape)
            elif name == "noise_fourier.phases":
                vals = rng.random(shape)
            elif name == "final.out_gain":
                vals = np.zeros(shape)
            else:
                vals = np.ones(shape)
            flat[off:off + n] = vals.ravel()
        params = flat.astype(dtype)
        self.params = params
        self.renormalize()
        return params

    def renormalize(self) -> None:
        """Force every weight row of every mp_linear to unit L2 norm."""
        for name in self.weight_segments:
            w = self.segment(name)
            norms = np.sqrt(np.einsum("ij,ij->i", w.astype(np.float64), w.astype(np.float64)))
            w /= np.maximum(norms, 1e-30)[:, None].astype(w.dtype)

    def astype(self, dtype) -> "DenoiserModel":
        return DenoiserModel(self.config, self.params.astype(dtype))

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.config, self.params.copy())

    def param_count(self) -> int:
        return self.n_params

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        out = {}
        for name in self.layout:
            grad = self.segment(name, self.grads) if requires_grad else None
            out[name] = Tensor(self.segment(name), requires_grad=requires_grad, grad=grad, name=name)
        return out

    def raw(self, x_in: np.ndarray, c_noise: np.ndarray, p: dict | None = None) -> Tensor:
        """The un-preconditioned network ``F``.

        ``c_noise`` is a column of length N, or of length 1 to share one noise
        level across the batch (the embedding is then computed once).
        """
        if p is None:
            p = self.tensors()
        cfg = self.config
        x_in = np.asarray(x_in)
        if x_in.ndim != 2 or x_in.shape[1] != cfg.d_in:
            raise ValueError(f"expected (N, {cfg.d_in}) input, got {x_in.shape}")
        emb = embed_noise(c_noise, p)
        h = embed_position(x_in, p, cfg.fourier_bands)
        for i in range(cfg.n_blocks):
            h = middle_block(h, emb, p, f"block{i}")
        return final_block(h, emb, p)

    def denoise(self, x: np.ndarray, sigma, chunk: int = 65536) -> np.ndarray:
        """D(x, sigma) in float64; ``sigma`` is a scalar or a length-N vector."""
        x = np.asarray(x, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        shared = sigma.size == 1
        sig = sigma.reshape(-1, 1)
        c_skip, c_out, c_in, c_noise = precond(sig, self.config.sigma_data)
        p = self.tensors()
        dtype = self.params.dtype
        out = np.empty_like(x)
        for s in range(0, len(x), chunk):
            e = min(s + chunk, len(x))
            sl = slice(0, 1) if shared else slice(s, e)
            xin = (c_in[sl] * x[s:e]).astype(dtype)
            f = self.raw(xin, c_noise[sl], p).value.astype(np.float64)
            out[s:e] = c_skip[sl] * x[s:e] + c_out[sl] * f
        return out

    __call__ = denoise
