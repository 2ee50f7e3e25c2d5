"""Probability-flow ODE solvers: noise -> surface (forward) and surface -> noise (inverse).

The ODE is ``dx/dt = (x - D(x, t)) / t``.  ``denoiser`` below is any callable
``D(x, t) -> array`` with ``x`` of shape (N, d) and scalar ``t``; a
:class:`~geodist.denoiser.DenoiserModel` qualifies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

INVERSE_T_END = 1e-8
CHUNK = 65536

Denoiser = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: np.ndarray  # t_0 > t_1 > ... > t_N
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0

    @property
    def n_steps(self) -> int:
        return len(self.timesteps) - 1

    def inverse(self, t_end: float = INVERSE_T_END) -> "NoiseSchedule":
        """Same nodes with ``t_N`` lifted from 0 so inversion can start there."""
        t = self.timesteps.copy()
        if t[-1] == 0:
            t[-1] = t_end
        return NoiseSchedule(t, self.sigma_min, self.sigma_max, self.rho)


def karras_schedule(n: int, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0) -> NoiseSchedule:
    """``n`` steps of the rho-warped schedule from ``sigma_max`` to ``sigma_min``, then 0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 < sigma_min < sigma_max:
        raise ValueError("need 0 < sigma_min < sigma_max")
    if not rho > 0:
        raise ValueError("rho must be positive")
    if n == 1:
        t = np.array([sigma_max])
    else:
        frac = np.arange(n) / (n - 1)
        t = (sigma_max ** (1 / rho) + frac * (sigma_min ** (1 / rho) - sigma_max ** (1 / rho))) ** rho
    return NoiseSchedule(np.append(t, 0.0), sigma_min, sigma_max, rho)


@dataclass
class Trajectory:
    """Snapshots ``(step index, t, points)`` in the order they were produced."""

    frames: list[tuple[int, float, np.ndarray]] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def indices(self) -> list[int]:
        return [f[0] for f in self.frames]

    def at(self, index: int) -> np.ndarray:
        for i, _, pts in self.frames:
            if i == index:
                return pts
        raise KeyError(index)


def initial_noise(n: int, d: int, kind: str = "gaussian", seed=0) -> np.ndarray:
    """Zero-mean unit-variance noise, Gaussian or rescaled uniform."""
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        return rng.standard_normal((n, d))
    if kind == "uniform":
        return (rng.random((n, d)) - 0.5) / np.sqrt(1 / 12)
    raise ValueError(f"unknown init kind {kind!r}")


def _drift(denoiser: Denoiser, x: np.ndarray, t: float) -> np.ndarray:
    out = np.empty_like(x)
    for s in range(0, len(x), CHUNK):
        xs = x[s:s + CHUNK]
        out[s:s + CHUNK] = (xs - denoiser(xs, t)) / t
    return out


def solve(denoiser: Denoiser, x: np.ndarray, timesteps: np.ndarray, solver: str = "euler",
          record: Iterable[int] = (), index_of: Callable[[int], int] = lambda k: k,
          ) -> tuple[np.ndarray, Trajectory, int]:
    """Integrate from ``timesteps[0]`` through each following node.

    Returns (final state, trajectory, number of denoiser calls).  ``index_of``
    maps the position along ``timesteps`` to the recorded step index.
    """
    if solver not in ("euler", "heun"):
        raise ValueError(f"unknown solver {solver!r}")
    record = set(record)
    traj = Trajectory()
    x = np.array(x, dtype=np.float64, copy=True)
    if index_of(0) in record:
        traj.frames.append((index_of(0), float(timesteps[0]), x.copy()))
    calls = 0
    for k in range(len(timesteps) - 1):
        t_cur, t_next = float(timesteps[k]), float(timesteps[k + 1])
        d = _drift(denoiser, x, t_cur)
        calls += 1
        x_next = x + (t_next - t_cur) * d
        if solver == "heun" and t_next != 0:
            d2 = _drift(denoiser, x_next, t_next)
            calls += 1
            x_next = x + (t_next - t_cur) * (0.5 * d + 0.5 * d2)
        x = x_next
        if index_of(k + 1) in record:
            traj.frames.append((index_of(k + 1), t_next, x.copy()))
    return x, traj, calls


def _check_dims(denoiser, d: int) -> None:
    cfg = getattr(denoiser, "config", None)
    d_in = getattr(cfg, "d_in", None)
    if d_in is not None and d_in != d:
        raise ValueError(f"model expects {d_in} channels, got {d}")


def _model_dim(denoiser, default: int = 3) -> int:
    cfg = getattr(denoiser, "config", None)
    return getattr(cfg, "d_in", default)


def sample_forward(denoiser: Denoiser, n_points: int, schedule: NoiseSchedule, init: str = "gaussian",
                   seed=0, record: Iterable[int] = (), solver: str = "euler", d: int | None = None,
                   noise: np.ndarray | None = None) -> tuple[np.ndarray, Trajectory]:
    """Generate points: ``x_0 = t_0 * n`` then step the ODE down to ``t_N``.

    ``noise`` overrides the drawn initial noise (used to forward inverted points).
    """
    d = d or _model_dim(denoiser)
    if noise is None:
        noise = initial_noise(n_points, d, init, seed)
    _check_dims(denoiser, noise.shape[1])
    t = schedule.timesteps
    x, traj, _ = solve(denoiser, t[0] * noise, t, solver, record)
    return x, traj


def sample_forward_euler(denoiser, n_points, schedule, init="gaussian", seed=0, record=()):
    return sample_forward(denoiser, n_points, schedule, init, seed, record, solver="euler")


def sample_forward_heun(denoiser, n_points, schedule, init="gaussian", seed=0, record=()):
    return sample_forward(denoiser, n_points, schedule, init, seed, record, solver="heun")


def invert_raw(denoiser: Denoiser, points: np.ndarray, schedule: NoiseSchedule, record: Iterable[int] = (),
               solver: str = "euler") -> tuple[np.ndarray, Trajectory]:
    """Run the ODE from ``t_N`` (lifted to 1e-8) up to ``t_0``; returns the unnormalized ``x_0``."""
    points = np.asarray(points, dtype=np.float64)
    _check_dims(denoiser, points.shape[1])
    t = schedule.inverse().timesteps
    n = len(t) - 1
    x, traj, _ = solve(denoiser, points, t[::-1], solver, record, index_of=lambda k: n - k)
    return x, traj


def sample_inverse(denoiser: Denoiser, surface_points: np.ndarray, schedule: NoiseSchedule,
                   record: Iterable[int] = (), solver: str = "euler") -> tuple[np.ndarray, Trajectory]:
    """Map surface points to noise space: invert, then divide by ``sqrt(1 + t_0^2)``."""
    x0, traj = invert_raw(denoiser, surface_points, schedule, record, solver)
    return x0 / np.sqrt(1.0 + schedule.timesteps[0] ** 2), traj


def roundtrip(denoiser: Denoiser, points: np.ndarray, n_steps: int, solver: str = "euler",
              sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0) -> np.ndarray:
    """Invert then forward with the same schedule; rows stay in correspondence."""
    sched = karras_schedule(n_steps, sigma_min, sigma_max, rho)
    x0, _ = invert_raw(denoiser, points, sched, solver=solver)
    x, _, _ = solve(denoiser, x0, sched.timesteps, solver)
    return x


def roundtrip_mse(denoiser: Denoiser, points: np.ndarray, n_steps: int, solver: str = "euler", **sched) -> float:
    """Mean over points of the squared L2 error of inverse-then-forward."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return 0.0
    back = roundtrip(denoiser, points, n_steps, solver, **sched)
    return float(np.mean(np.sum((back - points) ** 2, axis=1)))
