"""Noise schedules and the elementary diffusion steps.

Discrete-time convention: timesteps are indexed 1..T, with the product
``alpha_bar_t = prod_{s<=t} (1 - beta_s)`` and ``alpha_bar_0 = 1``.  The
forward marginal is

    q(z_t | z_0) = N(sqrt(alpha_bar_t) z_0, (1 - alpha_bar_t) I)

and one reverse step is the learned-Gaussian transition whose mean is the
usual epsilon-parameterized expression.  Schedules are immutable float64
tables; all stochastic operations draw from a caller-supplied
``torch.Generator`` so determinism is the caller's contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

__all__ = [
    "NoiseSchedule",
    "Timeline",
    "make_linear_schedule",
    "q_sample",
    "iterative_diffuse",
    "ddpm_step",
    "respace",
    "build_timeline",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-step noise tables.

    ``timesteps`` carries the identity of each position in some parent
    schedule (1-based).  For a freshly built schedule it is simply
    ``1..T``; after :func:`respace` it records which original steps were
    kept, which is what downstream timestep embeddings should consume.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(default=None)  # type: ignore[assignment]
    alpha_bars: np.ndarray = field(default=None)  # type: ignore[assignment]
    timesteps: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas if self.alphas is None else np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", alphas)
        if self.alpha_bars is None:
            object.__setattr__(self, "alpha_bars", np.cumprod(alphas))
        else:
            object.__setattr__(self, "alpha_bars", np.asarray(self.alpha_bars, dtype=np.float64))
        if self.timesteps is None:
            object.__setattr__(self, "timesteps", np.arange(1, len(betas) + 1, dtype=np.int64))
        else:
            object.__setattr__(self, "timesteps", np.asarray(self.timesteps, dtype=np.int64))
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("all betas must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bars[0] >= 1.0 or self.alpha_bars[-1] <= 0.0:
            raise ValueError("alpha_bar must stay in (0, 1)")

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at position ``t`` in 0..T, with alpha_bar(0) == 1."""
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> int:
        if not isinstance(t, (int, np.integer)):
            raise TypeError(f"timestep must be an integer, got {type(t).__name__}")
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [1, {self.T}]")
        return int(t)


@dataclass(frozen=True)
class Timeline:
    """The global coarse-to-fine ordering of denoiser invocations.

    ``step_map`` enumerates (level, timestep) pairs: level N first (all of
    its timesteps, descending), then N-1, down to level 1.  Timesteps are
    identities from the parent schedule (see ``NoiseSchedule.timesteps``).
    """

    N: int
    T_infer: int
    step_map: tuple

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("need at least one level")
        if len(self.step_map) != self.N * self.T_infer:
            raise ValueError("step_map length must be N * T_infer")
        object.__setattr__(self, "step_map", tuple((int(n), int(t)) for n, t in self.step_map))

    def level_block(self, n: int) -> tuple:
        return tuple(p for p in self.step_map if p[0] == n)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linearly interpolated betas from ``beta_start`` to ``beta_end`` inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return NoiseSchedule(betas=np.linspace(beta_start, beta_end, T, dtype=np.float64))


def q_sample(z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward corruption: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    t = sched._check_t(t)
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    ab = sched.alpha_bar(t)
    return float(np.sqrt(ab)) * z0 + float(np.sqrt(1.0 - ab)) * eps


def iterative_diffuse(
    z0: torch.Tensor, t: int, sched: NoiseSchedule, generator: torch.Generator
) -> torch.Tensor:
    """The t-step Markov corruption chain, one fresh noise draw per step.

    Marginally equivalent to :func:`q_sample`; kept as the independent
    route for consistency checks.
    """
    t = sched._check_t(t)
    z = z0
    for s in range(1, t + 1):
        xi = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
        beta = float(sched.betas[s - 1])
        z = np.sqrt(1.0 - beta) * z + np.sqrt(beta) * xi
    return z


def ddpm_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    xi: torch.Tensor,
    variance: str = "posterior",
) -> torch.Tensor:
    """One stochastic reverse step from position t to t-1.

    Mean is (1/sqrt(alpha_t)) (z_t - beta_t/sqrt(1-ab_t) eps_hat).  The
    step noise scale is the posterior variance
    ``beta_t (1-ab_{t-1})/(1-ab_t)`` by default, or plain ``beta_t`` with
    ``variance="beta"``.  At t == 1 the step is deterministic.
    """
    t = sched._check_t(t)
    if eps_hat.shape != z_t.shape or xi.shape != z_t.shape:
        raise ValueError("z_t, eps_hat and xi must share a shape")
    alpha = float(sched.alphas[t - 1])
    beta = float(sched.betas[t - 1])
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t - 1)
    mean = (z_t - (beta / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean
    if variance == "posterior":
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    elif variance == "beta":
        var = beta
    else:
        raise ValueError(f"unknown variance mode {variance!r}")
    return mean + float(np.sqrt(var)) * xi


def _kept_steps(T: int, T_infer: int) -> np.ndarray:
    """Uniform-stride positions in 1..T of length T_infer, always ending at T."""
    stride = T / T_infer
    kept = np.round(stride * np.arange(1, T_infer + 1)).astype(np.int64)
    kept[-1] = T
    if np.any(np.diff(kept) <= 0):
        raise ValueError(f"cannot respace T={T} to {T_infer} distinct steps")
    return kept


def respace(sched: NoiseSchedule, T_infer: int) -> NoiseSchedule:
    """Keep a uniform-stride subsequence of steps, preserving alpha_bar exactly.

    The kept alpha_bar values are copied bitwise; effective betas are
    recomputed from consecutive ratios so the subsequence is itself a
    valid schedule.
    """
    if not isinstance(T_infer, (int, np.integer)) or not 1 <= T_infer <= sched.T:
        raise ValueError(f"T_infer must be in [1, {sched.T}], got {T_infer!r}")
    if T_infer == sched.T:
        return sched
    kept = _kept_steps(sched.T, int(T_infer))
    ab = sched.alpha_bars[kept - 1].copy()
    prev = np.concatenate(([1.0], ab[:-1]))
    betas = 1.0 - ab / prev
    return NoiseSchedule(
        betas=betas,
        alphas=1.0 - betas,
        alpha_bars=ab,
        timesteps=sched.timesteps[kept - 1].copy(),
    )


def build_timeline(N: int, T_infer: int, sched: NoiseSchedule) -> Timeline:
    """Enumerate the coarse-to-fine step order: level N down to 1, t descending."""
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ValueError(f"N must be a positive integer, got {N!r}")
    sub = respace(sched, T_infer)
    per_level = [int(t) for t in sub.timesteps[::-1]]
    step_map = tuple((n, t) for n in range(N, 0, -1) for t in per_level)
    return Timeline(N=int(N), T_infer=int(T_infer), step_map=step_map)
