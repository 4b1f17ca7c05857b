"""Shared denoising-diffusion machinery: schedules, corruption, reverse steps.

All functions are pure over an immutable :class:`NoiseSchedule`.  Tables are
kept in float64; step indices are 1-based (``s`` in ``1..S``) with the
convention ``alpha_bar[0] = 1``, which makes the final reverse step (s=1)
noiseless because its posterior variance is exactly zero.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    beta: np.ndarray        # shape (S,), beta[s-1] is the step-s value
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative product of alpha
    posterior_var: np.ndarray  # beta~, with beta~[0] == 0

    def beta_at(self, s: int) -> float:
        self._check_step(s)
        return float(self.beta[s - 1])

    def alpha_at(self, s: int) -> float:
        self._check_step(s)
        return float(self.alpha[s - 1])

    def alpha_bar_at(self, s: int) -> float:
        """alpha_bar with the boundary convention alpha_bar(0) = 1."""
        if s == 0:
            return 1.0
        self._check_step(s)
        return float(self.alpha_bar[s - 1])

    def posterior_var_at(self, s: int) -> float:
        self._check_step(s)
        return float(self.posterior_var[s - 1])

    def _check_step(self, s: int) -> None:
        if not 1 <= s <= self.steps:
            raise DomainError(f"step {s} outside [1, {self.steps}]")


def build_linear_schedule(steps: int, beta_start: float, beta_end: float
                          ) -> NoiseSchedule:
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if steps == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    posterior_var = (1.0 - prev) / (1.0 - alpha_bar) * beta
    sched = NoiseSchedule(steps, beta, alpha, alpha_bar, posterior_var)
    if not np.all(np.diff(alpha_bar) < 0) and steps > 1:
        raise ConfigError("alpha_bar is not strictly decreasing")
    return sched


def schedule_from_config(cfg) -> NoiseSchedule:
    return build_linear_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)


def alpha_bar_continuous(schedule: NoiseSchedule, u: float) -> float:
    """Log-linear interpolation of alpha_bar at fractional step u*S.

    Exact at grid points u = s/S; u must lie in (0, 1].
    """
    if not 0.0 < u <= 1.0:
        raise DomainError(f"continuous time {u} outside (0, 1]")
    x = u * schedule.steps
    lo = int(np.floor(x))
    hi = min(lo + 1, schedule.steps)
    if lo == x or lo == schedule.steps:
        return schedule.alpha_bar_at(lo)
    frac = x - lo
    log_lo = np.log(schedule.alpha_bar_at(lo))
    log_hi = np.log(schedule.alpha_bar_at(hi))
    return float(np.exp((1.0 - frac) * log_lo + frac * log_hi))


def _resolve_alpha_bar(schedule: NoiseSchedule, s=None, u=None) -> float:
    if (s is None) == (u is None):
        raise DomainError("specify exactly one of step s or continuous time u")
    if s is not None:
        return schedule.alpha_bar_at(int(s))
    return alpha_bar_continuous(schedule, float(u))


def forward_sample(schedule: NoiseSchedule, z0, eps, s=None, u=None):
    """Corrupt z0 to the given time: sqrt(ab)*z0 + sqrt(1-ab)*eps."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} != signal shape {z0.shape}")
    ab = _resolve_alpha_bar(schedule, s=s, u=u)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def reverse_step(schedule: NoiseSchedule, z_s, eps_hat, s: int, eta):
    """One ancestral step s -> s-1 given the predicted noise.

    Returns mu + sqrt(posterior_var)*eta; at s=1 the variance is exactly 0,
    so the output is the deterministic mean.
    """
    mu = posterior_mean_from_eps(schedule, z_s, eps_hat, s)
    var = schedule.posterior_var_at(s)
    if var == 0.0:
        return mu
    return mu + np.sqrt(var) * np.asarray(eta)


def posterior_mean_from_eps(schedule: NoiseSchedule, z_s, eps_hat, s: int):
    z_s = np.asarray(z_s)
    eps_hat = np.asarray(eps_hat)
    if z_s.shape != eps_hat.shape:
        raise ShapeError(f"eps shape {eps_hat.shape} != state shape {z_s.shape}")
    a = schedule.alpha_at(s)
    b = schedule.beta_at(s)
    ab = schedule.alpha_bar_at(s)
    return (z_s - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


def reverse_step_between(schedule: NoiseSchedule, z_hi, eps_hat, s_hi: int,
                         s_lo: int, eta):
    """Generalized ancestral step s_hi -> s_lo for strided sampling.

    Uses the effective beta = 1 - ab(s_hi)/ab(s_lo); with s_lo = s_hi - 1 this
    reduces to :func:`reverse_step`, and with s_lo = 0 the step is noiseless.
    """
    if not 0 <= s_lo < s_hi <= schedule.steps:
        raise DomainError(f"invalid stride pair ({s_hi}, {s_lo})")
    z_hi = np.asarray(z_hi)
    eps_hat = np.asarray(eps_hat)
    ab_hi = schedule.alpha_bar_at(s_hi)
    ab_lo = schedule.alpha_bar_at(s_lo)
    a_eff = ab_hi / ab_lo
    b_eff = 1.0 - a_eff
    mu = (z_hi - b_eff / np.sqrt(1.0 - ab_hi) * eps_hat) / np.sqrt(a_eff)
    var = (1.0 - ab_lo) / (1.0 - ab_hi) * b_eff
    if var <= 0.0:
        return mu
    return mu + np.sqrt(var) * np.asarray(eta)


def strided_step_pairs(steps: int, stride: int) -> list[tuple[int, int]]:
    """Descending (s_hi, s_lo) transitions covering S..0 every ``stride``."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    points = list(range(steps, 0, -stride))
    if points[-1] != 0:
        points.append(0)
    return list(zip(points[:-1], points[1:]))


def training_pair(schedule: NoiseSchedule, z0, rng: np.random.Generator,
                  continuous: bool = True):
    """Draw (z_t, eps, time) for one regression target.

    Time is uniform: continuous u in (0, 1] by default, else an integer step.
    The exact eps used for corruption is returned as the target.
    """
    z0 = np.asarray(z0)
    eps = rng.standard_normal(size=z0.shape)
    if continuous:
        t = 1.0 - rng.uniform()  # uniform over (0, 1]
        return forward_sample(schedule, z0, eps, u=t), eps, t
    s = int(rng.integers(1, schedule.steps + 1))
    return forward_sample(schedule, z0, eps, s=s), eps, s


def schedule_csv(schedule: NoiseSchedule) -> str:
    """CSV dump: s, beta, alpha, alpha_bar, posterior_var."""
    buf = io.StringIO()
    buf.write("s,beta,alpha,alpha_bar,posterior_var\n")
    for s in range(1, schedule.steps + 1):
        buf.write(
            f"{s},{schedule.beta_at(s)!r},{schedule.alpha_at(s)!r},"
            f"{schedule.alpha_bar_at(s)!r},{schedule.posterior_var_at(s)!r}\n"
        )
    return buf.getvalue()
