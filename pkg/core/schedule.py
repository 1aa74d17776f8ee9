"""Linear diffusion variance schedule and the closed-form forward process."""

from dataclasses import dataclass

import numpy as np

from core.errors import ShapeMismatchError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """beta, alpha and cumulative alpha tables for ``T_steps`` diffusion steps.

    Step indices are 0-based: ``alpha_bars[t]`` is the product of
    ``alphas[0..t]`` inclusive.
    """

    T_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for table in (self.betas, self.alphas, self.alpha_bars):
            table.setflags(write=False)

    def check_step(self, t: int) -> None:
        if not 0 <= t < self.T_steps:
            raise ValueError(f"diffusion step {t} outside [0, {self.T_steps})")


def build_linear_schedule(T_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Build a schedule with betas linearly spaced from beta_start to beta_end.

    Args:
        T_steps: Number of diffusion steps, at least 1
        beta_start: First beta, in (0, 1)
        beta_end: Last beta, in [beta_start, 1)

    Returns:
        The schedule; a single step uses beta_start

    Raises:
        ValueError: If T_steps < 1 or an endpoint lies outside (0, 1)
    """
    if T_steps < 1:
        raise ValueError(f"T_steps must be positive, got {T_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")

    if T_steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T_steps=T_steps, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_diffuse(schedule: NoiseSchedule, z0: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
    """Sample q(z_t | z_0) in closed form with the supplied noise.

    Returns sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * noise.
    """
    schedule.check_step(t)
    z0 = np.asarray(z0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if z0.shape != noise.shape:
        raise ShapeMismatchError(f"noise shape {noise.shape} != latent shape {z0.shape}")
    alpha_bar = schedule.alpha_bars[t]
    return np.sqrt(alpha_bar) * z0 + np.sqrt(1.0 - alpha_bar) * noise


def forward_step(schedule: NoiseSchedule, z_prev: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
    """One transition of q(z_t | z_{t-1}): scale by sqrt(1 - beta_t), add sqrt(beta_t) noise."""
    schedule.check_step(t)
    z_prev = np.asarray(z_prev, dtype=np.float64)
    if z_prev.shape != np.shape(noise):
        raise ShapeMismatchError(f"noise shape {np.shape(noise)} != latent shape {z_prev.shape}")
    beta = schedule.betas[t]
    return np.sqrt(1.0 - beta) * z_prev + np.sqrt(beta) * noise
