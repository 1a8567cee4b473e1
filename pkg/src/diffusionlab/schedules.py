"""Noise schedules and the forward (noising) process.

Timesteps are 1-indexed: t runs over 1..T and coefficient arrays store index
t-1. alpha_bar(0) is defined as 1 so that t=0 means clean data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

MIN_ALPHA_BAR = 1e-20


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noising coefficients for a T-step forward process."""

    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def steps(self) -> np.ndarray:
        """Timesteps of the (full) view, ascending."""
        return np.arange(1, self.T + 1)

    @property
    def alpha_bars_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    def alpha_bar(self, t):
        """alpha_bar at timestep t (scalar or array), with alpha_bar(0) = 1."""
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 0..{self.T}: {t}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        out = padded[t]
        return float(out) if t.ndim == 0 else out


@dataclass(frozen=True)
class RespacedSchedule:
    """An evenly spaced subsequence of a parent schedule's timesteps.

    The effective coefficients treat consecutive retained steps as single
    compound noising steps, so a sampler can walk steps[::-1] exactly as it
    would walk T..1 on the parent.
    """

    parent: NoiseSchedule
    steps: np.ndarray
    effective_betas: np.ndarray
    effective_alphas: np.ndarray
    effective_alpha_bars: np.ndarray
    effective_posterior_vars: np.ndarray

    # Uniform accessors so samplers can treat both schedule types alike.
    @property
    def betas(self) -> np.ndarray:
        return self.effective_betas

    @property
    def alphas(self) -> np.ndarray:
        return self.effective_alphas

    @property
    def alpha_bars(self) -> np.ndarray:
        return self.effective_alpha_bars

    @property
    def posterior_vars(self) -> np.ndarray:
        return self.effective_posterior_vars

    @property
    def alpha_bars_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.effective_alpha_bars[:-1]])

    @property
    def T(self) -> int:
        """Length of the parent process this view was cut from."""
        return self.parent.T

    def alpha_bar(self, t):
        return self.parent.alpha_bar(t)


def _posterior_vars(betas: np.ndarray, alpha_bars: np.ndarray) -> np.ndarray:
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    return (1.0 - prev) / (1.0 - alpha_bars) * betas


def _build(kind: str, betas: np.ndarray) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) < 1:
        raise ValueError("betas must be a nonempty 1-D array")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("betas must lie strictly inside (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        kind=kind,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=_posterior_vars(betas, alpha_bars),
    )


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Betas linearly spaced from beta_start to beta_end over T steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return _build("linear", np.linspace(beta_start, beta_end, T, dtype=np.float64))


def make_cosine_schedule(T: int, s: float = 0.008, beta_clip: float = 0.999) -> NoiseSchedule:
    """Squared-cosine alpha_bar profile with betas clipped at beta_clip."""
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1 + s)) * np.pi / 2) ** 2
    alpha_bar = f / f[0]
    betas = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    return _build("cosine", np.clip(betas, 1e-8, beta_clip))


def respace(schedule: NoiseSchedule, num_steps: int) -> RespacedSchedule:
    """Keep num_steps evenly spaced timesteps of `schedule`, always ending at T.

    Retained steps are ceil(i * T / num_steps) for i = 1..num_steps. When two
    retained steps are adjacent in the parent the parent beta is reused
    directly, so respacing to the full length reproduces the parent tables
    bit for bit.
    """
    if isinstance(schedule, RespacedSchedule):
        raise ValueError("cannot respace an already respaced schedule; respace the parent")
    T = schedule.T
    if not (1 <= num_steps <= T):
        raise ValueError(f"num_steps must be in 1..{T}, got {num_steps}")
    steps = np.array([((i + 1) * T + num_steps - 1) // num_steps for i in range(num_steps)], dtype=np.int64)

    eff_alpha_bars = schedule.alpha_bars[steps - 1]
    eff_betas = np.empty(num_steps, dtype=np.float64)
    prev_t = 0
    prev_ab = 1.0
    for i, t in enumerate(steps):
        if t == prev_t + 1:
            eff_betas[i] = schedule.betas[t - 1]
        else:
            eff_betas[i] = 1.0 - eff_alpha_bars[i] / prev_ab
        prev_t = int(t)
        prev_ab = eff_alpha_bars[i]
    eff_alphas = 1.0 - eff_betas
    return RespacedSchedule(
        parent=schedule,
        steps=steps,
        effective_betas=eff_betas,
        effective_alphas=eff_alphas,
        effective_alpha_bars=eff_alpha_bars,
        effective_posterior_vars=_posterior_vars(eff_betas, eff_alpha_bars),
    )


# -- forward process -----------------------------------------------------------


def _per_sample(values, x: np.ndarray):
    """Reshape per-sample coefficients for broadcasting against x."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 0:
        return float(v)
    if v.shape[0] != x.shape[0]:
        raise ValueError(f"per-sample coefficient length {v.shape[0]} != batch {x.shape[0]}")
    return v.reshape((x.shape[0],) + (1,) * (x.ndim - 1))


def _check_t(t, T: int):
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > T):
        raise ValueError(f"timestep out of range 1..{T}")
    return t


def forward_step(x_prev: np.ndarray, t, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One forward noising step: x_t given x_{t-1}."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    t = _check_t(t, schedule.T)
    beta = schedule.betas[t - 1]
    b = _per_sample(beta, x_prev)
    z = rng.standard_normal(x_prev.shape)
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * z


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule) -> np.ndarray:
    """Closed-form draw x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = _check_t(t, schedule.T)
    ab = _per_sample(schedule.alpha_bar(t), x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_sample_perturbed(x0, t, eps, xi, gamma: float, schedule) -> np.ndarray:
    """Forward draw with perturbed input noise: eps + gamma * xi in place of eps.

    gamma == 0 short-circuits to q_sample so the arithmetic (not just the
    distribution) matches the unperturbed draw exactly.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if gamma == 0.0:
        return q_sample(x0, t, eps, schedule)
    xi = np.asarray(xi, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if xi.shape != eps.shape:
        raise ValueError(f"xi shape {xi.shape} != eps shape {eps.shape}")
    return q_sample(x0, t, eps + gamma * xi, schedule)


def q_sample_scaled(x0, t, eps, gamma: float, schedule) -> np.ndarray:
    """Forward draw with variance-matched scaling sqrt(1 + gamma^2) * eps.

    Same marginal variance as the perturbed draw, but the scaled noise is also
    the regression target, which is what makes it behave differently.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    eps = np.asarray(eps, dtype=np.float64)
    return q_sample(x0, t, np.sqrt(1.0 + gamma * gamma) * eps, schedule)


def predict_x0(xt: np.ndarray, eps_hat: np.ndarray, t, schedule, min_alpha_bar: float = MIN_ALPHA_BAR) -> np.ndarray:
    """Invert the closed-form draw: x0_hat = (x_t - sqrt(1 - ab) eps_hat) / sqrt(ab)."""
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    t = _check_t(t, schedule.T)
    ab = schedule.alpha_bar(t)
    if np.any(np.asarray(ab) < min_alpha_bar):
        raise NumericError(f"alpha_bar at t={t} below {min_alpha_bar}; x0 reconstruction is degenerate")
    ab = _per_sample(ab, xt)
    return (xt - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


@dataclass
class ForwardDraw:
    """One training draw from the forward process."""

    x0: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    xt: np.ndarray
    xi: np.ndarray | None = None


def write_schedule_table(schedule, path):
    """Dump the schedule's per-step coefficients as CSV with full precision."""
    steps = schedule.steps
    with open(path, "w") as f:
        f.write("t,beta,alpha,alpha_bar,posterior_var\n")
        for i, t in enumerate(steps):
            f.write(
                f"{int(t)},{schedule.betas[i]:.17g},{schedule.alphas[i]:.17g},"
                f"{schedule.alpha_bars[i]:.17g},{schedule.posterior_vars[i]:.17g}\n"
            )
