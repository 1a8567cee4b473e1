"""Reverse-process samplers: ancestral, deterministic, and the eta-family.

All samplers walk a schedule view (full or respaced) from its largest retained
timestep down to its smallest. Noise is suppressed exactly on the last
executed step, and the eta=0 member of the eta-family consumes no randomness
at all after the initial draw, so its output is a pure function of x_T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import predict_eps
from .rng import stream
from .schedules import predict_x0

KINDS = ("ancestral", "deterministic", "ddim")
VARIANCE_CHOICES = ("posterior_small", "beta_large")


@dataclass
class SamplerConfig:
    """Which reverse rule to run and on which schedule view."""

    schedule: object = None
    kind: str = "ancestral"
    eta: float = 0.0
    variance_choice: str = "posterior_small"
    seed: int | None = None
    record_states: bool = False

    def validate(self):
        if self.schedule is None:
            raise ValueError("SamplerConfig.schedule must be set")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.variance_choice not in VARIANCE_CHOICES:
            raise ValueError(f"variance_choice must be one of {VARIANCE_CHOICES}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        return self


@dataclass
class SampleTrajectory:
    """Final states plus, optionally, the intermediate states of the walk."""

    final: np.ndarray
    start_t: int
    steps_executed: int
    states: list = field(default_factory=list)


def _position(steps: np.ndarray, t: int) -> int:
    i = int(np.searchsorted(steps, t))
    if i >= len(steps) or steps[i] != t:
        raise ValueError(f"timestep {t} is not part of the schedule view")
    return i


def _needs_rng(config: SamplerConfig) -> bool:
    if config.kind == "deterministic":
        return False
    if config.kind == "ddim" and config.eta == 0.0:
        return False
    return True


def reverse_step(model, x: np.ndarray, t: int, config: SamplerConfig, rng=None) -> np.ndarray:
    """One reverse update from view timestep t to the previous retained timestep."""
    view = config.schedule
    steps = view.steps
    i = _position(steps, int(t))
    last = i == 0
    x = np.asarray(x, dtype=np.float64)
    eps_hat = predict_eps(model, x, int(t), view)

    if config.kind in ("ancestral", "deterministic"):
        alpha = view.alphas[i]
        ab = view.alpha_bars[i]
        mean = (x - ((1.0 - alpha) / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
        if config.kind == "deterministic" or last:
            return mean
        var = view.posterior_vars[i] if config.variance_choice == "posterior_small" else view.betas[i]
        if rng is None:
            raise ValueError("ancestral sampling needs an rng")
        return mean + np.sqrt(var) * rng.standard_normal(x.shape)

    # eta-family: interpolates deterministic (eta=0) to ancestral-like (eta=1)
    ab = view.alpha_bars[i]
    ab_prev = view.alpha_bars_prev[i]
    sigma = config.eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
    x0_hat = predict_x0(x, eps_hat, int(t), view)
    coef = np.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    out = np.sqrt(ab_prev) * x0_hat + coef * eps_hat
    if sigma > 0.0 and not last:
        if rng is None:
            raise ValueError("eta > 0 sampling needs an rng")
        out = out + sigma * rng.standard_normal(x.shape)
    return out


def _resolve_rng(config: SamplerConfig, rng):
    if rng is not None:
        return rng
    if not _needs_rng(config) and config.seed is None:
        return None
    if config.seed is None:
        raise ValueError("pass an rng or set SamplerConfig.seed")
    return stream(config.seed, "sample")


def sample(model, n_samples: int, config: SamplerConfig, rng=None) -> SampleTrajectory:
    """Draw x_T from the standard normal prior and walk the full view down to data."""
    config.validate()
    rng = _resolve_rng(config, rng)
    if rng is None and config.seed is None and _needs_rng(config):
        raise ValueError("stochastic sampling needs an rng or seed")
    if rng is None:
        raise ValueError("sample() always needs randomness for the prior draw; pass rng or seed")
    steps = config.schedule.steps
    x = rng.standard_normal((n_samples, model.data_dim))
    traj = SampleTrajectory(final=x, start_t=int(steps[-1]), steps_executed=0)
    if config.record_states:
        traj.states.append((int(steps[-1]), x.copy()))
    for i in range(len(steps) - 1, -1, -1):
        t = int(steps[i])
        x = reverse_step(model, x, t, config, rng)
        traj.steps_executed += 1
        if config.record_states:
            t_next = int(steps[i - 1]) if i > 0 else 0
            traj.states.append((t_next, x.copy()))
    traj.final = x
    return traj


def reverse_from(model, x_t: np.ndarray, t: int, config: SamplerConfig, rng=None) -> SampleTrajectory:
    """Walk the reverse process starting from a given state at view timestep t.

    t = 0 returns the input unchanged (already clean data).
    """
    config.validate()
    x = np.asarray(x_t, dtype=np.float64).copy()
    traj = SampleTrajectory(final=x, start_t=int(t), steps_executed=0)
    if config.record_states:
        traj.states.append((int(t), x.copy()))
    if t == 0:
        return traj
    rng = _resolve_rng(config, rng)
    steps = config.schedule.steps
    start = _position(steps, int(t))
    for i in range(start, -1, -1):
        ti = int(steps[i])
        x = reverse_step(model, x, ti, config, rng)
        traj.steps_executed += 1
        if config.record_states:
            t_next = int(steps[i - 1]) if i > 0 else 0
            traj.states.append((t_next, x.copy()))
    traj.final = x
    return traj
