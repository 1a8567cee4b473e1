"""Training loop, loss variants, Adam with bias correction, and EMA tracking.

The loss variants share one batch-drawing routine and pull every noise source
from its own named stream, so variants that differ only by an extra draw or a
zeroed coefficient produce bit-identical parameter trajectories when their
extra term is switched off.
"""

from __future__ import annotations

import os
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import NumericError
from .models import MlpEps, init_mlp, save_checkpoint
from .rng import stream
from .schedules import q_sample, q_sample_perturbed, q_sample_scaled
from .tensor import Tensor

MODES = ("standard", "ip", "ddpm_y", "gp", "wd")


@dataclass
class TrainConfig:
    """Knobs for one training run. Defaults follow the reference recipe."""

    mode: str = "standard"
    total_iters: int = 1000
    batch_size: int = 128
    lr: float = 1e-4
    gamma: float = 0.1
    lambda_gp: float = 1e-6
    lambda_wd: float = 0.03
    ema_rate: float = 0.9999
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    gp_probes: int | None = None
    log_every: int = 1
    checkpoint_every: int = 0
    history_len: int = 200

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.lambda_gp < 0 or self.lambda_wd < 0 or self.weight_decay < 0:
            raise ValueError("penalty coefficients must be >= 0")
        if not (0.0 <= self.ema_rate < 1.0):
            raise ValueError("ema_rate must lie in [0, 1)")
        return self


@dataclass
class TrainRngs:
    """Independent draw streams used inside the loop."""

    data: np.random.Generator
    t: np.random.Generator
    eps: np.random.Generator
    xi: np.random.Generator

    @classmethod
    def from_seed(cls, master_seed: int) -> "TrainRngs":
        return cls(
            data=stream(master_seed, "data"),
            t=stream(master_seed, "t"),
            eps=stream(master_seed, "eps"),
            xi=stream(master_seed, "xi"),
        )


# -- losses ------------------------------------------------------------------


def _base_loss(model, t, noisy_input, target) -> Tensor:
    eps_hat = model.forward(Tensor(noisy_input.astype(model.dtype)), t)
    diff = tz.sub(Tensor(target.astype(model.dtype)), eps_hat)
    return tz.tmean(tz.square(diff))


def loss_standard(model, x0, t, eps, schedule) -> Tensor:
    """Mean squared noise-prediction error over batch and coordinates."""
    xt = q_sample(x0, t, eps, schedule)
    return _base_loss(model, t, xt, eps)


def loss_ip(model, x0, t, eps, xi, gamma, schedule) -> Tensor:
    """Input perturbation: the network sees eps + gamma*xi, the target stays eps.

    The asymmetry is the point: the input carries extra noise the target does
    not explain, which at gamma=0 reduces exactly to the standard loss.
    """
    yt = q_sample_perturbed(x0, t, eps, xi, gamma, schedule)
    return _base_loss(model, t, yt, eps)


def loss_ddpm_y(model, x0, t, eps, gamma, schedule) -> Tensor:
    """Variance-matched ablation: input noise scaled by sqrt(1+gamma^2), target scaled too.

    Input and target stay consistent, so this only stretches the noise scale;
    it is the control showing the asymmetric perturbation is what matters.
    """
    scaled = np.sqrt(1.0 + gamma * gamma) * np.asarray(eps, dtype=np.float64)
    yt = q_sample_scaled(x0, t, eps, gamma, schedule)
    return _base_loss(model, t, yt, scaled)


def loss_gp(model, x0, t, eps, schedule, lambda_gp, n_probes=None, probe_rng=None) -> Tensor:
    """Standard loss plus a squared-Frobenius penalty on d eps_hat / d x_t."""
    xt = q_sample(x0, t, eps, schedule)
    base = _base_loss(model, t, xt, eps)
    if lambda_gp == 0.0:
        return base
    penalty = tz.jacobian_frobenius_sq(
        lambda z: model.forward(z, t),
        Tensor(xt.astype(model.dtype)),
        n_probes=n_probes,
        rng=probe_rng,
    )
    return tz.add(base, tz.mul(penalty, float(lambda_gp)))


def loss_wd(model, x0, t, eps, schedule, lambda_wd) -> Tensor:
    """Standard loss plus lambda * sum of squared weight-matrix entries.

    Biases are excluded: the penalty exists to shrink the layer operator
    norms, which biases do not affect.
    """
    xt = q_sample(x0, t, eps, schedule)
    base = _base_loss(model, t, xt, eps)
    if lambda_wd == 0.0:
        return base
    penalty = None
    for w in model.weights:
        term = tz.tsum(tz.square(w))
        penalty = term if penalty is None else tz.add(penalty, term)
    return tz.add(base, tz.mul(penalty, float(lambda_wd)))


def compute_loss(model, x0, t, eps, xi, config: TrainConfig, schedule, probe_rng=None) -> Tensor:
    """Dispatch on config.mode with a uniform argument set."""
    if config.mode == "standard":
        return loss_standard(model, x0, t, eps, schedule)
    if config.mode == "ip":
        return loss_ip(model, x0, t, eps, xi, config.gamma, schedule)
    if config.mode == "ddpm_y":
        return loss_ddpm_y(model, x0, t, eps, config.gamma, schedule)
    if config.mode == "gp":
        return loss_gp(model, x0, t, eps, schedule, config.lambda_gp, config.gp_probes, probe_rng)
    if config.mode == "wd":
        return loss_wd(model, x0, t, eps, schedule, config.lambda_wd)
    raise ValueError(f"unknown mode {config.mode!r}")


# -- optimizer and EMA ----------------------------------------------------------


@dataclass
class TrainerState:
    """Everything the loop mutates: model, moments, EMA shadow, counters."""

    model: MlpEps
    config: TrainConfig
    schedule: object
    rngs: TrainRngs
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    ema: list = field(default_factory=list)
    iteration: int = 0
    loss_history: deque = field(default_factory=deque)

    @classmethod
    def fresh(cls, model, config, schedule) -> "TrainerState":
        params = model.parameters()
        return cls(
            model=model,
            config=config,
            schedule=schedule,
            rngs=TrainRngs.from_seed(config.seed),
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            ema=[p.data.copy() for p in params],
            loss_history=deque(maxlen=config.history_len),
        )

    def ema_model(self) -> MlpEps:
        """A copy of the model carrying the EMA parameters."""
        model = self.model
        n = len(model.weights)
        ws = [Tensor(self.ema[2 * i].copy(), requires_grad=True) for i in range(n)]
        bs = [Tensor(self.ema[2 * i + 1].copy(), requires_grad=True) for i in range(n)]
        return MlpEps(model.layer_sizes, model.time_embedding, ws, bs, model.dtype)


def optimizer_step(state: TrainerState, grads) -> float:
    """Adam update with bias correction; returns the global gradient norm.

    Weight decay, when nonzero, is applied decoupled from the moments
    (subtracted directly from the parameters), so it never leaks into the
    adaptive scaling.
    """
    cfg = state.config
    params = state.model.parameters()
    if len(grads) != len(params):
        raise ValueError("grads length does not match parameter count")
    it = state.iteration + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    sq_total = 0.0
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            raise NumericError(f"missing gradient at iteration {it}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at iteration {it} (shape {g.shape})")
        sq_total += float(np.sum(g.astype(np.float64) ** 2))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**it)
        v_hat = v / (1 - b2**it)
        update = cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if cfg.weight_decay > 0:
            update = update + cfg.lr * cfg.weight_decay * p.data
        p.data = p.data - update.astype(p.data.dtype)
    state.iteration = it
    return float(np.sqrt(sq_total))


def ema_update(state: TrainerState):
    """shadow <- rate * shadow + (1 - rate) * param, in the shadow's dtype."""
    rate = state.config.ema_rate
    for shadow, p in zip(state.ema, state.model.parameters()):
        shadow *= rate
        shadow += (1 - rate) * p.data


def weight_frobenius(model: MlpEps) -> float:
    """sqrt of the summed squared weight-matrix entries (biases excluded)."""
    total = sum(float(np.sum(w.data.astype(np.float64) ** 2)) for w in model.weights)
    return float(np.sqrt(total))


# -- loop ------------------------------------------------------------------------


def train(
    dataset,
    config: TrainConfig,
    schedule,
    model: MlpEps | None = None,
    out_dir: str | None = None,
    log_path: str | None = None,
    manifest_extra: dict | None = None,
) -> TrainerState:
    """Run the configured number of iterations and return the final state.

    With out_dir set, an initial checkpoint, periodic checkpoints at the
    configured cadence, a final checkpoint, and a CSV iteration log are
    written there. total_iters=0 writes only the initial checkpoint.
    """
    config.validate()
    x_data = np.asarray(dataset.samples, dtype=np.float64)
    n_data, dim = x_data.shape
    if model is None:
        model = default_model(dim, seed=config.seed)
    if model.data_dim != dim:
        raise ValueError(f"model data dim {model.data_dim} != dataset dim {dim}")
    state = TrainerState.fresh(model, config, schedule)
    params = model.parameters()
    T = len(schedule.betas)

    log_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _checkpoint(state, out_dir, tag="init", manifest_extra=manifest_extra)
        if log_path is None:
            log_path = os.path.join(out_dir, "train_log.csv")
    if log_path is not None:
        log_f = open(log_path, "w")
        log_f.write("iter,wall_ms,loss,grad_norm,weight_frobenius\n")

    try:
        for it in range(1, config.total_iters + 1):
            t0 = time.perf_counter()
            idx = state.rngs.data.integers(0, n_data, size=config.batch_size)
            x0 = x_data[idx]
            tt = state.rngs.t.integers(1, T + 1, size=config.batch_size)
            eps = state.rngs.eps.standard_normal((config.batch_size, dim))
            xi = None
            if config.mode == "ip":
                xi = state.rngs.xi.standard_normal((config.batch_size, dim))

            loss = compute_loss(model, x0, tt, eps, xi, config, schedule, probe_rng=state.rngs.xi)
            loss.assert_finite("training loss")
            tz.zero_grads(params)
            loss.backward()
            grad_norm = optimizer_step(state, [p.grad for p in params])
            ema_update(state)

            loss_val = float(loss.item())
            state.loss_history.append(loss_val)
            wall_ms = (time.perf_counter() - t0) * 1e3
            if log_f is not None and (it % config.log_every == 0 or it == config.total_iters):
                log_f.write(
                    f"{it},{wall_ms:.3f},{loss_val:.8g},{grad_norm:.8g},{weight_frobenius(model):.8g}\n"
                )
            if out_dir is not None and config.checkpoint_every > 0 and it % config.checkpoint_every == 0:
                _checkpoint(state, out_dir, tag=f"{it:06d}", manifest_extra=manifest_extra)
        if out_dir is not None:
            _checkpoint(state, out_dir, tag="final", manifest_extra=manifest_extra)
    finally:
        if log_f is not None:
            log_f.close()
    return state


def default_model(data_dim: int, seed: int, hidden=(256, 256, 256, 256), time_dim: int = 64) -> MlpEps:
    """The reference architecture: 4 hidden SiLU layers of width 256."""
    sizes = [data_dim + time_dim, *hidden, data_dim]
    return init_mlp(sizes, seed=seed, time_dim=time_dim)


def _checkpoint(state: TrainerState, out_dir: str, tag: str, manifest_extra: dict | None = None):
    path = os.path.join(out_dir, "checkpoints", f"ckpt_{tag}")
    cfg = state.config
    extra = {
        "iteration": state.iteration,
        "mode": cfg.mode,
        "gamma": cfg.gamma,
        "seed": cfg.seed,
        "schedule_kind": getattr(state.schedule, "kind", None),
        "schedule_T": len(state.schedule.betas),
    }
    if manifest_extra:
        extra.update(manifest_extra)
    save_checkpoint(path, state.model, ema_arrays=state.ema, extra=extra)
    return path
