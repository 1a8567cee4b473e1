"""Noise prediction models: a time-conditioned MLP and an analytic Gaussian baseline."""

from __future__ import annotations

import hashlib
import io
import json
import os

import numpy as np

from . import tensor as tz
from .errors import DataError
from .tensor import Tensor


class TimeEmbedding:
    """Sinusoidal timestep features: [sin(t * f_k), cos(t * f_k)] per frequency.

    Frequencies fall geometrically from 1 to 1/max_period, so nearby timesteps
    get nearby embeddings while remaining distinguishable across 1..T.
    """

    def __init__(self, dim: int = 64, max_period: float = 10000.0):
        if dim < 2 or dim % 2 != 0:
            raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
        self.dim = dim
        self.max_period = float(max_period)
        half = dim // 2
        self.freqs = np.exp(-np.log(self.max_period) * np.arange(half, dtype=np.float64) / half)

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        args = t[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class MlpEps:
    """Fully connected epsilon predictor conditioned on a timestep embedding.

    The input is the noisy point concatenated with its timestep embedding;
    hidden layers use SiLU; the output layer is linear with width equal to the
    data dimension.
    """

    kind = "mlp"

    def __init__(self, layer_sizes, time_embedding: TimeEmbedding, weights, biases, dtype=np.float32):
        self.layer_sizes = list(layer_sizes)
        self.time_embedding = time_embedding
        self.weights = weights
        self.biases = biases
        self.dtype = np.dtype(dtype)
        self.data_dim = self.layer_sizes[-1]

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def named_parameters(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def forward(self, x, t) -> Tensor:
        """Predicted noise as a graph tensor; x may be a Tensor or an array."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        n = x.shape[0]
        t_arr = np.full(n, t, dtype=np.int64) if np.ndim(t) == 0 else np.asarray(t, dtype=np.int64)
        if t_arr.shape != (n,):
            raise ValueError(f"t must be scalar or shape ({n},), got {t_arr.shape}")
        emb = Tensor(self.time_embedding(t_arr).astype(self.dtype))
        h = tz.concat([x, emb], axis=1)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = tz.add(tz.matmul(h, w), b)
            if i < last:
                h = tz.silu(h)
        return h

    def predict(self, x: np.ndarray, t) -> np.ndarray:
        """Noise prediction without touching the autodiff graph."""
        with tz.no_grad():
            return self.forward(np.asarray(x), t).data

    def astype(self, dtype) -> "MlpEps":
        """A copy of this model with parameters cast to dtype."""
        dtype = np.dtype(dtype)
        ws = [Tensor(w.data.astype(dtype), requires_grad=True) for w in self.weights]
        bs = [Tensor(b.data.astype(dtype), requires_grad=True) for b in self.biases]
        return MlpEps(self.layer_sizes, self.time_embedding, ws, bs, dtype)


def init_mlp(
    layer_sizes,
    seed: int,
    time_dim: int = 64,
    max_period: float = 10000.0,
    dtype=np.float32,
) -> MlpEps:
    """Freshly initialized MLP predictor.

    layer_sizes runs input..output; the input width must equal the data
    dimension (the output width) plus time_dim. Hidden weights use
    fan-in-scaled normal init; the output layer starts at zero so the initial
    prediction is exactly zero noise.
    """
    layer_sizes = [int(s) for s in layer_sizes]
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output layer sizes")
    if any(s < 1 for s in layer_sizes):
        raise ValueError("layer sizes must be positive")
    data_dim = layer_sizes[-1]
    if layer_sizes[0] != data_dim + time_dim:
        raise ValueError(
            f"input width {layer_sizes[0]} must equal data dim {data_dim} + time embedding dim {time_dim}"
        )
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    n_layers = len(layer_sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        if i == n_layers - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        weights.append(Tensor(w.astype(dtype), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))
    emb = TimeEmbedding(dim=time_dim, max_period=max_period)
    return MlpEps(layer_sizes, emb, weights, biases, dtype)


class AnalyticGaussianEps:
    """Exact posterior-mean noise predictor for Gaussian data N(mu0, sigma0_sq I).

    For x_t = sqrt(ab) x0 + sqrt(1-ab) eps this is the conditional expectation
    E[eps | x_t], which minimizes the noise-prediction loss. It gives samplers
    and measurements a ground-truth model with no training error.
    """

    kind = "analytic_gaussian"

    def __init__(self, mu0, sigma0_sq: float):
        self.mu0 = np.atleast_1d(np.asarray(mu0, dtype=np.float64))
        if sigma0_sq < 0:
            raise ValueError("sigma0_sq must be >= 0")
        self.sigma0_sq = float(sigma0_sq)
        self.data_dim = self.mu0.shape[0]

    def predict(self, x: np.ndarray, t, schedule) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        ab = schedule.alpha_bar(t)
        ab = ab if np.ndim(ab) == 0 else np.reshape(ab, (x.shape[0],) + (1,) * (x.ndim - 1))
        denom = ab * self.sigma0_sq + (1.0 - ab)
        return np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * self.mu0) / denom


def predict_eps(model, xt: np.ndarray, t, schedule) -> np.ndarray:
    """Uniform prediction entry point for either model kind."""
    if isinstance(model, AnalyticGaussianEps):
        return model.predict(xt, t, schedule)
    return model.predict(xt, t)


# -- checkpoints -----------------------------------------------------------------


def param_hash(model: MlpEps) -> str:
    """SHA-256 over the canonical binary serialization of the parameters."""
    buf = io.BytesIO()
    for name, p in sorted(model.named_parameters().items()):
        buf.write(name.encode("utf-8"))
        tz._write_array(buf, p.data)
    return hashlib.sha256(buf.getvalue()).hexdigest()


def save_checkpoint(path: str, model: MlpEps, ema_arrays=None, extra: dict | None = None):
    """Write model.bin (+ ema.bin) and a JSON manifest into directory `path`."""
    os.makedirs(path, exist_ok=True)
    named = {k: v.data for k, v in model.named_parameters().items()}
    tz.save_tensors(os.path.join(path, "model.bin"), named)
    manifest = {
        "format": 1,
        "kind": model.kind,
        "layer_sizes": model.layer_sizes,
        "time_dim": model.time_embedding.dim,
        "max_period": model.time_embedding.max_period,
        "dtype": model.dtype.name,
        "param_hash": param_hash(model),
        "extra": extra or {},
    }
    if ema_arrays is not None:
        names = sorted(model.named_parameters())
        tz.save_tensors(os.path.join(path, "ema.bin"), dict(zip(names, ema_arrays)))
        manifest["has_ema"] = True
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_checkpoint(path: str, use_ema: bool = False):
    """Rebuild (model, manifest) from a checkpoint directory."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("kind") != "mlp":
        raise DataError(f"unsupported checkpoint kind {manifest.get('kind')!r}")
    blob = "ema.bin" if use_ema else "model.bin"
    if use_ema and not manifest.get("has_ema"):
        raise DataError("checkpoint has no EMA parameters")
    named = tz.load_tensors(os.path.join(path, blob))
    layer_sizes = manifest["layer_sizes"]
    dtype = np.dtype(manifest["dtype"])
    emb = TimeEmbedding(dim=manifest["time_dim"], max_period=manifest["max_period"])
    n_layers = len(layer_sizes) - 1
    weights, biases = [], []
    for i in range(n_layers):
        try:
            w, b = named[f"w{i}"], named[f"b{i}"]
        except KeyError as e:
            raise DataError(f"checkpoint missing parameter {e}") from e
        expect_w = (layer_sizes[i], layer_sizes[i + 1])
        if w.shape != expect_w or b.shape != (layer_sizes[i + 1],):
            raise DataError(f"parameter {i} shape mismatch: {w.shape} vs {expect_w}")
        weights.append(Tensor(w.astype(dtype), requires_grad=True))
        biases.append(Tensor(b.astype(dtype), requires_grad=True))
    model = MlpEps(layer_sizes, emb, weights, biases, dtype)
    stored = manifest.get("param_hash")
    if not use_ema and stored is not None and param_hash(model) != stored:
        raise DataError("checkpoint parameter hash mismatch; file corrupted?")
    return model, manifest
