"""Toy datasets and simple binary/image IO.

All datasets present samples as float64 rows scaled into [-1, 1]; synthetic
generators are built so their natural support already sits inside the box
and only get rescaled if a parameter choice pushes them out.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

BOX_MARGIN = 0.95

SYNTHETIC_KINDS = ("gaussian", "gaussian_mixture", "two_moons", "swiss_roll")

# two_moons geometry: interleaved half circles kept inside the unit box
_MOON_RADIUS = 0.55
_MOON_CENTERS = np.array([[-0.3, -0.15], [0.3, 0.15]])

# swiss_roll geometry: spiral r = _ROLL_SCALE * phi over 1.5pi..4.5pi
_ROLL_SCALE = 0.062
_ROLL_PHI = (1.5 * np.pi, 4.5 * np.pi)


@dataclass
class Dataset:
    """Samples plus provenance; image data remembers its height/width."""

    kind: str
    samples: np.ndarray
    params: dict = field(default_factory=dict)
    image_shape: tuple | None = None
    labels: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def split(self, n_holdout: int):
        """Deterministic head/tail split: (train, holdout)."""
        if not (0 < n_holdout < self.n):
            raise ValueError("n_holdout must be in 1..n-1")
        head = Dataset(self.kind, self.samples[:-n_holdout], self.params, self.image_shape)
        tail = Dataset(self.kind, self.samples[-n_holdout:], self.params, self.image_shape)
        return head, tail


def _fit_to_box(x: np.ndarray, margin: float = BOX_MARGIN) -> np.ndarray:
    """Affinely map samples into [-margin, margin] only if they stick out."""
    lo, hi = x.min(axis=0), x.max(axis=0)
    if np.all(lo >= -margin) and np.all(hi <= margin):
        return x
    center = (lo + hi) / 2.0
    half = np.max((hi - lo) / 2.0)
    if half == 0.0:
        return np.clip(x, -margin, margin)
    return (x - center) * (margin / half)


def ring_mixture_params(modes: int = 8, radius: float = 0.8, sigma: float = 0.05) -> dict:
    """Equal-weight Gaussians on a circle; the default mixture layout."""
    angles = 2 * np.pi * np.arange(modes) / modes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return {"means": means.tolist(), "sigmas": [sigma] * modes, "weights": [1.0 / modes] * modes}


def make_synthetic(kind: str, n: int, params: dict | None = None, seed: int = 0) -> Dataset:
    """Draw one of the toy datasets. Unknown kinds raise ValueError."""
    if n < 1:
        raise ValueError("n must be >= 1")
    params = dict(params or {})
    rng = np.random.default_rng(seed)

    if kind == "gaussian":
        mu = np.atleast_1d(np.asarray(params.get("mu", [0.0, 0.0]), dtype=np.float64))
        sigma = float(params.get("sigma", 0.2))
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        x = mu + sigma * rng.standard_normal((n, len(mu)))
        labels = None

    elif kind == "gaussian_mixture":
        if "means" not in params:
            params.update(ring_mixture_params())
        means = np.asarray(params["means"], dtype=np.float64)
        k = len(means)
        sigmas = np.asarray(params.get("sigmas", [0.05] * k), dtype=np.float64)
        weights = np.asarray(params.get("weights", [1.0 / k] * k), dtype=np.float64)
        if len(sigmas) != k or len(weights) != k:
            raise ValueError("means, sigmas, weights must have equal length")
        if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
            raise ValueError("weights must be nonnegative and sum to 1")
        comp = rng.choice(k, size=n, p=weights)
        x = means[comp] + sigmas[comp, None] * rng.standard_normal((n, means.shape[1]))
        labels = comp

    elif kind == "two_moons":
        noise = float(params.get("noise", 0.02))
        n_a = n // 2
        n_b = n - n_a
        th_a = rng.uniform(0.0, np.pi, size=n_a)
        th_b = rng.uniform(np.pi, 2 * np.pi, size=n_b)
        a = _MOON_CENTERS[0] + _MOON_RADIUS * np.stack([np.cos(th_a), np.sin(th_a)], axis=1)
        b = _MOON_CENTERS[1] + _MOON_RADIUS * np.stack([np.cos(th_b), np.sin(th_b)], axis=1)
        x = np.concatenate([a, b], axis=0)
        x = x + noise * rng.standard_normal(x.shape)
        labels = np.concatenate([np.zeros(n_a, dtype=np.int64), np.ones(n_b, dtype=np.int64)])
        perm = rng.permutation(n)
        x, labels = x[perm], labels[perm]
        params.setdefault("radius", _MOON_RADIUS)
        params.setdefault("centers", _MOON_CENTERS.tolist())
        params.setdefault("noise", noise)

    elif kind == "swiss_roll":
        noise = float(params.get("noise", 0.01))
        phi = rng.uniform(_ROLL_PHI[0], _ROLL_PHI[1], size=n)
        r = _ROLL_SCALE * phi
        x = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
        x = x + noise * rng.standard_normal(x.shape)
        params.setdefault("scale", _ROLL_SCALE)
        params.setdefault("noise", noise)
        labels = None

    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; known: {SYNTHETIC_KINDS}")

    x = _fit_to_box(np.asarray(x, dtype=np.float64))
    return Dataset(kind=kind, samples=x, params=params, labels=labels)


# -- IDX image container ---------------------------------------------------------


_IDX_MAGIC_U8_3D = 0x00000803


def load_idx(path) -> Dataset:
    """Read an IDX file of unsigned-byte images into rows scaled to [-1, 1]."""
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise DataError("truncated idx header")
        magic, n, rows, cols = struct.unpack(">llll", header)
        if magic != _IDX_MAGIC_U8_3D:
            raise DataError(f"bad idx magic 0x{magic:08x}; expected 0x{_IDX_MAGIC_U8_3D:08x}")
        if n == 0:
            raise DataError("idx file contains zero items")
        if n < 0 or rows < 1 or cols < 1:
            raise DataError(f"nonsensical idx dimensions ({n}, {rows}, {cols})")
        payload = f.read(n * rows * cols + 1)
        if len(payload) != n * rows * cols:
            raise DataError(
                f"idx payload size mismatch: expected exactly {n * rows * cols} bytes, "
                f"got {'more' if len(payload) > n * rows * cols else str(len(payload))}"
            )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols)
    samples = pixels.astype(np.float64) / 127.5 - 1.0
    return Dataset(kind="idx_images", samples=samples, image_shape=(rows, cols), params={"path": str(path)})


def save_idx(path, dataset: Dataset):
    """Write image rows back to IDX bytes, inverting the [-1, 1] scaling."""
    if dataset.image_shape is None:
        raise DataError("dataset has no image shape; cannot write idx")
    rows, cols = dataset.image_shape
    n, dim = dataset.samples.shape
    if dim != rows * cols:
        raise DataError(f"sample width {dim} != rows*cols {rows * cols}")
    pixels = to_pixels(dataset.samples)
    with open(path, "wb") as f:
        f.write(struct.pack(">llll", _IDX_MAGIC_U8_3D, n, rows, cols))
        f.write(pixels.tobytes())


def to_pixels(x: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to uint8 pixels; exact inverse of the load scaling."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray, shape: tuple):
    """Write one [-1, 1] image row as a binary PGM file."""
    rows, cols = shape
    img = to_pixels(np.asarray(image).reshape(rows, cols))
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(img.tobytes())


# -- delimited points ---------------------------------------------------------------


def write_csv_points(path, samples: np.ndarray):
    """Write sample rows as CSV with x0..x{d-1} headers, full float precision."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    header = ",".join(f"x{i}" for i in range(samples.shape[1]))
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in samples:
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_csv_points(path) -> np.ndarray:
    """Read CSV written by write_csv_points."""
    with open(path) as f:
        header = f.readline().strip()
    d = len(header.split(","))
    data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    return data.reshape(-1, d)
