"""Toy data generators and binary/image IO."""

import struct

import numpy as np
import pytest

from diffusionlab.datasets import (
    Dataset,
    load_csv_points,
    load_idx,
    make_synthetic,
    ring_mixture_params,
    save_idx,
    to_pixels,
    write_csv_points,
    write_pgm,
)
from diffusionlab.errors import DataError


def test_all_kinds_inside_box():
    for kind in ("gaussian", "gaussian_mixture", "two_moons", "swiss_roll"):
        ds = make_synthetic(kind, 2000, seed=0)
        assert ds.samples.shape == (2000, 2)
        assert ds.samples.dtype == np.float64
        assert ds.samples.min() >= -1.0 and ds.samples.max() <= 1.0
        assert ds.kind == kind


def test_unknown_kind_and_bad_n():
    with pytest.raises(ValueError):
        make_synthetic("spiral_galaxy", 10)
    with pytest.raises(ValueError):
        make_synthetic("gaussian", 0)


def test_seed_reproducibility():
    a = make_synthetic("two_moons", 500, seed=3)
    b = make_synthetic("two_moons", 500, seed=3)
    c = make_synthetic("two_moons", 500, seed=4)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_two_moons_geometry():
    ds = make_synthetic("two_moons", 4000, seed=1, params={"noise": 0.0})
    assert ds.labels is not None
    counts = np.bincount(ds.labels)
    assert counts[0] == counts[1] == 2000
    centers = np.asarray(ds.params["centers"])
    radius = ds.params["radius"]
    for lab in (0, 1):
        pts = ds.samples[ds.labels == lab]
        r = np.linalg.norm(pts - centers[lab], axis=1)
        np.testing.assert_allclose(r, radius, rtol=1e-12)
    # the two arcs bend toward each other: arc 0 sits above its center
    assert np.all(ds.samples[ds.labels == 0][:, 1] >= centers[0][1] - 1e-12)
    assert np.all(ds.samples[ds.labels == 1][:, 1] <= centers[1][1] + 1e-12)


def test_two_moons_noise_scale():
    ds = make_synthetic("two_moons", 6000, seed=2, params={"noise": 0.05})
    centers = np.asarray(ds.params["centers"])
    r = np.linalg.norm(ds.samples[ds.labels == 0] - centers[0], axis=1)
    # radial spread reflects the isotropic jitter
    assert 0.02 < np.std(r) < 0.08


def test_ring_mixture_structure():
    params = ring_mixture_params(modes=8, radius=0.8, sigma=0.05)
    means = np.asarray(params["means"])
    assert means.shape == (8, 2)
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), 0.8, rtol=1e-12)
    assert sum(params["weights"]) == pytest.approx(1.0, rel=1e-12)

    ds = make_synthetic("gaussian_mixture", 8000, seed=0)
    assert ds.labels is not None
    # every mode gets a roughly fair share
    counts = np.bincount(ds.labels, minlength=8)
    assert counts.min() > 8000 / 8 * 0.7


def test_mixture_weight_validation():
    params = ring_mixture_params()
    params["weights"] = [0.5] * 8
    with pytest.raises(ValueError):
        make_synthetic("gaussian_mixture", 100, params=params)


def test_gaussian_params_respected():
    ds = make_synthetic("gaussian", 50000, seed=5, params={"mu": [0.3, -0.2], "sigma": 0.1})
    np.testing.assert_allclose(ds.samples.mean(axis=0), [0.3, -0.2], atol=0.005)
    np.testing.assert_allclose(ds.samples.std(axis=0), 0.1, atol=0.005)


def test_split_partitions():
    ds = make_synthetic("gaussian", 100, seed=0)
    train, hold = ds.split(30)
    assert train.n == 70 and hold.n == 30
    np.testing.assert_array_equal(np.vstack([train.samples, hold.samples]), ds.samples)
    assert train.kind == hold.kind == ds.kind
    with pytest.raises(ValueError):
        ds.split(0)
    with pytest.raises(ValueError):
        ds.split(100)


# -- pixel conversion -------------------------------------------------------------------


def test_to_pixels_bounds_and_inverse():
    x = np.linspace(-1, 1, 256)
    px = to_pixels(x)
    assert px.dtype == np.uint8
    assert px.min() == 0 and px.max() == 255
    back = px / 127.5 - 1.0
    assert np.max(np.abs(back - x)) <= 1.0 / 127.5
    # quantization then dequantization then quantization is stable
    np.testing.assert_array_equal(to_pixels(back), px)


# -- idx io -----------------------------------------------------------------------------


def _image_dataset(n=6, h=4, w=5, seed=0):
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, size=(n, h * w), dtype=np.uint8)
    samples = px / 127.5 - 1.0
    return Dataset(kind="images", samples=samples, image_shape=(h, w)), px


def test_idx_roundtrip_byte_exact(tmp_path):
    ds, px = _image_dataset()
    path = tmp_path / "imgs.idx"
    save_idx(path, ds)
    back = load_idx(path)
    assert back.image_shape == (4, 5)
    np.testing.assert_array_equal(to_pixels(back.samples), px)
    # header: magic, count, rows, cols
    with open(path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">llll", f.read(16))
    assert magic == 0x00000803
    assert (n, rows, cols) == (6, 4, 5)


def test_idx_rejects_malformed(tmp_path):
    ds, _ = _image_dataset()
    path = tmp_path / "imgs.idx"
    save_idx(path, ds)
    blob = path.read_bytes()

    (tmp_path / "magic.idx").write_bytes(b"\x00\x00\x08\x04" + blob[4:])
    with pytest.raises(DataError):
        load_idx(tmp_path / "magic.idx")

    (tmp_path / "short.idx").write_bytes(blob[:-3])
    with pytest.raises(DataError):
        load_idx(tmp_path / "short.idx")

    (tmp_path / "long.idx").write_bytes(blob + b"\x00")
    with pytest.raises(DataError):
        load_idx(tmp_path / "long.idx")

    zero = struct.pack(">llll", 0x00000803, 0, 4, 5)
    (tmp_path / "zero.idx").write_bytes(zero)
    with pytest.raises(DataError):
        load_idx(tmp_path / "zero.idx")


def test_save_idx_requires_image_shape(tmp_path):
    ds = make_synthetic("gaussian", 10, seed=0)
    with pytest.raises(DataError):
        save_idx(tmp_path / "x.idx", ds)


# -- pgm and csv -------------------------------------------------------------------------


def test_write_pgm_format(tmp_path):
    img = np.linspace(-1, 1, 12)
    path = tmp_path / "img.pgm"
    write_pgm(path, img, (3, 4))
    blob = path.read_bytes()
    header = b"P5\n4 3\n255\n"
    assert blob.startswith(header)
    assert len(blob) == len(header) + 12
    np.testing.assert_array_equal(np.frombuffer(blob[len(header):], dtype=np.uint8),
                                  to_pixels(img))


def test_csv_points_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    for d in (1, 3):
        x = rng.standard_normal((20, d))
        path = tmp_path / f"pts{d}.csv"
        write_csv_points(path, x)
        header = path.read_text().splitlines()[0]
        assert header == ",".join(f"x{i}" for i in range(d))
        back = load_csv_points(path)
        np.testing.assert_array_equal(back, x)
