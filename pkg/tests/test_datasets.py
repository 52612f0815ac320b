import numpy as np
import pytest

from contralab.datasets import SCALE_TARGET, load_csv, make_gaussian_mixture, make_rings, save_csv
from contralab.evaluation import fit_gaussian


def _joined(pair):
    tr, va = pair
    return np.vstack([tr.samples, va.samples]), np.concatenate([tr.labels, va.labels])


def test_gmm_centres_on_circle():
    tr, va = make_gaussian_mixture(4, 100, sigma=1e-9, seed=0)
    x, y = _joined((tr, va))
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    for c, expected in enumerate(([1, 0], [0, 1], [-1, 0], [0, -1])):
        assert np.allclose(unit[y == c], expected, atol=1e-7)
    assert np.abs(x).max() == pytest.approx(SCALE_TARGET)


def test_gmm_small_sigma_collapses_classes():
    tr, _ = make_gaussian_mixture(3, 20, sigma=1e-12, seed=1)
    for c in range(3):
        pts = tr.samples[tr.labels == c]
        assert np.ptp(pts, axis=0).max() < 1e-9


def test_gmm_centre_recovery_within_sampling_error():
    sigma, n = 0.05, 500
    tr, va = make_gaussian_mixture(8, n, sigma=sigma, seed=2)
    x, y = _joined((tr, va))
    x = x / tr.scale
    for c in range(8):
        centre = 2.0 * np.array([np.cos(2 * np.pi * c / 8), np.sin(2 * np.pi * c / 8)])
        mu = fit_gaussian(x[y == c]).mu
        assert np.all(np.abs(mu - centre) < 3 * sigma / np.sqrt(n))


def test_splits_disjoint_exhaustive_and_balanced():
    tr, va = make_gaussian_mixture(5, 40, seed=3)
    assert len(tr) + len(va) == 200 and len(va) == 20
    for c in range(5):
        assert (tr.labels == c).sum() == 36 and (va.labels == c).sum() == 4
    rows = {tuple(r) for r in tr.samples} | {tuple(r) for r in va.samples}
    assert len(rows) == 200
    assert (tr.split, va.split) == ("train", "val")


def test_gmm_extra_dimensions():
    tr, _ = make_gaussian_mixture(4, 10, seed=4, dim=3)
    assert tr.dim == 3 and np.abs(tr.samples).max() <= 1.0


def test_generation_errors():
    with pytest.raises(ValueError, match="C=1"):
        make_gaussian_mixture(1, 10)
    with pytest.raises(ValueError, match="n_per_class"):
        make_gaussian_mixture(3, 3)
    with pytest.raises(ValueError, match="sigma"):
        make_gaussian_mixture(3, 10, sigma=0.0)
    with pytest.raises(ValueError):
        make_rings(1, 10)


def test_rings_radius_and_counts():
    C = 4
    tr, va = make_rings(C, 250, seed=5)
    x, y = _joined((tr, va))
    radius = np.linalg.norm(x, axis=1) / tr.scale
    for c in range(C):
        assert np.all(np.abs(radius[y == c] - (c + 1) / C) < 0.1)
        assert (y == c).sum() == 250
    assert np.mean(np.abs(radius - (y + 1) / C) < 0.06) > 0.99


def test_generation_is_deterministic():
    a, b = make_rings(3, 30, seed=7), make_rings(3, 30, seed=7)
    assert np.array_equal(a[0].samples, b[0].samples) and np.array_equal(a[1].labels, b[1].labels)
    c = make_rings(3, 30, seed=8)
    assert not np.array_equal(a[0].samples, c[0].samples)


def test_csv_round_trip_is_bit_exact(tmp_path):
    tr, _ = make_gaussian_mixture(3, 30, seed=9)
    path = tmp_path / "train.csv"
    save_csv(tr, path)
    raw = path.read_bytes()
    assert raw.startswith(b"x0,x1,label\n") and b"\r" not in raw
    back = load_csv(path)
    assert np.array_equal(back.samples, tr.samples) and np.array_equal(back.labels, tr.labels)
    save_csv(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == raw


def test_csv_errors(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_csv(p)
    p.write_text("a,b,label\n1,2,0\n")
    with pytest.raises(ValueError, match="header"):
        load_csv(p)
    p.write_text("x0,x1,label\n1,2,0\n1,2\n")
    with pytest.raises(ValueError, match=":3:"):
        load_csv(p)
    p.write_text("x0,x1,label\n1,zz,0\n")
    with pytest.raises(ValueError, match=":2:"):
        load_csv(p)
    p.write_text("x0,x1,label\n1,2,-1\n")
    with pytest.raises(ValueError, match="negative"):
        load_csv(p)
    p.write_text("x0,x1,label\n")
    with pytest.raises(ValueError, match="no data"):
        load_csv(p)
