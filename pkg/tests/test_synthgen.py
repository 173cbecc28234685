import numpy as np
import pytest

from moecalo.dataset import CalorimeterSpec, load_dataset, save_dataset, validate_arrays
from moecalo.synthgen import SynthConfig, render_blob, synthesize, synthesize_with_modes


def test_deterministic_archive_bytes(tmp_path):
    cfg = SynthConfig(spec=CalorimeterSpec.zn(), n_samples=6, seed=7)
    a = save_dataset(tmp_path / "a.h5", *synthesize(cfg), cfg.spec)
    b = save_dataset(tmp_path / "b.h5", *synthesize(cfg), cfg.spec)
    assert a.read_bytes() == b.read_bytes()
    cond, resp = load_dataset(a)
    assert len(cond) == 6


def test_invalid_configs():
    with pytest.raises(ValueError):
        SynthConfig(n_samples=0)
    with pytest.raises(ValueError):
        SynthConfig(mode_fractions=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        SynthConfig(intensity_ranges=((500, 600), (50, 200), (3000, 8000)))


def test_conditions_duplicated_in_pairs():
    cond, resp = synthesize(SynthConfig(n_samples=10, seed=2))
    np.testing.assert_array_equal(cond[0::2], cond[1::2])
    assert not np.array_equal(resp[0], resp[1])


def test_render_blob_integral():
    blob = render_blob((16, 16), 7.5, 7.5, 8.0, 123.0)
    assert blob.sum() == pytest.approx(123.0)


def test_poisson_concentration_of_bright_mode():
    cfg = SynthConfig(
        spec=CalorimeterSpec.zn(), n_samples=100, seed=11, mode_fractions=(0.0, 0.0, 1.0),
        intensity_ranges=((50, 200), (500, 1500), (5000, 5000)),
    )
    _, resp = synthesize(cfg)
    totals = resp.sum(axis=(1, 2))
    assert np.all(np.abs(totals - 5000) <= 3 * np.sqrt(5000))


def test_single_mode_intensities():
    cfg = SynthConfig(n_samples=200, seed=4, mode_fractions=(1.0, 0.0, 0.0))
    _, resp = synthesize(cfg)
    totals = resp.sum(axis=(1, 2))
    lo, hi = cfg.intensity_ranges[0]
    slack = 4 * np.sqrt(hi)
    assert np.all((totals >= lo - slack) & (totals <= hi + slack))


@pytest.fixture(scope="module")
def default_sample():
    return synthesize_with_modes(SynthConfig(n_samples=3000, seed=5))


def test_mode_means_inside_ranges(default_sample):
    cond, resp, modes = default_sample
    totals = resp.sum(axis=(1, 2)).astype(np.float64)
    cfg = SynthConfig()
    for m, (lo, hi) in enumerate(cfg.intensity_ranges):
        sel = totals[modes == m]
        assert len(sel) >= 800
        sem = sel.std() / np.sqrt(len(sel))
        assert lo - 3 * sem <= sel.mean() <= hi + 3 * sem


def test_modes_separable_by_intensity(default_sample):
    _, resp, modes = default_sample
    totals = resp.sum(axis=(1, 2))
    for m in range(2):
        upper = np.percentile(totals[modes == m], 99)
        lower = np.percentile(totals[modes == m + 1], 1)
        assert lower - upper > 0


def test_mode_recoverable_from_energy(default_sample):
    cond, _, modes = default_sample
    cfg = SynthConfig()
    for m, (lo, hi) in enumerate(cfg.intensity_ranges):
        e = cond[modes == m, 0]
        assert e.min() >= np.float32(lo) and e.max() <= np.float32(hi)


def test_output_passes_validation(default_sample):
    cond, resp, _ = default_sample
    validate_arrays(cond, resp, CalorimeterSpec.desk())
