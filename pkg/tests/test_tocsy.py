import numpy as np
import pytest
from scipy.signal import find_peaks

from conftest import make_system
from zulfchain.tocsy import (
    TocsyConfig,
    default_t1_grid,
    default_t2_grid,
    f1_multiplet_spread,
    process_2d,
    pulse_operator,
    ridge_intensity,
    tocsy2d,
    tocsy_time_data,
)

SMALL = TocsyConfig(f1_size=128, f2_size=512)
T1 = default_t1_grid(64)
T2 = default_t2_grid(256)


def two_protons():
    return make_system(
        [("N", "15N", 245.0), ("H", "1H", 1.0), ("G", "1H", 3.0)],
        {("N", "H"): 3.0, ("N", "G"): 5.0},
    )


def relayed():
    # N sees the proton only through the carbon
    return make_system(
        [("N", "15N", 245.0), ("C", "13C", 20.0), ("H", "1H", 2.0)],
        {("C", "H"): 130.0, ("N", "C"): -10.0},
    )


def f1_peaks_ppm(spec, rel=0.2):
    proj = np.max(np.abs(spec.matrix), axis=1)
    idx, _ = find_peaks(proj, height=rel * proj.max())
    return spec.metadata["f1_ppm"][idx]


def test_default_sizes():
    spec = tocsy2d(two_protons(), t_mix=0.05)
    assert spec.matrix.shape == (512, 4096)
    assert spec.mode == "States-TPPI"
    assert spec.metadata["t1_points"] == 128 and spec.metadata["t2_points"] == 1024


def test_cross_ridges_at_proton_shifts():
    spec = tocsy2d(two_protons(), T1, T2, t_mix=0.05, config=SMALL)
    ppm = f1_peaks_ppm(spec)
    res = 1.0 / (T1[1] * len(T1)) / spec.metadata["f1_larmor_Hz"] * 1e6
    for shift in (1.0, 3.0):
        assert np.min(np.abs(ppm - shift)) <= res


def test_no_relay_without_mixing():
    s = relayed()
    zero = tocsy2d(s, T1, T2, t_mix=0.0, config=SMALL)
    mixed = tocsy2d(s, T1, T2, t_mix=0.05, config=SMALL)
    peak = np.abs(mixed.matrix).max()
    assert peak > 0
    assert np.abs(zero.matrix).max() <= 1e-10 * peak
    centre = 2.0 * mixed.metadata["f1_larmor_Hz"] * 1e-6
    assert ridge_intensity(mixed, centre, 100.0) >= 1e-2 * peak


def test_refocusing_narrows_f1_multiplet():
    s = relayed()
    plain = tocsy2d(s, T1, T2, t_mix=0.05, config=SMALL)
    refoc = tocsy2d(s, T1, T2, t_mix=0.05, refocus_13C=True, config=SMALL)
    centre = 2.0 * plain.metadata["f1_larmor_Hz"] * 1e-6
    assert f1_multiplet_spread(refoc, centre, 100.0) < f1_multiplet_spread(plain, centre, 100.0)


def test_time_data_shape_and_determinism():
    a, meta = tocsy_time_data(two_protons(), T1[:8], T2[:16], 0.05)
    b, _ = tocsy_time_data(two_protons(), T1[:8], T2[:16], 0.05)
    assert a.shape == (2, 8, 16)
    assert np.array_equal(a, b)
    assert meta["f1_carrier_Hz"] == pytest.approx(2.0 * meta["f1_larmor_Hz"] * 1e-6)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(t1_grid=[0.0, 1e-3, 3e-3]),
        dict(t_mix=-1.0),
        dict(observe_f2="13C"),
        dict(evolve_f1="13C", refocus_13C=True),
        dict(t1_grid=[]),
    ],
)
def test_invalid_requests(kwargs):
    args = dict(t1_grid=T1[:4], t2_grid=T2[:4], t_mix=0.0)
    args.update(kwargs)
    system = two_protons() if "evolve_f1" not in kwargs else relayed()
    with pytest.raises(ValueError):
        tocsy_time_data(system, **args)


def test_config_validation():
    with pytest.raises(ValueError):
        TocsyConfig(f1_size=500)
    with pytest.raises(ValueError):
        TocsyConfig(high_field=0.0)
    with pytest.raises(ValueError):
        TocsyConfig(mixing_field=-1.0)


def test_pulse_operator_unitary_and_inverting():
    s = two_protons()
    P = pulse_operator(s, [1, 2], np.pi / 2, phase=0.3).toarray()
    assert np.allclose(P.conj().T @ P, np.eye(8), atol=1e-12)
    # a π pulse on spin H swaps its α and β states
    Pi = pulse_operator(s, [1], np.pi).toarray()
    assert abs(Pi[0b010, 0b000]) == pytest.approx(1.0)


def test_process_2d_places_a_synthetic_peak():
    d1, d2 = 1e-3, 2e-3
    f1, f2 = 62.5, -50.0
    t1 = d1 * np.arange(64)[:, None]
    t2 = d2 * np.arange(128)[None, :]
    fid = np.exp(2j * np.pi * f2 * t2)
    data = np.stack([np.cos(2 * np.pi * f1 * t1) * fid, np.sin(2 * np.pi * f1 * t1) * fid])
    m = process_2d(data, d1, d2, 256, 512)
    i, j = np.unravel_index(np.argmax(np.abs(m)), m.shape)
    ax1 = np.fft.fftshift(np.fft.fftfreq(256, d1))
    ax2 = np.fft.fftshift(np.fft.fftfreq(512, d2))
    assert ax1[i] == pytest.approx(f1, abs=ax1[1] - ax1[0])
    assert ax2[j] == pytest.approx(f2, abs=ax2[1] - ax2[0])
    assert m[i, j] > 0
    with pytest.raises(ValueError):
        process_2d(data, d1, d2, 32, 512)
