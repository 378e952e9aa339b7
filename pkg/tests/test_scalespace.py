import numpy as np
import pytest
from hypothesis import given, strategies as st

from radwarp.errors import ConfigurationError
from radwarp.radar import RadarParams, RadarTarget, RdMap, amplitude_for_snr, rd_power, synth_spectrum
from radwarp.scalespace import build_scalespace

P = RadarParams()


def lone_target_map(v=-3.0, noise=False):
    spec = synth_spectrum([RadarTarget(10.0, v, 0.0, amplitude=amplitude_for_snr(40, P))], P, seed=0, noise=noise)
    return rd_power(spec, floor_db=-20.0)


def test_constant_map():
    ss = build_scalespace(RdMap(np.full((100, 80), 12.5), P), 3)
    for Pw, G in zip(ss.power, ss.grad):
        assert np.allclose(Pw, 12.5) and np.allclose(G, 0.0)
    assert ss.power[0].shape == (100, 240) and ss.v0 == -30.0


def test_peak_decreases_and_widens():
    ss = build_scalespace(lone_target_map(), 3)
    row = [Pw[40] for Pw in ss.power]
    peaks = [r.max() for r in row]
    widths = [np.sum(r >= r.max() - 6.0) for r in row]
    assert all(b <= a + 1e-9 for a, b in zip(peaks, peaks[1:]))
    assert all(b >= a for a, b in zip(widths, widths[1:]))


def test_level_max_monotone():
    rd = rd_power(synth_spectrum([RadarTarget(5.0, 2.0, 10.0, 3.0), RadarTarget(15.0, -7.0, -20.0, 1.0)], P, seed=3))
    ss = build_scalespace(rd, 4)
    for a, b in zip(ss.power, ss.power[1:]):
        assert b.max() <= a.max() + 1e-9


def test_alias_extension_copies():
    ss = build_scalespace(lone_target_map(), 3)
    r = np.linspace(0, 24.75, 17)
    v = np.linspace(-10, 9.75, 17)
    p0, _, _ = ss.sample(1, r, v)
    for shift in (-20.0, 20.0):
        p1, _, inside = ss.sample(1, r, v + shift)
        assert np.array_equal(p0, p1) and inside.all()


def test_sample_nodes_and_bilinear():
    grid = np.zeros((100, 80))
    ss = build_scalespace(RdMap(grid, P), 1, alias_copies=1)
    ss.power[0][0:2, 0:2] = [[0, 0], [0, 10]]
    p, _, _ = ss.sample(1, 0.125, -10 + 0.125)
    assert p == pytest.approx(2.5)
    ss.power[0][7, 9] = 4.0
    p, _, inside = ss.sample(1, 7 * 0.25, -10 + 9 * 0.25)
    assert p == pytest.approx(4.0) and inside


def test_out_of_grid_clamped_and_flagged():
    ss = build_scalespace(lone_target_map(), 2)
    p, g, inside = ss.sample(2, [30.0, 10.0], [0.0, 50.0])
    assert not inside.any() and np.all(g == 0)
    assert np.all(np.isfinite(p))
    with pytest.raises(ConfigurationError):
        ss.sample(3, 10.0, 0.0)


def _fd_check(ss, s, r, v, h=1e-5):
    _, g, _ = ss.sample(s, r, v)
    fd = (ss.sample(s, r, v + h)[0] - ss.sample(s, r, v - h)[0]) / (2 * h)
    return np.abs(g - fd) / np.abs(fd)


def test_gradient_matches_finite_difference_on_linear_regions():
    ramp = RdMap(np.tile(0.3 * np.arange(80.0), (100, 1)), P)
    ss = build_scalespace(ramp, 3, alias_copies=1)
    v = -10 + P.doppler_res * (np.arange(20, 60) + 0.37)
    for s in (2, 3):
        assert np.max(_fd_check(ss, s, 10.0, v)) < 1e-2


def test_gradient_matches_finite_difference_away_from_kinks():
    """Cells whose central-difference stencil lies on one linear piece of the level."""
    ss = build_scalespace(lone_target_map(), 3)
    for s in (2, 3):
        row = ss.power[s - 1][40]
        curv = np.abs(np.diff(row, 2))  # curv[k] is the kink measure at bin k + 1
        j = np.arange(1, row.size - 2)
        flat = (curv[j - 1] < 1e-9) & (curv[j] < 1e-9) & (np.abs(np.diff(row)[j]) > 1e-3)
        cells = j[flat]
        if s == 3:
            assert cells.size > 0
        if cells.size:
            v = ss.v0 + P.doppler_res * (cells + 0.5)
            assert np.max(_fd_check(ss, s, 10.0, v)) < 1e-2


@given(st.integers(0, 10_000))
def test_gradient_grid_integrates_back(seed):
    rng = np.random.default_rng(seed)
    rd = RdMap(rng.normal(0, 5, size=(4, 80)), P)
    ss = build_scalespace(rd, 3)
    for Pw, G in zip(ss.power, ss.grad):
        for row, grow in zip(Pw, G * P.doppler_res):
            rec = np.empty_like(row)
            rec[:2] = row[:2]
            for k in range(1, row.size - 1):
                rec[k + 1] = rec[k - 1] + 2 * grow[k]
            assert np.max(np.abs(rec - row)) < 1e-6


@given(st.floats(0, 24.75), st.floats(-30, 29.75), st.floats(-1e-3, 1e-3), st.floats(-1e-3, 1e-3))
def test_sample_continuous(r, v, dr, dv):
    ss = build_scalespace(lone_target_map(), 3)
    a = ss.sample(2, r, v)[0]
    b = ss.sample(2, r + dr, v + dv)[0]
    # Lipschitz bound from the largest neighbouring-bin jump
    lip = np.max(np.abs(np.diff(ss.power[1], axis=0))) / 0.25 + np.max(np.abs(np.diff(ss.power[1], axis=1))) / 0.25
    assert abs(a - b) <= lip * (abs(dr) + abs(dv)) + 1e-9


def test_level_weights_halve():
    ss = build_scalespace(lone_target_map(), 3, lambda_radar=0.4)
    assert [ss.level_weight(s) for s in (1, 2, 3)] == [0.4, 0.2, 0.1]


def test_validation():
    rd = lone_target_map()
    with pytest.raises(ConfigurationError):
        build_scalespace(rd, 0)
    with pytest.raises(ConfigurationError):
        build_scalespace(rd, 3, alias_copies=2)
    with pytest.raises(ConfigurationError):
        build_scalespace(rd, 9)
