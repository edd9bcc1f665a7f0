import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import crandn
from otfs.frame_core import ConfigError, DDFrame, ShapeError, TFFrame, TFGrid, Waveform
from otfs.pulses import Pulse, make_ofdm_pulses
from otfs.transforms import (
    BasisIndex, Window2D, basis_function, heisenberg_modulate, isfft, ofdm_demodulate, ofdm_modulate,
    otfs_demodulate, otfs_modulate, otfs_receive, otfs_transform, periodize, sfft, wigner_demodulate,
)


def brute_sfft(x):
    M, N = x.shape
    X = np.zeros((N, M), complex)
    for n in range(N):
        for m in range(M):
            for k in range(M):
                for l in range(N):
                    X[n, m] += x[k, l] * np.exp(-2j * np.pi * (m * k / M - n * l / N))
    return X


def test_sfft_trivial_grid():
    g = TFGrid(1, 1)
    assert np.allclose(sfft(DDFrame(g, [[2 - 3j]])).data, [[2 - 3j]])


def test_sfft_of_delta_is_all_ones():
    g = TFGrid(4, 3)
    x = np.zeros((4, 3))
    x[0, 0] = 1
    assert np.allclose(sfft(DDFrame(g, x)).data, np.ones((3, 4)))
    assert np.allclose(isfft(TFFrame(g, np.ones((3, 4)))).data, x)


@pytest.mark.parametrize("M, N", [(2, 2), (3, 5), (4, 2)])
def test_sfft_matches_double_sum(gen, M, N):
    x = crandn(gen, (M, N))
    assert np.max(np.abs(sfft(DDFrame(TFGrid(M, N), x)).data - brute_sfft(x))) < 1e-12


@pytest.mark.parametrize("M", [1, 2, 4, 8, 16])
@pytest.mark.parametrize("N", [1, 2, 4, 14, 16])
def test_inverse_and_parseval(gen, M, N):
    x = DDFrame(TFGrid(M, N), crandn(gen, (M, N)))
    X = sfft(x)
    assert np.max(np.abs(isfft(X).data - x.data)) < 1e-10
    assert abs(np.sum(np.abs(x.data) ** 2) - np.sum(np.abs(X.data) ** 2) / (M * N)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_sfft_inverse_property(M, N, seed):
    g = np.random.default_rng(seed)
    x = DDFrame(TFGrid(M, N), crandn(g, (2, M, N)))
    assert np.allclose(isfft(sfft(x)).data, x.data, atol=1e-12)


def test_symplectic_convolution(gen):
    M = N = 4
    g = TFGrid(M, N)
    for _ in range(50):
        a, b = crandn(gen, (M, N)), crandn(gen, (M, N))
        c = np.zeros((M, N), complex)
        for k in range(M):
            for l in range(N):
                for kk in range(M):
                    for ll in range(N):
                        c[k, l] += a[kk, ll] * b[(k - kk) % M, (l - ll) % N]
        lhs = sfft(DDFrame(g, c)).data
        rhs = sfft(DDFrame(g, a)).data * sfft(DDFrame(g, b)).data
        assert np.max(np.abs(lhs - rhs)) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 7), st.integers(0, 4), st.integers(0, 2**32 - 1))
def test_translation_property(kp, lp, seed):
    M, N = 8, 5
    g = TFGrid(M, N)
    x = crandn(np.random.default_rng(seed), (M, N))
    shifted = np.roll(x, (kp, lp), axis=(0, 1))
    n = np.arange(N)[:, None]
    m = np.arange(M)[None, :]
    expect = sfft(DDFrame(g, x)).data * np.exp(-2j * np.pi * (m * kp / M - n * lp / N))
    assert np.max(np.abs(sfft(DDFrame(g, shifted)).data - expect)) < 1e-10


def test_otfs_transform_windows(gen):
    g = TFGrid(6, 4)
    x = DDFrame(g, crandn(gen, (6, 4)))
    assert np.allclose(otfs_transform(x).data, sfft(x).data, atol=1e-12)
    zero = Window2D(g, np.zeros((4, 6)), np.ones((4, 6)))
    assert not np.any(otfs_transform(x, zero).data)
    w = Window2D(g, crandn(gen, (4, 6)), np.ones((4, 6)))
    assert np.max(np.abs(otfs_transform(x, w).data - w.w_tx * sfft(x).data)) < 1e-12


def test_window_shape_checked():
    with pytest.raises(ShapeError):
        Window2D(TFGrid(4, 2), np.ones((4, 2)), np.ones((2, 4)))
    with pytest.raises(ConfigError):
        Window2D(TFGrid(4, 2), np.full((2, 4), np.nan), np.ones((2, 4)))


def test_basis_functions(gen):
    M = N = 4
    g = TFGrid(M, N)
    assert np.allclose(basis_function(BasisIndex(0, 0), g).data, 1)
    B = [basis_function(BasisIndex(k, l), g).data for k in range(M) for l in range(N)]
    for i, bi in enumerate(B):
        assert np.allclose(np.abs(bi), 1)
        for j, bj in enumerate(B):
            assert abs(np.sum(bi * np.conj(bj)) - (M * N if i == j else 0)) < 1e-10
    x = crandn(gen, (M, N))
    sup = sum(x[k, l] * basis_function(BasisIndex(k, l), g).data for k in range(M) for l in range(N))
    assert np.max(np.abs(otfs_transform(DDFrame(g, x)).data - sup)) < 1e-12
    with pytest.raises(ShapeError):
        basis_function(BasisIndex(M, 0), g)


def brute_heisenberg(X, g_tx, grid):
    """Sample-by-sample double sum; sample i sits at time (i - offset) / fs."""
    fs, T, df = grid.sample_rate, grid.slot_samples, grid.delta_f
    n_samples = (grid.N - 1) * T + len(g_tx)
    s = np.zeros(n_samples, complex)
    for i in range(n_samples):
        t = (i - g_tx.offset) / fs
        for n in range(grid.N):
            j = i - n * T
            if 0 <= j < len(g_tx):
                for m in range(grid.M):
                    s[i] += X[n, m] * np.exp(2j * np.pi * m * df * (t - n * T / fs)) * g_tx.samples[j]
    return s


@pytest.mark.parametrize("cp", [0, 3])
def test_heisenberg_matches_double_sum(gen, cp):
    grid = TFGrid(8, 2, 1e3, cp_len=cp)
    X = crandn(gen, (2, 8))
    g_tx, _ = make_ofdm_pulses(grid)
    s = heisenberg_modulate(TFFrame(grid, X), g_tx)
    assert np.max(np.abs(s.samples - brute_heisenberg(X, g_tx, grid))) < 1e-10
    custom = Pulse(crandn(gen, 8 + cp), cp, grid.sample_rate)
    s = heisenberg_modulate(TFFrame(grid, X), custom)
    assert np.max(np.abs(s.samples - brute_heisenberg(X, custom, grid))) < 1e-10


def test_heisenberg_single_cell():
    grid = TFGrid(8, 3, cp_len=2)
    g_tx, _ = make_ofdm_pulses(grid)
    X = np.zeros((3, 8))
    X[0, 0] = 1
    s = heisenberg_modulate(TFFrame(grid, X), g_tx).samples
    assert np.allclose(s[:len(g_tx)], g_tx.samples)
    assert not np.any(s[len(g_tx):])


def test_heisenberg_single_subcarrier_no_cp():
    grid = TFGrid(16, 1, 2e3)
    g_tx, _ = make_ofdm_pulses(grid)
    X = np.zeros((1, 16))
    X[0, 5] = 1
    s = heisenberg_modulate(TFFrame(grid, X), g_tx).samples
    t = np.arange(16) / grid.sample_rate
    assert np.allclose(s, math.sqrt(grid.delta_f) * np.exp(2j * np.pi * 5 * grid.delta_f * t))


def test_pulse_rate_mismatch():
    grid = TFGrid(8, 2)
    with pytest.raises(ConfigError):
        heisenberg_modulate(TFFrame(grid, np.zeros((2, 8))), Pulse(np.ones(8), 0, 1.0))


@pytest.mark.parametrize("cp", [0, 4])
def test_wigner_inverts_heisenberg(gen, cp):
    grid = TFGrid(16, 4, cp_len=cp)
    g_tx, g_rx = make_ofdm_pulses(grid)
    X = crandn(gen, (4, 16))
    Y = wigner_demodulate(heisenberg_modulate(TFFrame(grid, X), g_tx), g_rx, grid)
    assert np.max(np.abs(Y.data - X)) < 1e-10


def test_wigner_single_subcarrier_is_orthogonal():
    grid = TFGrid(16, 2, cp_len=2)
    _, g_rx = make_ofdm_pulses(grid)
    t = (np.arange(grid.burst_samples) - 2) / grid.sample_rate
    r = Waveform(np.exp(2j * np.pi * 3 * grid.delta_f * t), grid.sample_rate, -2 / grid.sample_rate)
    Y = wigner_demodulate(r, g_rx, grid).data
    # direct inner product with the receive pulse as oracle
    for n in range(2):
        for m in range(16):
            idx = 2 + n * grid.slot_samples + np.arange(16)
            tt = np.arange(16) / grid.sample_rate
            ref = np.sum(np.exp(-2j * np.pi * m * grid.delta_f * tt) * np.conj(g_rx.samples) * r.samples[idx])
            assert abs(Y[n, m] - ref / grid.sample_rate) < 1e-10
    assert np.allclose(np.delete(Y, 3, axis=1), 0, atol=1e-10)
    assert np.allclose(np.abs(Y[:, 3]), 16 * math.sqrt(grid.delta_f) / grid.sample_rate)


def test_wigner_noise_level():
    grid = TFGrid(16, 2, 1e3, cp_len=4)
    _, g_rx = make_ofdm_pulses(grid)
    sigma2 = 0.7
    g = np.random.default_rng(1)
    noise = math.sqrt(sigma2 / 2) * crandn(g, (10_000, grid.burst_samples))
    Y = wigner_demodulate(Waveform(noise, grid.sample_rate, -4 / grid.sample_rate), g_rx, grid).data
    expected = sigma2 * np.sum(np.abs(g_rx.samples) ** 2) / grid.sample_rate ** 2
    assert abs(np.mean(np.abs(Y) ** 2) / expected - 1) < 0.03


def test_wigner_short_waveform():
    grid = TFGrid(8, 4)
    _, g_rx = make_ofdm_pulses(grid)
    with pytest.raises(ShapeError):
        wigner_demodulate(Waveform(np.zeros(20), grid.sample_rate), g_rx, grid)


def test_demodulate_inverts_transform(gen):
    g = TFGrid(8, 4)
    x = DDFrame(g, crandn(gen, (8, 4)))
    assert np.max(np.abs(otfs_demodulate(otfs_transform(x)).data - x.data)) < 1e-12
    zero = Window2D(g, np.ones((4, 8)), np.zeros((4, 8)))
    assert not np.any(otfs_demodulate(otfs_transform(x), zero).data)


def test_demodulate_equals_projection(gen):
    M, N = 6, 4
    g = TFGrid(M, N)
    Y = crandn(gen, (N, M))
    w = Window2D(g, np.ones((N, M)), crandn(gen, (N, M)))
    proj = np.zeros((M, N), complex)
    for k in range(M):
        for l in range(N):
            b = basis_function(BasisIndex(k, l), g).data
            proj[k, l] = np.sum(w.w_rx * Y * np.conj(b)) / (M * N)
    assert np.max(np.abs(otfs_demodulate(TFFrame(g, Y), w).data - proj)) < 1e-12


def test_periodize_folds_larger_support(gen):
    Y = crandn(gen, (6, 10))
    out = periodize(Y, 3, 4)
    ref = np.zeros((3, 4), complex)
    for i in range(6):
        for j in range(10):
            ref[i % 3, j % 4] += Y[i, j]
    assert np.allclose(out, ref)
    assert periodize(Y[:3, :4], 3, 4) is not None and np.allclose(periodize(Y[:3, :4], 3, 4), Y[:3, :4])


@pytest.mark.parametrize("cp", [0, 1, 5])
def test_identity_chain_reconstructs(gen, cp):
    grid = TFGrid(16, 6, cp_len=cp)
    g_tx, g_rx = make_ofdm_pulses(grid)
    x = DDFrame(grid, crandn(gen, (16, 6)))
    assert np.max(np.abs(otfs_receive(otfs_modulate(x, g_tx), g_rx, grid).data - x.data)) < 1e-9


def test_overlay_equals_standalone_ofdm(gen):
    grid = TFGrid(16, 5, cp_len=4)
    X = otfs_transform(DDFrame(grid, crandn(gen, (16, 5))))
    a = heisenberg_modulate(X, make_ofdm_pulses(grid)[0])
    b = ofdm_modulate(X)
    assert a.t0 == pytest.approx(b.t0)
    assert np.max(np.abs(a.samples - b.samples)) < 1e-10
    assert np.max(np.abs(ofdm_demodulate(b, grid).data - X.data)) < 1e-10
