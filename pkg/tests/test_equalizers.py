import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import crandn
from otfs.channel import DDChannel, DDPath, draw_fading_channel, builtin_profile, tf_channel_gain
from otfs.equalizers import (
    DENSE_CAP, EffectiveChannelOperator, EqualizerConfig, build_effective_operator, dd_dfe, dd_mmse,
    equalize, hardening_report, measure_tf_blocks, measure_tf_operator, mmse_sinr, tf_single_tap,
)
from otfs.frame_core import ConfigError, DDFrame, QamConstellation, RngStream, TFFrame, TFGrid, qam_demap, qam_map, qam_slice
from otfs.frame_core import unvec_frame, vec_frame

QAM4 = QamConstellation(4)


def _grid_channel(grid, gen, n_paths=3, max_k=4, max_l=2, doppler=True):
    return DDChannel.from_grid_paths(grid, [
        (complex(crandn(gen, ())) / np.sqrt(2 * n_paths), int(gen.integers(0, max_k + 1)),
         int(gen.integers(-max_l, max_l + 1)) if doppler else 0)
        for _ in range(n_paths)])


def _symbols(grid, gen, c=QAM4):
    bits = gen.integers(0, 2, grid.M * grid.N * c.bits_per_symbol, dtype=np.uint8)
    return DDFrame(grid, qam_map(bits, c).reshape(grid.N, grid.M).T)


# single-tap TF equalizers

def test_single_tap_unit_channel(gen):
    g = TFGrid(8, 4)
    Y = TFFrame(g, crandn(gen, (4, 8)))
    H = TFFrame(g, np.ones((4, 8)))
    for kind in ("tf_single_tap_zf", "tf_single_tap_mmse"):
        assert np.allclose(tf_single_tap(Y, H, 0.0, kind).data, Y.data)


def test_single_tap_zf_and_mmse_limit(gen):
    g = TFGrid(8, 4)
    X = crandn(gen, (4, 8))
    H = crandn(gen, (4, 8))
    Y = TFFrame(g, H * X)
    assert np.max(np.abs(tf_single_tap(Y, TFFrame(g, H), 0.0, "tf_single_tap_zf").data - X)) < 1e-10
    zf = tf_single_tap(Y, TFFrame(g, H), 0.0, "tf_single_tap_zf").data
    mmse = tf_single_tap(Y, TFFrame(g, H), 1e-13, "tf_single_tap_mmse").data
    ok = np.abs(H) > 1e-3
    assert np.max(np.abs(zf - mmse)[ok]) < 1e-9


def test_single_tap_zf_erasures():
    g = TFGrid(2, 1)
    out, erased = tf_single_tap(TFFrame(g, [[1.0, 1.0]]), TFFrame(g, [[0.0, 2.0]]), 0.0, "tf_single_tap_zf",
                                return_erasures=True)
    assert erased.tolist() == [[True, False]]
    assert out.data.tolist() == [[0, 0.5]]
    with pytest.raises(ConfigError):
        tf_single_tap(TFFrame(g, [[1.0, 1.0]]), TFFrame(g, [[1.0, 1.0]]), 0.0, "dd_mmse")


# operators

def test_identity_circulant_operator(gen):
    g = TFGrid(8, 4, cp_len=2)
    op = build_effective_operator(DDChannel.identity(), None, g, "circulant")
    assert op.is_circulant and op.representation == "circulant"
    assert np.allclose(op.dense(), np.eye(32), atol=1e-12)


def test_measured_matches_circulant_without_doppler(gen):
    g = TFGrid(8, 4, cp_len=4)
    for _ in range(3):
        ch = _grid_channel(g, gen, doppler=False)
        meas = build_effective_operator(ch, None, g, "measured")
        circ = build_effective_operator(ch, None, g, "circulant")
        assert meas.matrix.shape == (32, 32)
        assert np.max(np.abs(meas.dense() - circ.dense())) < 1e-6


def test_blocks_match_measured_with_doppler(gen):
    g = TFGrid(8, 4, cp_len=4)
    ch = DDChannel((DDPath(0.8, 2 / g.sample_rate, 1234.5), DDPath(0.3j, 4 / g.sample_rate, -700.0)))
    meas = build_effective_operator(ch, None, g, "measured")
    blocks = build_effective_operator(ch, None, g, "blocks")
    assert np.max(np.abs(meas.dense() - blocks.dense())) < 1e-10
    x = crandn(gen, (8, 4))
    assert np.allclose(blocks.apply(x), meas.apply(x))
    assert np.allclose(blocks.adjoint(x), meas.adjoint(x))
    assert np.allclose(blocks.column_energy(), meas.column_energy())


def test_blocks_are_block_diagonal_part_of_tf_matrix(gen):
    g = TFGrid(8, 3, cp_len=3)
    ch = DDChannel((DDPath(1.0, 3 / g.sample_rate, 900.0), DDPath(0.5, 0.0, -300.0)))
    full = measure_tf_operator(ch, g)
    G = measure_tf_blocks(ch, g)
    # TF vectors are slot-fastest, so slot n of subcarrier m sits at index n + N m
    for n in range(3):
        idx = n + 3 * np.arange(8)
        assert np.allclose(full[np.ix_(idx, idx)], G[n])
    off = full.copy()
    for n in range(3):
        idx = n + 3 * np.arange(8)
        off[np.ix_(idx, idx)] = 0
    assert np.max(np.abs(off)) < 1e-12


def test_blocks_reject_delay_beyond_cp():
    g = TFGrid(8, 2, cp_len=1)
    with pytest.raises(ConfigError):
        measure_tf_blocks(DDChannel((DDPath(1.0, 3 / g.sample_rate, 0.0),)), g)


def test_operator_validation():
    g = TFGrid(4, 2)
    with pytest.raises(ConfigError):
        EffectiveChannelOperator(g)
    with pytest.raises(ConfigError):
        EffectiveChannelOperator(g, -1.0, kernel=np.zeros((4, 2)))
    big = TFGrid(128, 64)
    with pytest.raises(ConfigError):
        EffectiveChannelOperator(big, kernel=np.zeros((128, 64))).dense()
    assert 128 * 64 > DENSE_CAP


# dd_mmse

def test_mmse_identity_noiseless(gen):
    g = TFGrid(8, 4)
    y = DDFrame(g, crandn(gen, (8, 4)))
    op = build_effective_operator(DDChannel.identity(), None, g)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.allclose(dd_mmse(y, op).data, y.data, atol=1e-9)


def test_mmse_undoes_circular_shift(gen):
    g = TFGrid(8, 4)
    kernel = np.zeros((8, 4), complex)
    kernel[3, 1] = 0.5j
    op = EffectiveChannelOperator(g, 0.0, kernel=kernel)
    x = crandn(gen, (8, 4))
    y = DDFrame(g, op.apply(x))
    assert np.allclose(y.data, 0.5j * np.roll(x, (3, 1), axis=(0, 1)))
    assert np.max(np.abs(dd_mmse(y, op).data - x)) < 1e-9


def test_mmse_dense_matches_least_squares(gen):
    g = TFGrid(4, 4)
    A = np.eye(16) + 0.3 * crandn(gen, (16, 16)) / 4
    x = crandn(gen, 16)
    y = DDFrame.from_vec(g, A @ x)
    op = EffectiveChannelOperator(g, 0.0, matrix=A)
    ls = np.linalg.lstsq(A, y.vec(), rcond=None)[0]
    assert np.max(np.abs(dd_mmse(y, op, unbiased=False).vec() - ls)) < 1e-8
    noisy = op.with_noise_var(0.2)
    ref = np.linalg.solve(A.conj().T @ A + 0.2 * np.eye(16), A.conj().T @ y.vec())
    assert np.max(np.abs(dd_mmse(y, noisy, unbiased=False).vec() - ref)) < 1e-10


def test_mmse_warns_when_singular(gen):
    g = TFGrid(4, 2)
    op = EffectiveChannelOperator(g, 0.0, kernel=np.ones((4, 2)) / 8)
    with pytest.warns(RuntimeWarning):
        dd_mmse(DDFrame(g, crandn(gen, (4, 2))), op)


def test_circulant_blocks_dense_agree(gen):
    g = TFGrid(8, 4, cp_len=4)
    for _ in range(5):
        ch = _grid_channel(g, gen)
        circ = build_effective_operator(ch, None, g, "circulant", noise_var=0.05)
        dense = EffectiveChannelOperator(g, 0.05, matrix=circ.dense())
        y = DDFrame(g, crandn(gen, (8, 4)))
        assert np.max(np.abs(dd_mmse(y, circ).data - dd_mmse(y, dense).data)) < 1e-7
    ch = DDChannel((DDPath(0.8, 2 / g.sample_rate, 1234.5), DDPath(0.3j, 4 / g.sample_rate, -700.0)))
    blocks = build_effective_operator(ch, None, g, "blocks", noise_var=0.05)
    dense = EffectiveChannelOperator(g, 0.05, matrix=blocks.dense())
    y = DDFrame(g, crandn(gen, (8, 4)))
    assert np.max(np.abs(dd_mmse(y, blocks).data - dd_mmse(y, dense).data)) < 1e-9
    assert np.max(np.abs(mmse_sinr(blocks) - mmse_sinr(dense))) < 1e-8


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_mmse_sinr_closed_form(seed, s2):
    g = TFGrid(4, 4)
    A = crandn(np.random.default_rng(seed), (16, 16)) / 4
    op = EffectiveChannelOperator(g, s2, matrix=A)
    # unbiased MMSE SINR is 1 / [(I + A^H A / s2)^-1]_ii - 1
    err = np.real(np.diag(np.linalg.inv(np.eye(16) + A.conj().T @ A / s2)))
    ref = unvec_frame(1 / err - 1, (4, 4))
    assert np.allclose(mmse_sinr(op), ref, rtol=1e-8)


def test_masked_mmse_matches_reduced_solve(gen):
    g = TFGrid(4, 4)
    A = crandn(gen, (16, 16)) / 4
    op = EffectiveChannelOperator(g, 0.1, matrix=A)
    mask = np.zeros((4, 4), bool)
    mask[:, 1:3] = True
    cols = vec_frame(mask)
    y = DDFrame(g, crandn(gen, (4, 4)))
    As = A[:, cols]
    ref = np.linalg.solve(As.conj().T @ As + 0.1 * np.eye(cols.sum()), As.conj().T @ y.vec())
    out = dd_mmse(y, op, unbiased=False, mask=mask).vec()
    assert np.max(np.abs(out[cols] - ref)) < 1e-10
    assert np.all(out[~cols] == 0)


# decision feedback

def test_dfe_identity_operator_slices(gen):
    g = TFGrid(8, 4)
    y = DDFrame(g, _symbols(g, gen).data + 0.1 * crandn(gen, (8, 4)))
    op = build_effective_operator(DDChannel.identity(), None, g, noise_var=0.02)
    res = dd_dfe(y, op, EqualizerConfig("dd_dfe", 1, QAM4))
    assert np.array_equal(res.hard.data, qam_slice(y.data, QAM4))
    assert len(res.log) == 1
    # every equalizer kind makes the same decisions when there is no interference
    x = _symbols(g, gen)
    for kind in ("dd_mmse", "dd_dfe", "dd_dfe_genie"):
        _, hard = equalize(y, op, EqualizerConfig(kind, 3, QAM4), x_true=x)
        assert np.array_equal(hard.data, qam_slice(y.data, QAM4))


def test_genie_noiseless_recovery(gen):
    g = TFGrid(16, 8, cp_len=4)
    x = _symbols(g, gen, QamConstellation(16))
    for mode in ("circulant", "blocks"):
        op = build_effective_operator(_grid_channel(g, gen), None, g, mode)
        y = DDFrame(g, op.apply(x.data))
        res = dd_dfe(y, op, EqualizerConfig("dd_dfe_genie", 1, QamConstellation(16)), x_true=x)
        assert np.array_equal(res.hard.data, x.data)
        assert np.max(np.abs(res.soft.data - x.data)) < 1e-9


def test_dfe_config_checks(gen):
    with pytest.raises(ConfigError):
        EqualizerConfig("dd_dfe")
    with pytest.raises(ConfigError):
        EqualizerConfig("dd_dfe", 0, QAM4)
    with pytest.raises(ConfigError):
        EqualizerConfig("zf")
    g = TFGrid(4, 2)
    op = build_effective_operator(DDChannel.identity(), None, g, noise_var=0.1)
    y = DDFrame(g, np.zeros((4, 2)))
    with pytest.raises(ConfigError):
        dd_dfe(y, op, EqualizerConfig("dd_dfe_genie", 2, QAM4))
    with pytest.raises(ConfigError):
        dd_dfe(y, op, EqualizerConfig("dd_mmse", 2, QAM4))
    with pytest.raises(ConfigError):
        equalize(y, op, EqualizerConfig("tf_single_tap_zf"))


@pytest.mark.slow
def test_dfe_close_to_genie_two_path():
    # Rayleigh path gains with unit mean total power, random on-grid positions
    g = TFGrid(32, 8, cp_len=4)
    s2 = 10 ** (-20 / 10)
    errs = {"dd_dfe": 0, "dd_dfe_genie": 0, "dd_mmse": 0}
    n_bits = 0
    for f in range(1000):
        rs = RngStream(2024, f)
        gen = rs.generator(0)
        ch = DDChannel.from_grid_paths(g, [
            (complex(crandn(gen, ())) / 2, 0, int(gen.integers(-2, 3))),
            (complex(crandn(gen, ())) / 2, int(gen.integers(1, 5)), int(gen.integers(-2, 3)))])
        op = build_effective_operator(ch, None, g, "circulant", noise_var=s2)
        bits = rs.generator(1).integers(0, 2, 2 * 32 * 8, dtype=np.uint8)
        x = DDFrame.from_vec(g, qam_map(bits, QAM4))
        y = DDFrame(g, op.apply(x.data) + np.sqrt(s2 / 2) * crandn(rs.generator(2), (32, 8)))
        for kind in errs:
            _, hard = equalize(y, op, EqualizerConfig(kind, 4, QAM4), x_true=x)
            errs[kind] += int(np.count_nonzero(qam_demap(hard.vec(), QAM4) != bits))
        n_bits += bits.size
    ber = {k: v / n_bits for k, v in errs.items()}
    print("two-path 20 dB BER:", ber)
    assert errs["dd_dfe_genie"] > 0
    assert errs["dd_dfe"] <= errs["dd_mmse"]
    assert errs["dd_dfe"] <= 2 * errs["dd_dfe_genie"]


def test_dd_domain_hardens_channel():
    g = TFGrid(16, 8, cp_len=8)
    prof = builtin_profile("eva_like", 0.2 / g.T * 0.5)
    for f in range(10):
        ch = draw_fading_channel(prof, RngStream(8, f), g)
        op = build_effective_operator(ch, None, g, "blocks")
        rep = hardening_report(op, tf_channel_gain(ch, g))
        assert rep["dd_gain_var"] < rep["tf_gain_var"]
