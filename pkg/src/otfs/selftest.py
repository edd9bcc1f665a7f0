"""Numerical oracle checks run by ``otfs-sim selftest``.

Each check returns its worst observed error; it passes when that error is
within the tolerance.  Checks draw from ``RngStream(seed, index)`` so the
report is identical however the checks are spread over workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .channel import DDChannel, apply_dd_channel, cascade_equals_twisted, dd_input_output_oracle
from .equalizers import EffectiveChannelOperator, build_effective_operator, dd_mmse
from .fec import conv_encode, viterbi_decode
from .frame_core import DDFrame, QamConstellation, RngStream, TFGrid, Waveform, qam_demap, qam_map
from .pulses import make_ofdm_pulses
from .sim import overlay_complexity_report
from .transforms import heisenberg_modulate, isfft, ofdm_modulate, otfs_modulate, otfs_receive, otfs_transform, sfft


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value <= self.tolerance


def _cn(gen, shape):
    return gen.standard_normal(shape) + 1j * gen.standard_normal(shape)


def _frame(grid, gen):
    return DDFrame(grid, _cn(gen, (grid.M, grid.N)))


def check_sfft_inverse(gen) -> float:
    worst = 0.0
    for M in (1, 2, 4, 8, 16):
        for N in (1, 2, 4, 14, 16):
            x = _frame(TFGrid(M, N), gen)
            X = sfft(x)
            worst = max(worst, np.max(np.abs(isfft(X).data - x.data)),
                        abs(np.sum(np.abs(x.data) ** 2) - np.sum(np.abs(X.data) ** 2) / (M * N)))
    return float(worst)


def check_symplectic_convolution(gen) -> float:
    grid = TFGrid(4, 4)
    M, N = 4, 4
    worst = 0.0
    for _ in range(50):
        a, b = _cn(gen, (M, N)), _cn(gen, (M, N))
        conv = np.zeros((M, N), complex)
        for k in range(M):
            for l in range(N):
                for kk in range(M):
                    for ll in range(N):
                        conv[k, l] += a[kk, ll] * b[(k - kk) % M, (l - ll) % N]
        lhs = sfft(DDFrame(grid, conv)).data
        rhs = sfft(DDFrame(grid, a)).data * sfft(DDFrame(grid, b)).data
        worst = max(worst, np.max(np.abs(lhs - rhs)))
    return float(worst)


def _random_grid_channel(grid, gen, n_paths=2, max_k=None, max_l=None, doppler=True):
    max_k = grid.cp_len if max_k is None else max_k
    max_l = grid.N // 2 if max_l is None else max_l
    paths = []
    for _ in range(n_paths):
        k = int(gen.integers(0, max_k + 1))
        l = int(gen.integers(-max_l, max_l + 1)) if doppler else 0
        paths.append((complex(_cn(gen, ()) / math.sqrt(2 * n_paths)), k, l))
    return DDChannel.from_grid_paths(grid, paths)


def check_twisted_convolution(gen) -> float:
    grid = TFGrid(16, 8, cp_len=4)
    worst = 0.0
    for _ in range(100):
        s = Waveform(_cn(gen, 64), grid.sample_rate, float(gen.integers(0, 8)) / grid.sample_rate)
        h1, h2 = _random_grid_channel(grid, gen), _random_grid_channel(grid, gen)
        worst = max(worst, cascade_equals_twisted(s, h1, h2))
    return worst


def check_chain_oracle(gen) -> float:
    grid = TFGrid(32, 8, cp_len=8)
    g_tx, g_rx = make_ofdm_pulses(grid)
    worst = 0.0
    for _ in range(20):
        ch = _random_grid_channel(grid, gen, n_paths=3, doppler=False)
        x = _frame(grid, gen)
        y = otfs_receive(apply_dd_channel(otfs_modulate(x, g_tx), ch), g_rx, grid)
        worst = max(worst, np.max(np.abs(y.data - dd_input_output_oracle(x, ch).data)))
    return float(worst)


def check_perfect_reconstruction(gen) -> float:
    grid = TFGrid(32, 8, cp_len=4)
    g_tx, g_rx = make_ofdm_pulses(grid)
    x = _frame(grid, gen)
    y = otfs_receive(apply_dd_channel(otfs_modulate(x, g_tx), DDChannel.identity()), g_rx, grid)
    return float(np.max(np.abs(y.data - x.data)))


def check_overlay_ofdm(gen) -> float:
    grid = TFGrid(16, 4, cp_len=4)
    X = otfs_transform(_frame(grid, gen))
    a = heisenberg_modulate(X, make_ofdm_pulses(grid)[0]).samples
    b = ofdm_modulate(X).samples
    return float(np.max(np.abs(a - b)))


def check_complexity(gen) -> float:
    return abs(overlay_complexity_report(1200, 14).extra_ratio - 0.37)


def check_qam_fec(gen) -> float:
    errors = 0
    for order in (4, 16, 64, 256):
        c = QamConstellation(order)
        bits = gen.integers(0, 2, 60 * c.bits_per_symbol, dtype=np.uint8)
        errors += int(np.sum(qam_demap(qam_map(bits, c), c) != bits))
    msg = gen.integers(0, 2, (20, 100), dtype=np.uint8)
    coded = np.array([conv_encode(m) for m in msg])
    coded[:, 50] ^= 1
    errors += int(np.sum(viterbi_decode(coded) != msg))
    return float(errors)


def check_mmse_paths(gen) -> float:
    grid = TFGrid(8, 4, cp_len=4)
    ch = _random_grid_channel(grid, gen, n_paths=3)
    circ = build_effective_operator(ch, None, grid, "circulant", noise_var=0.05)
    dense = EffectiveChannelOperator(grid, 0.05, matrix=circ.dense())
    y = _frame(grid, gen)
    return float(np.max(np.abs(dd_mmse(y, circ).data - dd_mmse(y, dense).data)))


CHECKS = (
    ("sfft_inverse_parseval", check_sfft_inverse, 1e-10),
    ("symplectic_convolution", check_symplectic_convolution, 1e-10),
    ("twisted_convolution", check_twisted_convolution, 1e-10),
    ("chain_vs_dd_oracle", check_chain_oracle, 1e-6),
    ("perfect_reconstruction", check_perfect_reconstruction, 1e-9),
    ("overlay_equals_ofdm", check_overlay_ofdm, 1e-10),
    ("overlay_complexity_37pct", check_complexity, 0.01),
    ("qam_and_fec_round_trip", check_qam_fec, 0.0),
    ("mmse_circulant_vs_dense", check_mmse_paths, 1e-7),
)


def _run(seed: int, indices) -> list:
    out = []
    with threadpool_limits(1):
        for i in indices:
            name, fn, tol = CHECKS[i]
            out.append(CheckResult(name, fn(RngStream(seed, i).generator()), tol))
    return out


def run_selftest(seed: int = 0, workers: int = 1) -> list[CheckResult]:
    idx = list(range(len(CHECKS)))
    if workers <= 1:
        return _run(seed, idx)
    with ProcessPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(_run, [seed] * len(idx), [[i] for i in idx]))
    return [r for p in parts for r in p]


def write_selftest_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# otfs-sim selftest/1\n")
        w = csv.writer(fh)
        w.writerow(["check", "value", "tolerance", "passed"])
        for r in results:
            w.writerow([r.name, repr(float(r.value)), repr(float(r.tolerance)), int(r.passed)])
