"""SFFT/ISFFT, the OTFS transform pair, and the discrete Heisenberg/Wigner transforms.

The OTFS modulator is built as an overlay: ``otfs_transform`` produces a
time-frequency frame that any multicarrier (Heisenberg) modulator can send.
With the rectangular CP pulses of :func:`otfs.pulses.make_ofdm_pulses` the
Heisenberg modulator reduces to a plain CP-OFDM modulator, which is also
provided separately as :func:`ofdm_modulate`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .frame_core import ConfigError, DDFrame, ShapeError, TFFrame, TFGrid, Waveform
from .pulses import Pulse


@dataclass(frozen=True, eq=False)
class Window2D:
    grid: TFGrid
    w_tx: np.ndarray
    w_rx: np.ndarray

    def __post_init__(self):
        shape = (self.grid.N, self.grid.M)
        for name in ("w_tx", "w_rx"):
            w = np.asarray(getattr(self, name), dtype=complex)
            if w.shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ConfigError(f"{name} has non-finite entries")
            object.__setattr__(self, name, w)

    @classmethod
    def rectangular(cls, grid: TFGrid) -> "Window2D":
        ones = np.ones((grid.N, grid.M))
        return cls(grid, ones, ones)

    @property
    def product(self) -> np.ndarray:
        return self.w_tx * self.w_rx


@dataclass(frozen=True)
class BasisIndex:
    k: int
    l: int


def sfft(x: DDFrame) -> TFFrame:
    """``X[n, m] = sum_{k,l} x[k, l] exp(-j2 pi (m k / M - n l / N))``."""
    N = x.grid.N
    # forward DFT over delay gives m, unnormalised inverse DFT over Doppler gives n
    a = np.fft.ifft(np.fft.fft(x.data, axis=-2), axis=-1) * N
    return TFFrame(x.grid, np.swapaxes(a, -1, -2))


def isfft(X: TFFrame) -> DDFrame:
    """``x[k, l] = 1/(MN) sum_{n,m} X[n, m] exp(-j2 pi (l n / N - k m / M))``."""
    N = X.grid.N
    a = np.fft.ifft(np.fft.fft(X.data, axis=-2), axis=-1) / N
    return DDFrame(X.grid, np.swapaxes(a, -1, -2))


def _window(win: Window2D | None, grid: TFGrid) -> Window2D:
    if win is None:
        return Window2D.rectangular(grid)
    if (win.grid.M, win.grid.N) != (grid.M, grid.N):
        raise ShapeError("window grid does not match frame grid")
    return win


def otfs_transform(x: DDFrame, win: Window2D | None = None) -> TFFrame:
    win = _window(win, x.grid)
    return TFFrame(x.grid, win.w_tx * sfft(x).data)


def periodize(Y: np.ndarray, N: int, M: int) -> np.ndarray:
    """Fold a time-frequency array of any support onto periods ``(N, M)``.

    Row ``i`` of ``Y`` is taken as time index ``i`` and column ``j`` as
    frequency index ``j``; both are reduced modulo the period.
    """
    Y = np.asarray(Y, dtype=complex)
    n_rows, n_cols = Y.shape[-2:]
    if (n_rows, n_cols) == (N, M):
        return Y
    out = np.zeros(Y.shape[:-2] + (N, M), dtype=complex)
    for i in range(n_rows):
        for j in range(n_cols):
            out[..., i % N, j % M] += Y[..., i, j]
    return out


def otfs_demodulate(Y: TFFrame, win: Window2D | None = None) -> DDFrame:
    """Receive window, periodisation and ISFFT (steps 2-4 of the demodulator)."""
    win = _window(win, Y.grid)
    Yw = win.w_rx * Y.data
    Yp = periodize(Yw, Y.grid.N, Y.grid.M)
    return isfft(TFFrame(Y.grid, Yp))


def basis_function(idx: BasisIndex, grid: TFGrid) -> TFFrame:
    if not (0 <= idx.k < grid.M and 0 <= idx.l < grid.N):
        raise ShapeError(f"basis index {idx} outside grid ({grid.M}, {grid.N})")
    n = np.arange(grid.N)[:, None]
    m = np.arange(grid.M)[None, :]
    return TFFrame(grid, np.exp(-2j * np.pi * (m * idx.k / grid.M - n * idx.l / grid.N)))


def _check_pulse(g: Pulse, grid: TFGrid):
    if not math.isclose(g.sample_rate, grid.sample_rate, rel_tol=1e-12):
        raise ConfigError(
            f"pulse sample rate {g.sample_rate} does not match grid rate {grid.sample_rate}",
            "sample_rate",
        )


def heisenberg_modulate(X: TFFrame, g_tx: Pulse, t_start: float = 0.0) -> Waveform:
    """``s(t) = sum_{n,m} X[n,m] exp(j2 pi m df (t - nT)) g_tx(t - nT)``, sampled at ``M df``.

    ``t_start`` is the absolute time of the lattice point ``n = 0``; the
    returned waveform starts at the first sample of the slot-0 pulse.
    """
    grid = X.grid
    _check_pulse(g_tx, grid)
    M, N, S = grid.M, grid.N, grid.slot_samples
    P = len(g_tx)
    j = np.arange(P) - g_tx.offset
    # sum over m at relative sample j is M * ifft evaluated at j mod M
    u = np.fft.ifft(X.data, axis=-1) * M
    slots = u[..., j % M] * g_tx.samples
    batch = X.data.shape[:-2]
    out = np.zeros(batch + ((N - 1) * S + P,), dtype=complex)
    if P == S:
        out[...] = slots.reshape(batch + (N * S,))
    else:
        for n in range(N):
            out[..., n * S:n * S + P] += slots[..., n, :]
    return Waveform(out, grid.sample_rate, t_start - g_tx.offset / grid.sample_rate)


def wigner_demodulate(r: Waveform, g_rx: Pulse, grid: TFGrid, t_start: float = 0.0) -> TFFrame:
    """Sample the cross-ambiguity ``A_{g_rx, r}`` on the lattice ``(nT, m df)``."""
    _check_pulse(g_rx, grid)
    M, N, S = grid.M, grid.N, grid.slot_samples
    fs = grid.sample_rate
    i0 = int(round((t_start - r.t0) * fs))
    P = len(g_rx)
    j = np.arange(P) - g_rx.offset
    idx = i0 + np.arange(N)[:, None] * S + j[None, :]
    if idx.min() < 0 or idx.max() >= len(r):
        raise ShapeError(f"waveform of {len(r)} samples does not cover {N} slots")
    seg = r.samples[..., idx] * np.conj(g_rx.samples)
    if P == M and g_rx.offset == 0:
        folded = seg
    else:
        fold = np.zeros((P, M))
        fold[np.arange(P), j % M] = 1.0
        folded = seg @ fold
    return TFFrame(grid, np.fft.fft(folded, axis=-1) / fs)


def ofdm_modulate(X: TFFrame) -> Waveform:
    """Classic CP-OFDM: per-slot IFFT, then prepend the cyclic prefix.

    Scaled to match ``heisenberg_modulate`` with the rectangular CP pulse.
    """
    grid = X.grid
    M, L = grid.M, grid.cp_len
    body = np.fft.ifft(X.data, axis=-1) * (M * math.sqrt(grid.delta_f))
    sym = np.concatenate([body[..., M - L:], body], axis=-1) if L else body
    samples = sym.reshape(X.data.shape[:-2] + (-1,))
    return Waveform(samples, grid.sample_rate, -L / grid.sample_rate)


def ofdm_demodulate(r: Waveform, grid: TFGrid) -> TFFrame:
    """Drop each cyclic prefix and FFT; inverse of :func:`ofdm_modulate`."""
    M, N, L, S = grid.M, grid.N, grid.cp_len, grid.slot_samples
    start = int(round((-L / grid.sample_rate - r.t0) * grid.sample_rate))
    if start < 0 or start + N * S > len(r):
        raise ShapeError("waveform too short for the grid")
    blocks = r.samples[..., start:start + N * S].reshape(r.samples.shape[:-1] + (N, S))
    return TFFrame(grid, np.fft.fft(blocks[..., L:], axis=-1) / (M * math.sqrt(grid.delta_f)))


def otfs_modulate(x: DDFrame, g_tx: Pulse, win: Window2D | None = None, t_start: float = 0.0) -> Waveform:
    return heisenberg_modulate(otfs_transform(x, win), g_tx, t_start)


def otfs_receive(r: Waveform, g_rx: Pulse, grid: TFGrid, win: Window2D | None = None,
                 t_start: float = 0.0) -> DDFrame:
    return otfs_demodulate(wigner_demodulate(r, g_rx, grid, t_start), win)
