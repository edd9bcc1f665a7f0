"""Core value types, QAM mapping, noise injection and error counting.

Array layout conventions:

* ``DDFrame.data`` has shape ``(..., M, N)`` and is indexed ``x[k, l]``
  (delay bin ``k``, Doppler bin ``l``).
* ``TFFrame.data`` has shape ``(..., N, M)`` and is indexed ``X[n, m]``
  (time slot ``n``, subcarrier ``m``).
* Vectorisation of either frame uses Fortran order, so the first index runs
  fastest (``k`` for delay-Doppler frames, ``n`` for time-frequency frames).

Leading batch dimensions are allowed everywhere; the transforms act on the
trailing two axes only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class ShapeError(ValueError):
    """Input array has the wrong length or shape."""


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class TFGrid:
    """Time-frequency lattice and its reciprocal delay-Doppler lattice.

    The grid is critically sampled: the sample rate is ``M * delta_f`` and one
    slot carries ``M`` useful samples plus ``cp_len`` cyclic-prefix samples.
    The lattice time step ``T`` is the full slot period, so ``T * delta_f``
    equals one only when there is no cyclic prefix.
    """

    M: int
    N: int
    delta_f: float = 15e3
    cp_len: int = 0
    samples_per_slot: int | None = None

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise ConfigError(f"M must be a positive integer, got {self.M}", "M")
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"N must be a positive integer, got {self.N}", "N")
        if not self.delta_f > 0:
            raise ConfigError("delta_f must be positive", "delta_f")
        if int(self.cp_len) != self.cp_len or self.cp_len < 0:
            raise ConfigError("cp_len must be a nonnegative integer", "cp_len")
        if self.samples_per_slot is None:
            object.__setattr__(self, "samples_per_slot", int(self.M))
        elif self.samples_per_slot != self.M:
            raise ConfigError(
                "only critically sampled grids are supported (samples_per_slot == M)",
                "samples_per_slot",
            )

    @property
    def sample_rate(self) -> float:
        return self.M * self.delta_f

    @property
    def slot_samples(self) -> int:
        """Samples per slot period including the cyclic prefix."""
        return self.samples_per_slot + self.cp_len

    @property
    def T(self) -> float:
        return self.slot_samples / self.sample_rate

    @property
    def burst_duration(self) -> float:
        return self.N * self.T

    @property
    def bandwidth(self) -> float:
        return self.M * self.delta_f

    @property
    def delay_resolution(self) -> float:
        return 1.0 / (self.M * self.delta_f)

    @property
    def doppler_resolution(self) -> float:
        return 1.0 / (self.N * self.T)

    @property
    def burst_samples(self) -> int:
        return self.N * self.slot_samples


def _check_trailing(data: np.ndarray, shape: tuple[int, int], what: str):
    if data.ndim < 2 or data.shape[-2:] != shape:
        raise ShapeError(f"{what} must have trailing shape {shape}, got {data.shape}")


@dataclass(frozen=True, eq=False)
class DDFrame:
    grid: TFGrid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=complex)
        _check_trailing(data, (self.grid.M, self.grid.N), "DDFrame data")
        object.__setattr__(self, "data", data)

    def vec(self) -> np.ndarray:
        return vec_frame(self.data)

    @classmethod
    def from_vec(cls, grid: TFGrid, v) -> "DDFrame":
        return cls(grid, unvec_frame(v, (grid.M, grid.N)))


@dataclass(frozen=True, eq=False)
class TFFrame:
    grid: TFGrid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=complex)
        _check_trailing(data, (self.grid.N, self.grid.M), "TFFrame data")
        object.__setattr__(self, "data", data)

    def vec(self) -> np.ndarray:
        return vec_frame(self.data)

    @classmethod
    def from_vec(cls, grid: TFGrid, v) -> "TFFrame":
        return cls(grid, unvec_frame(v, (grid.N, grid.M)))


def vec_frame(a: np.ndarray) -> np.ndarray:
    """Stack the trailing 2D array column-wise (first index fastest)."""
    a = np.asarray(a)
    return np.swapaxes(a, -1, -2).reshape(a.shape[:-2] + (-1,))


def unvec_frame(v, shape: tuple[int, int]) -> np.ndarray:
    v = np.asarray(v)
    rows, cols = shape
    return np.swapaxes(v.reshape(v.shape[:-1] + (cols, rows)), -1, -2)


@dataclass(frozen=True, eq=False)
class Waveform:
    """Complex baseband samples; ``t0`` is the absolute time of sample 0."""

    samples: np.ndarray
    sample_rate: float
    t0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=complex))

    def __len__(self):
        return self.samples.shape[-1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self)) / self.sample_rate


@dataclass(frozen=True, eq=False)
class QamConstellation:
    """Square QAM with per-axis reflected-Gray labelling.

    The first half of each label selects the in-phase level, the second half
    the quadrature level.  On each axis, level index ``i`` (ordered from the
    most positive amplitude downwards) carries Gray label ``i ^ (i >> 1)``,
    so label ``0...0`` sits in the ``(+, +)`` corner.
    """

    order: int

    def __post_init__(self):
        if self.order not in (4, 16, 64, 256):
            raise ConfigError(f"unsupported QAM order {self.order}", "mod_order")

    @property
    def bits_per_symbol(self) -> int:
        return int(round(math.log2(self.order)))

    @property
    def levels_per_axis(self) -> int:
        return int(round(math.sqrt(self.order)))

    @cached_property
    def axis_amplitudes(self) -> np.ndarray:
        """Unit-power-scaled amplitude for each per-axis Gray label value."""
        L = self.levels_per_axis
        scale = math.sqrt(2.0 * (L * L - 1) / 3.0)
        amp = np.empty(L)
        for i in range(L):
            amp[i ^ (i >> 1)] = (L - 1 - 2 * i) / scale
        return amp

    @cached_property
    def points(self) -> np.ndarray:
        """Constellation points indexed by integer label (MSB = first bit)."""
        L = self.levels_per_axis
        half = self.bits_per_symbol // 2
        labels = np.arange(self.order)
        i_lab = labels >> half
        q_lab = labels & (L - 1)
        return self.axis_amplitudes[i_lab] + 1j * self.axis_amplitudes[q_lab]

    @cached_property
    def labels(self) -> np.ndarray:
        """Bit tuples, row ``i`` is the label of ``points[i]``."""
        return _int_to_bits(np.arange(self.order), self.bits_per_symbol)


def _int_to_bits(values: np.ndarray, width: int) -> np.ndarray:
    shifts = np.arange(width - 1, -1, -1)
    return ((values[..., None] >> shifts) & 1).astype(np.uint8)


def _bits_to_int(bits: np.ndarray) -> np.ndarray:
    width = bits.shape[-1]
    weights = 1 << np.arange(width - 1, -1, -1)
    return (bits.astype(np.int64) * weights).sum(axis=-1)


def qam_map(bits, c: QamConstellation) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    k = c.bits_per_symbol
    if bits.size % k:
        raise ShapeError(f"{bits.size} bits is not a multiple of {k} bits per symbol")
    return c.points[_bits_to_int(bits.reshape(-1, k))]


def qam_demap(symbols, c: QamConstellation) -> np.ndarray:
    """Hard minimum-distance decisions.

    Square Gray QAM is separable, so deciding each axis independently is the
    same as the 2D minimum-distance rule.  Ties go to the smaller axis label,
    which yields the lexicographically smallest full label.
    """
    symbols = np.asarray(symbols, dtype=complex).ravel()
    amp = c.axis_amplitudes
    i_lab = np.argmin(np.abs(symbols.real[:, None] - amp[None, :]), axis=1)
    q_lab = np.argmin(np.abs(symbols.imag[:, None] - amp[None, :]), axis=1)
    half = c.bits_per_symbol // 2
    labels = (i_lab << half) | q_lab
    return c.labels[labels].ravel()


def qam_slice(symbols, c: QamConstellation) -> np.ndarray:
    """Nearest constellation point, same decision rule as :func:`qam_demap`."""
    symbols = np.asarray(symbols, dtype=complex)
    amp = c.axis_amplitudes
    flat = symbols.ravel()
    i_lab = np.argmin(np.abs(flat.real[:, None] - amp[None, :]), axis=1)
    q_lab = np.argmin(np.abs(flat.imag[:, None] - amp[None, :]), axis=1)
    return (amp[i_lab] + 1j * amp[q_lab]).reshape(symbols.shape)


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    ``generator(*subkeys)`` derives further independent generators, e.g. one
    for bits and one for noise within the same Monte Carlo frame.
    """

    seed: int
    stream_id: int = 0
    _subkeys: tuple = field(default=(), repr=False)

    def generator(self, *subkeys: int) -> np.random.Generator:
        key = (int(self.stream_id),) + tuple(self._subkeys) + tuple(int(s) for s in subkeys)
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *subkeys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self._subkeys + tuple(int(s) for s in subkeys))


def awgn_noise_var(w: Waveform, snr_db: float) -> float:
    """Noise variance that gives ``snr_db`` against the mean sample power of ``w``."""
    if len(w) == 0:
        raise ShapeError("empty waveform")
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    power = float(np.mean(np.abs(w.samples) ** 2))
    return power / 10.0 ** (snr_db / 10.0)


def add_awgn(w: Waveform, snr_db: float, rng: RngStream | np.random.Generator,
             noise_var: float | None = None) -> Waveform:
    """Add circularly symmetric complex Gaussian noise; ``snr_db=inf`` is a no-op.

    The variance is set against the mean sample power of ``w`` unless
    ``noise_var`` is given, which lets a link simulator calibrate against the
    transmitted rather than the received waveform.
    """
    var = awgn_noise_var(w, snr_db) if noise_var is None else float(noise_var)
    if var == 0.0:
        return w
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    shape = w.samples.shape
    noise = gen.standard_normal(shape) + 1j * gen.standard_normal(shape)
    return Waveform(w.samples + math.sqrt(var / 2.0) * noise, w.sample_rate, w.t0)


def error_rates(tx_bits, rx_bits, block_size: int) -> tuple[float, float]:
    tx = np.asarray(tx_bits).ravel()
    rx = np.asarray(rx_bits).ravel()
    if tx.size != rx.size:
        raise ShapeError(f"length mismatch: {tx.size} vs {rx.size}")
    if block_size < 1 or tx.size % block_size:
        raise ShapeError(f"length {tx.size} not divisible by block size {block_size}")
    if tx.size == 0:
        return 0.0, 0.0
    diff = tx != rx
    ber = float(diff.mean())
    bler = float(diff.reshape(-1, block_size).any(axis=1).mean())
    return ber, bler
