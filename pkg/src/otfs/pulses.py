"""Transmit/receive pulse shapes and their cross-ambiguity function."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .frame_core import ConfigError, TFGrid

#: pass threshold for bi-orthogonality, relative to |A(0, 0)|
BIORTH_THRESHOLD = 1e-9


@dataclass(frozen=True, eq=False)
class Pulse:
    """Sampled pulse; ``samples[offset]`` is the value at ``t = 0``."""

    samples: np.ndarray
    offset: int
    sample_rate: float
    label: str = "custom"

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=complex)
        if s.ndim != 1 or s.size == 0:
            raise ConfigError("pulse samples must be a nonempty 1D array")
        if not np.all(np.isfinite(s)):
            raise ConfigError("pulse samples must be finite")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def start(self) -> int:
        """Sample index (relative to t = 0) of the first sample."""
        return -self.offset

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.samples) ** 2) / self.sample_rate)


def make_ofdm_pulses(grid: TFGrid) -> tuple[Pulse, Pulse]:
    """Rectangular CP pulse pair ``(g_tx, g_rx)``.

    ``g_tx`` spans the cyclic prefix plus the useful slot, ``g_rx`` only the
    useful slot.  Both share the amplitude ``sqrt(delta_f)``, which makes
    ``A_{g_rx, g_tx}(0, 0) = 1``.
    """
    M, L = grid.M, grid.cp_len
    amp = math.sqrt(grid.delta_f)
    fs = grid.sample_rate
    g_tx = Pulse(np.full(M + L, amp), L, fs, "rect_cp" if L else "rect_plain")
    g_rx = Pulse(np.full(M, amp), 0, fs, "rect_plain")
    return g_tx, g_rx


def quantize_delay(tau: float, sample_rate: float) -> tuple[int, float]:
    """Nearest sample delay and the residual ``tau - d / sample_rate``."""
    d = int(round(tau * sample_rate))
    return d, tau - d / sample_rate


def cross_ambiguity(g1: Pulse, g2: Pulse, tau: float, nu: float, return_residual: bool = False):
    """``A_{g1,g2}(tau, nu) = sum_t exp(-j2 pi nu (t - tau)) g1*(t - tau) g2(t) / fs``.

    ``tau`` is rounded to the sample grid and the rounded value is used in
    the phase term as well; pass ``return_residual=True`` to also get the
    rounding error in seconds.
    """
    if g1.sample_rate != g2.sample_rate:
        raise ConfigError("pulses have different sample rates")
    fs = g1.sample_rate
    d, residual = quantize_delay(tau, fs)
    lo = max(g2.start, g1.start + d)
    hi = min(g2.start + len(g2), g1.start + len(g1) + d)
    if hi <= lo:
        value = 0j
    else:
        i = np.arange(lo, hi)
        a2 = g2.samples[i + g2.offset]
        a1 = g1.samples[i - d + g1.offset]
        phase = np.exp(-2j * np.pi * nu * (i - d) / fs)
        value = complex(np.sum(phase * np.conj(a1) * a2) / fs)
    if return_residual:
        return value, residual
    return value


@dataclass
class BiorthReport:
    """Sweep of |A_{g_rx,g_tx}| around lattice points.

    ``rows`` holds ``(n, m, tau, nu, magnitude)``; ``tau`` is a channel delay
    (the ambiguity is evaluated at ``n T - tau``) and ``nu`` a Doppler offset
    (evaluated at ``m delta_f - nu``).
    """

    peak: complex
    max_off_lattice: float
    threshold: float
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_off_lattice <= self.threshold * abs(self.peak)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "m", "tau_s", "nu_hz", "magnitude"])
            for n, m, tau, nu, mag in self.rows:
                w.writerow([n, m, repr(float(tau)), repr(float(nu)), repr(float(mag))])


def bi_orthogonality_check(
    g_rx: Pulse,
    g_tx: Pulse,
    grid: TFGrid,
    guard: tuple[float, float],
    n_span: int = 1,
    m_span: int = 2,
    n_nu: int = 5,
    threshold: float = BIORTH_THRESHOLD,
) -> BiorthReport:
    """Check that the cross-ambiguity vanishes near every nonzero lattice point.

    Delays run over every sample in ``[0, tau_max]`` and Dopplers over
    ``n_nu`` points in ``[-nu_max, nu_max]``.  Only one-sided (causal) delays
    are swept since physical path delays are nonnegative.
    """
    tau_max, nu_max = guard
    if tau_max >= grid.T or nu_max >= grid.delta_f:
        raise ConfigError("guard region must be smaller than (T, delta_f)", "guard")
    fs = grid.sample_rate
    taus = np.arange(int(math.floor(tau_max * fs + 1e-9)) + 1) / fs
    nus = np.linspace(-nu_max, nu_max, n_nu) if nu_max > 0 else np.zeros(1)
    peak = cross_ambiguity(g_rx, g_tx, 0.0, 0.0)
    rows = []
    worst = 0.0
    for n in range(-n_span, n_span + 1):
        for m in range(-m_span, m_span + 1):
            for tau in taus:
                for nu in nus:
                    mag = abs(cross_ambiguity(g_rx, g_tx, n * grid.T - tau, m * grid.delta_f - nu))
                    rows.append((n, m, tau, nu, mag))
                    if (n, m) != (0, 0):
                        worst = max(worst, mag)
    return BiorthReport(peak=peak, max_off_lattice=worst, threshold=threshold, rows=rows)
