"""Monte Carlo link simulation, PAPR and effective-SNR studies.

A :class:`Scenario` describes one link.  :func:`run_link` simulates its
frames, each from its own random stream ``(seed, frame)``, so results do not
depend on how frames are spread over worker processes.  Within a frame the
bits, channel and noise sequence are shared by all SNR points and
equalizers, which makes the comparisons paired.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .channel import DDChannel, FadingProfile, apply_dd_channel, builtin_profile, draw_fading_channel, \
    load_profile, tf_channel_gain, BUILTIN_PROFILES
from .config import load_toml, parse_override
from .equalizers import EqualizerConfig, build_effective_operator, equalize, measure_tf_operator, \
    mmse_sinr, tf_single_tap
from .fec import K as CODE_K, conv_encode, viterbi_decode
from .frame_core import ConfigError, DDFrame, QamConstellation, RngStream, TFFrame, TFGrid, Waveform, \
    qam_demap, qam_map, vec_frame, unvec_frame
from .pulses import make_ofdm_pulses, quantize_delay
from .transforms import heisenberg_modulate, otfs_demodulate, otfs_transform, wigner_demodulate

RESULT_SCHEMA = "otfs-sim-results/1"
RESULT_COLUMNS = (
    "scenario_id", "waveform", "mod_order", "coding", "equalizer", "snr_db", "frames", "bit_errors", "bits",
    "ber", "block_errors", "blocks", "bler", "papr_p99_db", "eff_snr_mean_db", "eff_snr_std_db",
)
OFDM_EQUALIZERS = ("tf_single_tap_zf", "tf_single_tap_mmse")
OTFS_EQUALIZERS = ("dd_mmse", "dd_dfe", "dd_dfe_genie")


@dataclass(frozen=True)
class Scenario:
    """One link configuration.

    ``user_allocation`` is ``((a0, a1), (b0, b1))``, half-open ranges on the
    waveform's own symbol grid: delay bins ``k`` then Doppler bins ``l`` for
    OTFS, subcarriers ``m`` then slots ``n`` for OFDM.  With ``other_users``
    the rest of the frame carries other users' random symbols (downlink
    multiplexing); otherwise it is left empty.  ``code_block_bits`` is the
    number of channel bits per block (one codeword when coded); by default a
    frame's allocation is one block.

    The maximum Doppler is ``max_doppler_hz`` if set, else
    ``max_doppler_norm`` times the slot rate ``1/T`` (that is ``N`` Doppler
    bins), else derived from ``velocity_kmh`` and ``carrier_ghz``.
    """

    scenario_id: str = "default"
    M: int = 64
    N: int = 16
    delta_f: float = 15e3
    cp_len: int = 8
    waveform: str = "otfs"
    mod_order: int = 4
    coding: str = "none"
    channel_profile: str = "etu_like"
    equalizers: tuple = ("dd_mmse",)
    dfe_iterations: int = 4
    snr_db: tuple = (10.0,)
    velocity_kmh: float = 120.0
    carrier_ghz: float = 4.0
    max_doppler_hz: float | None = None
    max_doppler_norm: float | None = None
    doppler_model: str = "classical"
    doppler_on_grid: bool = False
    n_frames: int = 100
    seed: int = 1
    user_allocation: tuple | None = None
    other_users: bool = True
    code_block_bits: int | None = None
    operator: str = "auto"
    profile_dir: str = field(default=".", repr=False)

    def __post_init__(self):
        for name in ("equalizers", "snr_db"):
            v = getattr(self, name)
            if isinstance(v, (str, int, float)):
                v = (v,)
            object.__setattr__(self, name, tuple(v))
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        if self.user_allocation is not None:
            object.__setattr__(self, "user_allocation", tuple(tuple(int(i) for i in r) for r in self.user_allocation))
        self.validate()

    def validate(self):
        def bad(name, why):
            raise ConfigError(f"{name}: {why}", name)

        for name in ("M", "N", "n_frames", "dfe_iterations"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                bad(name, "must be a positive integer")
        if not isinstance(self.cp_len, int) or self.cp_len < 0:
            bad("cp_len", "must be a nonnegative integer")
        if self.delta_f <= 0:
            bad("delta_f", "must be positive")
        if self.waveform not in ("ofdm", "otfs"):
            bad("waveform", "must be 'ofdm' or 'otfs'")
        if self.mod_order not in (4, 16, 64, 256):
            bad("mod_order", "must be one of 4, 16, 64, 256")
        if self.coding not in ("none", "conv_r12"):
            bad("coding", "must be 'none' or 'conv_r12'")
        if not self.equalizers:
            bad("equalizers", "at least one equalizer is needed")
        allowed = OFDM_EQUALIZERS if self.waveform == "ofdm" else OTFS_EQUALIZERS
        for eq in self.equalizers:
            if eq not in allowed:
                bad("equalizers", f"{eq!r} does not apply to {self.waveform}; use one of {allowed}")
        if not self.snr_db or any(math.isnan(s) for s in self.snr_db):
            bad("snr_db", "needs at least one numeric SNR")
        if self.operator not in ("auto", "circulant", "blocks", "measured"):
            bad("operator", "must be auto, circulant, blocks or measured")
        if self.doppler_model not in ("classical", "uniform"):
            bad("doppler_model", "must be 'classical' or 'uniform'")
        if self.velocity_kmh < 0 or self.carrier_ghz <= 0:
            bad("velocity_kmh", "velocity must be nonnegative and carrier positive")
        if not 0 <= self.seed < 2 ** 64:
            bad("seed", "must fit in an unsigned 64-bit integer")
        if self.user_allocation is not None:
            lim = (self.M, self.N)
            if len(self.user_allocation) != 2 or any(len(r) != 2 for r in self.user_allocation):
                bad("user_allocation", "must be [[a0, a1], [b0, b1]]")
            for (a, b), n in zip(self.user_allocation, lim):
                if not 0 <= a < b <= n:
                    bad("user_allocation", f"range [{a}, {b}) outside [0, {n})")
        if self.code_block_bits is not None and self.code_block_bits < 1:
            bad("code_block_bits", "must be positive")

    @property
    def grid(self) -> TFGrid:
        return TFGrid(self.M, self.N, self.delta_f, cp_len=self.cp_len)

    @property
    def constellation(self) -> QamConstellation:
        return QamConstellation(self.mod_order)

    @property
    def nu_max(self) -> float:
        if self.max_doppler_hz is not None:
            return float(self.max_doppler_hz)
        if self.max_doppler_norm is not None:
            return float(self.max_doppler_norm) / self.grid.T
        return FadingProfile.doppler_from_mobility(self.velocity_kmh, self.carrier_ghz)

    def profile(self) -> FadingProfile | None:
        """Fading profile, or ``None`` for the identity channel."""
        name = self.channel_profile
        kw = dict(doppler_model=self.doppler_model, doppler_on_grid=self.doppler_on_grid)
        if name == "identity":
            return None
        if name in BUILTIN_PROFILES:
            return builtin_profile(name, self.nu_max, **kw)
        path = Path(name)
        if not path.is_absolute():
            path = Path(self.profile_dir) / path
        if not path.exists():
            raise ConfigError(f"channel_profile: no built-in profile or file named {name!r}", "channel_profile")
        prof = load_profile(path)
        explicit = self.max_doppler_hz is not None or self.max_doppler_norm is not None
        return replace(prof, nu_max=self.nu_max if explicit else prof.nu_max, **kw)

    def allocation_mask(self) -> np.ndarray:
        """Boolean mask in the waveform's frame layout: ``(M, N)`` for OTFS, ``(N, M)`` for OFDM."""
        M, N = self.M, self.N
        (a0, a1), (b0, b1) = self.user_allocation or ((0, M), (0, N))
        if self.waveform == "otfs":
            mask = np.zeros((M, N), bool)
            mask[a0:a1, b0:b1] = True
        else:
            mask = np.zeros((N, M), bool)
            mask[b0:b1, a0:a1] = True
        return mask

    def with_overrides(self, **kw) -> "Scenario":
        return replace(self, **kw)


def scenario_from_dict(cfg: dict, base_dir: str | Path = ".") -> Scenario:
    known = {f.name for f in fields(Scenario)} - {"profile_dir"}
    for key in cfg:
        if key not in known:
            raise ConfigError(f"unknown scenario key {key!r}", key)
    try:
        return Scenario(**cfg, profile_dir=str(base_dir))
    except TypeError as e:
        raise ConfigError(f"bad scenario value: {e}") from None


def load_scenario(path=None, overrides=()) -> Scenario:
    """Scenario from a flat TOML file (or defaults) plus ``key=value`` overrides."""
    cfg = {} if path is None else load_toml(path)
    for item in overrides:
        key, value = parse_override(item)
        cfg[key] = value
    return scenario_from_dict(cfg, Path(path).parent if path else ".")


@dataclass(frozen=True)
class ResultRow:
    scenario_id: str
    waveform: str
    mod_order: int
    coding: str
    equalizer: str
    snr_db: float
    frames: int
    bit_errors: int
    bits: int
    ber: float
    block_errors: int
    blocks: int
    bler: float
    papr_p99_db: float
    eff_snr_mean_db: float
    eff_snr_std_db: float


def papr_db(w: Waveform) -> float:
    """Peak-to-average power ratio of the whole burst in dB."""
    p = np.abs(w.samples) ** 2
    return float(10 * np.log10(p.max() / p.mean()))


class _Link:
    """Per-scenario constants shared by every frame."""

    def __init__(self, scn: Scenario):
        self.scn = scn
        self.grid = scn.grid
        self.pulses = make_ofdm_pulses(self.grid)
        self.c = scn.constellation
        self.bps = self.c.bits_per_symbol
        self.profile = scn.profile()
        self.mask = scn.allocation_mask()
        self.full = bool(self.mask.all())
        self.capacity = int(self.mask.sum()) * self.bps
        block = scn.code_block_bits or self.capacity
        if scn.coding == "conv_r12":
            if block % 2 or block < 2 * (CODE_K + 1):
                raise ConfigError("code_block_bits must be even and hold more than the code tail", "code_block_bits")
            self.info_bits = block // 2 - (CODE_K - 1)
        else:
            self.info_bits = block
        self.block = block
        self.n_blocks = self.capacity // block
        if self.n_blocks == 0:
            raise ConfigError(f"allocation holds {self.capacity} bits, fewer than one block of {block}",
                              "code_block_bits")
        self.perm = np.random.default_rng([self.capacity, block]).permutation(self.capacity)
        self.eq = [EqualizerConfig(k, scn.dfe_iterations, self.c) for k in scn.equalizers]
        g_rx = self.pulses[1]
        # Wigner output noise per unit time-domain noise variance
        self.tf_noise_gain = float(np.sum(np.abs(g_rx.samples) ** 2) / self.grid.sample_rate ** 2)

    def channel(self, rs: RngStream) -> DDChannel:
        if self.profile is None:
            return DDChannel.identity()
        return draw_fading_channel(self.profile, rs.generator(0), self.grid)

    def transmit(self, rs: RngStream):
        """Info bits ``(n_blocks, info_bits)``, the frame symbols and the burst."""
        scn, grid = self.scn, self.grid
        info = rs.generator(1).integers(0, 2, (self.n_blocks, self.info_bits), dtype=np.uint8)
        coded = np.concatenate([conv_encode(b) for b in info]) if scn.coding == "conv_r12" else info.ravel()
        pad = rs.generator(4).integers(0, 2, self.capacity - coded.size, dtype=np.uint8)
        chan_bits = np.concatenate([coded, pad])[self.perm]
        shape = (grid.M, grid.N) if scn.waveform == "otfs" else (grid.N, grid.M)
        data = np.zeros(shape, complex)
        if scn.other_users and not self.full:
            others = rs.generator(3).integers(0, 2, grid.M * grid.N * self.bps, dtype=np.uint8)
            data = unvec_frame(qam_map(others, self.c), shape)
        flat = vec_frame(data)
        flat[vec_frame(self.mask)] = qam_map(chan_bits, self.c)
        data = unvec_frame(flat, shape)
        if scn.waveform == "otfs":
            frame = DDFrame(grid, data)
            X = otfs_transform(frame)
        else:
            frame = TFFrame(grid, data)
            X = frame
        return info, frame, heisenberg_modulate(X, self.pulses[0])

    def decode(self, symbols: np.ndarray) -> np.ndarray:
        bits = qam_demap(symbols, self.c)
        chan = np.empty_like(bits)
        chan[self.perm] = bits
        coded = chan[:self.n_blocks * self.block].reshape(self.n_blocks, self.block)
        return viterbi_decode(coded) if self.scn.coding == "conv_r12" else coded

    def operator_mode(self, ch: DDChannel) -> str:
        mode = self.scn.operator
        if mode != "auto":
            return mode
        dmax = max(quantize_delay(p.delay, self.grid.sample_rate)[0] for p in ch.paths)
        return "blocks" if dmax <= self.grid.cp_len else "measured"


def _simulate_frame(link: _Link, frame_id: int):
    scn, grid = link.scn, link.grid
    rs = RngStream(scn.seed, frame_id)
    ch = link.channel(rs)
    info, frame, s = link.transmit(rs)
    r_clean = apply_dd_channel(s, ch)
    power = float(np.mean(np.abs(s.samples) ** 2))
    mode = link.operator_mode(ch)
    if scn.waveform == "otfs":
        op0 = build_effective_operator(ch, None, grid, mode, pulses=link.pulses)
    elif mode == "blocks":
        H = build_effective_operator(ch, None, grid, "blocks", pulses=link.pulses).tf_diagonal()
    else:
        H = TFFrame.from_vec(grid, np.diag(measure_tf_operator(ch, grid, link.pulses)))
    sel = vec_frame(link.mask)
    counts = np.zeros((len(scn.snr_db), len(link.eq), 4), dtype=np.int64)
    eff = np.empty(len(scn.snr_db))
    for i, snr in enumerate(scn.snr_db):
        nv = 0.0 if math.isinf(snr) and snr > 0 else power / 10 ** (snr / 10)
        if nv > 0:
            gen = rs.generator(2, i)
            noise = gen.standard_normal(r_clean.samples.shape) + 1j * gen.standard_normal(r_clean.samples.shape)
            r = Waveform(r_clean.samples + math.sqrt(nv / 2) * noise, r_clean.sample_rate, r_clean.t0)
        else:
            r = r_clean
        Y = wigner_demodulate(r, link.pulses[1], grid)
        s2 = nv * link.tf_noise_gain
        if scn.waveform == "otfs":
            y = otfs_demodulate(Y)
            op = op0.with_noise_var(s2 / (grid.M * grid.N))
            eq_mask = None if (link.full or scn.other_users) else link.mask
            eff[i] = _db(np.mean(mmse_sinr(op, eq_mask)[link.mask])) if s2 > 0 else math.inf
        else:
            eff[i] = _db(np.mean(np.abs(H.data[link.mask]) ** 2) / s2) if s2 > 0 else math.inf
        for j, cfg in enumerate(link.eq):
            if scn.waveform == "otfs":
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    est, _ = equalize(y, op, cfg, x_true=frame, mask=eq_mask)
            else:
                est = tf_single_tap(Y, H, s2, cfg.kind)
            rx = link.decode(vec_frame(est.data)[sel])
            diff = rx != info
            counts[i, j] = (diff.sum(), diff.size, diff.any(axis=1).sum(), diff.shape[0])
    return counts, eff, papr_db(s)


def _db(x) -> float:
    return float(10 * np.log10(x)) if x > 0 else -math.inf


def _frame_chunk(scn: Scenario, frame_ids) -> list:
    with threadpool_limits(1):
        link = _Link(scn)
        return [_simulate_frame(link, f) for f in frame_ids]


def _map_frames(fn, scn: Scenario, n: int, workers: int) -> list:
    """Apply ``fn(scn, ids)`` over frame ids in contiguous chunks; results come back in frame order."""
    ids = list(range(n))
    if workers <= 1 or n <= 1:
        return fn(scn, ids)
    chunks = [c for c in np.array_split(ids, min(workers * 4, n)) if len(c)]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(fn, [scn] * len(chunks), [c.tolist() for c in chunks]))
    return [rec for part in parts for rec in part]


def run_link(scn: Scenario, workers: int = 1) -> list[ResultRow]:
    """Simulate ``scn.n_frames`` frames at every SNR point; one row per (SNR, equalizer)."""
    _Link(scn)  # surface configuration errors before starting workers
    records = _map_frames(_frame_chunk, scn, scn.n_frames, workers)
    counts = np.sum([r[0] for r in records], axis=0)
    eff = np.array([r[1] for r in records])
    papr = np.array([r[2] for r in records])
    p99 = float(np.quantile(papr, 0.99))
    rows = []
    for i, snr in enumerate(scn.snr_db):
        e = eff[:, i]
        finite = e[np.isfinite(e)]
        mean = float(finite.mean()) if finite.size == e.size else math.inf
        std = float(finite.std()) if finite.size == e.size else 0.0
        for j, eq in enumerate(scn.equalizers):
            be, nb, ble, nbl = (int(v) for v in counts[i, j])
            rows.append(ResultRow(scn.scenario_id, scn.waveform, scn.mod_order, scn.coding, eq, snr,
                                  scn.n_frames, be, nb, be / nb, ble, nbl, ble / nbl, p99, mean, std))
    return rows


def write_results_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {RESULT_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for row in rows:
            d = asdict(row)
            w.writerow([_fmt(d[c]) for c in RESULT_COLUMNS])


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def _papr_chunk(scn: Scenario, frame_ids) -> list:
    link = _Link(scn)
    return [papr_db(link.transmit(RngStream(scn.seed, f))[2]) for f in frame_ids]


def papr_ccdf(scn: Scenario, rng: RngStream | None = None, workers: int = 1):
    """Per-frame PAPR of the transmitted burst and its CCDF.

    Returns ``(papr_db, ccdf)`` with ``papr_db`` sorted ascending and
    ``ccdf[i]`` the fraction of frames whose PAPR exceeds ``papr_db[i]``.
    ``rng`` replaces the scenario seed.
    """
    if rng is not None:
        scn = replace(scn, seed=rng.seed)
    values = np.sort(np.asarray(_map_frames(_papr_chunk, scn, scn.n_frames, workers)))
    ccdf = 1.0 - np.arange(1, values.size + 1) / values.size
    return values, ccdf


def papr_at_ccdf(values: np.ndarray, level: float = 1e-2) -> float:
    """PAPR exceeded by a fraction ``level`` of frames."""
    return float(np.quantile(np.asarray(values), 1.0 - level))


@dataclass
class StabilityReport:
    """Effective-SNR time series in dB.

    ``series`` maps ``ofdm`` (per TF symbol), ``otfs_1`` (per frame) and
    ``otfs_<w>`` (per window of ``w`` frames) to ``(times_s, snr_db)``.
    """

    series: dict
    window: int

    def summary(self) -> dict:
        return {k: (float(np.mean(v[1])), float(np.std(v[1]))) for k, v in self.series.items()}


def _otfs_window_sinr(ch: DDChannel, scn: Scenario, n_slots: int, t_start: float, s2: float) -> float:
    g = TFGrid(scn.M, n_slots, scn.delta_f, cp_len=scn.cp_len)
    op = build_effective_operator(ch, None, g, "blocks", noise_var=s2, t_start=t_start)
    return float(np.mean(mmse_sinr(op)))


def _stability_chunk(args, idx) -> list:
    scn, ch, n_slots, s2 = args
    T = scn.grid.T
    with threadpool_limits(1):
        return [_otfs_window_sinr(ch, scn, n_slots, i * n_slots * T, s2) for i in idx]


def snr_stability(scn: Scenario, window: int = 10, workers: int = 1) -> StabilityReport:
    """Effective SNR over ``scn.n_frames`` consecutive frames of one channel drop.

    One fading channel is drawn and observed continuously: frame ``i``
    starts at ``i N T``.  OFDM reports ``|H[n, m]|^2 / s2`` for every TF
    symbol; OTFS reports the mean MMSE SINR over a frame, and over windows
    of ``window`` frames sent as one OTFS frame with ``window N`` slots.
    The SNR is ``scn.snr_db[0]`` against unit-power symbols.
    """
    prof = scn.profile()
    if prof is None or prof.nu_max == 0:
        warnings.warn("stationary channel, the effective SNR series is constant", RuntimeWarning, stacklevel=2)
    grid = scn.grid
    rs = RngStream(scn.seed, 0)
    ch = DDChannel.identity() if prof is None else draw_fading_channel(prof, rs.generator(0), grid)
    dmax = max(quantize_delay(p.delay, grid.sample_rate)[0] for p in ch.paths)
    if dmax > grid.cp_len:
        raise ConfigError("snr_stability needs the channel delay within the CP", "cp_len")
    # with unit-power symbols in either domain the demodulated noise variance
    # per symbol is 1 / SNR (the SFFT gain MN cancels against the ISFFT's 1/MN)
    s2 = 10 ** (-scn.snr_db[0] / 10)
    n_total = scn.n_frames * grid.N
    long_grid = TFGrid(grid.M, n_total, grid.delta_f, cp_len=grid.cp_len)
    H = tf_channel_gain(ch, long_grid).data
    t_sym = np.repeat(np.arange(n_total) * grid.T, grid.M)
    series = {"ofdm": (t_sym, 10 * np.log10(np.abs(H.ravel()) ** 2 / s2))}
    for w in (1, window):
        n_win = scn.n_frames // w
        vals = _map_frames(_stability_chunk, (scn, ch, w * grid.N, s2), n_win, workers) if n_win else []
        series[f"otfs_{w}"] = (np.arange(n_win) * w * grid.N * grid.T, 10 * np.log10(np.asarray(vals)))
    return StabilityReport(series, window)


@dataclass(frozen=True)
class ComplexityReport:
    M: int
    N: int
    sc_fdma_ops: float
    otfs_ops: float

    @property
    def extra_ratio(self) -> float:
        return self.otfs_ops / self.sc_fdma_ops - 1.0


def overlay_complexity_report(M: int, N: int) -> ComplexityReport:
    """FFT work of the OTFS precoder (``MN log2 MN``) against the SC-FDMA one (``MN log2 M``)."""
    if M < 2 or N < 1:
        raise ConfigError("complexity report needs M >= 2 and N >= 1", "M")
    return ComplexityReport(M, N, M * N * math.log2(M), M * N * math.log2(M * N))
