"""``otfs-sim`` command line interface.

Every subcommand writes a CSV to ``--out`` and a PNG figure next to it.
Exit codes: 0 success, 2 configuration error, 3 selftest failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import load_toml, parse_override
from .frame_core import ConfigError, ShapeError, TFGrid
from .pulses import BIORTH_THRESHOLD, bi_orthogonality_check, make_ofdm_pulses
from .sim import (
    Scenario, overlay_complexity_report, papr_at_ccdf, papr_ccdf, run_link, scenario_from_dict,
    snr_stability, write_results_csv,
)

EXIT_CONFIG = 2
EXIT_SELFTEST = 3


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("workers must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML file with flat key = value pairs")
    common.add_argument("--seed", type=_u64, help="override the configured seed")
    common.add_argument("--out", type=Path, help="CSV output path (a PNG is written next to it)")
    common.add_argument("--workers", type=_positive, default=1, help="worker processes")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    p = argparse.ArgumentParser(prog="otfs-sim", description="OTFS/OFDM link-level simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("run", "Monte Carlo BER/BLER sweep"),
        ("papr", "PAPR CCDF of the configured transmitter against fully loaded OFDM"),
        ("snr-stability", "effective SNR over time, OFDM against OTFS windows"),
        ("biorth-report", "cross-ambiguity sweep of the CP pulse pair"),
        ("complexity", "extra FFT work of the OTFS overlay"),
        ("selftest", "numerical oracle checks"),
    ):
        sub.add_parser(name, parents=[common], help=help_)
    return p


def _config(args, extra_defaults: dict | None = None) -> tuple[dict, Path]:
    cfg = dict(extra_defaults or {})
    base = Path(".")
    if args.config is not None:
        cfg.update(load_toml(args.config))
        base = args.config.parent
    for item in args.overrides:
        key, value = parse_override(item)
        cfg[key] = value
    return cfg, base


def _pop(cfg: dict, key: str, default, kind):
    value = cfg.pop(key, default)
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}", key) from None


def _scenario(args, cfg, base) -> Scenario:
    scn = scenario_from_dict(cfg, base)
    return replace(scn, seed=args.seed) if args.seed is not None else scn


def _out(args, default: str) -> Path:
    out = args.out or Path(default)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    from .plotting import plot_error_rates

    cfg, base = _config(args)
    scn = _scenario(args, cfg, base)
    rows = run_link(scn, workers=args.workers)
    out = _out(args, "results.csv")
    write_results_csv(rows, out)
    plot_error_rates(rows, out.with_suffix(".png"))
    for r in rows:
        print(f"{r.waveform} {r.equalizer} snr={r.snr_db:g} dB ber={r.ber:.3e} bler={r.bler:.3e}")
    return 0


def cmd_papr(args) -> int:
    from .plotting import plot_ccdf

    cfg, base = _config(args, {"other_users": False})
    scn = _scenario(args, cfg, base)
    reference = replace(scn, waveform="ofdm", user_allocation=None, equalizers=("tf_single_tap_mmse",))
    curves = {
        f"{scn.waveform} (configured)": papr_ccdf(scn, workers=args.workers),
        "ofdm fully loaded": papr_ccdf(reference, workers=args.workers),
    }
    out = _out(args, "papr.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "papr_db", "ccdf"])
        for label, (x, p) in curves.items():
            for xi, pi in zip(x, p):
                w.writerow([label, repr(float(xi)), repr(float(pi))])
    plot_ccdf(curves, out.with_suffix(".png"))
    for label, (x, _) in curves.items():
        print(f"{label}: PAPR at 1e-2 CCDF = {papr_at_ccdf(x):.2f} dB")
    return 0


def cmd_snr_stability(args) -> int:
    from .plotting import plot_stability

    cfg, base = _config(args)
    window = _pop(cfg, "window", 10, int)
    scn = _scenario(args, cfg, base)
    report = snr_stability(scn, window=window, workers=args.workers)
    out = _out(args, "snr_stability.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "time_s", "snr_db"])
        for name, (t, v) in report.series.items():
            for ti, vi in zip(t, v):
                w.writerow([name, repr(float(ti)), repr(float(vi))])
    plot_stability(report, out.with_suffix(".png"))
    for name, (mean, std) in report.summary().items():
        print(f"{name}: mean {mean:.2f} dB, std {std:.2f} dB")
    return 0


def cmd_biorth(args) -> int:
    from .plotting import plot_biorth

    cfg, _ = _config(args)
    grid = TFGrid(_pop(cfg, "M", 64, int), _pop(cfg, "N", 16, int), _pop(cfg, "delta_f", 15e3, float),
                  cp_len=_pop(cfg, "cp_len", 8, int))
    guard_samples = _pop(cfg, "guard_delay_samples", grid.cp_len, int)
    guard_nu = _pop(cfg, "guard_doppler_norm", 0.0, float) * grid.delta_f
    kw = dict(n_span=_pop(cfg, "n_span", 1, int), m_span=_pop(cfg, "m_span", 2, int),
              n_nu=_pop(cfg, "n_nu", 5, int), threshold=_pop(cfg, "threshold", BIORTH_THRESHOLD, float))
    if cfg:
        key = next(iter(cfg))
        raise ConfigError(f"unknown biorth-report key {key!r}", key)
    g_tx, g_rx = make_ofdm_pulses(grid)
    report = bi_orthogonality_check(g_rx, g_tx, grid, (guard_samples / grid.sample_rate, guard_nu), **kw)
    out = _out(args, "biorth.csv")
    report.to_csv(out)
    plot_biorth(report, out.with_suffix(".png"))
    verdict = "pass" if report.passed else "fail"
    print(f"A(0,0) = {abs(report.peak):.12f}, max off-lattice |A| = {report.max_off_lattice:.3e}: {verdict}")
    return 0


def cmd_complexity(args) -> int:
    from .plotting import plot_complexity

    cfg, _ = _config(args)
    M, N = _pop(cfg, "M", 1200, int), _pop(cfg, "N", 14, int)
    if cfg:
        key = next(iter(cfg))
        raise ConfigError(f"unknown complexity key {key!r}", key)
    rep = overlay_complexity_report(M, N)
    out = _out(args, "complexity.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "N", "sc_fdma_ops", "otfs_ops", "extra_ratio"])
        w.writerow([M, N, repr(rep.sc_fdma_ops), repr(rep.otfs_ops), repr(rep.extra_ratio)])
    plot_complexity([overlay_complexity_report(M, n) for n in range(1, max(N, 16) + 1)], out.with_suffix(".png"))
    print(f"M={M} N={N}: OTFS overlay adds {100 * rep.extra_ratio:.1f}% FFT work over SC-FDMA")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest, write_selftest_csv

    cfg, _ = _config(args)
    if cfg:
        key = next(iter(cfg))
        raise ConfigError(f"selftest takes no configuration keys, got {key!r}", key)
    results = run_selftest(seed=args.seed or 0, workers=args.workers)
    out = _out(args, "selftest.csv")
    write_selftest_csv(results, out)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.value:.3e} (tol {r.tolerance:.0e})")
    return 0 if all(r.passed for r in results) else EXIT_SELFTEST


COMMANDS = {
    "run": cmd_run,
    "papr": cmd_papr,
    "snr-stability": cmd_snr_stability,
    "biorth-report": cmd_biorth,
    "complexity": cmd_complexity,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ShapeError) as e:
        field = getattr(e, "field", None)
        print(f"config error{f' [{field}]' if field else ''}: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
