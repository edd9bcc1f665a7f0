"""Figures written next to the CSV outputs of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_error_rates(rows, path) -> None:
    """BER and BLER against SNR, one curve per (waveform, equalizer)."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    curves = {}
    for r in rows:
        curves.setdefault((r.scenario_id, r.waveform, r.equalizer), []).append(r)
    for (sid, wf, eq), rs in curves.items():
        rs = sorted(rs, key=lambda r: r.snr_db)
        snr = [r.snr_db for r in rs]
        for ax, attr in zip(axes, ("ber", "bler")):
            vals = np.array([getattr(r, attr) for r in rs], dtype=float)
            ax.semilogy(snr, np.where(vals > 0, vals, np.nan), marker="o", label=f"{sid} {wf} {eq}")
    for ax, name in zip(axes, ("BER", "BLER")):
        ax.set_xlabel("SNR [dB]")
        ax.set_ylabel(name)
        ax.grid(True, which="both", alpha=0.3)
    axes[0].legend(fontsize=7)
    _save(fig, path)


def plot_ccdf(curves: dict, path) -> None:
    """``curves`` maps a label to ``(papr_db, ccdf)``."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, p) in curves.items():
        ax.semilogy(x, np.where(p > 0, p, np.nan), label=label)
    ax.set_xlabel("PAPR [dB]")
    ax.set_ylabel("CCDF")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_stability(report, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    for name, (t, snr) in report.series.items():
        if name == "ofdm":
            # one subcarrier is enough to show the fading
            step = max(1, snr.size // max(1, np.unique(t).size))
            ax.plot(t[::step] * 1e3, snr[::step], lw=0.7, label="OFDM (subcarrier 0)")
        else:
            ax.step(t * 1e3, snr, where="post", label=name.replace("_", ", window ") + " frame(s)")
    ax.set_xlabel("time [ms]")
    ax.set_ylabel("effective SNR [dB]")
    ax.grid(True, alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_biorth(report, path) -> None:
    """Worst |A| per lattice offset (n, m) over the guard region."""
    rows = np.array([(n, m, mag) for n, m, _, _, mag in report.rows])
    ns = np.unique(rows[:, 0]).astype(int)
    ms = np.unique(rows[:, 1]).astype(int)
    grid = np.zeros((ns.size, ms.size))
    for n, m, mag in rows:
        i, j = np.searchsorted(ns, n), np.searchsorted(ms, m)
        grid[i, j] = max(grid[i, j], mag)
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(np.log10(grid + 1e-300).clip(-16), origin="lower", aspect="auto",
                   extent=(ms[0] - 0.5, ms[-1] + 0.5, ns[0] - 0.5, ns[-1] + 0.5))
    fig.colorbar(im, ax=ax, label="log10 max |A|")
    ax.set_xlabel("frequency offset m")
    ax.set_ylabel("time offset n")
    _save(fig, path)


def plot_complexity(reports, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r.N for r in reports], [100 * r.extra_ratio for r in reports], marker="o")
    ax.set_xlabel("N")
    ax.set_ylabel("extra FFT work [%]")
    ax.set_title(f"M = {reports[0].M}")
    ax.grid(True, alpha=0.3)
    _save(fig, path)
