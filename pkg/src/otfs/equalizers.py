"""Single-tap TF equalisation and delay-Doppler MMSE / decision-feedback equalisers.

The DD equalisers work on an :class:`EffectiveChannelOperator`, the linear
map from the transmitted DD frame to the demodulated one.  Three
representations exist:

* ``kernel``: 2D circulant kernel, the ideal on-grid relation ``h_w / NM``.
* ``matrix``: dense ``(MN, MN)`` matrix, measured by pushing every DD basis
  vector through the full waveform chain.
* ``blocks``: per-slot ``(M, M)`` time-frequency matrices.  When the cyclic
  prefix covers the channel delay, slots do not interact and the DD operator
  is ``ISFFT . blockdiag . SFFT``; all solves then reduce to ``N`` small
  eigenproblems.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .channel import DDChannel, apply_dd_channel, circular_convolve2d, windowed_dd_response
from .frame_core import (
    ConfigError, DDFrame, QamConstellation, ShapeError, TFFrame, TFGrid, qam_slice, unvec_frame, vec_frame,
)
from .pulses import Pulse, make_ofdm_pulses, quantize_delay
from .transforms import Window2D, heisenberg_modulate, isfft, otfs_demodulate, otfs_transform, sfft, wigner_demodulate

#: largest MN for which a dense operator is built or solved
DENSE_CAP = 4096
#: regulariser used when an MMSE solve is requested with zero noise
ZERO_NOISE_EPS = 1e-12

KINDS = ("tf_single_tap_zf", "tf_single_tap_mmse", "dd_mmse", "dd_dfe", "dd_dfe_genie")


@dataclass(frozen=True)
class EqualizerConfig:
    kind: str = "dd_mmse"
    dfe_iterations: int = 4
    constellation: QamConstellation | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown equalizer {self.kind!r}", "equalizer")
        if self.kind.startswith("dd_dfe") and self.constellation is None:
            raise ConfigError("decision feedback needs a constellation", "equalizer")
        if self.dfe_iterations < 1:
            raise ConfigError("dfe_iterations must be positive", "dfe_iterations")


@dataclass(frozen=True, eq=False)
class EffectiveChannelOperator:
    """Linear map from transmitted to demodulated DD frames, plus DD noise variance.

    Exactly one of ``kernel``, ``matrix`` or ``blocks`` is set; see the
    module docstring.  ``matrix`` acts on Fortran-order vectors.
    """

    grid: TFGrid
    noise_var: float = 0.0
    kernel: np.ndarray | None = None
    matrix: np.ndarray | None = None
    blocks: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        given = [a is not None for a in (self.kernel, self.matrix, self.blocks)]
        if sum(given) != 1:
            raise ConfigError("operator needs exactly one of kernel, matrix or blocks")
        M, N = self.grid.M, self.grid.N
        expected = {"kernel": (M, N), "matrix": (M * N, M * N), "blocks": (N, M, M)}
        for name, shape in expected.items():
            a = getattr(self, name)
            if a is not None and a.shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {a.shape}")
        if self.noise_var < 0:
            raise ConfigError("noise_var must be nonnegative", "noise_var")

    @property
    def representation(self) -> str:
        if self.kernel is not None:
            return "circulant"
        return "dense" if self.matrix is not None else "blocks"

    @property
    def is_circulant(self) -> bool:
        return self.kernel is not None

    @property
    def size(self) -> int:
        return self.grid.M * self.grid.N

    def with_noise_var(self, noise_var: float) -> "EffectiveChannelOperator":
        # spectral factorisations do not depend on the noise level, keep them
        keep = {k: v for k, v in self._cache.items() if k in ("spectral", "dense")}
        return replace(self, noise_var=float(noise_var), _cache=keep)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Apply to an ``(..., M, N)`` array."""
        grid = self.grid
        if self.kernel is not None:
            return circular_convolve2d(self.kernel, x)
        if self.blocks is not None:
            X = sfft(DDFrame(grid, x)).data
            Y = _per_slot(self.blocks, X)
            return isfft(TFFrame(grid, Y)).data
        return unvec_frame(vec_frame(x) @ self.matrix.T, (grid.M, grid.N))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        grid = self.grid
        if self.kernel is not None:
            kf = np.fft.fft2(self.kernel)
            return np.fft.ifft2(np.conj(kf) * np.fft.fft2(y, axes=(-2, -1)), axes=(-2, -1))
        if self.blocks is not None:
            Y = sfft(DDFrame(grid, y)).data
            X = _per_slot(_herm(self.blocks), Y)
            return isfft(TFFrame(grid, X)).data
        return unvec_frame(vec_frame(y) @ np.conj(self.matrix), (grid.M, grid.N))

    def dense(self) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix
        if self.size > DENSE_CAP:
            raise ConfigError(f"MN = {self.size} exceeds the dense cap {DENSE_CAP}")
        if "dense" not in self._cache:
            eye = unvec_frame(np.eye(self.size, dtype=complex), (self.grid.M, self.grid.N))
            self._cache["dense"] = vec_frame(self.apply(eye)).T
        return self._cache["dense"]

    def column_energy(self) -> np.ndarray:
        """``||a_i||^2`` per DD symbol, as an ``(M, N)`` array."""
        M, N = self.grid.M, self.grid.N
        if self.kernel is not None:
            return np.full((M, N), np.sum(np.abs(self.kernel) ** 2))
        if self.blocks is not None:
            gram = np.sum(_herm(self.blocks) @ self.blocks, axis=0)
            return np.repeat(_dd_diag(gram, M, N)[:, None], N, axis=1)
        return unvec_frame(np.sum(np.abs(self.matrix) ** 2, axis=0), (M, N))

    def tf_diagonal(self) -> TFFrame:
        """Per-cell TF gain seen by a single-tap receiver (block representation only)."""
        if self.blocks is None:
            raise ConfigError("tf_diagonal needs the block representation")
        return TFFrame(self.grid, np.einsum("naa->na", self.blocks))


def _dd_diag(block_sum: np.ndarray, M: int, N: int) -> np.ndarray:
    """Diagonal of ``ISFFT . blockdiag(D_n) . SFFT`` given ``sum_n D_n``; depends on ``k`` only."""
    m = np.arange(M)
    v = np.exp(-2j * np.pi * np.outer(m, m) / M)  # column k is exp(-j2 pi m k / M)
    return np.real(np.sum(np.conj(v) * (block_sum @ v), axis=0)) / (M * N)


def _herm(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def _per_slot(G: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``out[..., n, :] = G[n] @ X[..., n, :]``."""
    return (G @ X[..., None])[..., 0]


def tf_single_tap(Y: TFFrame, H: TFFrame, noise_var: float, kind: str = "tf_single_tap_mmse",
                  return_erasures: bool = False):
    """Per-cell ZF or MMSE.  ZF cells with ``|H| < 1e-12`` are erased (set to 0)."""
    h = np.broadcast_to(H.data, Y.data.shape)
    if kind in ("zf", "tf_single_tap_zf"):
        erased = np.abs(h) < 1e-12
        safe = np.where(erased, 1.0, h)
        X = np.where(erased, 0.0, Y.data / safe)
    elif kind in ("mmse", "tf_single_tap_mmse"):
        erased = np.zeros(h.shape, dtype=bool)
        X = np.conj(h) * Y.data / (np.abs(h) ** 2 + noise_var)
    else:
        raise ConfigError(f"unknown single-tap kind {kind!r}", "equalizer")
    out = TFFrame(Y.grid, X)
    return (out, erased) if return_erasures else out


def measure_tf_operator(ch: DDChannel, grid: TFGrid, pulses: tuple[Pulse, Pulse] | None = None,
                        t_start: float = 0.0) -> np.ndarray:
    """Dense ``(NM, NM)`` map from ``vec(X)`` to ``vec(Y_hat)`` through the waveform chain."""
    if grid.M * grid.N > DENSE_CAP:
        raise ConfigError(f"MN = {grid.M * grid.N} exceeds the dense cap {DENSE_CAP}")
    g_tx, g_rx = pulses or make_ofdm_pulses(grid)
    X = TFFrame(grid, unvec_frame(np.eye(grid.M * grid.N, dtype=complex), (grid.N, grid.M)))
    r = apply_dd_channel(heisenberg_modulate(X, g_tx, t_start), ch)
    return vec_frame(wigner_demodulate(r, g_rx, grid, t_start).data).T


def measure_tf_blocks(ch: DDChannel, grid: TFGrid, pulses: tuple[Pulse, Pulse] | None = None,
                      t_start: float = 0.0) -> np.ndarray:
    """Per-slot TF matrices ``G_n`` with ``Y[n, :] = G_n X[n, :]``, shape ``(N, M, M)``.

    Probe ``j`` lights subcarrier ``j`` in every slot at once, which is exact
    only when slots do not leak into each other (max delay within the CP).
    """
    g_tx, g_rx = pulses or make_ofdm_pulses(grid)
    if g_tx.label != "rect_cp" and g_tx.label != "rect_plain":
        raise ConfigError("block measurement assumes the rectangular CP pulse pair")
    dmax = max(quantize_delay(p.delay, grid.sample_rate)[0] for p in ch.paths)
    if dmax > grid.cp_len:
        raise ConfigError(f"max delay of {dmax} samples exceeds the CP of {grid.cp_len}", "cp_len")
    probes = np.zeros((grid.M, grid.N, grid.M), dtype=complex)
    probes[np.arange(grid.M), :, np.arange(grid.M)] = 1.0
    r = apply_dd_channel(heisenberg_modulate(TFFrame(grid, probes), g_tx, t_start), ch)
    Y = wigner_demodulate(r, g_rx, grid, t_start).data  # (probe j, n, m)
    return np.transpose(Y, (1, 2, 0))


def build_effective_operator(ch: DDChannel, win: Window2D | None, grid: TFGrid, mode: str = "circulant",
                             noise_var: float = 0.0, pulses: tuple[Pulse, Pulse] | None = None,
                             t_start: float = 0.0) -> EffectiveChannelOperator:
    """Operator for ``mode`` in ``{"circulant", "measured", "blocks"}``.

    ``circulant`` stores ``h_w / NM``; ``measured`` stores the chain's
    response to each of the ``MN`` unit DD impulses as matrix columns;
    ``blocks`` stores windowed per-slot TF matrices.
    """
    if mode == "circulant":
        kernel = windowed_dd_response(ch, win, grid) / (grid.M * grid.N)
        return EffectiveChannelOperator(grid, noise_var, kernel=kernel)
    if mode == "blocks":
        win = win or Window2D.rectangular(grid)
        G = measure_tf_blocks(ch, grid, pulses, t_start)
        G = win.w_rx[:, :, None] * G * win.w_tx[:, None, :]
        return EffectiveChannelOperator(grid, noise_var, blocks=G)
    if mode != "measured":
        raise ConfigError(f"unknown operator mode {mode!r}", "mode")
    if grid.M * grid.N > DENSE_CAP:
        raise ConfigError(f"MN = {grid.M * grid.N} exceeds the dense cap {DENSE_CAP}")
    g_tx, g_rx = pulses or make_ofdm_pulses(grid)
    x = DDFrame(grid, unvec_frame(np.eye(grid.M * grid.N, dtype=complex), (grid.M, grid.N)))
    r = apply_dd_channel(heisenberg_modulate(otfs_transform(x, win), g_tx, t_start), ch)
    y = otfs_demodulate(wigner_demodulate(r, g_rx, grid, t_start), win)
    return EffectiveChannelOperator(grid, noise_var, matrix=vec_frame(y.data).T)


class _Spectral:
    """Evaluates ``(v A^H A + s2 I)^-1 A^H r`` and ``diag((v A^H A + s2 I)^-1 A^H A)``.

    ``v`` is the variance of the symbols still to be estimated (1 for plain
    MMSE, smaller once decisions have been fed back).  The Gram matrix is
    diagonalised once per operator: per SFFT bin for circulant operators,
    per slot for block operators, and by one Hermitian eigendecomposition
    for dense ones.
    """

    def __init__(self, op: EffectiveChannelOperator, mask=None):
        self.op = op
        self.grid = op.grid
        self.sel = None
        if op.kernel is not None and mask is None:
            self.kind = "circulant"
            self.lam = np.abs(sfft(DDFrame(op.grid, op.kernel)).data) ** 2
        elif op.blocks is not None and mask is None:
            self.kind = "blocks"
            gram = _herm(op.blocks) @ op.blocks
            self.lam, self.U = np.linalg.eigh(gram)
            self.lam = np.clip(self.lam, 0.0, None)
        else:
            self.kind = "dense"
            A = op.dense()
            if mask is not None:
                self.sel = vec_frame(np.asarray(mask, dtype=bool))
                A = A[:, self.sel]
            if A.shape[1] > DENSE_CAP:
                raise ConfigError(f"dense solve of size {A.shape[1]} exceeds the cap {DENSE_CAP}")
            self.A = A
            self.lam, self.U = linalg.eigh(A.conj().T @ A)
            self.lam = np.clip(self.lam, 0.0, None)

    def _to_vec(self, x: np.ndarray) -> np.ndarray:
        return vec_frame(x)

    def _from_vec(self, v: np.ndarray) -> np.ndarray:
        grid = self.grid
        if self.sel is None:
            return unvec_frame(v, (grid.M, grid.N))
        full = np.zeros(v.shape[:-1] + (grid.M * grid.N,), dtype=complex)
        full[..., self.sel] = v
        return unvec_frame(full, (grid.M, grid.N))

    def filter(self, r: np.ndarray, v: float, s2: float) -> np.ndarray:
        grid = self.grid
        if self.kind == "circulant":
            kf = sfft(DDFrame(grid, self.op.kernel)).data
            rf = sfft(DDFrame(grid, r)).data
            return isfft(TFFrame(grid, np.conj(kf) * rf / (v * self.lam + s2))).data
        if self.kind == "blocks":
            B = self.op.blocks
            R = sfft(DDFrame(grid, r)).data
            z = _per_slot(_herm(self.U), _per_slot(_herm(B), R)) / (v * self.lam + s2)
            z = _per_slot(self.U, z)
            return isfft(TFFrame(grid, z)).data
        z = self._to_vec(r) @ np.conj(self.A)
        z = (z @ np.conj(self.U)) / (v * self.lam + s2)
        return self._from_vec(z @ self.U.T)

    def beta(self, v: float, s2: float) -> np.ndarray:
        """``diag((v G + s2 I)^-1 G)`` as an ``(M, N)`` array (zero outside the mask)."""
        grid = self.grid
        phi = self.lam / (v * self.lam + s2)
        if self.kind == "circulant":
            return np.full((grid.M, grid.N), np.mean(phi))
        if self.kind == "blocks":
            n, m = phi.shape
            left = np.swapaxes(self.U * phi[:, None, :], 0, 1).reshape(m, n * m)
            dsum = left @ _herm(self.U).reshape(n * m, m)
            return np.repeat(_dd_diag(dsum, grid.M, grid.N)[:, None], grid.N, axis=1)
        d = np.real(np.sum(np.abs(self.U) ** 2 * phi, axis=1))
        return np.real(self._from_vec(d))


def _spectral(op: EffectiveChannelOperator, mask=None) -> _Spectral:
    key = ("spectral", None if mask is None else np.asarray(mask, bool).tobytes())
    if key[1] is None:
        key = "spectral"
    if key not in op._cache:
        op._cache[key] = _Spectral(op, mask)
    return op._cache[key]


def _noise(op: EffectiveChannelOperator) -> float:
    return op.noise_var if op.noise_var > 0 else ZERO_NOISE_EPS


def dd_mmse(y: DDFrame, op: EffectiveChannelOperator, unbiased: bool = True, mask=None) -> DDFrame:
    """Linear MMSE estimate ``(A^H A + s2 I)^-1 A^H y`` of unit-power DD symbols.

    Circulant operators are inverted bin by bin in the SFFT domain; block
    and dense operators through an eigendecomposition of the Gram matrix.
    With ``unbiased`` each estimate is divided by its MMSE bias so slicing
    is not pulled towards the origin.  ``mask`` restricts the unknowns to an
    allocation (other symbols are known to be zero).  With zero noise the
    solve is regularised by ``1e-12``, with a ``RuntimeWarning`` when the
    normal equations are singular.
    """
    sp = _spectral(op, mask)
    s2 = _noise(op)
    if op.noise_var <= 0 and sp.lam.min() <= ZERO_NOISE_EPS * max(sp.lam.max(), 1.0):
        warnings.warn("singular normal equations at zero noise, regularised by 1e-12",
                      RuntimeWarning, stacklevel=2)
    x = sp.filter(y.data, 1.0, s2)
    if unbiased:
        b = sp.beta(1.0, s2)
        x = np.where(b > 0, x / np.where(b > 0, b, 1.0), 0)
    return DDFrame(op.grid, x)


def mmse_sinr(op: EffectiveChannelOperator, mask=None) -> np.ndarray:
    """Per-symbol SINR of the unbiased MMSE estimate, linear scale, shape ``(M, N)``."""
    if op.noise_var <= 0:
        raise ConfigError("SINR needs a positive noise variance", "noise_var")
    b = _spectral(op, mask).beta(1.0, op.noise_var)
    b = np.clip(b, 0.0, 1.0 - 1e-15)
    return b / (1.0 - b)


class DfeResult(NamedTuple):
    soft: DDFrame
    hard: DDFrame
    log: list


def _decision_error_var(z: np.ndarray, eps: np.ndarray, d: np.ndarray, c: QamConstellation) -> np.ndarray:
    """Posterior ``E|x - d|^2`` given ``z = x + CN(0, eps)`` and a uniform QAM prior."""
    pts = c.points
    dist = np.abs(z[..., None] - pts) ** 2 / eps[..., None]
    dist -= dist.min(axis=-1, keepdims=True)
    p = np.exp(-dist)
    p /= p.sum(axis=-1, keepdims=True)
    return np.sum(p * np.abs(pts - d[..., None]) ** 2, axis=-1)


def dd_dfe(y: DDFrame, op: EffectiveChannelOperator, cfg: EqualizerConfig,
           x_true: DDFrame | None = None, mask=None) -> DfeResult:
    """Iterative hard-decision parallel interference cancellation.

    Starts from the unbiased MMSE estimate.  Each round slices all symbols,
    rebuilds the interference through the operator, and re-estimates every
    symbol with the others' contribution removed:
    ``z = d + (v A^H A + s2 I)^-1 A^H (y - A d) / beta``, where ``v`` is the
    mean posterior error variance of the current decisions.  With reliable
    decisions (``v -> 0``) this is matched filtering after cancellation.
    In genie mode the true symbols are fed back, which is the
    error-propagation-free bound.  ``log`` records, per round, the number of
    changed decisions and ``v``.
    """
    if cfg.kind not in ("dd_dfe", "dd_dfe_genie"):
        raise ConfigError(f"dd_dfe cannot run kind {cfg.kind!r}", "equalizer")
    c = cfg.constellation
    grid = op.grid
    active = np.ones((grid.M, grid.N), bool) if mask is None else np.asarray(mask, bool)
    if cfg.kind == "dd_dfe_genie":
        if x_true is None:
            raise ConfigError("genie feedback needs the transmitted frame", "equalizer")
        fb = np.where(active, x_true.data, 0)
        energy = op.column_energy() if mask is None else np.real(_spectral(op, mask).beta(0.0, 1.0))
        energy = np.where(energy > 0, energy, 1.0)
        z = np.where(active, fb + op.adjoint(y.data - op.apply(fb)) / energy, 0)
        return DfeResult(DDFrame(grid, z), DDFrame(grid, np.where(active, qam_slice(z, c), 0)), [(0, 0.0)])
    sp = _spectral(op, mask)
    s2 = _noise(op)
    beta = sp.beta(1.0, s2)
    safe = np.where(beta > 0, beta, 1.0)
    z = np.where(active, sp.filter(y.data, 1.0, s2) / safe, 0)
    eps = np.where(active, np.maximum(1.0 / safe - 1.0, 1e-12), 1.0)
    d = np.where(active, qam_slice(z, c), 0)
    log = []
    for _ in range(cfg.dfe_iterations):
        v = float(np.mean(_decision_error_var(z, eps, d, c)[active]))
        beta = sp.beta(v, s2)
        safe = np.where(beta > 0, beta, 1.0)
        z = np.where(active, d + sp.filter(y.data - op.apply(d), v, s2) / safe, 0)
        eps = np.where(active, np.maximum(1.0 / safe - v, 1e-12), 1.0)
        d_new = np.where(active, qam_slice(z, c), 0)
        log.append((int(np.count_nonzero(d_new != d)), v))
        d = d_new
    return DfeResult(DDFrame(grid, z), DDFrame(grid, d), log)


def equalize(y: DDFrame, op: EffectiveChannelOperator, cfg: EqualizerConfig,
             x_true: DDFrame | None = None, mask=None) -> tuple[DDFrame, DDFrame | None]:
    """Dispatch on ``cfg.kind``; returns soft estimates and hard decisions when a constellation is set."""
    if cfg.kind == "dd_mmse":
        soft = dd_mmse(y, op, mask=mask)
        hard = None if cfg.constellation is None else DDFrame(op.grid, qam_slice(soft.data, cfg.constellation))
        return soft, hard
    if cfg.kind.startswith("dd_dfe"):
        res = dd_dfe(y, op, cfg, x_true=x_true, mask=mask)
        return res.soft, res.hard
    raise ConfigError(f"{cfg.kind!r} is not a delay-Doppler equalizer", "equalizer")


def hardening_report(op: EffectiveChannelOperator, H: TFFrame) -> dict:
    """Spread of per-symbol gains in the DD domain versus the TF domain.

    The DD gain of symbol ``(k, l)`` is its collected energy ``||a_i||^2``,
    the TF gain of cell ``(n, m)`` is ``|H[n, m]|^2``.  Both are divided by
    their mean before taking the variance.
    """
    dd = op.column_energy().ravel()
    tf = np.abs(H.data.ravel()) ** 2
    return {
        "dd_gain_var": float(np.var(dd / dd.mean())),
        "tf_gain_var": float(np.var(tf / tf.mean())),
    }
