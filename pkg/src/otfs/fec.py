"""Rate-1/2, K=7 convolutional code (generators 133, 171 octal) with hard Viterbi decoding."""

from __future__ import annotations

import numpy as np

from .frame_core import ShapeError

K = 7
GENERATORS = (0o133, 0o171)
N_STATES = 1 << (K - 1)


def _parity(v: np.ndarray) -> np.ndarray:
    v = v.copy()
    out = np.zeros_like(v)
    while np.any(v):
        out ^= v & 1
        v >>= 1
    return out


# register = (input << 6) | state, state holds the previous six inputs (newest at bit 5)
_REG = np.arange(1 << K)
_OUT = np.stack([_parity(_REG & g) for g in GENERATORS], axis=1).astype(np.uint8)


def conv_encode(bits) -> np.ndarray:
    """Encode with ``K - 1`` zero tail bits; output has ``2 (len + 6)`` bits."""
    u = np.concatenate([np.asarray(bits, dtype=np.uint8).ravel(), np.zeros(K - 1, np.uint8)])
    state = 0
    out = np.empty((u.size, 2), dtype=np.uint8)
    for i, b in enumerate(u):
        reg = (int(b) << (K - 1)) | state
        out[i] = _OUT[reg]
        state = reg >> 1
    return out.ravel()


def _trellis():
    # for next state ns the two predecessors are ((ns & 31) << 1) | b, input u = ns >> 5
    ns = np.arange(N_STATES)
    u = ns >> (K - 2)
    prev = ((ns & (N_STATES // 2 - 1)) << 1)[:, None] | np.array([0, 1])[None, :]
    reg = (u[:, None] << (K - 1)) | prev
    return prev, _OUT[reg].astype(np.int32), u


_PREV, _BRANCH_OUT, _INPUT = _trellis()


def viterbi_decode(coded) -> np.ndarray:
    """Hard-decision maximum-likelihood decoding of a zero-terminated codeword.

    Accepts a 1D codeword or a 2D batch ``(n_words, length)``.  Returns the
    message without tail bits.
    """
    y = np.asarray(coded).astype(np.int32)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    if y.shape[-1] % 2:
        raise ShapeError("coded length must be even")
    B, n_steps = y.shape[0], y.shape[-1] // 2
    if n_steps < K - 1:
        raise ShapeError("codeword shorter than the tail")
    y = y.reshape(B, n_steps, 2)
    inf = np.iinfo(np.int32).max // 4
    metric = np.full((B, N_STATES), inf, dtype=np.int32)
    metric[:, 0] = 0
    decisions = np.empty((n_steps, B, N_STATES), dtype=np.uint8)
    for t in range(n_steps):
        # Hamming distance of each branch: (B, ns, 2 predecessors)
        bm = np.abs(_BRANCH_OUT[None, :, :, :] - y[:, t, None, None, :]).sum(axis=-1)
        cand = metric[:, _PREV] + bm
        choice = np.argmin(cand, axis=-1).astype(np.uint8)
        metric = np.take_along_axis(cand, choice[..., None].astype(np.intp), axis=-1)[..., 0]
        decisions[t] = choice
    state = np.zeros(B, dtype=np.intp)
    bits = np.empty((B, n_steps), dtype=np.uint8)
    rows = np.arange(B)
    for t in range(n_steps - 1, -1, -1):
        bits[:, t] = _INPUT[state]
        state = _PREV[state, decisions[t, rows, state]]
    msg = bits[:, :n_steps - (K - 1)]
    return msg[0] if single else msg
