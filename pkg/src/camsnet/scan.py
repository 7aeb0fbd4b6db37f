"""Selective state-space scan.

Discretisation follows the usual Mamba convention: the state decay is
``exp(delta * A)`` and the input matrix uses the Euler simplification
``delta * B``. For every batch row, channel ``c`` and state ``s``::

    h_t[c, s] = exp(delta_t[c] * A[c, s]) * h_{t-1}[c, s] + delta_t[c] * u_t[c] * B_t[s]
    y_t[c]    = sum_s C_t[s] * h_t[c, s] + D[c] * u_t[c]

with ``h_{-1} = 0``. Two evaluation strategies share one backward rule:
a step-by-step reference and a chunked variant that solves each chunk in
closed form and carries the state across chunk boundaries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import ShapeError, Tensor, as_tensor, make_result


@dataclass
class ScanConfig:
    d_inner: int
    d_state: int
    dt_rank: int
    chunk_size: int | None = 32

    def __post_init__(self):
        for name in ("d_inner", "d_state", "dt_rank"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.chunk_size is not None and self.chunk_size <= 0:
            raise ValueError("chunk_size must be positive")


def default_dt_rank(d_model: int) -> int:
    return max(1, math.ceil(d_model / 16))


@dataclass
class SSMParams:
    """Learnable SSM tensors. ``a_log`` stores ln(-A), so A is strictly negative."""

    a_log: Tensor          # (d_inner, d_state)
    w_x_proj: Tensor       # (d_inner, dt_rank + 2 * d_state)
    w_dt_proj: Tensor      # (dt_rank, d_inner)
    b_dt_proj: Tensor      # (d_inner,)
    skip_d: Tensor | None = None   # (d_inner,)
    b_x_proj: Tensor | None = None

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.w_dt_proj.shape[0]

    def A(self) -> Tensor:
        return ops.neg(ops.exp(self.a_log))


def discretize(u, params: SSMParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent step sizes and state matrices.

    Returns:
        ``(delta, B, C)`` with shapes (B, L, d_inner), (B, L, d_state), (B, L, d_state).
    """
    u = as_tensor(u)
    if u.shape[-1] != params.d_inner:
        raise ShapeError(f"discretize: input width {u.shape[-1]} != d_inner {params.d_inner}")
    r, n = params.dt_rank, params.d_state
    proj = ops.linear(u, params.w_x_proj, params.b_x_proj)
    dt_low, b_seq, c_seq = ops.split(proj, [r, n, n], axis=-1)
    delta = ops.softplus(ops.linear(dt_low, params.w_dt_proj, params.b_dt_proj))
    return delta, b_seq, c_seq


# -- numpy kernels -------------------------------------------------------------

def _states_sequential(log_decay: np.ndarray, drive: np.ndarray) -> np.ndarray:
    """All states of ``h_t = exp(log_decay_t) * h_{t-1} + drive_t`` (time on axis 1)."""
    decay = np.exp(log_decay)
    states = np.empty_like(drive)
    h = np.zeros_like(drive[:, 0])
    for t in range(drive.shape[1]):
        h = decay[:, t] * h + drive[:, t]
        states[:, t] = h
    return states


def _solve_chunk(log_decay: np.ndarray, drive: np.ndarray, h: np.ndarray, limit: float) -> np.ndarray:
    """States of one chunk starting from ``h``, in closed form.

    With ``S = cumsum(log_decay)``::

        h_t = exp(S_t) * (h + sum_{k <= t} exp(-S_k) * drive_k)

    The rescaled prefix sum is used while ``exp(-S)`` stays representable;
    otherwise the chunk falls back to the pairwise form ``exp(S_t - S_k)``.
    """
    cum = np.cumsum(log_decay, axis=1)
    if cum.min(initial=0.0) > -limit:
        chunk = np.cumsum(np.exp(-cum) * drive, axis=1)
        chunk += h[:, None]
        chunk *= np.exp(cum)
        return chunk
    t = drive.shape[1]
    tri = np.tril(np.ones((t, t), dtype=bool))
    seg = cum[:, :, None] - cum[:, None, :]
    seg = np.where(tri[None, :, :, None, None], seg, -np.inf)
    chunk = np.einsum("btk...,bk...->bt...", np.exp(seg), drive)
    chunk += np.exp(cum) * h[:, None]
    return chunk


def _states_chunked(log_decay: np.ndarray, drive: np.ndarray, chunk_size: int) -> np.ndarray:
    """Same recurrence as :func:`_states_sequential`, solved chunk by chunk."""
    length = drive.shape[1]
    chunk_size = max(1, min(chunk_size, length))
    limit = _EXP_LIMIT.get(drive.dtype, 60.0)
    states = np.empty_like(drive)
    h = np.zeros_like(drive[:, 0])
    for start in range(0, length, chunk_size):
        stop = min(start + chunk_size, length)
        states[:, start:stop] = h_chunk = _solve_chunk(log_decay[:, start:stop], drive[:, start:stop], h, limit)
        h = h_chunk[:, -1]
    return states


def _outputs_chunked(U, Dt, Bm, Cm, Am, chunk_size: int) -> np.ndarray:
    """Scan outputs without materialising all states: memory is O(chunk), not O(L)."""
    bsz, length, d_inner = U.shape
    chunk_size = max(1, min(chunk_size, length))
    limit = _EXP_LIMIT.get(U.dtype, 60.0)
    y = np.empty_like(U)
    h = np.zeros((bsz, d_inner, Am.shape[1]), dtype=U.dtype)
    for start in range(0, length, chunk_size):
        sl = slice(start, min(start + chunk_size, length))
        dt = Dt[:, sl]
        drive = (dt * U[:, sl])[..., None] * Bm[:, sl, None, :]
        states = _solve_chunk(dt[..., None] * Am, drive, h, limit)
        y[:, sl] = np.einsum("bldn,bln->bld", states, Cm[:, sl])
        h = states[:, -1]
    return y


_EXP_LIMIT = {np.dtype(np.float64): 600.0, np.dtype(np.float32): 60.0}


def _states(log_decay, drive, chunk_size):
    if chunk_size is None:
        return _states_sequential(log_decay, drive)
    return _states_chunked(log_decay, drive, chunk_size)


def _check_shapes(u, delta, b_seq, c_seq, a, d):
    if u.ndim != 3:
        raise ShapeError(f"scan input must be (B, L, d_inner), got {u.shape}")
    bsz, length, d_inner = u.shape
    if delta.shape != u.shape:
        raise ShapeError(f"delta shape {delta.shape} != input shape {u.shape}")
    if a.ndim != 2 or a.shape[0] != d_inner:
        raise ShapeError(f"A must be (d_inner={d_inner}, d_state), got {a.shape}")
    n = a.shape[1]
    for name, m in (("B", b_seq), ("C", c_seq)):
        if m.shape != (bsz, length, n):
            raise ShapeError(f"{name} must be {(bsz, length, n)}, got {m.shape}")
    if d is not None and d.shape != (d_inner,):
        raise ShapeError(f"skip D must be ({d_inner},), got {d.shape}")
    if not np.all(delta.data > 0):
        raise ValueError("delta must be strictly positive")


def _scan(u, delta, b_seq, c_seq, a, d, chunk_size) -> Tensor:
    u, delta, b_seq, c_seq, a = (as_tensor(t) for t in (u, delta, b_seq, c_seq, a))
    d = None if d is None else as_tensor(d)
    _check_shapes(u, delta, b_seq, c_seq, a, d)
    U, Dt, Bm, Cm, Am = u.data, delta.data, b_seq.data, c_seq.data, a.data

    def forward_states():
        log_decay = Dt[..., None] * Am
        drive = (Dt * U)[..., None] * Bm[:, :, None, :]
        return log_decay, _states(log_decay, drive, chunk_size)

    if chunk_size is None:
        y = np.einsum("bldn,bln->bld", forward_states()[1], Cm)
    else:
        y = _outputs_chunked(U, Dt, Bm, Cm, Am, chunk_size)
    if d is not None:
        y = y + d.data * U

    def bw(gy):
        # states are recomputed rather than kept alive between forward and backward
        log_decay, h = forward_states()
        # adjoint recurrence runs backwards in time with the next step's decay
        shifted = np.zeros_like(log_decay)
        shifted[:, :-1] = log_decay[:, 1:]
        src = gy[..., None] * Cm[:, :, None, :]
        gh = _states(shifted[:, ::-1], src[:, ::-1], chunk_size)[:, ::-1]
        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]
        g_log_decay = gh * h_prev * np.exp(log_decay)
        g_delta = np.einsum("bldn,dn->bld", g_log_decay, Am) + np.einsum("bldn,bln->bld", gh, Bm) * U
        g_a = np.einsum("bldn,bld->dn", g_log_decay, Dt)
        g_u = np.einsum("bldn,bln->bld", gh, Bm) * Dt
        g_b = np.einsum("bldn,bld->bln", gh, Dt * U)
        g_c = np.einsum("bldn,bld->bln", h, gy)
        grads = [g_u, g_delta, g_b, g_c, g_a]
        if d is not None:
            g_u = g_u + gy * d.data
            grads[0] = g_u
            grads.append((gy * U).sum(axis=(0, 1)))
        return grads

    inputs = [u, delta, b_seq, c_seq, a] + ([d] if d is not None else [])
    return make_result("selective_scan", y, inputs, bw)


def selective_scan(u, delta, b_seq, c_seq, a, skip_d=None) -> Tensor:
    """Step-by-step reference scan; cost is linear in the sequence length.

    Args:
        u: (B, L, d_inner) input sequence.
        delta: (B, L, d_inner) strictly positive step sizes.
        b_seq, c_seq: (B, L, d_state) input and output matrices per step.
        a: (d_inner, d_state) strictly negative state matrix.
        skip_d: optional (d_inner,) residual gain.
    """
    return _scan(u, delta, b_seq, c_seq, a, skip_d, None)


def selective_scan_chunked(u, delta, b_seq, c_seq, a, skip_d=None, chunk_size: int = 32) -> Tensor:
    """Chunked evaluation of :func:`selective_scan`; ``chunk_size`` is clamped to L."""
    if chunk_size <= 0:
        raise ValueError("chunk_size must be positive")
    return _scan(u, delta, b_seq, c_seq, a, skip_d, chunk_size)


def scan_states(u, delta, b_seq, a) -> np.ndarray:
    """Reference hidden states (B, L, d_inner, d_state) for inspection and tests."""
    U, Dt, Bm, Am = (as_tensor(t).data for t in (u, delta, b_seq, a))
    return _states_sequential(Dt[..., None] * Am, (Dt * U)[..., None] * Bm[:, :, None, :])


def ssm_forward(u, params: SSMParams, chunk_size: int | None = 32) -> Tensor:
    """Discretise ``u`` and run the scan: the ``SSM(.)`` inside a Mamba block."""
    delta, b_seq, c_seq = discretize(u, params)
    return _scan(u, delta, b_seq, c_seq, params.A(), params.skip_d, chunk_size)
