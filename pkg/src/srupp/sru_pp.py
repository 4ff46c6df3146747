"""SRU++ layer: single-head self-attention produces the recurrence input.

Shapes follow the column convention (features x time)::

    Q = Wq X^T            (d' x L)
    K = Wk Q,  V = Wv Q   (keys and values are derived from the queries)
    A^T = softmax(Q^T K / sqrt(d')) V^T
    U^T = Wo (Q + alpha * A)      (3D x L, D = total hidden width)

``U`` then drives the same elementwise recurrence as a plain SRU.  In
bidirectional mode the attention runs once over the whole sequence and the
feature axis of ``U`` is split in half, one half per direction.

There is one attention head and no positional encoding; time order enters
only through the recurrence.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .sru import (BI, DIRECTIONS, UNI, ConfigError, SruCell, SruTape, init_cell,
                  recurrence_backward, sru_recurrence)
from .tensor import DimensionError, FlopCounter

LN_EPS = 1e-5


@dataclass
class SruppParams:
    wq: np.ndarray  # (d', d_in)
    wk: np.ndarray  # (d', d')
    wv: np.ndarray  # (d', d')
    wo: np.ndarray  # (3D, d')
    alpha: np.ndarray  # shape (1,)
    cells: list[SruCell]
    ln_gain: np.ndarray | None = None  # (d_in,)
    ln_bias: np.ndarray | None = None

    @property
    def d_in(self) -> int:
        return self.wq.shape[1]

    @property
    def attn_dim(self) -> int:
        return self.wq.shape[0]

    @property
    def width(self) -> int:
        return sum(c.width for c in self.cells)

    @property
    def mode(self) -> str:
        return UNI if len(self.cells) == 1 else BI

    @property
    def normalize(self) -> bool:
        return self.ln_gain is not None

    def named(self) -> dict[str, np.ndarray]:
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo, "alpha": self.alpha}
        if self.ln_gain is not None:
            out["ln_gain"] = self.ln_gain
            out["ln_bias"] = self.ln_bias
        for k, cell in enumerate(self.cells):
            pre = "" if len(self.cells) == 1 else DIRECTIONS[k] + "."
            for name, arr in cell.named().items():
                out[pre + name] = arr
        return out


def init_srupp(rng: tc.SeededRng, d_in: int, d_hidden: int, attn_dim: int,
               mode: str = UNI, normalize: bool = True, dtype=np.float64) -> SruppParams:
    """Random SRU++ parameters.  ``d_hidden`` is the total output width."""
    if attn_dim < 1:
        raise ConfigError("attention dimension must be >= 1")
    if attn_dim > d_in:
        warnings.warn(f"attention dimension {attn_dim} exceeds input width {d_in}", stacklevel=2)
    if mode == BI:
        if d_hidden % 2:
            raise ConfigError(f"bidirectional hidden size must be even, got {d_hidden}")
        widths = [d_hidden // 2] * 2
    elif mode == UNI:
        widths = [d_hidden]
    else:
        raise ConfigError(f"unknown mode {mode!r}")

    def unif(shape, fan_in):
        b = math.sqrt(3.0 / fan_in)
        return rng.uniform(-b, b, shape, dtype)

    return SruppParams(
        wq=unif((attn_dim, d_in), d_in),
        wk=unif((attn_dim, attn_dim), attn_dim),
        wv=unif((attn_dim, attn_dim), attn_dim),
        wo=unif((3 * d_hidden, attn_dim), attn_dim),
        alpha=np.zeros(1, dtype=dtype),
        cells=[init_cell(rng, d_in, w, dtype) for w in widths],
        ln_gain=np.ones(d_in, dtype=dtype) if normalize else None,
        ln_bias=np.zeros(d_in, dtype=dtype) if normalize else None,
    )


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

@dataclass
class NormRecord:
    xhat: np.ndarray  # (L, d)
    inv_std: np.ndarray  # (L,)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               counter: FlopCounter | None = None) -> tuple[np.ndarray, NormRecord]:
    """Normalize each time step over the feature axis.  7*L*d + 5*L FLOPs."""
    d = x.shape[1]
    mean = tc.scale(tc.row_sum(x, counter), 1.0 / d, counter)
    xc_t = tc.sub(x.T, mean, counter)
    var = tc.scale(tc.row_sum(tc.mul(xc_t, xc_t, counter).T, counter), 1.0 / d, counter)
    inv = tc.rsqrt(tc.add(var, np.full_like(var, LN_EPS), counter), counter)
    xhat = tc.mul(xc_t, inv, counter).T
    out = tc.add(tc.mul(xhat, gain, counter), bias, counter)
    return out, NormRecord(np.ascontiguousarray(xhat), inv)


def attention_qkv(params: SruppParams, x: np.ndarray,
                  counter: FlopCounter | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q = Wq X^T, K = Wk Q, V = Wv Q, each (d' x L).

    ``x`` is used as given; normalization, if any, is the caller's job.
    """
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise DimensionError(f"input {x.shape} does not match d_in={params.d_in}")
    with tc.scoped(counter, "q_proj"):
        q = tc.matmul(params.wq, x.T, counter)
    with tc.scoped(counter, "kv_proj"):
        k = tc.matmul(params.wk, q, counter)
        v = tc.matmul(params.wv, q, counter)
    return q, k, v


def attention_output(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                     counter: FlopCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Returns (A, weights): A is d' x L, weights is the L x L row-stochastic matrix."""
    if not (q.ndim == 2 and q.shape == k.shape == v.shape):
        raise DimensionError(f"Q, K, V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    dk = q.shape[0]
    with tc.scoped(counter, "attn_scores"):
        scores = tc.matmul(q.T, k, counter)
    with tc.scoped(counter, "attn_softmax"):
        try:
            weights = tc.softmax_rows(tc.scale(scores, 1.0 / math.sqrt(dk), counter), counter)
        except tc.NumericError as err:
            raise tc.NumericError(f"attention logits: {err}") from None
    with tc.scoped(counter, "attn_values"):
        at = tc.matmul(weights, v.T, counter)
    return np.ascontiguousarray(at.T), weights


@dataclass
class AttentionRecord:
    x_in: np.ndarray  # input to Wq (normalized if enabled)
    norm: NormRecord | None
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray
    a: np.ndarray
    mix: np.ndarray  # Q + alpha * A


def srupp_project_u(params: SruppParams, x: np.ndarray,
                    counter: FlopCounter | None = None) -> tuple[np.ndarray, AttentionRecord]:
    """Attention-based replacement for the SRU projection; U is (L, 3, D)."""
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise DimensionError(f"input {x.shape} does not match d_in={params.d_in}")
    norm = None
    x_in = x
    if params.normalize:
        with tc.scoped(counter, "norm"):
            x_in, norm = layer_norm(x, params.ln_gain, params.ln_bias, counter)
    q, k, v = attention_qkv(params, x_in, counter)
    a, weights = attention_output(q, k, v, counter)
    with tc.scoped(counter, "residual"):
        mix = tc.add(q, tc.scale(a, params.alpha[0], counter), counter)
    with tc.scoped(counter, "out_proj"):
        ut = tc.matmul(params.wo, mix, counter)
    u = ut.T.reshape(x.shape[0], 3, params.width)
    return u, AttentionRecord(x_in, norm, q, k, v, weights, a, mix)


# ---------------------------------------------------------------------------
# Layer
# ---------------------------------------------------------------------------

@dataclass
class SruppTape:
    params: SruppParams
    x: np.ndarray
    attn: AttentionRecord
    cells: list[SruTape]


def _cell_slices(params: SruppParams):
    offset = 0
    for cell in params.cells:
        yield slice(offset, offset + cell.width)
        offset += cell.width


def srupp_forward(params: SruppParams, x: np.ndarray, mode: str | None = None,
                  counter: FlopCounter | None = None) -> tuple[np.ndarray, SruppTape]:
    if mode is not None and mode != params.mode:
        raise ConfigError(f"parameters are {params.mode}, asked for {mode}")
    u, rec = srupp_project_u(params, x, counter)
    outs, tapes = [], []
    for k, (cell, sl) in enumerate(zip(params.cells, _cell_slices(params))):
        uk = u[:, :, sl]
        xk = x
        if k == 1:
            uk, xk = uk[::-1], x[::-1]
        hk, tape = sru_recurrence(cell, uk, xk, counter=counter)
        outs.append(hk if k == 0 else hk[::-1])
        tapes.append(tape)
    h = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
    return h, SruppTape(params, x, rec, tapes)


def attention_weights(tape: SruppTape) -> np.ndarray:
    """The L x L attention matrix of the (single) head recorded in ``tape``."""
    return tape.attn.weights


def _layer_norm_backward(g: np.ndarray, rec: NormRecord, gain: np.ndarray):
    d = g.shape[1]
    gxhat = g * gain
    term = d * gxhat - gxhat.sum(axis=1, keepdims=True) - rec.xhat * (gxhat * rec.xhat).sum(axis=1, keepdims=True)
    gx = term * (rec.inv_std / d)[:, None]
    return gx, (g * rec.xhat).sum(axis=0), g.sum(axis=0)


def srupp_backward(tape: SruppTape, grad_h: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    p, rec = tape.params, tape.attn
    n = tape.x.shape[0]
    if grad_h.shape != (n, p.width):
        raise DimensionError(f"grad_h {grad_h.shape} does not match layer output ({n}, {p.width})")
    grads: dict[str, np.ndarray] = {}
    grad_x = np.zeros_like(tape.x)
    gu = np.zeros((n, 3, p.width), dtype=grad_h.dtype)
    for k, (ct, sl) in enumerate(zip(tape.cells, _cell_slices(p))):
        gh = grad_h[:, sl]
        if k == 1:
            gh = gh[::-1]
        cg = recurrence_backward(ct, np.ascontiguousarray(gh))
        pre = "" if len(p.cells) == 1 else DIRECTIONS[k] + "."
        for name, g in cg.params.items():
            grads[pre + name] = g
        if k == 0:
            gu[:, :, sl] = cg.u
            grad_x += cg.x
        else:
            gu[:, :, sl] = cg.u[::-1]
            grad_x += cg.x[::-1]

    gut = np.ascontiguousarray(gu.reshape(n, 3 * p.width).T)  # (3D, L)
    grads["wo"] = tc.matmul(gut, rec.mix.T)
    gmix = tc.matmul(p.wo.T, gut)  # (d', L)
    grads["alpha"] = np.array([(gmix * rec.a).sum()], dtype=grad_h.dtype)
    gq = gmix.copy()
    ga = gmix * p.alpha[0]

    # A^T = P V^T
    ga_t = np.ascontiguousarray(ga.T)  # (L, d')
    gp = tc.matmul(ga_t, rec.v)  # (L, L)
    gv = tc.matmul(rec.weights.T, ga_t).T  # (d', L)
    w = rec.weights
    gs = w * (gp - (gp * w).sum(axis=1, keepdims=True))
    gs = gs / math.sqrt(p.attn_dim)
    gq = gq + tc.matmul(rec.k, gs.T)
    gk = tc.matmul(rec.q, gs)

    grads["wk"] = tc.matmul(gk, rec.q.T)
    grads["wv"] = tc.matmul(gv, rec.q.T)
    gq = gq + tc.matmul(p.wk.T, gk) + tc.matmul(p.wv.T, gv)

    grads["wq"] = tc.matmul(gq, rec.x_in)
    gx_in = tc.matmul(gq.T, p.wq)  # (L, d_in)
    if rec.norm is not None:
        gx_in, grads["ln_gain"], grads["ln_bias"] = _layer_norm_backward(gx_in, rec.norm, p.ln_gain)
    grad_x += gx_in
    return grad_x, grads
