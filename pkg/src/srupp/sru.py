"""Simple Recurrent Unit: fused input projection plus elementwise recurrence.

For one direction of width ``h`` the layer computes, for t = 1..L::

    f[t] = sigmoid(U[t,0] + v_f * c[t-1] + b_f)
    r[t] = sigmoid(U[t,1] + v_r * c[t-1] + b_r)
    c[t] = f[t] * c[t-1] + (1 - f[t]) * U[t,2]
    h[t] = r[t] * c[t] + (1 - r[t]) * z[t]

where ``U`` comes from one matmul of the stacked ``[W; W'; W'']`` block with
the input, and ``z`` is the highway source: ``x`` itself when widths agree,
otherwise a learned projection of ``x`` to width ``h``.

Only ``c`` carries state across time, so each step is a handful of
vector ops over the hidden dimension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .tensor import DimensionError, FlopCounter, NumericError

UNI = "unidirectional"
BI = "bidirectional"
DIRECTIONS = ("fwd", "bwd")


class ConfigError(ValueError):
    """Invalid layer or model configuration."""


@dataclass
class SruCell:
    """Elementwise recurrence parameters of one direction."""

    v_f: np.ndarray
    v_r: np.ndarray
    b_f: np.ndarray
    b_r: np.ndarray
    highway: np.ndarray | None = None  # (h, d_in) when d_in != h

    @property
    def width(self) -> int:
        return self.v_f.shape[0]

    def named(self) -> dict[str, np.ndarray]:
        out = {"v_f": self.v_f, "v_r": self.v_r, "b_f": self.b_f, "b_r": self.b_r}
        if self.highway is not None:
            out["highway"] = self.highway
        return out


@dataclass
class SruParams:
    """One direction of an SRU layer: stacked projection block plus its cell."""

    weight: np.ndarray  # (3h, d_in): rows [W; W'; W'']
    cell: SruCell

    def __post_init__(self) -> None:
        if self.weight.shape[0] != 3 * self.cell.width:
            raise DimensionError(
                f"stacked weight has {self.weight.shape[0]} rows, expected 3*{self.cell.width}")

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    def named(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, **self.cell.named()}


def init_cell(rng: tc.SeededRng, d_in: int, width: int, dtype=np.float64) -> SruCell:
    z = np.zeros(width, dtype=dtype)
    highway = None
    if d_in != width:
        bound = math.sqrt(3.0 / d_in)
        highway = rng.uniform(-bound, bound, (width, d_in), dtype)
    return SruCell(z.copy(), z.copy(), z.copy(), z.copy(), highway)


def init_sru(rng: tc.SeededRng, d_in: int, d_hidden: int, mode: str = UNI,
             dtype=np.float64) -> SruParams | tuple[SruParams, SruParams]:
    """Random SRU parameters; ``d_hidden`` is the total output width."""
    bound = math.sqrt(3.0 / d_in)
    if mode == UNI:
        return SruParams(rng.uniform(-bound, bound, (3 * d_hidden, d_in), dtype),
                         init_cell(rng, d_in, d_hidden, dtype))
    if mode != BI:
        raise ConfigError(f"unknown mode {mode!r}")
    if d_hidden % 2:
        raise ConfigError(f"bidirectional hidden size must be even, got {d_hidden}")
    h = d_hidden // 2
    return tuple(
        SruParams(rng.uniform(-bound, bound, (3 * h, d_in), dtype), init_cell(rng, d_in, h, dtype))
        for _ in DIRECTIONS)


def zeros_like_params(p):
    """Deep copy of a parameter tree with every array zeroed."""
    if isinstance(p, tuple):
        return tuple(zeros_like_params(q) for q in p)
    if isinstance(p, SruParams):
        return SruParams(np.zeros_like(p.weight), zeros_like_params(p.cell))
    if isinstance(p, SruCell):
        return SruCell(*(np.zeros_like(a) for a in (p.v_f, p.v_r, p.b_f, p.b_r)),
                       None if p.highway is None else np.zeros_like(p.highway))
    raise TypeError(type(p))


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def sru_project_u(params: SruParams, x: np.ndarray,
                  counter: FlopCounter | None = None) -> np.ndarray:
    """Fused projection: returns U with shape (L, 3, h)."""
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise DimensionError(f"input {x.shape} does not match d_in={params.d_in}")
    ut = tc.matmul(params.weight, x.T, counter)
    return ut.T.reshape(x.shape[0], 3, params.cell.width)


def highway_source(cell: SruCell, x: np.ndarray,
                   counter: FlopCounter | None = None) -> np.ndarray:
    if cell.highway is None:
        if x.shape[1] != cell.width:
            raise DimensionError(
                f"highway needs input width {cell.width} or a projection, got {x.shape[1]}")
        return x
    return tc.matmul(x, cell.highway.T, counter)


# ---------------------------------------------------------------------------
# Recurrence
# ---------------------------------------------------------------------------

@dataclass
class SruTape:
    cell: SruCell
    x: np.ndarray
    u: np.ndarray
    z: np.ndarray
    c0: np.ndarray
    f: np.ndarray
    r: np.ndarray
    c: np.ndarray

    @property
    def steps(self) -> int:
        return self.u.shape[0]


def _check_u(cell: SruCell, u: np.ndarray, x: np.ndarray) -> None:
    h = cell.width
    if u.ndim != 3 or u.shape[1:] != (3, h):
        raise DimensionError(f"U must be (L, 3, {h}), got {u.shape}")
    if x.shape[0] != u.shape[0]:
        raise DimensionError(f"U has {u.shape[0]} steps but x has {x.shape[0]}")


def sru_recurrence(cell: SruCell, u: np.ndarray, x: np.ndarray, c0: np.ndarray | None = None,
                   counter: FlopCounter | None = None) -> tuple[np.ndarray, SruTape]:
    """Run the elementwise recurrence in time order; returns (h, tape)."""
    _check_u(cell, u, x)
    n, h = u.shape[0], cell.width
    c = np.zeros(h, dtype=u.dtype) if c0 is None else c0
    c_init = c
    with tc.scoped(counter, "highway"):
        z = highway_source(cell, x, counter)
    fs = np.empty((n, h), dtype=u.dtype)
    rs = np.empty_like(fs)
    cs = np.empty_like(fs)
    hs = np.empty_like(fs)
    with tc.scoped(counter, "recurrence"):
        uf = tc.add(u[:, 0], cell.b_f, counter)
        ur = tc.add(u[:, 1], cell.b_r, counter)
        cand = u[:, 2]
        for t in range(n):
            try:
                f = tc.sigmoid(tc.add(uf[t], tc.mul(cell.v_f, c, counter), counter), counter)
                r = tc.sigmoid(tc.add(ur[t], tc.mul(cell.v_r, c, counter), counter), counter)
                c = tc.add(tc.mul(f, c, counter),
                           tc.mul(tc.one_minus(f, counter), cand[t], counter), counter)
                hs[t] = tc.add(tc.mul(r, c, counter),
                               tc.mul(tc.one_minus(r, counter), z[t], counter), counter)
            except NumericError as err:
                raise NumericError(f"recurrence step t={t}: {err}") from None
            fs[t], rs[t], cs[t] = f, r, c
    return hs, SruTape(cell, x, u, z, c_init, fs, rs, cs)


def _sigmoid_scalar(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def sru_recurrence_oracle(cell: SruCell, u: np.ndarray, x: np.ndarray,
                          c0: np.ndarray | None = None) -> np.ndarray:
    """Scalar, per-step, per-dimension transcription of the recurrence.

    Deliberately unvectorized; used as ground truth for :func:`sru_recurrence`.
    """
    _check_u(cell, u, x)
    n, h = u.shape[0], cell.width
    if cell.highway is None:
        z = [[float(x[t, j]) for j in range(h)] for t in range(n)]
    else:
        z = [[sum(float(cell.highway[j, k]) * float(x[t, k]) for k in range(x.shape[1]))
              for j in range(h)] for t in range(n)]
    out = np.zeros((n, h), dtype=np.float64)
    for j in range(h):
        c = 0.0 if c0 is None else float(c0[j])
        for t in range(n):
            f = _sigmoid_scalar(float(u[t, 0, j]) + float(cell.v_f[j]) * c + float(cell.b_f[j]))
            r = _sigmoid_scalar(float(u[t, 1, j]) + float(cell.v_r[j]) * c + float(cell.b_r[j]))
            c = f * c + (1.0 - f) * float(u[t, 2, j])
            val = r * c + (1.0 - r) * z[t][j]
            if not math.isfinite(val):
                raise NumericError(f"oracle: non-finite value at t={t}, dim={j}")
            out[t, j] = val
    return out.astype(u.dtype)


@dataclass
class CellGrads:
    u: np.ndarray
    x: np.ndarray  # contribution through the highway term only
    c0: np.ndarray
    params: dict[str, np.ndarray] = field(default_factory=dict)


def recurrence_backward(tape: SruTape, grad_h: np.ndarray) -> CellGrads:
    """Reverse-time pass through the recurrence."""
    cell = tape.cell
    n, h = tape.steps, cell.width
    if grad_h.shape != (n, h):
        raise DimensionError(f"grad_h {grad_h.shape} does not match tape ({n}, {h})")
    f, r, c = tape.f, tape.r, tape.c
    c_prev = np.vstack([tape.c0[None, :], c[:-1]])
    cand = tape.u[:, 2]
    gu = np.zeros_like(tape.u)
    gz = grad_h * (1 - r)
    gr_pre = grad_h * (c - tape.z) * r * (1 - r)
    gu[:, 1] = gr_pre
    gc = np.zeros(h, dtype=grad_h.dtype)
    for t in range(n - 1, -1, -1):
        gc = gc + grad_h[t] * r[t]
        gf_pre = gc * (c_prev[t] - cand[t]) * f[t] * (1 - f[t])
        gu[t, 0] = gf_pre
        gu[t, 2] = gc * (1 - f[t])
        gc = gc * f[t] + gf_pre * cell.v_f + gr_pre[t] * cell.v_r
    grads = {
        "v_f": (gu[:, 0] * c_prev).sum(axis=0),
        "v_r": (gr_pre * c_prev).sum(axis=0),
        "b_f": gu[:, 0].sum(axis=0),
        "b_r": gr_pre.sum(axis=0),
    }
    if cell.highway is None:
        gx = gz
    else:
        grads["highway"] = tc.matmul(gz.T, tape.x)
        gx = tc.matmul(gz, cell.highway)
    return CellGrads(gu, gx, gc, grads)


# ---------------------------------------------------------------------------
# Full layer
# ---------------------------------------------------------------------------

@dataclass
class SruLayerTape:
    mode: str
    params: tuple[SruParams, ...]
    inputs: list[np.ndarray]  # per direction, in that direction's time order
    cells: list[SruTape]


def _as_pair(params, mode: str) -> tuple[SruParams, ...]:
    if mode == UNI:
        if not isinstance(params, SruParams):
            raise ConfigError("unidirectional mode takes a single SruParams")
        return (params,)
    if mode == BI:
        if not (isinstance(params, (tuple, list)) and len(params) == 2):
            raise ConfigError("bidirectional mode takes a (forward, backward) pair of SruParams")
        if params[0].cell.width != params[1].cell.width:
            raise ConfigError("bidirectional directions must have equal width")
        return tuple(params)
    raise ConfigError(f"unknown mode {mode!r}")


def sru_forward(params, x: np.ndarray, mode: str = UNI,
                counter: FlopCounter | None = None) -> tuple[np.ndarray, SruLayerTape]:
    """Project and recur.  Bidirectional output is [forward | backward] along features."""
    dirs = _as_pair(params, mode)
    outs, inputs, tapes = [], [], []
    for k, p in enumerate(dirs):
        xi = x if k == 0 else x[::-1]
        with tc.scoped(counter, "projection"):
            u = sru_project_u(p, xi, counter)
        hk, tape = sru_recurrence(p.cell, u, xi, counter=counter)
        outs.append(hk if k == 0 else hk[::-1])
        inputs.append(xi)
        tapes.append(tape)
    h = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
    return h, SruLayerTape(mode, dirs, inputs, tapes)


def _prefix(mode: str, k: int) -> str:
    return "" if mode == UNI else DIRECTIONS[k] + "."


def sru_backward(tape: SruLayerTape, grad_h: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients w.r.t. the layer input and every parameter.

    Parameter names match :func:`named_params` for the same layer.
    """
    width = sum(p.cell.width for p in tape.params)
    n = tape.inputs[0].shape[0]
    if grad_h.shape != (n, width):
        raise DimensionError(f"grad_h {grad_h.shape} does not match layer output ({n}, {width})")
    grad_x = np.zeros_like(tape.inputs[0])
    grads: dict[str, np.ndarray] = {}
    offset = 0
    for k, (p, ct, xi) in enumerate(zip(tape.params, tape.cells, tape.inputs)):
        h = p.cell.width
        gh = grad_h[:, offset : offset + h]
        offset += h
        if k == 1:
            gh = gh[::-1]
        cg = recurrence_backward(ct, np.ascontiguousarray(gh))
        gut = cg.u.reshape(n, 3 * h)
        pre = _prefix(tape.mode, k)
        grads[pre + "weight"] = tc.matmul(gut.T, xi)
        for name, g in cg.params.items():
            grads[pre + name] = g
        gx = cg.x + tc.matmul(gut, p.weight)
        grad_x += gx if k == 0 else gx[::-1]
    return grad_x, grads


def named_params(params, mode: str = UNI) -> dict[str, np.ndarray]:
    dirs = _as_pair(params, mode)
    out = {}
    for k, p in enumerate(dirs):
        for name, arr in p.named().items():
            out[_prefix(mode, k) + name] = arr
    return out
