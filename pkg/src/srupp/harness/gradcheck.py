"""Central finite-difference gradient checks for the hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import sru, sru_pp
from .. import tensor as tc
from ..encoder import EncoderConfig, encoder_backward_full, encoder_forward, init_encoder

KINDS = ("sru", "srupp", "encoder")
STEP = 1e-5


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


@dataclass
class GradcheckReport:
    kind: str
    seed: int
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


@dataclass
class Instance:
    """A model closure: ``forward(x)`` returns output, ``backward(grad)`` returns grads."""

    params: dict[str, np.ndarray]
    x: np.ndarray
    forward: Callable[[np.ndarray], np.ndarray]
    backward: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, dict[str, np.ndarray]]]


def _fill(params: dict[str, np.ndarray], rng: tc.SeededRng, std: float) -> None:
    # Matrices at fan-in scale keep activations O(1); saturated gates would
    # leave gradients below the finite-difference noise floor.
    # alpha is kept away from 0 so the attention branch carries gradient.
    for name, arr in params.items():
        if name == "alpha" or name.endswith(".alpha"):
            arr[...] = rng.uniform(0.5, 1.5, arr.shape) * (1 - 2 * rng.integers(2, arr.shape))
            continue
        if name.startswith("conv.") and name.endswith(".bias"):
            # Dead ReLUs make every frame identical and the attention uniform.
            arr[...] = rng.uniform(0.1, 0.5, arr.shape)
            continue
        fan_in = int(np.prod(arr.shape[1:])) if arr.ndim > 1 else 2
        arr[...] = rng.normal(arr.shape, std / np.sqrt(fan_in), arr.dtype)


def make_instance(kind: str, seed: int, dims: dict | None = None, zero: bool = False) -> Instance:
    """Random small 64-bit instance of ``kind``.

    ``dims`` overrides the randomly drawn sizes (keys: length, d_in, d_hidden,
    attn_dim, bidirectional, normalize, and EncoderConfig fields for encoders).
    """
    rng = tc.SeededRng(seed)
    dims = dict(dims or {})
    bidir = dims.pop("bidirectional", bool(seed % 2))
    mode = sru.BI if bidir else sru.UNI
    if kind == "sru":
        n = dims.get("length", 2 + int(rng.integers(4, ())))
        d_in = dims.get("d_in", 2 + int(rng.integers(3, ())))
        d_h = dims.get("d_hidden", 2 * (1 + int(rng.integers(2, ()))))
        p = sru.init_sru(rng, d_in, d_h, mode)
        named = sru.named_params(p, mode)
        if zero:
            for a in named.values():
                a[...] = 0
        else:
            _fill(named, rng, 1.0)
        x = rng.normal((n, d_in))

        def fwd(xx):
            return sru.sru_forward(p, xx, mode)[0]

        def bwd(xx, g):
            return sru.sru_backward(sru.sru_forward(p, xx, mode)[1], g)

        return Instance(named, x, fwd, bwd)

    if kind == "srupp":
        n = dims.get("length", 2 + int(rng.integers(4, ())))
        norm = dims.get("normalize", bool(rng.integers(2, ())))
        # Layer norm over 2 features maps every row to +-(1, -1): degenerate attention.
        d_in = dims.get("d_in", (3 if norm else 2) + int(rng.integers(3, ())))
        d_h = dims.get("d_hidden", 2 * (1 + int(rng.integers(2, ()))))
        d_att = dims.get("attn_dim", 1 + int(rng.integers(min(d_in, 3), ())))
        p = sru_pp.init_srupp(rng, d_in, d_h, d_att, mode, norm)
        named = p.named()
        _fill(named, rng, 1.0)
        x = rng.normal((n, d_in))

        def fwd(xx):
            return sru_pp.srupp_forward(p, xx)[0]

        def bwd(xx, g):
            return sru_pp.srupp_backward(sru_pp.srupp_forward(p, xx)[1], g)

        return Instance(named, x, fwd, bwd)

    if kind == "encoder":
        n = dims.pop("length", 16 + int(rng.integers(13, ())))
        base = dict(feat_dim=7, embed_dim=8, attn_dim=4, num_layers=2, subsample_channels=4,
                    output_dim=int(rng.integers(2, ())) * 5,
                    normalize=bool(rng.integers(2, ())))
        base.update({k: v for k, v in dims.items() if k in EncoderConfig.__dataclass_fields__})
        cfg = EncoderConfig(bidirectional=bidir, dtype="float64", **base)
        enc = init_encoder(cfg, seed)
        named = enc.named()
        _fill(named, rng, 1.0)
        x = rng.normal((n, cfg.feat_dim))

        def fwd(xx):
            return encoder_forward(enc, xx)[0]

        def bwd(xx, g):
            return encoder_backward_full(enc, *encoder_forward(enc, xx)[1:], g)

        return Instance(named, x, fwd, bwd)
    raise ValueError(f"unknown model kind {kind!r}")


def check_instance(inst: Instance, weights: np.ndarray | None = None, step: float = STEP,
                   mutate: Callable[[dict[str, np.ndarray]], None] | None = None,
                   kind: str = "", seed: int = 0) -> GradcheckReport:
    """Compare analytic gradients of ``sum(weights * forward(x))`` with central differences.

    ``weights=None`` means loss = sum(h).  ``mutate`` may corrupt the analytic
    gradients in place before comparison (fault-injection testing).
    """
    out = inst.forward(inst.x)
    w = np.ones_like(out) if weights is None else weights
    gx, grads = inst.backward(inst.x, w)
    grads = dict(grads)
    targets = dict(inst.params)
    if gx is not None:
        grads["x"] = gx
        targets["x"] = inst.x
    if mutate is not None:
        mutate(grads)
    per_param = {}
    for name, arr in targets.items():
        num = np.empty_like(arr)
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + step
            out_p = inst.forward(inst.x)
            arr[i] = orig - step
            out_m = inst.forward(inst.x)
            arr[i] = orig
            # Difference per output element first; summing two O(1) losses
            # and subtracting loses digits to cancellation.
            num[i] = float((w * (out_p - out_m)).sum()) / (2 * step)
        per_param[name] = float(rel_err(grads[name], num).max())
    worst = max(per_param, key=per_param.get)
    return GradcheckReport(kind, seed, per_param[worst], worst, per_param)


def gradcheck(kind: str, seed: int, dims: dict | None = None,
              mutate: Callable[[dict[str, np.ndarray]], None] | None = None,
              zero: bool = False) -> GradcheckReport:
    """Gradient check of a random 64-bit instance against central differences (step 1e-5).

    The loss is a random fixed linear functional of the output.  With
    ``zero=True`` (SRU only) all parameters are 0 and the loss is sum(h).
    """
    if kind not in KINDS:
        raise ValueError(f"model kind must be one of {KINDS}, got {kind!r}")
    if zero and kind != "sru":
        raise ValueError("zero-parameter checks are defined for the SRU only")
    with tc.deterministic(True):
        inst = make_instance(kind, seed, dims, zero=zero)
        out = inst.forward(inst.x)
        weights = None if zero else tc.SeededRng(seed).spawn(1).normal(out.shape)
        return check_instance(inst, weights, mutate=mutate, kind=kind, seed=seed)


def flip_sign(name: str):
    """Fault injector negating one analytic gradient entry set."""
    def mutate(grads):
        for key in grads:
            if key == name or key.endswith("." + name):
                grads[key] = -grads[key]
    return mutate


def mutation_test(kind: str = "srupp", seed: int = 0, param: str = "alpha",
                  tol: float = 1e-4) -> GradcheckReport:
    """Re-run ``gradcheck`` with ``param``'s gradient sign-flipped; the report must fail."""
    dims = {"normalize": False} if kind == "srupp" else None
    return gradcheck(kind, seed, dims, mutate=flip_sign(param))
