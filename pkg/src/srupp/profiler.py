"""Closed-form parameter and FLOP accounting for the encoder.

Counting convention (recorded in every report):

* matrix products: 2 FLOPs per multiply-accumulate;
* every other elementwise primitive (add, mul, 1-x, sigmoid, exp, relu,
  rsqrt, ...): 1 FLOP per element; sums count 1 per summed element;
* softmax: 5 per element (max, subtract, exp, sum, divide) plus 1 for the
  1/sqrt(d') logit scaling;
* layer norm: 7*L*d + 5*L;
* recurrence: 16 per hidden unit per step (2 bias adds folded in up front,
  then 3 + 3 for the gates, 4 for the cell, 4 for the highway mix).

Component names match the tags the instrumented forward pass uses, so
:func:`flops_estimate` can be checked entry by entry against
:func:`instrumented_flops`.
"""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .encoder import Encoder, EncoderConfig, encoder_forward, init_encoder, subsampled_len
from .tensor import DimensionError

CONVENTION = "MAC=2 FLOPs; elementwise/transcendental=1 FLOP per element; softmax=5 per element plus 1 for the score scale"


@dataclass
class Component:
    name: str
    params: int = 0
    flops: int = 0


@dataclass
class ProfileReport:
    components: list[Component]
    input_len: int | None = None
    convention: str = CONVENTION
    assumptions: dict[str, str] = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(c.params for c in self.components)

    @property
    def total_flops(self) -> int:
        return sum(c.flops for c in self.components)

    def get(self, name: str) -> Component:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    def grouped(self) -> list[Component]:
        """Components summed per top-level block (conv0, input_linear, layer3, ...)."""
        out: dict[str, Component] = {}
        for c in self.components:
            g = out.setdefault(c.name.split(".")[0], Component(c.name.split(".")[0]))
            g.params += c.params
            g.flops += c.flops
        return list(out.values())

    def render_text(self, grouped: bool = False) -> str:
        rows = self.grouped() if grouped else self.components
        width = max(len("component"), *(len(c.name) for c in rows))
        lines = [f"{'component':<{width}}  {'params':>14}  {'flops':>18}"]
        for c in rows:
            lines.append(f"{c.name:<{width}}  {c.params:>14,d}  {c.flops:>18,d}")
        lines.append(f"{'TOTAL':<{width}}  {self.total_params:>14,d}  {self.total_flops:>18,d}")
        lines.append(f"params: {self.total_params / 1e6:.3f} M   GFLOPs: {self.total_flops / 1e9:.3f}")
        if self.input_len is not None:
            lines.append(f"input length: {self.input_len}")
        lines.append(f"convention: {self.convention}")
        for k, v in self.assumptions.items():
            lines.append(f"assumption: {k} = {v}")
        return "\n".join(lines)

    def render_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "params", "flops"])
        for c in self.components:
            w.writerow([c.name, c.params, c.flops])
        w.writerow(["total", self.total_params, self.total_flops])
        return buf.getvalue()


def _layer_components(cfg: EncoderConfig, i: int, n: int | None) -> list[Component]:
    d, da = cfg.embed_dim, cfg.attn_dim
    widths = [d // 2] * 2 if cfg.bidirectional else [d]
    n = n or 0
    pre = f"layer{i}."
    out = []
    if cfg.normalize:
        out.append(Component(pre + "norm", 2 * d, 7 * n * d + 5 * n))
    out += [
        Component(pre + "q_proj", da * d, 2 * da * d * n),
        Component(pre + "kv_proj", 2 * da * da, 4 * da * da * n),
        Component(pre + "attn_scores", 0, 2 * n * n * da),
        Component(pre + "attn_softmax", 0, 6 * n * n),
        Component(pre + "attn_values", 0, 2 * n * n * da),
        Component(pre + "residual", 1, 2 * da * n),
        Component(pre + "out_proj", 3 * d * da, 6 * d * da * n),
    ]
    hw = [h for h in widths if h != d]
    if hw:
        out.append(Component(pre + "highway", sum(h * d for h in hw), sum(2 * n * d * h for h in hw)))
    out.append(Component(pre + "recurrence", 4 * d, 16 * n * d))
    return out


def _build(cfg: EncoderConfig, input_len: int | None) -> ProfileReport:
    comps: list[Component] = []
    c = cfg.subsample_channels
    t, f, c_in = input_len, cfg.feat_dim, 1
    for i in range(cfg.subsample_layers):
        f = (f - 1) // 2
        t = None if t is None else (t - 1) // 2
        cells = 0 if t is None else c * t * f
        comps += [
            Component(f"conv{i}.conv", c * c_in * 9, 2 * c_in * 9 * cells),
            Component(f"conv{i}.bias", c, cells),
            Component(f"conv{i}.relu", 0, cells),
        ]
        c_in = c
    n = t
    flat, d = c * f, cfg.embed_dim
    nn_ = n or 0
    comps += [
        Component("input_linear.matmul", d * flat, 2 * nn_ * flat * d),
        Component("input_linear.bias", d, nn_ * d),
    ]
    for i in range(cfg.num_layers):
        comps += _layer_components(cfg, i, n)
    if cfg.output_dim:
        o = cfg.output_dim
        comps += [
            Component("output_linear.matmul", o * d, 2 * nn_ * d * o),
            Component("output_linear.bias", o, nn_ * o),
        ]
    report = ProfileReport(comps, input_len)
    report.assumptions = {
        "num_layers": str(cfg.num_layers),
        "subsampling": f"{cfg.subsample_factor}x ({cfg.subsample_layers} conv stages, "
                       f"{cfg.subsample_channels} channels)",
        "bidirectional": str(cfg.bidirectional).lower(),
        "normalize": str(cfg.normalize).lower(),
    }
    if input_len is not None:
        report.assumptions["subsampled_len"] = str(n)
    return report


def param_count(cfg: EncoderConfig) -> ProfileReport:
    """Closed-form parameter counts per component (FLOP column left at 0)."""
    return _build(cfg, None)


def flops_estimate(cfg: EncoderConfig, input_len: int) -> ProfileReport:
    """Forward-pass FLOPs at ``input_len`` input frames, plus parameter counts."""
    if input_len < cfg.min_len:
        raise DimensionError(f"input length {input_len} below minimum {cfg.min_len}")
    return _build(cfg, input_len)


# ---------------------------------------------------------------------------
# Measured counterparts
# ---------------------------------------------------------------------------

_PARAM_COMPONENT = [
    (r"conv\.(\d+)\.kernel", r"conv\1.conv"),
    (r"conv\.(\d+)\.bias", r"conv\1.bias"),
    (r"input\.weight", "input_linear.matmul"),
    (r"input\.bias", "input_linear.bias"),
    (r"output\.weight", "output_linear.matmul"),
    (r"output\.bias", "output_linear.bias"),
    (r"layer\.(\d+)\.wq", r"layer\1.q_proj"),
    (r"layer\.(\d+)\.w[kv]", r"layer\1.kv_proj"),
    (r"layer\.(\d+)\.wo", r"layer\1.out_proj"),
    (r"layer\.(\d+)\.alpha", r"layer\1.residual"),
    (r"layer\.(\d+)\.ln_(gain|bias)", r"layer\1.norm"),
    (r"layer\.(\d+)\.(?:fwd\.|bwd\.)?highway", r"layer\1.highway"),
    (r"layer\.(\d+)\.(?:fwd\.|bwd\.)?[vb]_[fr]", r"layer\1.recurrence"),
]


def param_component(name: str) -> str:
    for pat, repl in _PARAM_COMPONENT:
        if re.fullmatch(pat, name):
            return re.sub(pat, repl, name)
    raise KeyError(f"no profiler component for parameter {name!r}")


def measured_params(enc: Encoder) -> dict[str, int]:
    """Actual array sizes of ``enc`` grouped by profiler component."""
    out: dict[str, int] = {}
    for name, arr in enc.named().items():
        comp = param_component(name)
        out[comp] = out.get(comp, 0) + arr.size
    return out


def instrumented_flops(cfg: EncoderConfig, input_len: int, seed: int = 0,
                       enc: Encoder | None = None) -> dict[str, int]:
    """Run a real forward pass with a FlopCounter and return its per-tag tallies."""
    enc = enc or init_encoder(cfg, seed)
    feats = tc.SeededRng(seed).normal((input_len, cfg.feat_dim), dtype=cfg.np_dtype)
    counter = tc.FlopCounter()
    encoder_forward(enc, feats, counter)
    return dict(counter.counts)


def calibrate(cfg: EncoderConfig, input_len: int, target_gflops: float,
              layers=range(1, 25), stages=(1, 2, 3)) -> list[tuple[int, int, float]]:
    """Sweep (num_layers, conv stages) and return (layers, stages, GFLOPs) sorted by
    distance from ``target_gflops``."""
    from dataclasses import replace
    rows = []
    for s in stages:
        for n in layers:
            c = replace(cfg, num_layers=n, subsample_layers=s)
            if input_len < c.min_len or cfg.feat_dim < c.min_len:
                continue
            rows.append((n, s, flops_estimate(c, input_len).total_flops / 1e9))
    return sorted(rows, key=lambda r: abs(r[2] - target_gflops))


__all__ = ["Component", "ProfileReport", "param_count", "flops_estimate", "instrumented_flops",
           "measured_params", "param_component", "calibrate", "subsampled_len", "np"]
