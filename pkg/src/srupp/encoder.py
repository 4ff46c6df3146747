"""SRU++ speech encoder.

    feats (T x feat_dim)
      -> [conv 3x3 / stride 2 + ReLU] x subsample_layers
      -> flatten (channels x freq) per frame -> linear to embed_dim
      -> num_layers x SRU++
      -> optional linear to output_dim
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .sru import BI, UNI, ConfigError
from .sru_pp import SruppParams, SruppTape, init_srupp, srupp_backward, srupp_forward
from .tensor import DimensionError, FlopCounter

DTYPE_NAMES = {"float32": np.float32, "float64": np.float64}


def min_extent(stages: int) -> int:
    """Smallest input extent that survives ``stages`` valid 3x3 stride-2 convolutions."""
    return 2 ** (stages + 1) - 1


def subsampled_len(n: int, stages: int) -> int:
    for _ in range(stages):
        n = (n - 1) // 2
    return n


@dataclass(frozen=True)
class EncoderConfig:
    feat_dim: int = 8
    embed_dim: int = 64
    attn_dim: int = 16
    num_layers: int = 2
    output_dim: int = 0  # 0 disables the output linear
    bidirectional: bool = False
    subsample_channels: int = 32
    subsample_layers: int = 2
    normalize: bool = True
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.bidirectional and self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be even when bidirectional, got {self.embed_dim}")
        if self.attn_dim < 1 or self.num_layers < 1 or self.embed_dim < 1:
            raise ConfigError("attn_dim, num_layers and embed_dim must be >= 1")
        if self.output_dim < 0 or self.subsample_channels < 1 or self.subsample_layers < 1:
            raise ConfigError("output_dim >= 0, subsample_channels >= 1, subsample_layers >= 1 required")
        if self.feat_dim < min_extent(self.subsample_layers):
            raise ConfigError(f"feat_dim must be >= {min_extent(self.subsample_layers)} for "
                              f"{self.subsample_layers} conv stages, got {self.feat_dim}")
        if self.dtype not in DTYPE_NAMES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPE_NAMES)}")

    @property
    def mode(self) -> str:
        return BI if self.bidirectional else UNI

    @property
    def np_dtype(self):
        return np.dtype(DTYPE_NAMES[self.dtype])

    @property
    def subsampled_feat(self) -> int:
        return subsampled_len(self.feat_dim, self.subsample_layers)

    @property
    def min_len(self) -> int:
        return min_extent(self.subsample_layers)

    @property
    def subsample_factor(self) -> int:
        return 2 ** self.subsample_layers

    @property
    def width(self) -> int:
        return self.output_dim or self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Encoder:
    config: EncoderConfig
    conv_kernels: list[np.ndarray]
    conv_biases: list[np.ndarray]
    in_weight: np.ndarray
    in_bias: np.ndarray
    layers: list[SruppParams]
    out_weight: np.ndarray | None = None
    out_bias: np.ndarray | None = None

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (k, b) in enumerate(zip(self.conv_kernels, self.conv_biases)):
            out[f"conv.{i}.kernel"] = k
            out[f"conv.{i}.bias"] = b
        out["input.weight"] = self.in_weight
        out["input.bias"] = self.in_bias
        for i, layer in enumerate(self.layers):
            for name, arr in layer.named().items():
                out[f"layer.{i}.{name}"] = arr
        if self.out_weight is not None:
            out["output.weight"] = self.out_weight
            out["output.bias"] = self.out_bias
        return out


def _uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, shape, dtype)


def init_encoder(config: EncoderConfig, seed: int = 0) -> Encoder:
    rng = tc.SeededRng(seed)
    dt = config.np_dtype
    c = config.subsample_channels
    kernels, biases = [], []
    c_in = 1
    for _ in range(config.subsample_layers):
        kernels.append(_uniform(rng, (c, c_in, 3, 3), 9 * c_in, dt))
        biases.append(np.zeros(c, dtype=dt))
        c_in = c
    flat = c * config.subsampled_feat
    d = config.embed_dim
    layers = [init_srupp(rng, d, d, config.attn_dim, config.mode, config.normalize, dt)
              for _ in range(config.num_layers)]
    enc = Encoder(config, kernels, biases, _uniform(rng, (d, flat), flat, dt),
                  np.zeros(d, dtype=dt), layers)
    if config.output_dim:
        enc.out_weight = _uniform(rng, (config.output_dim, d), d, dt)
        enc.out_bias = np.zeros(config.output_dim, dtype=dt)
    return enc


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class EncoderTape:
    conv_inputs: list[np.ndarray] = field(default_factory=list)
    conv_pre: list[np.ndarray] = field(default_factory=list)
    frames: np.ndarray | None = None
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    layers: list[SruppTape] = field(default_factory=list)
    top: np.ndarray | None = None


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
           counter: FlopCounter | None = None) -> np.ndarray:
    """x @ W^T + b for x of shape (L, d_in)."""
    with tc.scoped(counter, "matmul"):
        y = tc.matmul(x, weight.T, counter)
    with tc.scoped(counter, "bias"):
        return tc.add(y, bias, counter)


def _tag(counter, name):
    # Sub-components re-tag with tc.scoped, which keeps the "<name>." prefix.
    if counter is None:
        return contextlib.nullcontext()
    return counter.tagged(name + ".other")


def encoder_forward(enc: Encoder, feats: np.ndarray,
                    counter: FlopCounter | None = None) -> tuple[np.ndarray, EncoderTape]:
    cfg = enc.config
    if feats.ndim != 2 or feats.shape[1] != cfg.feat_dim:
        raise DimensionError(f"features must be (T, {cfg.feat_dim}), got {feats.shape}")
    if feats.shape[0] < cfg.min_len:
        raise DimensionError(f"sequence too short: T={feats.shape[0]}, minimum is {cfg.min_len}")
    tape = EncoderTape()
    x = feats[None].astype(cfg.np_dtype, copy=False)
    for i, (k, b) in enumerate(zip(enc.conv_kernels, enc.conv_biases)):
        tape.conv_inputs.append(x)
        with _tag(counter, f"conv{i}"):
            with tc.scoped(counter, "conv"):
                y = tc.conv2d(x, k, counter)
            with tc.scoped(counter, "bias"):
                pre = tc.add(y.transpose(1, 2, 0), b, counter).transpose(2, 0, 1)
            with tc.scoped(counter, "relu"):
                x = tc.relu(pre, counter)
        tape.conv_pre.append(pre)
    frames = np.ascontiguousarray(x.transpose(1, 0, 2).reshape(x.shape[1], -1))
    tape.frames = frames
    with _tag(counter, "input_linear"):
        h = linear(frames, enc.in_weight, enc.in_bias, counter)
    for i, layer in enumerate(enc.layers):
        tape.layer_inputs.append(h)
        with _tag(counter, f"layer{i}"):
            h, lt = srupp_forward(layer, h, counter=counter)
        tape.layers.append(lt)
    tape.top = h
    if enc.out_weight is not None:
        with _tag(counter, "output_linear"):
            h = linear(h, enc.out_weight, enc.out_bias, counter)
    return h, tape


def encoder_backward(enc: Encoder, tape: EncoderTape,
                     grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every entry of ``enc.named()``."""
    return encoder_backward_full(enc, tape, grad_out)[1]


def encoder_backward_full(enc: Encoder, tape: EncoderTape,
                          grad_out: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Like :func:`encoder_backward` but also returns the gradient w.r.t. the features."""
    if len(tape.layers) != len(enc.layers) or len(tape.conv_inputs) != len(enc.conv_kernels):
        raise DimensionError("tape does not belong to this encoder")
    expect = (tape.top.shape[0], enc.config.width)
    if grad_out.shape != expect:
        raise DimensionError(f"grad_out {grad_out.shape} does not match encoder output {expect}")
    grads: dict[str, np.ndarray] = {}
    g = grad_out
    if enc.out_weight is not None:
        grads["output.weight"] = tc.matmul(g.T, tape.top)
        grads["output.bias"] = g.sum(axis=0)
        g = tc.matmul(g, enc.out_weight)
    for i in range(len(enc.layers) - 1, -1, -1):
        g, lg = srupp_backward(tape.layers[i], g)
        for name, arr in lg.items():
            grads[f"layer.{i}.{name}"] = arr
    grads["input.weight"] = tc.matmul(g.T, tape.frames)
    grads["input.bias"] = g.sum(axis=0)
    g = tc.matmul(g, enc.in_weight)
    c, t, f = tape.conv_pre[-1].shape
    g = np.ascontiguousarray(g.reshape(t, c, f).transpose(1, 0, 2))
    for i in range(len(enc.conv_kernels) - 1, -1, -1):
        g = g * (tape.conv_pre[i] > 0)
        grads[f"conv.{i}.bias"] = g.sum(axis=(1, 2))
        g, grads[f"conv.{i}.kernel"] = tc.conv2d_backward(tape.conv_inputs[i], enc.conv_kernels[i], g)
    return g[0], grads


def attention_maps(tape: EncoderTape) -> list[np.ndarray]:
    """Per-layer attention weight matrices, first layer first."""
    return [lt.attn.weights for lt in tape.layers]
