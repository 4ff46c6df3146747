"""Synthetic sequence-labelling tasks standing in for speech data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as tc
from ..sru import ConfigError

KINDS = ("copy", "delayed-echo")
PAD = -1  # ignored by the loss and by accuracy


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 8
    train_len: int = 40
    eval_len: int = 120
    samples: int = 512
    seed: int = 0
    lag: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"task must be one of {KINDS}, got {self.kind!r}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.train_len < 1 or self.eval_len < self.train_len:
            raise ConfigError(f"need 1 <= train_len <= eval_len, got {self.train_len}, {self.eval_len}")
        if self.samples < 1 or self.lag < 0:
            raise ConfigError("samples must be >= 1 and lag >= 0")


@dataclass
class Example:
    inputs: np.ndarray   # (L, vocab) one-hot
    symbols: np.ndarray  # (L,) int
    targets: np.ndarray  # (L,) int, PAD where undefined


def one_hot(symbols: np.ndarray, vocab: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((len(symbols), vocab), dtype=dtype)
    out[np.arange(len(symbols)), symbols] = 1
    return out


def make_example(spec: TaskSpec, symbols: np.ndarray, dtype=np.float64) -> Example:
    symbols = np.asarray(symbols, dtype=np.int64)
    if spec.kind == "copy":
        targets = symbols.copy()
    else:
        targets = np.full_like(symbols, PAD)
        targets[spec.lag:] = symbols[:len(symbols) - spec.lag]
    return Example(one_hot(symbols, spec.vocab_size, dtype), symbols, targets)


def make_task(spec: TaskSpec, length: int | None = None, samples: int | None = None,
              stream: int = 0, dtype=np.float64) -> list[Example]:
    """``samples`` sequences of ``length`` (default train_len) uniform symbols.

    ``stream`` selects an independent RNG stream so train and held-out sets
    built from the same seed never share sequences by construction.
    """
    length = spec.train_len if length is None else length
    n = spec.samples if samples is None else samples
    rng = tc.SeededRng(spec.seed).spawn(stream)
    syms = rng.integers(spec.vocab_size, (n, length))
    return [make_example(spec, row, dtype) for row in syms]


def frame_positions(n_out: int, stages: int) -> np.ndarray:
    """Input index whose label each subsampled frame predicts.

    Frame t of ``stages`` valid 3x3 stride-2 convolutions sees inputs
    s*t .. s*t + 2s - 2 with s = 2**stages; the centre is s*t + s - 1.
    """
    s = 2 ** stages
    return s * np.arange(n_out) + s - 1


def frame_targets(targets: np.ndarray, n_out: int, stages: int) -> np.ndarray:
    return targets[frame_positions(n_out, stages)]
