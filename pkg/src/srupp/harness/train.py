"""Desk-scale training: encoder + linear classifier on synthetic tasks."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import checkpoint as ckpt
from .. import tensor as tc
from ..encoder import Encoder, EncoderConfig, encoder_backward, encoder_forward, init_encoder, linear
from ..sru import ConfigError
from .tasks import PAD, Example, TaskSpec, frame_targets, make_task


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None) -> None:
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    weight_decay: float = 0.0  # decoupled (AdamW-style)
    dtype: str = "float64"
    seed: int = 0
    eval_samples: int = 64
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be finite and >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs 0 <= beta < 1 and eps > 0")
        if self.clip <= 0 or self.weight_decay < 0 or self.eval_samples < 1:
            raise ConfigError("clip must be > 0, weight_decay >= 0, eval_samples >= 1")


@dataclass
class Model:
    encoder: Encoder
    head_weight: np.ndarray  # (vocab, width)
    head_bias: np.ndarray

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def named(self) -> dict[str, np.ndarray]:
        out = self.encoder.named()
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.named()
        missing = sorted(set(own) - set(tensors))
        if missing:
            raise ckpt.FormatError(f"checkpoint lacks tensors {missing[:4]}")
        for name, arr in own.items():
            src = tensors[name]
            if src.shape != arr.shape or src.dtype != arr.dtype:
                raise ckpt.FormatError(f"tensor {name!r}: checkpoint has {src.shape} {src.dtype}, "
                                       f"model expects {arr.shape} {arr.dtype}")
            arr[...] = src


def init_model(cfg: EncoderConfig, vocab: int, seed: int = 0) -> Model:
    if cfg.feat_dim != vocab:
        raise ConfigError(f"one-hot inputs need feat_dim == vocab_size ({cfg.feat_dim} != {vocab})")
    enc = init_encoder(cfg, seed)
    bound = math.sqrt(3.0 / cfg.width)
    w = tc.SeededRng(seed).spawn(7).uniform(-bound, bound, (vocab, cfg.width), cfg.np_dtype)
    return Model(enc, w, np.zeros(vocab, dtype=cfg.np_dtype))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def forward_logits(model: Model, inputs: np.ndarray):
    out, tape = encoder_forward(model.encoder, inputs)
    return linear(out, model.head_weight, model.head_bias), out, tape


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Summed CE over non-PAD frames, its logit gradient, #frames, #correct."""
    keep = targets != PAD
    shift = logits - logits.max(axis=1, keepdims=True)
    logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
    idx = np.where(keep, targets, 0)
    rows = np.arange(len(targets))
    loss = -float(logp[rows, idx][keep].sum())
    grad = np.exp(logp)
    grad[rows, idx] -= 1
    grad[~keep] = 0
    correct = int((logits.argmax(axis=1)[keep] == targets[keep]).sum())
    return loss, grad, int(keep.sum()), correct


def batch_loss(model: Model, batch: list[Example], grads: bool = True):
    """Mean per-frame CE over the batch, gradients (or None), accuracy."""
    stages = model.config.subsample_layers
    total, frames, correct = 0.0, 0, 0
    acc: dict[str, np.ndarray] | None = None
    pending = []
    for ex in batch:
        logits, top, tape = forward_logits(model, ex.inputs)
        tgt = frame_targets(ex.targets, logits.shape[0], stages)
        loss, g, n, c = cross_entropy(logits, tgt)
        total += loss
        frames += n
        correct += c
        if grads:
            pending.append((g, top, tape))
    if frames == 0:
        raise TrainingError("batch has no labelled frames")
    if grads:
        acc = {}
        for g, top, tape in pending:
            g = g / frames
            part = encoder_backward(model.encoder, tape, tc.matmul(g, model.head_weight))
            part["head.weight"] = tc.matmul(g.T, top)
            part["head.bias"] = g.sum(axis=0)
            for k, v in part.items():
                acc[k] = v if k not in acc else acc[k] + v
    return total / frames, acc, correct / frames


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class Adam:
    cfg: TrainConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """Clip by global norm, apply one update in place, return the pre-clip norm."""
        c = self.cfg
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        scale = c.clip / norm if norm > c.clip else 1.0
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for name, p in params.items():
            g = grads[name] * scale
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if c.weight_decay:
                p -= c.lr * c.weight_decay * p
            p -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return norm


# ---------------------------------------------------------------------------
# Training / evaluation
# ---------------------------------------------------------------------------

@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    final_accuracy: float = float("nan")
    seconds: float = 0.0

    def to_csv(self) -> str:
        lines = ["step,loss,accuracy"]
        lines += [f"{i},{lo:.17g},{a:.17g}" for i, (lo, a) in enumerate(zip(self.loss, self.accuracy))]
        return "\n".join(lines) + "\n"


def evaluate(model: Model, examples: list[Example]) -> tuple[int, float]:
    """(labelled frames, frame accuracy)."""
    _, _, acc = batch_loss(model, examples, grads=False)
    stages = model.config.subsample_layers
    frames = 0
    for ex in examples:
        n = ex.inputs.shape[0]
        for _ in range(stages):
            n = (n - 1) // 2
        frames += int((frame_targets(ex.targets, n, stages) != PAD).sum())
    return frames, acc


def train(model: Model, task: TaskSpec, cfg: TrainConfig, log=None) -> History:
    """Adam on frame-wise cross-entropy.  Deterministic given ``cfg.seed``.

    Each step draws ``batch_size`` sequences with replacement from the task's
    training pool; if the batch is at least as large as the pool, every step
    uses the whole pool.
    """
    if task.train_len < model.config.min_len:
        raise ConfigError(f"train_len {task.train_len} below encoder minimum {model.config.min_len}")
    dt = model.config.np_dtype
    data = make_task(task, dtype=dt)
    held_out = make_task(task, samples=cfg.eval_samples, stream=1, dtype=dt)
    pick = tc.SeededRng(cfg.seed).spawn(3)
    params = model.named()
    opt = Adam(cfg)
    hist = History()
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        if cfg.batch_size >= len(data):
            idx = range(len(data))  # full batch, fixed order
        else:
            idx = pick.integers(len(data), (cfg.batch_size,))
        try:
            loss, grads, acc = batch_loss(model, [data[i] for i in idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss is {loss}")
            opt.step(params, grads)
        except (tc.NumericError, FloatingPointError) as exc:
            raise TrainingError(f"divergence ({exc})", step) from exc
        hist.loss.append(loss)
        hist.accuracy.append(acc)
        if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(f"step {step:6d}  loss {loss:.6f}  acc {acc:.4f}")
    hist.final_accuracy = evaluate(model, held_out)[1]
    hist.seconds = time.perf_counter() - t0
    return hist


def eval_length_generalization(model: Model, task: TaskSpec, lengths, samples: int = 64
                               ) -> list[tuple[int, int, float]]:
    """Rows of (length, labelled frames, accuracy) on fresh held-out data."""
    rows = []
    for n in lengths:
        n = int(n)
        if n < model.config.min_len:
            raise ConfigError(f"length {n} below encoder minimum {model.config.min_len}")
        exs = make_task(task, length=n, samples=samples, stream=1000 + n, dtype=model.config.np_dtype)
        frames, acc = evaluate(model, exs)
        rows.append((n, frames, acc))
    return rows


# ---------------------------------------------------------------------------
# Persistence: tensors in an SRPP file, run config in a sibling .cfg
# ---------------------------------------------------------------------------

def config_path(checkpoint_path) -> Path:
    return Path(checkpoint_path).with_suffix(".cfg")


def save_model(path, model: Model, run_cfg, final_accuracy: float | None = None) -> None:
    from ..config import render_config
    tensors = dict(model.named())
    if final_accuracy is not None:
        tensors["meta.final_accuracy"] = np.array([final_accuracy], dtype=np.float64)
    ckpt.atomic_write(config_path(path), render_config(run_cfg))
    ckpt.save(path, tensors)


def load_model(path):
    """(model, run config, stored final accuracy or None)."""
    from ..config import load_config
    tensors = ckpt.load(path)
    cfg_file = config_path(path)
    if not cfg_file.exists():
        raise FileNotFoundError(f"missing run config {cfg_file} next to checkpoint")
    run_cfg = load_config(cfg_file)
    model = init_model(run_cfg.encoder_config(), run_cfg.vocab_size, run_cfg.seed)
    model.load_state(tensors)
    meta = tensors.get("meta.final_accuracy")
    return model, run_cfg, None if meta is None else float(meta[0])
