"""Flat ``key = value`` run configuration.

One file carries the encoder architecture, the synthetic task and the
training hyper-parameters.  Lines starting with ``#`` are comments.  Every
key has a default; unknown or repeated keys are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import EncoderConfig
from .sru import ConfigError

CONFIG_DIR = Path(__file__).parent / "configs"


@dataclass(frozen=True)
class RunConfig:
    # encoder
    feat_dim: int = 8
    embed_dim: int = 64
    attn_dim: int = 16
    num_layers: int = 2
    output_dim: int = 0
    bidirectional: bool = False
    subsample_channels: int = 32
    subsample_layers: int = 2
    normalize: bool = True
    dtype: str = "float64"
    # task
    task: str = "copy"
    vocab_size: int = 8
    train_len: int = 40
    eval_len: int = 120
    samples: int = 512
    lag: int = 3
    # training
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    weight_decay: float = 0.0
    eval_samples: int = 64
    log_every: int = 100
    seed: int = 0
    deterministic: bool = True

    def encoder_config(self) -> EncoderConfig:
        names = {f.name for f in fields(EncoderConfig)}
        return EncoderConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def task_spec(self):
        from .harness.tasks import TaskSpec
        return TaskSpec(self.task, self.vocab_size, self.train_len, self.eval_len,
                        self.samples, self.seed, self.lag)

    def train_config(self):
        from .harness.train import TrainConfig
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                           beta1=self.beta1, beta2=self.beta2, eps=self.eps, clip=self.clip,
                           weight_decay=self.weight_decay, dtype=self.dtype, seed=self.seed,
                           eval_samples=self.eval_samples,
                           log_every=self.log_every)

    def validate(self) -> "RunConfig":
        self.encoder_config()
        self.task_spec()
        self.train_config()
        return self

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw).validate()


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(key: str, raw: str, lineno: int):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {kind}, got {raw!r}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, lineno)
    return RunConfig(**values).validate()


def render_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def shipped_configs() -> dict[str, Path]:
    return {p.stem: p for p in sorted(CONFIG_DIR.glob("*.cfg"))}
