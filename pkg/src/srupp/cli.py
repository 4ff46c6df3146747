"""``srupp`` command-line entry point.

Exit codes: 0 success, 1 check or compute failure, 2 usage / IO / format error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import tensor as tc
from .checkpoint import atomic_write
from .config import load_config
from .encoder import attention_maps, encoder_forward
from .harness import gradcheck as gc
from .profiler import flops_estimate
from .sru import ConfigError
from .tensor import DimensionError, FormatError

TOL = 1e-4
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _config(path):
    try:
        return load_config(path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def _load(path):
    from .harness.train import load_model
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def cmd_gradcheck(args) -> int:
    cfg = _config(args.config)
    if cfg.dtype != "float64":
        raise UsageError("gradient checks need dtype = float64")
    targets = gc.KINDS if args.target == "all" else (args.target,)
    worst = 0.0
    for kind in targets:
        dims = {"bidirectional": cfg.bidirectional}
        if kind != "sru":
            dims["normalize"] = cfg.normalize
        rep = gc.gradcheck(kind, args.seed, dims)
        status = "PASS" if rep.passed(TOL) else "FAIL"
        print(f"{kind:8s} seed={args.seed} max_rel_err={rep.max_rel_err:.3e} "
              f"worst_param={rep.worst_param} {status}")
        worst = max(worst, rep.max_rel_err)
    return EXIT_OK if worst <= TOL else EXIT_FAIL


def cmd_train(args) -> int:
    from .harness.train import TrainingError, init_model, save_model, train
    cfg = _config(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    model = init_model(cfg.encoder_config(), cfg.vocab_size, cfg.seed)
    log = None if args.quiet else print
    try:
        hist = train(model, cfg.task_spec(), cfg.train_config(), log=log)
    except TrainingError as exc:
        _err(str(exc))
        return EXIT_FAIL
    atomic_write(out / "history.csv", hist.to_csv())
    save_model(out / "checkpoint.srpp", model, cfg, hist.final_accuracy)
    print(f"final held-out accuracy {hist.final_accuracy:.4f} after {len(hist.loss)} steps "
          f"({hist.seconds:.1f} s)")
    print(f"wrote {out / 'history.csv'} and {out / 'checkpoint.srpp'}")
    return EXIT_OK


def _lengths(text: str) -> list[int]:
    parts = [p for p in (text or "").split(",") if p.strip()]
    if not parts:
        raise UsageError("--lengths needs at least one length")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"--lengths must be comma-separated integers, got {text!r}") from None


def cmd_eval(args) -> int:
    from .harness.train import eval_length_generalization
    lengths = _lengths(args.lengths)
    model, cfg, stored = _load(args.checkpoint)
    rows = eval_length_generalization(model, cfg.task_spec(), lengths, samples=args.samples)
    print(f"{'length':>8} {'frames':>8} {'accuracy':>10}")
    for n, frames, acc in rows:
        print(f"{n:>8d} {frames:>8d} {acc:>10.4f}")
    if stored is not None:
        print(f"stored final accuracy (train_len={cfg.train_len}): {stored:.4f}")
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg = _config(args.config).encoder_config()
    report = flops_estimate(cfg, args.seq_len)
    print(report.render_csv() if args.csv else report.render_text(grouped=args.grouped), end="")
    if not args.csv:
        print()
    return EXIT_OK


def read_features(path, feat_dim: int) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except OSError as exc:
        raise UsageError(f"cannot read input {path}: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"input {path} is not a numeric CSV: {exc}") from None
    if arr.shape[1] != feat_dim:
        raise UsageError(f"input has {arr.shape[1]} columns, model expects feat_dim={feat_dim}")
    return arr


def format_matrix(m: np.ndarray) -> str:
    return "".join(",".join(f"{v:.17g}" for v in row) + "\n" for row in m)


def cmd_attn_dump(args) -> int:
    model, _, _ = _load(args.checkpoint)
    layers = len(model.encoder.layers)
    if not -layers <= args.layer < layers:
        raise UsageError(f"--layer {args.layer} out of range for {layers} layers")
    feats = read_features(args.input, model.config.feat_dim).astype(model.config.np_dtype)
    _, tape = encoder_forward(model.encoder, feats)
    weights = attention_maps(tape)[args.layer]
    atomic_write(args.out, format_matrix(weights))
    print(f"wrote {weights.shape[0]}x{weights.shape[1]} attention matrix of layer "
          f"{args.layer % layers} to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srupp", description="SRU / SRU++ encoder toolkit")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="fixed summation order")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--target", choices=(*gc.KINDS, "all"), default="all")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train", help="train on the configured synthetic task")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="frame accuracy at several sequence lengths")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--lengths", required=True, help="comma-separated, e.g. 40,80,120")
    s.add_argument("--samples", type=int, default=64)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("profile", help="analytic parameter and FLOP report")
    s.add_argument("--config", required=True)
    s.add_argument("--seq-len", type=int, required=True)
    s.add_argument("--csv", action="store_true")
    s.add_argument("--grouped", action="store_true", help="one row per block")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("attn-dump", help="write one layer's attention weights as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="CSV of feature frames (T rows x feat_dim)")
    s.add_argument("--layer", type=int, default=-1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attn_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with tc.deterministic(args.deterministic):
            return args.func(args)
    except (UsageError, ConfigError, DimensionError, FormatError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except tc.NumericError as exc:
        _err(str(exc))
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
