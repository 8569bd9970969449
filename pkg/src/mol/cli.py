"""Command-line entry point: training, benchmarks, equivalence checks and accounting."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _load_model(config: str, ckpt: str | None):
    from .config import ModelConfig
    from .model import build_model, load_checkpoint
    from .train import split_config_text

    model_text, _ = split_config_text(Path(config).read_text(encoding="utf-8"))
    model = build_model(ModelConfig.from_text(model_text))
    if ckpt:
        load_checkpoint(ckpt, model)
    return model


def cmd_train(args) -> int:
    from .config import ModelConfig
    from .train import TrainConfig, split_config_text, train

    model_text, overrides = split_config_text(Path(args.config).read_text(encoding="utf-8"))
    tcfg = TrainConfig().with_overrides(overrides)
    if args.steps is not None:
        tcfg = tcfg.with_overrides({"steps": str(args.steps)})
    corpus = Path(args.corpus).read_bytes()
    res = train(ModelConfig.from_text(model_text), tcfg, corpus, out_dir=args.out)
    last = res.rows[-1]
    print(f"steps={tcfg.steps} final_ce={last['ce']:.4f} aux={last['aux']:.4g} skipped={res.skipped} out={args.out}")
    return 0


def cmd_make_corpus(args) -> int:
    from .train import synthetic_corpus

    Path(args.out).write_bytes(synthetic_corpus(args.bytes, args.seed))
    return 0


def cmd_bench_prefill(args) -> int:
    from .runtime import BenchRow, prefill

    model = _load_model(args.config, args.ckpt)
    rng = np.random.default_rng(args.seed)
    print(BenchRow.HEADER)
    for T in _ints(args.seqlens):
        _, row = prefill(model, rng.integers(0, model.cfg.vocab, T), args.mode, repeats=args.repeats)
        print(row.csv())
    return 0


def cmd_bench_decode(args) -> int:
    from .runtime import config_id, decode, mac_count

    model = _load_model(args.config, args.ckpt)
    grid = sorted(_ints(args.context_grid))
    prompt = np.random.default_rng(args.seed).integers(0, model.cfg.vocab, grid[0])
    res = decode(model, prompt, grid[-1] - grid[0] + 1)
    print("config,context,latency_ms,attention_macs,step_macs")
    for ctx, lat, macs in zip(res.contexts, res.latencies, res.macs):
        if ctx in grid:
            print(f"{config_id(model.cfg)},{ctx},{1000 * lat:.4f},{macs.total},{mac_count(model.cfg, ctx, 'decode').total}")
    return 0


def cmd_check_equiv(args) -> int:
    from .runtime import equivalence_report

    checks = equivalence_report(_ints(args.seqlens), _ints(args.seeds), args.tol32, args.tol64)
    print("check,config,T,max_diff,pass")
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


def cmd_crossover(args) -> int:
    from .runtime import crossover_sweep

    rows, cross = crossover_sweep(args.d, _ints(args.seqlens), repeats=args.repeats)
    print("T,softmax_s,delta_s")
    for T, s, dl in rows:
        print(f"{T},{s:.6f},{dl:.6f}")
    print(f"crossover,{cross if cross is not None else 'none'}")
    return 0


def cmd_count_params(args) -> int:
    from .config import ModelConfig
    from .model import count_params
    from .train import split_config_text

    model_text, _ = split_config_text(Path(args.config).read_text(encoding="utf-8"))
    for line in count_params(ModelConfig.from_text(model_text)).lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mol", description="Mixture-of-Layers reference implementation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a byte corpus; writes log.csv and final.ckpt")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("make-corpus", help="write a seeded synthetic text corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--bytes", type=int, default=1 << 20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_corpus)

    p = sub.add_parser("bench-prefill", help="timed full-sequence forwards")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--mode", choices=["dense", "sparse", "batched"], default="sparse")
    p.add_argument("--seqlens", default="256,1024")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench_prefill)

    p = sub.add_parser("bench-decode", help="greedy decode latency and MACs per context length")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--context-grid", default="16,32,64,128")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench_decode)

    p = sub.add_parser("check-equiv", help="cross-mode, oracle and decode equivalence report")
    p.add_argument("--tol32", type=float, default=1e-5)
    p.add_argument("--tol64", type=float, default=1e-10)
    p.add_argument("--seqlens", default="16,64,255")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(fn=cmd_check_equiv)

    p = sub.add_parser("crossover", help="softmax vs delta mixer forward+backward time sweep")
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--seqlens", default="512,1024,2048,4096,8192")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(fn=cmd_crossover)

    p = sub.add_parser("count-params", help="analytic parameter report")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_count_params)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
