"""``hct`` command line: gen-data, train, eval, gradcheck, paramcount.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import STAGES, RunConfig
from .errors import ConfigError, HCTError
from .synthdata import DEFAULT_SIZES, generate_dataset, read_dataset, sample_taxonomy, write_dataset


def _sizes(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected four comma-separated integers, got {text!r}") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"expected four comma-separated integers, got {text!r}")
    return vals


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(getattr(args, "set", None) or [])
    for flag, key in (("seed", "seed"), ("stage", "stage"), ("data", "data"), ("out", "out_dir"),
                      ("epochs", "schedule.epochs"), ("dtype", "dtype")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={json.dumps(val)}")
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_gen_data(args) -> int:
    taxonomy = sample_taxonomy(args.taxonomy_seed if args.taxonomy_seed is not None else args.seed, args.sizes)
    n_train, n_test = args.n_train, args.n_test
    if args.clips is not None:
        n_train = round(0.8 * args.clips)
        n_test = args.clips - n_train
    ds = generate_dataset(taxonomy, args.seed, n_train, n_test, args.noise, args.clips_per_video,
                          args.label_flip, tuple(args.frame_size), 3, args.clip_len)
    write_dataset(args.out, ds)
    print(json.dumps({"path": str(args.out), "train": len(ds.split("train")), "test": len(ds.split("test")),
                      "sizes": list(taxonomy.sizes)}))
    return 0


def cmd_train(args) -> int:
    from .train import evaluate, load_checkpoint, train

    cfg = _load_config(args)
    if not cfg.data:
        raise ConfigError("no dataset: set `data` in the config or pass --data")
    ds = read_dataset(cfg.data)
    resume = load_checkpoint(args.resume, cfg, args.force) if args.resume else None
    result = train(cfg, ds, resume=resume, on_log=lambda r: print(json.dumps(r, sort_keys=True), flush=True))
    print(json.dumps({"checkpoint": str(result.checkpoint), "config_hash": cfg.hash()}))
    if args.eval and ds.split("test"):
        report = evaluate(result.model, ds.split("test"), cfg)
        print(report.table())
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint, load_checkpoint

    expected = RunConfig.load(args.config) if args.config else None
    ckpt = load_checkpoint(args.ckpt, expected, args.force)
    report = evaluate_checkpoint(ckpt, read_dataset(args.data), args.split)
    if args.json:
        Path(args.json).write_text(report.dumps() + "\n")
    print(report.table())
    return 0


def cmd_gradcheck(args) -> int:
    from .train import gradcheck_cmd

    cfg = RunConfig.load(args.config) if args.config else None
    r = gradcheck_cmd(cfg, max_coords=args.coords)
    print(json.dumps({k: v for k, v in r.items() if k != "per_tensor"}))
    return 0 if r["passed"] else 4


def cmd_paramcount(args) -> int:
    from .train import format_paramcount, paramcount_cmd

    rows = paramcount_cmd(_load_config(args))
    print(json.dumps(rows) if args.json else format_paramcount(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hct", description="Hierarchical context transformer, desk scale.")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--taxonomy-seed", type=int, default=None, help="defaults to --seed")
    g.add_argument("--sizes", type=_sizes, default=DEFAULT_SIZES, help="phases,steps,actions,instruments")
    g.add_argument("--clips", type=int, help="total clips, split 80/20 into train/test")
    g.add_argument("--n-train", type=int, default=512)
    g.add_argument("--n-test", type=int, default=128)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--label-flip", type=float, default=0.0)
    g.add_argument("--clips-per-video", type=int, default=16)
    g.add_argument("--clip-len", type=int, default=16)
    g.add_argument("--frame-size", type=int, nargs=2, default=[32, 32], metavar=("H", "W"))
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--stage", choices=STAGES)
    t.add_argument("--seed", type=int)
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--force", action="store_true", help="accept a checkpoint whose config hash differs")
    t.add_argument("--eval", action="store_true", help="evaluate on the test split afterwards")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--config", help="require the checkpoint to match this config")
    e.add_argument("--force", action="store_true")
    e.add_argument("--json", help="also write the report as JSON")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of a tiny full model")
    c.add_argument("--config")
    c.add_argument("--coords", type=int, default=6, help="sampled coordinates per parameter tensor")
    c.set_defaults(fn=cmd_gradcheck)

    q = sub.add_parser("paramcount", help="total/tunable parameter table")
    q.add_argument("--config")
    q.add_argument("--set", action="append", metavar="KEY=VALUE")
    q.add_argument("--json", action="store_true")
    q.set_defaults(fn=cmd_paramcount)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except HCTError as exc:
        print(f"hct {args.cmd}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
