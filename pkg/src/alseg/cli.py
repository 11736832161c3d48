"""Command-line surface: gen-data, pretrain, run, report, selftest.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage/config
errors. Every command validates its inputs, writes only under --out, and
prints a one-line machine-parsable error on failure. BLAS pools are
pinned to one thread so results are reproducible; --threads controls the
run command's own seed-level parallelism, which is result-invariant.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--config", default=None, help="JSON config file (defaults apply)")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastively pretrain the encoder-decoder")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run the active-learning experiment")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--init", default=None, help="pretrained checkpoint (for init_mode=contrastive)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="rebase run seeds to seed, seed+1, ... keeping their count")
    p.add_argument("--threads", type=int, default=None, help="parallel seed workers")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="merge run directories into comparison tables")
    p.add_argument("--runs", nargs="+", required=True, help="run output directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="gradient checks, greedy oracle, format round-trips")
    p.set_defaults(func=cmd_selftest)
    return parser


def _blas_single_thread():
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1, user_api="blas")
    except Exception:
        return contextlib.nullcontext()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    from .config import ConfigError

    try:
        with _blas_single_thread():
            return args.func(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def cmd_gen_data(args) -> int:
    from .config import echo_config, load_config, make_scene_spec
    from .data import generate_dataset, save_dataset

    cfg = load_config(args.config, args.seed)
    spec = make_scene_spec(cfg)
    ds = generate_dataset(
        spec, cfg["data"]["n_images"], cfg["seed"], cfg["data"]["train_fraction"]
    )
    save_dataset(ds, args.out)
    echo_config(cfg, args.out)
    print(
        f"gen-data: wrote {ds.n_images} images ({len(ds.train_indices)} train / "
        f"{len(ds.test_indices)} test) to {args.out} [seed {cfg['seed']}]"
    )
    return 0


def cmd_pretrain(args) -> int:
    from .config import echo_config, load_config, make_net_config, make_pretrain_config
    from .contrastive import pretrain
    from .data import load_dataset
    from .net import KIND_PRETRAINED, save_params

    cfg = load_config(args.config, args.seed)
    ds = load_dataset(args.data)
    net_config = make_net_config(cfg, ds.n_classes)
    pre_cfg = make_pretrain_config(cfg)
    params, history = pretrain(ds, net_config, pre_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(out, params, net_config, kind=KIND_PRETRAINED)
    Path(str(out) + ".config.json").write_text(json.dumps(cfg, indent=2) + "\n")
    first = history[0] if history else float("nan")
    last = history[-1] if history else float("nan")
    print(
        f"pretrain: {pre_cfg.epochs} epochs, loss {first:.4f} -> {last:.4f}, "
        f"checkpoint {out} [seed {cfg['seed']}]"
    )
    return 0


def cmd_run(args) -> int:
    from .config import (
        ConfigError,
        echo_config,
        load_config,
        make_acquisition_config,
        make_experiment_config,
        make_net_config,
        make_train_config,
    )
    from .data import load_dataset
    from .experiment import run_experiment
    from .net import KIND_PRETRAINED, load_params

    cfg = load_config(args.config)
    if args.seed is not None:
        n = len(cfg["experiment"]["seeds"])
        cfg["experiment"]["seeds"] = [args.seed + i for i in range(n)]
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["experiment"]["threads"] = args.threads

    ds = load_dataset(args.data)
    exp_config = make_experiment_config(cfg)
    acq_config = make_acquisition_config(cfg)
    net_config = make_net_config(cfg, ds.n_classes)
    train_config = make_train_config(cfg)

    pretrained = None
    if exp_config.init_mode == "contrastive":
        if args.init is None:
            raise ConfigError("init_mode=contrastive requires --init <checkpoint>")
        pretrained, _, kind = load_params(args.init)
        if kind != KIND_PRETRAINED:
            raise ConfigError(f"{args.init} is not a pretrained-encoder-decoder checkpoint")

    echo_config(cfg, args.out)
    out = run_experiment(
        ds, net_config, train_config, acq_config, exp_config, args.out, pretrained
    )
    print(
        f"run: {len(out['variants'])} variant(s) x {len(exp_config.seeds)} seed(s) x "
        f"{len(exp_config.budgets)} cycles -> {args.out}"
    )
    return 0


def cmd_report(args) -> int:
    import numpy as np

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = None
    rows: list[str] = []
    for run_dir in args.runs:
        curve = Path(run_dir) / "curve.csv"
        if not curve.exists():
            raise FileNotFoundError(f"{curve} does not exist")
        lines = curve.read_text().strip().split("\n")
        if header is None:
            header = lines[0]
        elif header != lines[0]:
            raise ValueError(f"{curve} has mismatched columns")
        rows.extend(lines[1:])
    (out_dir / "merged.csv").write_text(header + "\n" + "\n".join(rows) + "\n")

    groups: dict[tuple, list[float]] = {}
    for row in rows:
        parts = row.split(",")
        strategy, init_mode, _, cycle, labels, miou_val = parts[:6]
        groups.setdefault((strategy, init_mode, int(cycle), int(labels)), []).append(
            float(miou_val)
        )
    curve_lines = ["strategy,init_mode,cycle,labels,mean_miou,std_miou,n_seeds"]
    for key in sorted(groups):
        vals = np.array(groups[key], dtype=np.float64)
        strategy, init_mode, cycle, labels = key
        curve_lines.append(
            f"{strategy},{init_mode},{cycle},{labels},"
            f"{vals.mean():.6f},{vals.std():.6f},{len(vals)}"
        )
    (out_dir / "curves.csv").write_text("\n".join(curve_lines) + "\n")
    print(f"report: merged {len(args.runs)} run(s), {len(rows)} rows -> {out_dir}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return run_all(verbose=True)


if __name__ == "__main__":
    sys.exit(main())
