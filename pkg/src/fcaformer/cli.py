"""Command line entry point: ``fcaformer <command> ...``.

Exit codes: 0 success, 1 usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

import numpy as np

from .core import NonFiniteError
from .cost import block_cost, cross_token_count, fca_overhead, model_cost
from .models import ModelConfig, VARIANTS, build_model, count_learnable_params, load_model

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="model config JSON file")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="named variant instead of a config file")
    p.add_argument("--tiny", action="store_true", help="desk-scale hybrid used by the harness")
    p.add_argument("--input-size", type=int, help="override the input resolution")


def _config(args) -> ModelConfig:
    chosen = sum(bool(v) for v in (args.config, args.variant, args.tiny))
    if chosen != 1:
        raise UsageError("give exactly one of: a config file, --variant, --tiny")
    if args.config:
        cfg = ModelConfig.from_json(args.config)
    elif args.variant:
        cfg = ModelConfig.from_variant(args.variant)
    else:
        from .harness.ablation import tiny_config
        cfg = tiny_config()
    if args.input_size:
        cfg = cfg.replace(input_size=args.input_size)
    return cfg


def cmd_describe(args) -> int:
    cfg = _config(args)
    grids = cfg.stage_grids()
    heads = cfg.stage_heads()
    print(f"FcaFormer {cfg.variant} ({cfg.kind}), input {cfg.input_size}x{cfg.input_size}, "
          f"{cfg.num_classes} classes, cross history {cfg.cross_history}")
    for i, (w, dpt, g, h) in enumerate(zip(cfg.widths, cfg.depths, grids, heads)):
        kind = "fcaformer" if i in cfg.fca_stages() else "convnext"
        line = f"stage {i + 1}: {kind:<9} width {w:>4} depth {dpt:>2} grid {g}x{g}"
        if kind == "fcaformer":
            keys = [g * g + (cross_token_count(g, g, cfg.merge_stride, l, cfg.cross_history) if cfg.use_cross else 0)
                    for l in range(1, dpt + 1)]
            line += f" heads {h:>2} tokens {g * g} key lengths {keys}"
        print(line)
    rep = model_cost(cfg)
    print(f"params {rep.total_params:,}  MACs {rep.total_macs:,}")
    return EXIT_OK


def cmd_count(args) -> int:
    if args.block:
        if args.config or args.variant or args.tiny:
            raise UsageError("--block takes no model config")
        n, d = args.block
        rep = block_cost(n, d, args.cross_tokens, args.ffn_ratio, tme=args.cross_tokens > 0)
        print(rep.to_table(flops=args.flops))
        _write_csv(rep, args)
        return EXIT_OK
    cfg = _config(args)
    rep = model_cost(cfg)
    print(rep.to_table(flops=args.flops))
    if args.enumerate:
        print(f"enumerated params {count_learnable_params(build_model(cfg)):,}")
    print(f"forward-cross-attention overhead {100 * fca_overhead(cfg):.2f}% of FcaFormer-stage MACs")
    _write_csv(rep, args)
    return EXIT_OK


def _write_csv(rep, args) -> None:
    if not args.csv:
        return
    text = rep.to_csv(flops=args.flops)
    if args.csv == "-":
        sys.stdout.write(text)
    else:
        with open(args.csv, "w") as fh:
            fh.write(text)


def cmd_gradcheck(args) -> int:
    from .harness.checks import block_gradcheck

    cfg = _config(args)
    stage = cfg.fca_stages()[0]
    d, heads = cfg.widths[stage], cfg.stage_heads()[stage]
    dtype = np.float64 if args.f64 else np.float32
    eps = 1e-5 if args.f64 else 1e-2
    threshold = 1e-4 if args.f64 else 5e-2
    worst = 0.0
    for seed in range(args.seeds):
        err = block_gradcheck(d, heads, (4, 4), 2, cfg.options(), seed=seed, dtype=dtype, eps=eps)
        print(f"seed {seed}: max relative error {err:.3e}")
        worst = max(worst, err)
    ok = worst < threshold
    print(f"max relative error {worst:.3e} ({'pass' if ok else 'FAIL'}, threshold {threshold:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_train(args) -> int:
    from .harness.data import SynthTask
    from .harness.train import TrainConfig, train

    cfg = _config(args)
    tcfg = TrainConfig.from_json(args.train_config) if args.train_config else TrainConfig()
    task = SynthTask(seed=args.task_seed, num_classes=cfg.num_classes, image_size=cfg.input_size, dtype=cfg.dtype)
    hist = train(build_model(cfg), task, tcfg, out_dir=args.out)
    sys.stdout.write(hist.to_csv())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness.ablation import ablation_ladder, convergence_report, ladder_csv, ladder_table, lsf_effect
    from .harness.data import SynthTask
    from .harness.train import TrainConfig

    cfg = _config(args)
    tcfg = TrainConfig.from_json(args.train_config) if args.train_config else TrainConfig()
    task = SynthTask(num_classes=cfg.num_classes, image_size=cfg.input_size, dtype=cfg.dtype)
    rows = ablation_ladder(cfg, task, tcfg)
    print(ladder_table(rows))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(ladder_csv(rows))
    if args.lsf:
        res = lsf_effect(cfg, task, tcfg)
        for r in res:
            print(f"seed {r.seed}: cross mass with LSF {r.mass_with_lsf:.4f} without {r.mass_without_lsf:.4f}")
        print(f"LSF raises cross-token attention in {sum(r.lsf_wins for r in res)}/{len(res)} seeds")
    if args.convergence:
        rep = convergence_report(cfg, task, tcfg)
        print(f"epochs to 95% of final accuracy: with Fca {rep.epochs_with_fca} (median {rep.median_with}), "
              f"without {rep.epochs_without_fca} (median {rep.median_without})")
    return EXIT_OK


def cmd_attn_dump(args) -> int:
    from .harness.inspect import attn_dump_rows, dump_to_csv

    model = load_model(args.checkpoint)
    image = np.load(args.image)
    if image.ndim == 4:
        image = image[0]
    if image.shape != (3, model.cfg.input_size, model.cfg.input_size):
        raise UsageError(f"image shape {image.shape} does not match model input")
    text = dump_to_csv(attn_dump_rows(model, image))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fcaformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("describe", help="print architecture and shapes")
    _add_config_args(p)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("count", help="analytic parameter / MAC report")
    _add_config_args(p)
    p.add_argument("--flops", action="store_true", help="report FLOPs (2 x MACs)")
    p.add_argument("--csv", metavar="PATH", help="also write CSV ('-' for stdout)")
    p.add_argument("--enumerate", action="store_true", help="build the model and enumerate parameters too")
    p.add_argument("--block", nargs=2, type=int, metavar=("N", "D"), help="cost of a single block instead of a model")
    p.add_argument("--cross-tokens", type=int, default=0, metavar="M", help="cross tokens seen by --block (enables TME)")
    p.add_argument("--ffn-ratio", type=int, default=4, help="FFN expansion for --block")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("gradcheck", help="finite-difference check of a full FcaFormer block")
    _add_config_args(p)
    p.add_argument("--f64", action="store_true", help="run in float64 (threshold 1e-4)")
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on the synthetic task")
    _add_config_args(p)
    p.add_argument("train_config", nargs="?", help="train config JSON file")
    p.add_argument("--out", help="directory for checkpoint and history.csv")
    p.add_argument("--task-seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the ablation ladder")
    _add_config_args(p)
    p.add_argument("--train-config")
    p.add_argument("--csv", metavar="PATH")
    p.add_argument("--lsf", action="store_true", help="also compare cross-attention mass with/without LSF")
    p.add_argument("--convergence", action="store_true", help="also report epochs-to-95%% accuracy")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attn-dump", help="dump attention weights as CSV")
    p.add_argument("checkpoint")
    p.add_argument("image", help=".npy image [3,H,W] or [B,3,H,W] (first used)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_attn_dump)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"fcaformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"fcaformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, ArithmeticError) as exc:
        print(f"fcaformer: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as exc:
        from .harness.train import TrainingDiverged

        if isinstance(exc, TrainingDiverged):
            print(f"fcaformer: training diverged: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
