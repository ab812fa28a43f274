"""Command line entry point: ``cmiforecast <subcommand> --config run.toml``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training diverged.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .errors import CmiError
from .features import save_ohlcv, synth_generate

log = logging.getLogger("cmiforecast")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _on_off(text: str) -> bool:
    value = text.lower()
    if value in ("on", "true", "1", "yes"):
        return True
    if value in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmiforecast", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=["cmi", "direct"])
        p.add_argument("--context-mode", choices=["attention", "max", "avg", "concat_dense", "last"])
        p.add_argument("--identity", type=_on_off, metavar="on|off")
        p.add_argument("--epochs", type=int)
        p.add_argument("--out", help="output path (file or directory, per command)")
        return p

    common(sub.add_parser("synth", help="write seeded synthetic <TICKER>.csv files"))
    common(sub.add_parser("featurize", help="CSV directory -> featurised dataset file"))
    common(sub.add_parser("train", help="train an encoder and write a checkpoint"))
    ev = common(sub.add_parser("evaluate", help="fit the downstream head and report metrics"))
    ev.add_argument("--checkpoint", required=True)
    ab = common(sub.add_parser("ablate", help="train and evaluate a grid of variants"))
    ab.add_argument("--variants", nargs="+", metavar="MODE/CONTEXT/ID",
                    help="e.g. cmi/attention/id cmi/max/id direct/attention/no-id")
    ab.add_argument("--seeds", type=int, nargs="+")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.replace(seed=args.seed, mode=args.mode, context_mode=args.context_mode,
                       use_identity=args.identity, epochs=args.epochs).validate()


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = synth_generate(cfg.seed, cfg.synth.n_stocks, cfg.synth.n_days, cfg.synth.regime(), cfg.synth.start)
    for frame in frames:
        save_ohlcv(frame, out / f"{frame.ticker}.csv")
    print(f"wrote {len(frames)} files to {out}")
    return 0


def cmd_featurize(args, cfg: RunConfig) -> int:
    from .pipeline import featurize, load_frames, save_dataset

    data = featurize(load_frames(cfg.data_dir), cfg)
    out = Path(args.out or cfg.dataset)
    save_dataset(data, out, cfg)
    report = out.with_suffix(".ingest.txt")
    lines = [f"{k} = {v}" for k, v in data.report.items() if k != "per_stock"]
    for ticker, per in data.report["per_stock"].items():
        lines.append(f"[{ticker}] " + " ".join(f"{k}={v}" for k, v in per.items()))
    report.write_text("\n".join(lines) + "\n")
    print(f"train={len(data.train)} test={len(data.test)} -> {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .pipeline import load_dataset, run_train
    from .plotting import plot_losses

    data = load_dataset(cfg.dataset)
    out = Path(args.out or "checkpoint.cmi")
    result = run_train(cfg, data, checkpoint_path=out)
    log_path = out.with_suffix(".log.tsv")
    with open(log_path, "w") as fh:
        fh.write("epoch\tbatch\tloss\n")
        for epoch, batch, loss in result.losses:
            fh.write(f"{epoch}\t{batch}\t{loss!r}\n")
    plot_losses(result.losses, out.with_suffix(".loss.png"), title=f"{cfg.mode} training loss")
    final = result.epoch_losses()[-1] if result.losses else float("nan")
    print(f"steps={result.step} final_epoch_loss={final:.5f} -> {out}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .checkpoint import load_checkpoint
    from .pipeline import load_dataset, run_evaluate
    from .report import format_kv, write_report

    data = load_dataset(cfg.dataset)
    report = run_evaluate(load_checkpoint(args.checkpoint), data, cfg)
    out = Path(args.out or Path(args.checkpoint).with_suffix(".eval"))
    write_report([report], out)
    sys.stdout.write(format_kv(report))
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .pipeline import default_variants, load_dataset, parse_variant, run_ablation
    from .plotting import plot_ablation
    from .report import format_table, summarize, write_report

    data = load_dataset(cfg.dataset)
    variants = [parse_variant(v) for v in args.variants] if args.variants else default_variants()
    rows = run_ablation(cfg, data, variants, args.seeds)
    out = Path(args.out or "ablation")
    out.mkdir(parents=True, exist_ok=True)
    cols = ["variant", "seed", "accuracy", "mcc", "train_accuracy", "gap"]
    write_report(rows, out / "ablation", columns=cols)
    summary = summarize(rows)
    write_report(summary, out / "summary", columns=list(summary[0]))
    plot_ablation(rows, out / "ablation_accuracy.png", "accuracy")
    plot_ablation(rows, out / "ablation_gap.png", "gap")
    sys.stdout.write(format_table(rows, cols))
    return 0


COMMANDS = {"synth": cmd_synth, "featurize": cmd_featurize, "train": cmd_train,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except CmiError as exc:
        code = getattr(exc, "exit_code", 1)
        detail = getattr(exc, "code", None)
        print(f"error ({type(exc).__name__}{'/' + detail if detail else ''}): {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
